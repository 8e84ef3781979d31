//! End-to-end commands: convert, corrupt, evaluate, attribute.
//!
//! Output layout under the configured root:
//!
//! ```text
//! images/<subject>/<subject>_<epoch>.png
//! manifests/seed_<seed>.jsonl
//! provenance.json
//! corrupted/plan.tsv
//! corrupted/images/...   corrupted/manifests/...   corrupted/provenance.json
//! ```
//!
//! Files are only rewritten when their content changes.

use crate::attribution::{self, AttributeOptions, AttributionError, HeatmapOptions};
use crate::config::{ConfigError, PipelineConfig};
use crate::corrupt::{self, CorruptError, CorruptionPlan};
use crate::dataset::{self, DatasetError, DatasetManifest, Hypnogram, LabeledImage, Split};
use crate::edf::{self, EdfError};
use crate::epoch::{self, EpochError};
use crate::gate::{Classifier, ClassifierOutput, GateError};
use crate::metrics::{self, ConfusionMatrix, MetricSet, MetricsError};
use crate::raster::{GrayImage, RasterError};
use crate::record::{Rational, SignalRecord};
use crate::render::{self, RenderError};
use crate::resample::{self, ResampleError};
use crate::stage::SleepStage;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const PROVENANCE_KEY: &str = "psgforge-provenance";
pub const SOURCE_KEY: &str = "psgforge-source";

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Edf {
        path: String,
        #[source]
        source: EdfError,
    },
    #[error("subject `{0}` has no hypnogram")]
    MissingHypnogram(String),
    #[error("subject `{0}` appears more than once in the inputs")]
    DuplicateSubject(String),
    #[error("subject `{subject}`: {source}")]
    Resample {
        subject: String,
        #[source]
        source: ResampleError,
    },
    #[error("subject `{subject}`: {source}")]
    Epoch {
        subject: String,
        #[source]
        source: EpochError,
    },
    #[error("subject `{subject}` epoch {epoch}: {source}")]
    Render {
        subject: String,
        epoch: usize,
        #[source]
        source: RenderError,
    },
    #[error("subject `{subject}`: {source}")]
    Labels {
        subject: String,
        #[source]
        source: DatasetError,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("subject `{subject}`: {source}")]
    Corrupt {
        subject: String,
        #[source]
        source: CorruptError,
    },
    #[error("corruption plan: {0}")]
    Plan(CorruptError),
    #[error("{path}: {source}")]
    Raster {
        path: String,
        #[source]
        source: RasterError,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Classify {
        path: String,
        #[source]
        source: GateError,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Attribution {
        path: String,
        #[source]
        source: AttributionError,
    },
    #[error("cannot build worker pool: {0}")]
    Pool(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> WorkflowError + '_ {
    move |source| WorkflowError::Io { path: path.display().to_string(), source }
}

/// Writes `bytes` unless the file already holds exactly them. Returns whether
/// anything was written.
pub fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<bool, WorkflowError> {
    if let Ok(existing) = std::fs::read(path) {
        if existing == bytes {
            return Ok(false);
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(path, bytes).map_err(io_err(path))?;
    Ok(true)
}

/// Runs `f` on a dedicated pool of `workers` threads (0 = rayon default).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T, WorkflowError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| WorkflowError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}

/// One recording and its hypnogram.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubjectInput {
    pub subject: String,
    pub edf: PathBuf,
    pub hypnogram: PathBuf,
}

fn stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

/// Pairs recordings with hypnograms by file stem. Sorted by subject.
pub fn pair_inputs(edfs: &[PathBuf], hypnograms: &[PathBuf]) -> Result<Vec<SubjectInput>, WorkflowError> {
    let mut hyp: BTreeMap<String, PathBuf> = BTreeMap::new();
    for h in hypnograms {
        if hyp.insert(stem(h), h.clone()).is_some() {
            return Err(WorkflowError::DuplicateSubject(stem(h)));
        }
    }
    let mut out = Vec::with_capacity(edfs.len());
    let mut seen = BTreeSet::new();
    for e in edfs {
        let subject = stem(e);
        if !seen.insert(subject.clone()) {
            return Err(WorkflowError::DuplicateSubject(subject));
        }
        let hypnogram = hyp.remove(&subject).ok_or_else(|| WorkflowError::MissingHypnogram(subject.clone()))?;
        out.push(SubjectInput { subject, edf: e.clone(), hypnogram });
    }
    for unused in hyp.keys() {
        tracing::warn!(subject = %unused, "hypnogram without a recording is ignored");
    }
    out.sort_by(|a, b| a.subject.cmp(&b.subject));
    Ok(out)
}

/// Lists `<dir>/*.edf` and the matching `<dir>/<stem>.txt|.csv` hypnograms.
pub fn discover_inputs(dir: &Path) -> Result<Vec<SubjectInput>, WorkflowError> {
    let mut edfs = Vec::new();
    let mut hyps = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("edf") => edfs.push(path),
            Some("txt") | Some("csv") => hyps.push(path),
            _ => {}
        }
    }
    edfs.sort();
    hyps.sort();
    pair_inputs(&edfs, &hyps)
}

fn load_selected(input: &SubjectInput, cfg: &PipelineConfig) -> Result<SignalRecord, WorkflowError> {
    let edf_err = |source| WorkflowError::Edf { path: input.edf.display().to_string(), source };
    let (_, _, mut record) = edf::read_edf(&input.edf).map_err(edf_err)?;
    record.subject_id = input.subject.clone();
    edf::select_channels(&record, &cfg.channels.wanted, &cfg.channels.aliases).map_err(edf_err)
}

/// Reads, selects and resamples one recording.
pub fn prepare_record(input: &SubjectInput, cfg: &PipelineConfig) -> Result<SignalRecord, WorkflowError> {
    let record = load_selected(input, cfg)?;
    resample::unify_record(&record, &cfg.resampler()?)
        .map_err(|source| WorkflowError::Resample { subject: input.subject.clone(), source })
}

/// Duration the record will have after resampling, without resampling it.
pub fn prepared_duration(input: &SubjectInput, cfg: &PipelineConfig) -> Result<f64, WorkflowError> {
    let record = load_selected(input, cfg)?;
    let target = cfg.target_rate()?;
    let common = record
        .channels
        .iter()
        .map(|c| resample::resampled_len(c.samples.len(), c.rate, target))
        .min()
        .unwrap_or(0);
    let d = Rational::from_integer(common as u64) / target.0;
    Ok(*d.numer() as f64 / *d.denom() as f64)
}

/// Per-subject bookkeeping recorded in `provenance.json`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SubjectSummary {
    pub subject: String,
    pub epochs: usize,
    pub hypnogram_labels: usize,
    pub images: usize,
    pub excluded: usize,
    /// Hypnogram length minus epoch count; nonzero values were truncated.
    pub label_mismatch: i64,
}

struct SubjectOutput {
    summary: SubjectSummary,
    images: Vec<LabeledImage>,
    written: usize,
}

pub fn image_rel_path(subject: &str, epoch_index: usize) -> String {
    format!("images/{subject}/{subject}_{epoch_index}.png")
}

fn render_subject(
    input: &SubjectInput,
    cfg: &PipelineConfig,
    plan: Option<&CorruptionPlan>,
    root: &Path,
    provenance: &str,
) -> Result<SubjectOutput, WorkflowError> {
    let subject = input.subject.as_str();
    let hyp = Hypnogram::read(&input.hypnogram).map_err(|source| WorkflowError::Labels { subject: subject.into(), source })?;
    let labels = dataset::harmonize_labels(&hyp, cfg.label_standard)
        .map_err(|source| WorkflowError::Labels { subject: subject.into(), source })?;

    let mut record = prepare_record(input, cfg)?;
    if let Some(plan) = plan {
        record = corrupt::apply_subject(&record, plan).map_err(|source| WorkflowError::Corrupt { subject: subject.into(), source })?;
    }
    let epochs = epoch::epoch_signal(&record, cfg.t_epoch_s).map_err(|source| WorkflowError::Epoch { subject: subject.into(), source })?;
    let usable = epochs.len().min(labels.len());
    let mismatch = labels.len() as i64 - epochs.len() as i64;
    if mismatch != 0 {
        tracing::warn!(subject, epochs = epochs.len(), labels = labels.len(), "label count differs from epoch count; truncating");
    }

    let rendered: Vec<(LabeledImage, bool)> = (0..usable)
        .into_par_iter()
        .filter_map(|i| labels[i].map(|label| (i, label)))
        .map(|(i, label)| {
            let epoch_index = i + 1;
            let scaled = epoch::scale_epoch(&epochs[i]).map_err(|source| WorkflowError::Epoch { subject: subject.into(), source })?;
            let image = render::epoch_to_image(&scaled, &cfg.render)
                .map_err(|source| WorkflowError::Render { subject: subject.into(), epoch: epoch_index, source })?;
            let rel = image_rel_path(subject, epoch_index);
            let path = root.join(&rel);
            let source_tag = format!("{subject}:{epoch_index}");
            let bytes = image
                .encode_png(&[(PROVENANCE_KEY, provenance), (SOURCE_KEY, &source_tag)])
                .map_err(|source| WorkflowError::Raster { path: path.display().to_string(), source })?;
            let written = write_if_changed(&path, &bytes)?;
            Ok((LabeledImage { image_path: rel, label, subject_id: subject.to_string(), epoch_index }, written))
        })
        .collect::<Result<_, WorkflowError>>()?;

    let written = rendered.iter().filter(|(_, w)| *w).count();
    let images: Vec<LabeledImage> = rendered.into_iter().map(|(img, _)| img).collect();
    let summary = SubjectSummary {
        subject: subject.to_string(),
        epochs: epochs.len(),
        hypnogram_labels: labels.len(),
        images: images.len(),
        excluded: usable - images.len(),
        label_mismatch: mismatch,
    };
    tracing::info!(subject, epochs = summary.epochs, images = summary.images, "subject converted");
    Ok(SubjectOutput { summary, images, written })
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvertReport {
    pub root: PathBuf,
    pub provenance: String,
    pub subjects: Vec<SubjectSummary>,
    pub images: usize,
    /// Files whose bytes changed on disk (images, manifests, provenance).
    pub files_written: usize,
    pub manifests: Vec<PathBuf>,
}

#[derive(Serialize)]
struct ProvenanceFile<'a> {
    provenance: &'a str,
    tool: &'static str,
    version: &'static str,
    config: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    corruption_plan: Option<&'a str>,
    subjects: &'a [SubjectSummary],
    images: usize,
}

fn convert_into(
    root: &Path,
    cfg: &PipelineConfig,
    inputs: &[SubjectInput],
    plan: Option<(&CorruptionPlan, &str)>,
) -> Result<ConvertReport, WorkflowError> {
    cfg.validate()?;
    let provenance = cfg.provenance_hash();
    let outputs: Vec<SubjectOutput> = inputs
        .par_iter()
        .map(|input| render_subject(input, cfg, plan.map(|p| p.0), root, &provenance))
        .collect::<Result<_, _>>()?;

    let mut files_written: usize = outputs.iter().map(|o| o.written).sum();
    let images: Vec<LabeledImage> = outputs.iter().flat_map(|o| o.images.iter().cloned()).collect();
    let subjects: Vec<SubjectSummary> = outputs.into_iter().map(|o| o.summary).collect();

    let manifests = dataset::build_manifest(&images, &cfg.seeds, cfg.split_mode, &provenance)?;
    let mut manifest_paths = Vec::new();
    for m in &manifests {
        let path = root.join(format!("manifests/seed_{}.jsonl", m.seed));
        files_written += usize::from(write_if_changed(&path, m.to_jsonl().as_bytes())?);
        manifest_paths.push(path);
    }

    let prov = ProvenanceFile {
        provenance: &provenance,
        tool: "psgforge",
        version: env!("CARGO_PKG_VERSION"),
        config: serde_json::from_str(&cfg.canonical_json()).expect("canonical json parses"),
        corruption_plan: plan.map(|p| p.1),
        subjects: &subjects,
        images: images.len(),
    };
    let mut text = serde_json::to_string_pretty(&prov).expect("provenance serializes");
    text.push('\n');
    files_written += usize::from(write_if_changed(&root.join("provenance.json"), text.as_bytes())?);

    Ok(ConvertReport { root: root.to_path_buf(), provenance, subjects, images: images.len(), files_written, manifests: manifest_paths })
}

/// Full pipeline into `cfg.output_root`.
pub fn cmd_convert(cfg: &PipelineConfig, inputs: &[SubjectInput], workers: usize) -> Result<ConvertReport, WorkflowError> {
    with_workers(workers, || convert_into(&cfg.output_root, cfg, inputs, None))?
}

/// Where a corruption plan comes from.
#[derive(Clone, Debug)]
pub enum PlanSource {
    Seed(u64),
    File(PathBuf),
}

#[derive(Clone, Debug, Serialize)]
pub struct CorruptReport {
    pub plan_path: PathBuf,
    pub augmented_subjects: Vec<String>,
    pub convert: ConvertReport,
}

pub fn corrupted_root(cfg: &PipelineConfig) -> PathBuf {
    cfg.output_root.join("corrupted")
}

/// Draws (or replays) a plan and renders the corrupted dataset under
/// `<root>/corrupted`.
pub fn cmd_corrupt(cfg: &PipelineConfig, inputs: &[SubjectInput], source: &PlanSource, workers: usize) -> Result<CorruptReport, WorkflowError> {
    with_workers(workers, || {
        cfg.validate()?;
        let plan = match source {
            PlanSource::File(path) => {
                let text = std::fs::read_to_string(path).map_err(io_err(path))?;
                CorruptionPlan::from_text(&text).map_err(WorkflowError::Plan)?
            }
            PlanSource::Seed(seed) => {
                let durations: Vec<f64> =
                    inputs.par_iter().map(|i| prepared_duration(i, cfg)).collect::<Result<_, _>>()?;
                let subjects: Vec<String> = inputs.iter().map(|i| i.subject.clone()).collect();
                let mut plan = corrupt::make_plan(&subjects, &durations, *seed, cfg.corruption.k_channels).map_err(WorkflowError::Plan)?;
                if let Some(sigma) = cfg.corruption.noise_sigma {
                    plan.entries.iter_mut().for_each(|e| e.noise_sigma = Some(sigma));
                }
                plan
            }
        };
        let known: BTreeSet<&str> = inputs.iter().map(|i| i.subject.as_str()).collect();
        if let Some(stray) = plan.augmented_subjects().into_iter().find(|s| !known.contains(s)) {
            return Err(WorkflowError::Plan(CorruptError::InvalidRequest(format!("plan names unknown subject `{stray}`"))));
        }
        let root = corrupted_root(cfg);
        let plan_path = root.join("plan.tsv");
        write_if_changed(&plan_path, plan.to_text(Some(&cfg.provenance_hash())).as_bytes())?;
        let convert = convert_into(&root, cfg, inputs, Some((&plan, "plan.tsv")))?;
        let augmented_subjects = plan.augmented_subjects().into_iter().map(String::from).collect();
        Ok(CorruptReport { plan_path, augmented_subjects, convert })
    })?
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub samples: usize,
    pub metrics: MetricSet,
    pub confusion: ConfusionMatrix,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvaluateReport {
    pub backend: String,
    pub split: Split,
    pub provenance: Option<String>,
    pub per_seed: Vec<SeedMetrics>,
    pub mean: MetricSet,
}

/// Loads manifests (`seed_*.jsonl` files or directories containing them).
pub fn load_manifests(paths: &[PathBuf]) -> Result<Vec<DatasetManifest>, WorkflowError> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(io_err(p))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "jsonl"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    files
        .iter()
        .map(|f| {
            let text = std::fs::read_to_string(f).map_err(io_err(f))?;
            let provenance = manifest_provenance(f).unwrap_or_default();
            Ok(DatasetManifest::from_jsonl(&text, provenance)?)
        })
        .collect()
}

/// Provenance hash from the `provenance.json` next to a manifests directory.
fn manifest_provenance(manifest: &Path) -> Option<String> {
    let root = manifest.parent()?.parent()?;
    let text = std::fs::read_to_string(root.join("provenance.json")).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    v.get("provenance")?.as_str().map(String::from)
}

/// Classifies every image of `split` across all manifests (each distinct
/// image once) and reports metrics per seed plus their mean.
pub fn cmd_evaluate(
    manifests: &[DatasetManifest],
    image_root: &Path,
    classifier: &dyn Classifier,
    prompt: &str,
    split: Split,
) -> Result<EvaluateReport, WorkflowError> {
    let wanted: BTreeSet<&str> = manifests.iter().flat_map(|m| m.split(split).map(|r| r.image_path.as_str())).collect();
    if wanted.is_empty() {
        return Err(WorkflowError::Dataset(DatasetError::EmptyDataset));
    }
    let wanted: Vec<&str> = wanted.into_iter().collect();
    let mut predictions: BTreeMap<&str, SleepStage> = BTreeMap::new();
    for chunk in wanted.chunks(64) {
        let images: Vec<GrayImage> = chunk
            .par_iter()
            .map(|rel| {
                let path = image_root.join(rel);
                let bytes = std::fs::read(&path).map_err(io_err(&path))?;
                GrayImage::decode_png(&bytes).map_err(|source| WorkflowError::Raster { path: path.display().to_string(), source })
            })
            .collect::<Result<_, _>>()?;
        for (rel, result) in chunk.iter().zip(classifier.classify_batch(&images, prompt)) {
            let out: ClassifierOutput = result.map_err(|source| WorkflowError::Classify { path: (*rel).to_string(), source })?;
            predictions.insert(rel, out.label);
        }
    }

    let mut per_seed = Vec::new();
    for m in manifests {
        let (truth, pred): (Vec<SleepStage>, Vec<SleepStage>) =
            m.split(split).map(|r| (r.label, predictions[r.image_path.as_str()])).unzip();
        if truth.is_empty() {
            return Err(WorkflowError::Dataset(DatasetError::EmptyDataset));
        }
        let confusion = metrics::confusion(&truth, &pred)?;
        let metrics = MetricSet::from_confusion(&confusion)?;
        per_seed.push(SeedMetrics { seed: m.seed, samples: truth.len(), metrics, confusion });
    }
    let sets: Vec<MetricSet> = per_seed.iter().map(|s| s.metrics.clone()).collect();
    let mean = MetricSet::mean(&sets).ok_or(WorkflowError::Dataset(DatasetError::EmptyDataset))?;
    let provenance = manifests.iter().map(|m| m.provenance.clone()).find(|p| !p.is_empty());
    Ok(EvaluateReport { backend: classifier.id(), split, provenance, per_seed, mean })
}

#[derive(Clone, Debug, Serialize)]
pub struct AttributedFile {
    pub image: PathBuf,
    pub overlay: PathBuf,
    pub scores: PathBuf,
    pub argmax: Vec<usize>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct AttributeReport {
    pub done: Vec<AttributedFile>,
    pub failed: Vec<(PathBuf, String)>,
}

/// Attributes each image independently; failures are collected, not fatal.
/// Writes `<stem>_heatmap.png` and `<stem>_scores.txt` into `out_dir`.
pub fn cmd_attribute(
    images: &[PathBuf],
    classifier: &dyn Classifier,
    opts: &AttributeOptions,
    heat: &HeatmapOptions,
    out_dir: &Path,
    provenance: &str,
) -> AttributeReport {
    let results: Vec<Result<AttributedFile, WorkflowError>> = images
        .par_iter()
        .map(|path| {
            let bytes = std::fs::read(path).map_err(io_err(path))?;
            let image = GrayImage::decode_png(&bytes).map_err(|source| WorkflowError::Raster { path: path.display().to_string(), source })?;
            let attr_err = |source| WorkflowError::Attribution { path: path.display().to_string(), source };
            let mut map = attribution::attribute(&image, classifier, opts).map_err(attr_err)?;
            map.image_ref = path.display().to_string();
            let heatmap = attribution::render_heatmap(&map, &image, heat).map_err(attr_err)?;
            let name = stem(path);
            let overlay = out_dir.join(format!("{name}_heatmap.png"));
            let scores = out_dir.join(format!("{name}_scores.txt"));
            let png = heatmap
                .overlay
                .encode_png(&[(PROVENANCE_KEY, provenance), (SOURCE_KEY, &image.digest()), ("psgforge-classifier", &map.classifier_id)])
                .map_err(|source| WorkflowError::Raster { path: overlay.display().to_string(), source })?;
            write_if_changed(&overlay, &png)?;
            write_if_changed(&scores, map.to_text().as_bytes())?;
            Ok(AttributedFile { image: path.clone(), overlay, scores, argmax: map.argmax_set() })
        })
        .collect();
    let mut report = AttributeReport::default();
    for (path, r) in images.iter().zip(results) {
        match r {
            Ok(done) => report.done.push(done),
            Err(e) => {
                tracing::error!(image = %path.display(), "{e}");
                report.failed.push((path.clone(), e.to_string()));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairing_by_stem() {
        let edfs = vec![PathBuf::from("/d/b.edf"), PathBuf::from("/d/a.edf")];
        let hyps = vec![PathBuf::from("/h/a.txt"), PathBuf::from("/h/b.csv")];
        let pairs = pair_inputs(&edfs, &hyps).unwrap();
        assert_eq!(pairs[0].subject, "a");
        assert_eq!(pairs[1].hypnogram, PathBuf::from("/h/b.csv"));
        match pair_inputs(&edfs, &hyps[..1]) {
            Err(WorkflowError::MissingHypnogram(s)) => assert_eq!(s, "b"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn write_if_changed_skips_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x/y.bin");
        assert!(write_if_changed(&p, b"abc").unwrap());
        assert!(!write_if_changed(&p, b"abc").unwrap());
        assert!(write_if_changed(&p, b"abd").unwrap());
    }
}
