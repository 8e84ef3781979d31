//! Hypnogram ingestion, label harmonization, seeded splits and manifests.

use crate::stage::SleepStage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use thiserror::Error;

/// Scoring window length in seconds.
pub const EPOCH_SECONDS: u32 = 30;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("unknown sleep label `{token}` at epoch {epoch}")]
    UnknownLabel { token: String, epoch: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("hypnogram line {line}: {detail}")]
    Hypnogram { line: usize, detail: String },
    #[error("manifest line {line}: {source}")]
    Manifest {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelStandard {
    Aasm,
    Rk,
}

/// Raw per-epoch labels as shipped with a recording.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypnogram {
    pub subject_id: String,
    pub tokens: Vec<String>,
    pub epoch_len_s: u32,
}

impl Hypnogram {
    /// Parses either one label per line, or `epoch_index,label` CSV rows
    /// (1-based indices, optional header). Gaps in CSV indices become `UNKNOWN`.
    pub fn parse(subject_id: &str, text: &str) -> Result<Self, DatasetError> {
        let lines: Vec<(usize, &str)> = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
            .collect();
        let is_csv = lines.iter().any(|(_, l)| l.contains(','));
        let tokens = if is_csv {
            let mut slots: BTreeMap<usize, String> = BTreeMap::new();
            for (line, l) in lines {
                let (idx, label) = l.split_once(',').ok_or_else(|| DatasetError::Hypnogram {
                    line,
                    detail: "expected `epoch_index,label`".into(),
                })?;
                let idx = idx.trim();
                if idx == "epoch_index" {
                    continue;
                }
                let idx: usize = idx.parse().map_err(|_| DatasetError::Hypnogram {
                    line,
                    detail: format!("bad epoch index `{idx}`"),
                })?;
                if idx == 0 {
                    return Err(DatasetError::Hypnogram { line, detail: "epoch indices start at 1".into() });
                }
                if slots.insert(idx, label.trim().to_string()).is_some() {
                    return Err(DatasetError::Hypnogram { line, detail: format!("epoch {idx} labelled twice") });
                }
            }
            let last = slots.keys().next_back().copied().unwrap_or(0);
            (1..=last).map(|i| slots.remove(&i).unwrap_or_else(|| "UNKNOWN".into())).collect()
        } else {
            lines.into_iter().map(|(_, l)| l.to_string()).collect()
        };
        Ok(Hypnogram { subject_id: subject_id.to_string(), tokens, epoch_len_s: EPOCH_SECONDS })
    }

    pub fn read(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.display().to_string(), source })?;
        let subject = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        Self::parse(subject, &text)
    }
}

/// Maps raw tokens onto the five AASM stages; `None` marks an excluded epoch
/// (movement or unscored). R&K S3 and S4 both become N3.
pub fn harmonize_labels(h: &Hypnogram, _standard: LabelStandard) -> Result<Vec<Option<SleepStage>>, DatasetError> {
    h.tokens
        .iter()
        .enumerate()
        .map(|(i, token)| {
            Ok(match token.as_str() {
                "W" => Some(SleepStage::W),
                "N1" | "S1" => Some(SleepStage::N1),
                "N2" | "S2" => Some(SleepStage::N2),
                "N3" | "S3" | "S4" => Some(SleepStage::N3),
                "REM" => Some(SleepStage::Rem),
                "MOVEMENT" | "UNKNOWN" => None,
                other => {
                    return Err(DatasetError::UnknownLabel { token: other.to_string(), epoch: i + 1 });
                }
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Shuffle individual epochs.
    #[default]
    Sample,
    /// Shuffle subjects; all epochs of a subject share a split.
    Subject,
}

/// `(test, val, train)` sizes for `n` items: 20 % test, then 10 % of the
/// remainder for validation, each rounded half up.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let test = (2 * n + 5) / 10;
    let val = (n - test + 5) / 10;
    (test, val, n - test - val)
}

/// Seeded shuffle; the first 20 % of the permutation is Test, the next 10 %
/// of the rest is Val, the remainder Train. Indexed by original position.
pub fn split_samples(n: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (test, val, _) = split_sizes(n);
    let mut out = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < test {
            Split::Test
        } else if rank < test + val {
            Split::Val
        } else {
            Split::Train
        };
    }
    out
}

/// One rendered, labelled epoch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledImage {
    pub image_path: String,
    pub label: SleepStage,
    pub subject_id: String,
    pub epoch_index: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub image_path: String,
    pub label: SleepStage,
    pub subject_id: String,
    pub epoch_index: usize,
    pub split: Split,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub seed: u64,
    /// Hex digest of the canonical pipeline configuration.
    pub provenance: String,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("manifest records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str, provenance: impl Into<String>) -> Result<Self, DatasetError> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str::<ManifestRecord>(l).map_err(|source| DatasetError::Manifest { line: i + 1, source }))
            .collect::<Result<Vec<_>, _>>()?;
        let seed = records.first().map_or(0, |r| r.seed);
        Ok(DatasetManifest { seed, provenance: provenance.into(), records })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

/// Builds one manifest per seed over the same record set, ordered by
/// `(subject, epoch_index)`.
pub fn build_manifest(
    records: &[LabeledImage],
    seeds: &[u64],
    mode: SplitMode,
    provenance: &str,
) -> Result<Vec<DatasetManifest>, DatasetError> {
    if records.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    let mut sorted: Vec<&LabeledImage> = records.iter().collect();
    sorted.sort_by(|a, b| (&a.subject_id, a.epoch_index).cmp(&(&b.subject_id, b.epoch_index)));

    Ok(seeds
        .par_iter()
        .map(|&seed| {
            let splits = match mode {
                SplitMode::Sample => split_samples(sorted.len(), seed),
                SplitMode::Subject => {
                    let subjects: Vec<&str> = sorted
                        .iter()
                        .map(|r| r.subject_id.as_str())
                        .collect::<BTreeSet<_>>()
                        .into_iter()
                        .collect();
                    let by_subject: BTreeMap<&str, Split> =
                        subjects.iter().copied().zip(split_samples(subjects.len(), seed)).collect();
                    sorted.iter().map(|r| by_subject[r.subject_id.as_str()]).collect()
                }
            };
            let records = sorted
                .iter()
                .zip(splits)
                .map(|(r, split)| ManifestRecord {
                    image_path: r.image_path.clone(),
                    label: r.label,
                    subject_id: r.subject_id.clone(),
                    epoch_index: r.epoch_index,
                    split,
                    seed,
                })
                .collect();
            DatasetManifest { seed, provenance: provenance.to_string(), records }
        })
        .collect())
}
