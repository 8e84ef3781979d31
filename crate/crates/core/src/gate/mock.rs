//! Deterministic in-process classifiers used as test oracles.

use super::{ClassifierOutput, GateError};
use crate::attribution::{patch_mean, NUM_PATCHES};
use crate::raster::GrayImage;
use crate::stage::SleepStage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// Fixed logits of classes N1..REM for the patch probe.
const PROBE_OFFSETS: [f64; 4] = [1.0, 0.5, 0.0, -0.5];

#[derive(Clone, Debug, PartialEq)]
pub enum MockSpec {
    /// Always the same stage, one-hot.
    Constant(SleepStage),
    /// Sensitive only to a set of patches.
    ///
    /// Each sensitive patch contributes an activation
    /// `min(1, |mean intensity − reference| / saturation)`; the W logit is
    /// `weight × Σ activation`, the other logits are fixed. Masking any other
    /// patch leaves the output bit-identical.
    PatchProbe {
        patches: BTreeSet<usize>,
        weight: f64,
        reference: u8,
        saturation: f64,
    },
    /// Replays recorded outputs keyed by [`GrayImage::digest`].
    Fixture(BTreeMap<String, ClassifierOutput>),
    /// Softmax over the mean luminance of five horizontal bands (scaled by 1/64).
    Echo,
}

#[derive(Serialize, Deserialize)]
struct FixtureLine {
    digest: String,
    #[serde(flatten)]
    output: ClassifierOutput,
}

impl MockSpec {
    pub fn probe(patches: impl IntoIterator<Item = usize>, weight: f64) -> Self {
        MockSpec::PatchProbe { patches: patches.into_iter().collect(), weight, reference: 255, saturation: 8.0 }
    }

    /// Parses the part after `mock:` in a backend specification.
    pub fn parse(text: &str) -> Result<Self, GateError> {
        let bad = || GateError::BadSpec(format!("mock:{text}"));
        let (kind, rest) = text.split_once(':').unwrap_or((text, ""));
        match kind {
            "constant" => Ok(MockSpec::Constant(rest.parse().map_err(|_| bad())?)),
            "echo" => Ok(MockSpec::Echo),
            "probe" => {
                let (ids, weight) = rest.split_once(':').unwrap_or((rest, "4"));
                let patches = ids
                    .split(',')
                    .map(|s| s.trim().parse::<usize>().map_err(|_| bad()))
                    .collect::<Result<BTreeSet<_>, _>>()?;
                let weight: f64 = weight.parse().map_err(|_| bad())?;
                Ok(MockSpec::probe(patches, weight))
            }
            "fixture" => Self::load_fixture(Path::new(rest)),
            _ => Err(bad()),
        }
    }

    /// Reads a JSONL fixture of `{"digest", "label", "scores"}` objects.
    pub fn load_fixture(path: &Path) -> Result<Self, GateError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GateError::BackendUnavailable(format!("{}: {e}", path.display())))?;
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let entry: FixtureLine = serde_json::from_str(line)
                .map_err(|e| GateError::ProtocolViolation(format!("{} line {}: {e}", path.display(), i + 1)))?;
            entry.output.validate()?;
            map.insert(entry.digest, entry.output);
        }
        Ok(MockSpec::Fixture(map))
    }

    pub fn fixture_to_jsonl(map: &BTreeMap<String, ClassifierOutput>) -> String {
        map.iter()
            .map(|(digest, output)| {
                serde_json::to_string(&FixtureLine { digest: digest.clone(), output: output.clone() }).expect("fixture serializes") + "\n"
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct MockClassifier {
    spec: MockSpec,
}

impl MockClassifier {
    pub fn new(spec: MockSpec) -> Result<Self, GateError> {
        if let MockSpec::PatchProbe { patches, weight, saturation, .. } = &spec {
            if let Some(p) = patches.iter().find(|&&p| p >= NUM_PATCHES) {
                return Err(GateError::BadSpec(format!("probe patch {p} outside 0..{NUM_PATCHES}")));
            }
            if !weight.is_finite() || !(*saturation > 0.0) {
                return Err(GateError::BadSpec("probe weight must be finite and saturation positive".into()));
            }
        }
        Ok(MockClassifier { spec })
    }

    pub fn spec(&self) -> &MockSpec {
        &self.spec
    }

    fn run(&self, image: &GrayImage) -> Result<ClassifierOutput, GateError> {
        match &self.spec {
            MockSpec::Constant(stage) => Ok(ClassifierOutput::one_hot(*stage)),
            MockSpec::PatchProbe { patches, weight, reference, saturation } => {
                if image.width != 336 || image.height != 336 {
                    return Err(GateError::InvalidImage(format!("probe expects 336x336, got {}x{}", image.width, image.height)));
                }
                let activation: f64 = patches
                    .iter()
                    .map(|&p| ((patch_mean(image, p) - f64::from(*reference)).abs() / saturation).min(1.0))
                    .sum();
                let mut logits = [0.0; 5];
                logits[0] = weight * activation;
                logits[1..].copy_from_slice(&PROBE_OFFSETS);
                Ok(ClassifierOutput::from_logits(logits))
            }
            MockSpec::Fixture(map) => {
                let digest = image.digest();
                map.get(&digest).cloned().ok_or(GateError::NoFixture(digest))
            }
            MockSpec::Echo => {
                if image.height < 5 || image.width == 0 {
                    return Err(GateError::InvalidImage("echo needs at least 5 rows".into()));
                }
                let mut logits = [0.0; 5];
                let h = image.height as usize;
                for (band, logit) in logits.iter_mut().enumerate() {
                    let rows = band * h / 5..(band + 1) * h / 5;
                    let n = rows.len() * image.width as usize;
                    let sum: u64 = rows.flat_map(|y| image.row(y as u32).iter()).map(|&v| u64::from(v)).sum();
                    *logit = sum as f64 / n as f64 / 64.0;
                }
                Ok(ClassifierOutput::from_logits(logits))
            }
        }
    }
}

impl super::Classifier for MockClassifier {
    fn id(&self) -> String {
        match &self.spec {
            MockSpec::Constant(s) => format!("mock:constant:{s}"),
            MockSpec::PatchProbe { patches, weight, .. } => {
                let ids: Vec<String> = patches.iter().map(usize::to_string).collect();
                format!("mock:probe:{}:{weight}", ids.join(","))
            }
            MockSpec::Fixture(map) => format!("mock:fixture[{}]", map.len()),
            MockSpec::Echo => "mock:echo".into(),
        }
    }

    fn classify(&self, image: &GrayImage, _prompt: &str) -> Result<ClassifierOutput, GateError> {
        self.run(image)
    }

    fn classify_batch(&self, images: &[GrayImage], _prompt: &str) -> Vec<Result<ClassifierOutput, GateError>> {
        images.par_iter().map(|img| self.run(img)).collect()
    }
}
