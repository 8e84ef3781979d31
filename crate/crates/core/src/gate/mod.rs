//! Uniform access to sleep-stage classifiers.
//!
//! Everything that labels an image goes through [`Classifier`]: the in-process
//! mocks in [`mock`] and external models reached over the newline-delimited
//! JSON protocol in [`protocol`] / [`remote`].

pub mod mock;
pub mod protocol;
pub mod remote;

use crate::raster::GrayImage;
use crate::stage::SleepStage;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;
use thiserror::Error;

pub use mock::{MockClassifier, MockSpec};
pub use remote::RemoteClassifier;

/// Environment variable naming the backend (see [`open_backend`]).
pub const BACKEND_ENV: &str = "PSGFORGE_BACKEND";

/// Default classification prompt. A reconstruction: the exact wording used to
/// fine-tune the reference model was never published.
pub const DEFAULT_PROMPT: &str = "This image shows a 30-second polysomnography epoch rendered as stacked \
waveforms, one channel per horizontal lane. Which sleep stage does this epoch belong to? \
Answer with exactly one of: W, N1, N2, N3, REM.";

#[derive(Debug, Error)]
pub enum GateError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("no response within {0:?}")]
    Timeout(Duration),
    #[error("backend reported an error for request {id}: {message}")]
    Remote { id: u64, message: String },
    #[error("image rejected: {0}")]
    InvalidImage(String),
    #[error("no fixture recorded for image {0}")]
    NoFixture(String),
    #[error("invalid backend specification `{0}`")]
    BadSpec(String),
}

/// Score vectors are ordered `W, N1, N2, N3, REM`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierOutput {
    pub label: SleepStage,
    pub scores: [f64; 5],
    /// Pre-softmax values, for backends that expose them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<[f64; 5]>,
}

impl ClassifierOutput {
    /// Label-only output as a one-hot score vector.
    pub fn one_hot(label: SleepStage) -> Self {
        ClassifierOutput { label, scores: label.one_hot(), logits: None }
    }

    /// Softmax over `logits`; label is the first maximal class.
    pub fn from_logits(logits: [f64; 5]) -> Self {
        let scores = softmax(&logits);
        ClassifierOutput { label: argmax(&scores), scores, logits: Some(logits) }
    }

    /// Checks finiteness, normalization and label/argmax consistency.
    pub fn validate(&self) -> Result<(), GateError> {
        if self.scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(GateError::ProtocolViolation(format!("scores must be finite and non-negative: {:?}", self.scores)));
        }
        let sum: f64 = self.scores.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(GateError::ProtocolViolation(format!("scores sum to {sum}, expected 1")));
        }
        let max = self.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if self.scores[self.label.index()] != max {
            return Err(GateError::ProtocolViolation(format!(
                "label {} is not an argmax of {:?}",
                self.label, self.scores
            )));
        }
        if let Some(l) = &self.logits {
            if l.iter().any(|v| !v.is_finite()) {
                return Err(GateError::ProtocolViolation("logits must be finite".into()));
            }
        }
        Ok(())
    }
}

pub fn softmax(logits: &[f64; 5]) -> [f64; 5] {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0; 5];
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
    }
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|o| *o /= sum);
    out
}

/// First index of the maximum.
pub fn argmax(scores: &[f64; 5]) -> SleepStage {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    SleepStage::from_index(best).expect("five classes")
}

pub trait Classifier: Send + Sync {
    /// Stable identifier recorded alongside attribution maps.
    fn id(&self) -> String;

    fn classify(&self, image: &GrayImage, prompt: &str) -> Result<ClassifierOutput, GateError>;

    /// Order-preserving; failures are reported per item.
    fn classify_batch(&self, images: &[GrayImage], prompt: &str) -> Vec<Result<ClassifierOutput, GateError>> {
        images.iter().map(|img| self.classify(img, prompt)).collect()
    }
}

impl<C: Classifier + ?Sized> Classifier for Box<C> {
    fn id(&self) -> String {
        (**self).id()
    }
    fn classify(&self, image: &GrayImage, prompt: &str) -> Result<ClassifierOutput, GateError> {
        (**self).classify(image, prompt)
    }
    fn classify_batch(&self, images: &[GrayImage], prompt: &str) -> Vec<Result<ClassifierOutput, GateError>> {
        (**self).classify_batch(images, prompt)
    }
}

impl<C: Classifier + ?Sized> Classifier for std::sync::Arc<C> {
    fn id(&self) -> String {
        (**self).id()
    }
    fn classify(&self, image: &GrayImage, prompt: &str) -> Result<ClassifierOutput, GateError> {
        (**self).classify(image, prompt)
    }
    fn classify_batch(&self, images: &[GrayImage], prompt: &str) -> Vec<Result<ClassifierOutput, GateError>> {
        (**self).classify_batch(images, prompt)
    }
}

/// Wraps a classifier and counts every image it is asked to label.
pub struct Counting<C> {
    inner: C,
    calls: AtomicUsize,
}

impl<C> Counting<C> {
    pub fn new(inner: C) -> Self {
        Counting { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }
}

impl<C: Classifier> Classifier for Counting<C> {
    fn id(&self) -> String {
        self.inner.id()
    }
    fn classify(&self, image: &GrayImage, prompt: &str) -> Result<ClassifierOutput, GateError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.classify(image, prompt)
    }
    fn classify_batch(&self, images: &[GrayImage], prompt: &str) -> Vec<Result<ClassifierOutput, GateError>> {
        self.calls.fetch_add(images.len(), Ordering::SeqCst);
        self.inner.classify_batch(images, prompt)
    }
}

/// Opens a backend from a specification string:
///
/// * `mock:constant:<STAGE>`
/// * `mock:echo`
/// * `mock:probe:<patch>[,<patch>...][:<weight>]`
/// * `mock:fixture:<path to JSONL fixture>`
/// * `tcp:<host:port>` / `unix:<socket path>`
/// * `exec:<program> [args...]` (protocol over the child's stdio)
pub fn open_backend(spec: &str, timeout: Duration) -> Result<Box<dyn Classifier>, GateError> {
    if let Some(rest) = spec.strip_prefix("mock:") {
        return Ok(Box::new(MockClassifier::new(MockSpec::parse(rest)?)?));
    }
    if let Some(addr) = spec.strip_prefix("tcp:") {
        return Ok(Box::new(RemoteClassifier::connect_tcp(addr, timeout)?));
    }
    if let Some(path) = spec.strip_prefix("unix:") {
        return Ok(Box::new(RemoteClassifier::connect_unix(std::path::Path::new(path), timeout)?));
    }
    if let Some(cmd) = spec.strip_prefix("exec:") {
        let mut parts = cmd.split_whitespace();
        let program = parts.next().ok_or_else(|| GateError::BadSpec(spec.to_string()))?;
        let args: Vec<&str> = parts.collect();
        return Ok(Box::new(RemoteClassifier::spawn(program, &args, timeout)?));
    }
    Err(GateError::BadSpec(spec.to_string()))
}
