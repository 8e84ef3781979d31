//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use psgforge_core::raster::GrayImage;
use psgforge_core::tune::{lora_forward, LoraLayer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::TAU;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn noise_image(seed: u64) -> GrayImage {
    let mut r = rng(seed);
    let pixels = (0..336 * 336).map(|_| r.random::<u8>()).collect();
    GrayImage::from_raw(336, 336, pixels).unwrap()
}

pub fn dft_amplitude(x: &[f64], k: usize) -> f64 {
    let n = x.len() as f64;
    let (mut re, mut im) = (0.0, 0.0);
    for (i, v) in x.iter().enumerate() {
        let ph = TAU * k as f64 * i as f64 / n;
        re += v * ph.cos();
        im -= v * ph.sin();
    }
    2.0 * (re * re + im * im).sqrt() / n
}

pub fn tone(freq: f64, rate: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| (TAU * freq * i as f64 / rate).sin()).collect()
}

pub fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Metrics recomputed from an explicit list of (truth, prediction) pairs,
/// straight from the textbook definitions.
pub struct BruteMetrics {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub kappa: f64,
    pub weighted_f1: f64,
}

pub fn brute_metrics(counts: &[[u64; 5]; 5]) -> BruteMetrics {
    let mut pairs = Vec::new();
    for (t, row) in counts.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            for _ in 0..n {
                pairs.push((t, p));
            }
        }
    }
    let n = pairs.len() as f64;
    let count = |f: &dyn Fn(usize, usize) -> bool| pairs.iter().filter(|(t, p)| f(*t, *p)).count() as f64;

    let accuracy = count(&|t, p| t == p) / n;

    let mut recalls = Vec::new();
    let mut wf1 = 0.0;
    let mut expected = 0.0;
    for c in 0..5 {
        let tp = count(&|t, p| t == c && p == c);
        let fn_ = count(&|t, p| t == c && p != c);
        let fp = count(&|t, p| t != c && p == c);
        let support = tp + fn_;
        if support > 0.0 {
            recalls.push(tp / support);
        }
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if support > 0.0 { tp / support } else { 0.0 };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        wf1 += support / n * f1;
        expected += (support / n) * ((tp + fp) / n);
    }
    let balanced_accuracy = recalls.iter().sum::<f64>() / recalls.len() as f64;
    let kappa = if expected >= 1.0 { 0.0 } else { (accuracy - expected) / (1.0 - expected) };
    BruteMetrics { accuracy, balanced_accuracy, kappa, weighted_f1: wf1 }
}

pub fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
}

pub fn random_layer(r: &mut ChaCha8Rng, d: usize, k: usize, rank: usize) -> LoraLayer {
    let alpha = r.random_range(0.5..32.0);
    LoraLayer::new(random_matrix(r, d, k), random_matrix(r, rank, k), random_matrix(r, d, rank), alpha).unwrap()
}

/// Central-difference gradient of `uᵀ h(A, B)` with respect to A and B.
pub fn numeric_grads(layer: &LoraLayer, x: &DVector<f64>, u: &DVector<f64>, step: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let objective = |l: &LoraLayer| u.dot(&lora_forward(l, x).unwrap());
    let mut ga = DMatrix::zeros(layer.a.nrows(), layer.a.ncols());
    for i in 0..layer.a.nrows() {
        for j in 0..layer.a.ncols() {
            let mut plus = layer.clone();
            plus.a[(i, j)] += step;
            let mut minus = layer.clone();
            minus.a[(i, j)] -= step;
            ga[(i, j)] = (objective(&plus) - objective(&minus)) / (2.0 * step);
        }
    }
    let mut gb = DMatrix::zeros(layer.b.nrows(), layer.b.ncols());
    for i in 0..layer.b.nrows() {
        for j in 0..layer.b.ncols() {
            let mut plus = layer.clone();
            plus.b[(i, j)] += step;
            let mut minus = layer.clone();
            minus.b[(i, j)] -= step;
            gb[(i, j)] = (objective(&plus) - objective(&minus)) / (2.0 * step);
        }
    }
    (ga, gb)
}

/// Largest entrywise relative error, with the denominator floored at `floor`.
pub fn max_rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>, floor: f64) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor)).fold(0.0, f64::max)
}

/// Relative path → contents of every file under `root`.
pub fn tree_snapshot(root: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    fn walk(dir: &std::path::Path, root: &std::path::Path, out: &mut std::collections::BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = std::collections::BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Pipeline settings for the synthetic fixture, writing under `out`.
pub fn fixture_config(out: &std::path::Path) -> psgforge_core::config::PipelineConfig {
    let mut cfg = psgforge_core::config::PipelineConfig::default();
    cfg.channels.aliases = psgforge_core::synth::standard_aliases();
    cfg.output_root = out.to_path_buf();
    cfg
}

/// Writes a synthetic fixture and returns its paired inputs.
pub fn fixture_inputs(dir: &std::path::Path, durations_s: Vec<u64>, seed: u64) -> Vec<psgforge_core::workflow::SubjectInput> {
    let spec = psgforge_core::synth::SynthSpec::standard(durations_s, seed);
    psgforge_core::synth::write_fixture(&spec, dir).unwrap();
    psgforge_core::workflow::discover_inputs(dir).unwrap()
}
