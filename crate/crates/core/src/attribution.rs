//! Patch-occlusion attribution on 336×336 rendered epochs.
//!
//! Each of the 576 non-overlapping 14×14 patches is replaced by a baseline
//! luminance, the classifier is queried on the masked image, and the patch
//! score is the Euclidean distance between the original and masked output
//! vectors. Scores are min-max normalized to [0, 1].

use crate::gate::{Classifier, ClassifierOutput, GateError};
use crate::raster::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PATCH_SIZE: u32 = 14;
pub const GRID: usize = 24;
pub const NUM_PATCHES: usize = GRID * GRID;
pub const IMAGE_SIDE: u32 = PATCH_SIZE * GRID as u32;

/// Masked images per `classify_batch` call.
const BATCH: usize = 96;

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("patch {0} outside 0..576")]
    PatchOutOfRange(usize),
    #[error("attribution needs a 336x336 image, got {width}x{height}")]
    ImageSize { width: u32, height: u32 },
    #[error("classifier failed on the unmasked image: {0}")]
    Original(#[source] GateError),
    #[error("classifier failed on patch {patch}: {source}")]
    Patch {
        patch: usize,
        #[source]
        source: GateError,
    },
    #[error("logit displacement requested but the backend returned no logits")]
    MissingLogits,
    #[error("bad score matrix: {0}")]
    Matrix(String),
}

/// Which output vector the displacement is measured on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Displacement {
    #[default]
    Probabilities,
    Logits,
}

impl std::str::FromStr for Displacement {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "probabilities" | "probs" => Ok(Displacement::Probabilities),
            "logits" => Ok(Displacement::Logits),
            _ => Err(format!("unknown displacement mode `{s}` (probabilities|logits)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeOptions {
    pub baseline: u8,
    pub prompt: String,
    pub mode: Displacement,
}

impl Default for AttributeOptions {
    fn default() -> Self {
        AttributeOptions { baseline: 255, prompt: crate::gate::DEFAULT_PROMPT.to_string(), mode: Displacement::Probabilities }
    }
}

/// Row-major 24×24 grids of normalized (`grid`) and raw (`raw`) patch scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub grid: Vec<f64>,
    pub raw: Vec<f64>,
    pub image_ref: String,
    pub classifier_id: String,
}

impl AttributionMap {
    /// Normalizes raw scores; equal scores give an all-zero grid.
    pub fn from_raw(raw: Vec<f64>, image_ref: String, classifier_id: String) -> Result<Self, AttributionError> {
        if raw.len() != NUM_PATCHES {
            return Err(AttributionError::Matrix(format!("expected {NUM_PATCHES} scores, got {}", raw.len())));
        }
        if let Some(v) = raw.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(AttributionError::Matrix(format!("score {v} is not a finite distance")));
        }
        Ok(AttributionMap { grid: normalize(&raw), raw, image_ref, classifier_id })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.grid[row * GRID + col]
    }

    pub fn is_degenerate(&self) -> bool {
        self.grid.iter().all(|&v| v == 0.0)
    }

    /// Patch ids attaining the maximum normalized score (empty if degenerate).
    pub fn argmax_set(&self) -> Vec<usize> {
        if self.is_degenerate() {
            return Vec::new();
        }
        let max = self.grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (0..NUM_PATCHES).filter(|&p| self.grid[p] == max).collect()
    }

    /// 24 lines of 24 space-separated values, shortest round-trip form.
    pub fn to_text(&self) -> String {
        grid_to_text(&self.grid)
    }
}

pub fn grid_to_text(grid: &[f64]) -> String {
    let mut out = String::new();
    for row in grid.chunks(GRID) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    out
}

pub fn grid_from_text(text: &str) -> Result<Vec<f64>, AttributionError> {
    let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if rows.len() != GRID {
        return Err(AttributionError::Matrix(format!("expected {GRID} rows, got {}", rows.len())));
    }
    let mut grid = Vec::with_capacity(NUM_PATCHES);
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<&str> = row.split_whitespace().collect();
        if cells.len() != GRID {
            return Err(AttributionError::Matrix(format!("row {} has {} values", i + 1, cells.len())));
        }
        for c in cells {
            grid.push(c.parse().map_err(|_| AttributionError::Matrix(format!("row {}: bad value `{c}`", i + 1)))?);
        }
    }
    Ok(grid)
}

fn normalize(raw: &[f64]) -> Vec<f64> {
    let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return vec![0.0; raw.len()];
    }
    let span = max - min;
    raw.iter().map(|&s| if s == max { 1.0 } else { (s - min) / span }).collect()
}

/// Top-left pixel (x, y) of a patch.
pub fn patch_origin(patch: usize) -> (u32, u32) {
    let row = (patch / GRID) as u32;
    let col = (patch % GRID) as u32;
    (col * PATCH_SIZE, row * PATCH_SIZE)
}

/// Mean luminance of a patch. Panics if the patch lies outside the image.
pub fn patch_mean(image: &GrayImage, patch: usize) -> f64 {
    let (x0, y0) = patch_origin(patch);
    let mut sum = 0u64;
    for y in y0..y0 + PATCH_SIZE {
        let row = image.row(y);
        sum += row[x0 as usize..(x0 + PATCH_SIZE) as usize].iter().map(|&v| u64::from(v)).sum::<u64>();
    }
    sum as f64 / f64::from(PATCH_SIZE * PATCH_SIZE)
}

fn check_image(image: &GrayImage) -> Result<(), AttributionError> {
    if image.width != IMAGE_SIDE || image.height != IMAGE_SIDE {
        return Err(AttributionError::ImageSize { width: image.width, height: image.height });
    }
    Ok(())
}

pub fn mask_patch(image: &GrayImage, patch: usize, baseline: u8) -> Result<GrayImage, AttributionError> {
    if patch >= NUM_PATCHES {
        return Err(AttributionError::PatchOutOfRange(patch));
    }
    check_image(image)?;
    let mut out = image.clone();
    let (x0, y0) = patch_origin(patch);
    let w = image.width as usize;
    for y in y0..y0 + PATCH_SIZE {
        let start = y as usize * w + x0 as usize;
        out.pixels[start..start + PATCH_SIZE as usize].fill(baseline);
    }
    Ok(out)
}

fn output_vector(out: &ClassifierOutput, mode: Displacement) -> Result<[f64; 5], AttributionError> {
    match mode {
        Displacement::Probabilities => Ok(out.scores),
        Displacement::Logits => out.logits.ok_or(AttributionError::MissingLogits),
    }
}

fn distance(a: &[f64; 5], b: &[f64; 5]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// One unmasked query plus 576 masked queries (577 classifier calls).
pub fn attribute(image: &GrayImage, classifier: &dyn Classifier, opts: &AttributeOptions) -> Result<AttributionMap, AttributionError> {
    let order: Vec<usize> = (0..NUM_PATCHES).collect();
    attribute_in_order(image, classifier, opts, &order)
}

/// As [`attribute`], issuing masked queries in the given patch order.
/// `order` must be a permutation of `0..576`.
pub fn attribute_in_order(
    image: &GrayImage,
    classifier: &dyn Classifier,
    opts: &AttributeOptions,
    order: &[usize],
) -> Result<AttributionMap, AttributionError> {
    check_image(image)?;
    let mut seen = vec![false; NUM_PATCHES];
    for &p in order {
        if p >= NUM_PATCHES {
            return Err(AttributionError::PatchOutOfRange(p));
        }
        seen[p] = true;
    }
    if order.len() != NUM_PATCHES || seen.iter().any(|s| !s) {
        return Err(AttributionError::Matrix("patch order is not a permutation of 0..576".into()));
    }

    let original = classifier.classify(image, &opts.prompt).map_err(AttributionError::Original)?;
    let y0 = output_vector(&original, opts.mode)?;

    let mut raw = vec![0.0; NUM_PATCHES];
    for chunk in order.chunks(BATCH) {
        let masked = chunk
            .iter()
            .map(|&p| mask_patch(image, p, opts.baseline))
            .collect::<Result<Vec<_>, _>>()?;
        let results = classifier.classify_batch(&masked, &opts.prompt);
        if results.len() != chunk.len() {
            return Err(AttributionError::Original(GateError::ProtocolViolation(format!(
                "batch of {} returned {} results",
                chunk.len(),
                results.len()
            ))));
        }
        for (&patch, result) in chunk.iter().zip(results) {
            let out = result.map_err(|source| AttributionError::Patch { patch, source })?;
            raw[patch] = distance(&y0, &output_vector(&out, opts.mode)?);
        }
    }
    AttributionMap::from_raw(raw, image.digest(), classifier.id())
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapOptions {
    pub top_fraction: f64,
    pub smooth: bool,
    /// Overlay opacity at S_norm = 1.
    pub max_alpha: f64,
    pub color: [u8; 3],
}

impl Default for HeatmapOptions {
    fn default() -> Self {
        HeatmapOptions { top_fraction: 0.30, smooth: true, max_alpha: 0.6, color: [255, 0, 0] }
    }
}

pub struct Heatmap {
    pub overlay: RgbImage,
    /// Per-patch overlay intensity (zero outside the retained set).
    pub intensity: Vec<f64>,
    pub retained: Vec<usize>,
}

/// Number of patches kept for a fraction, `ceil(fraction × 576)` clamped to 0..=576.
pub fn retained_count(top_fraction: f64) -> usize {
    let k = (top_fraction * NUM_PATCHES as f64 - 1e-9).ceil();
    k.clamp(0.0, NUM_PATCHES as f64) as usize
}

/// 3×3 box mean with edge replication.
pub fn box_smooth(grid: &[f64]) -> Vec<f64> {
    let at = |r: isize, c: isize| {
        let r = r.clamp(0, GRID as isize - 1) as usize;
        let c = c.clamp(0, GRID as isize - 1) as usize;
        grid[r * GRID + c]
    };
    let mut out = vec![0.0; NUM_PATCHES];
    for r in 0..GRID as isize {
        for c in 0..GRID as isize {
            let mut s = 0.0;
            for dr in -1..=1 {
                for dc in -1..=1 {
                    s += at(r + dr, c + dc);
                }
            }
            out[r as usize * GRID + c as usize] = s / 9.0;
        }
    }
    out
}

/// Highest-ranked patches by score; ties go to the lower id.
pub fn top_patches(scores: &[f64], k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ids.truncate(k);
    ids.sort_unstable();
    ids
}

/// The smoothed grid only ranks patches; retained patches are drawn at their
/// own normalized score, so an isolated hot patch stays a single patch.
pub fn render_heatmap(map: &AttributionMap, source: &GrayImage, opts: &HeatmapOptions) -> Result<Heatmap, AttributionError> {
    check_image(source)?;
    if map.grid.len() != NUM_PATCHES {
        return Err(AttributionError::Matrix(format!("expected {NUM_PATCHES} scores, got {}", map.grid.len())));
    }
    let ranking = if opts.smooth { box_smooth(&map.grid) } else { map.grid.clone() };
    let retained = top_patches(&ranking, retained_count(opts.top_fraction));
    let mut intensity = vec![0.0; NUM_PATCHES];
    for &p in &retained {
        intensity[p] = map.grid[p];
    }

    let side = IMAGE_SIDE as usize;
    let mut pixels = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        for x in 0..side {
            let patch = (y / PATCH_SIZE as usize) * GRID + x / PATCH_SIZE as usize;
            let a = opts.max_alpha * intensity[patch];
            let g = f64::from(source.pixels[y * side + x]);
            for &c in &opts.color {
                pixels.push(((1.0 - a) * g + a * f64::from(c)).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(Heatmap { overlay: RgbImage { width: IMAGE_SIDE, height: IMAGE_SIDE, pixels }, intensity, retained })
}
