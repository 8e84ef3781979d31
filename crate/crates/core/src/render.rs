//! Waveform rasterization: scaled epoch → high-resolution lane plot → box-filtered
//! final image.
//!
//! Channel `c` owns horizontal lane `c` (top to bottom in channel order).
//! Within a lane, +1 maps to the lane's top row and -1 to its bottom row;
//! sample index maps linearly onto the full image width. Consecutive samples
//! are joined with integer Bresenham segments thickened vertically to
//! `stroke_px` rows and clipped to the lane. There is no anti-aliasing at this
//! stage: all smoothing comes from the exact integer box downsample.

use crate::epoch::EpochMatrix;
use crate::raster::GrayImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("{channels} channels leave lanes of {lane_height} px (minimum 4)")]
    TooManyChannels { channels: usize, lane_height: i64 },
    #[error("epoch has no channels")]
    NoChannels,
    #[error("value {value} at channel {channel}, sample {index} is outside [-1, 1]")]
    OutOfRange { channel: usize, index: usize, value: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub initial_width: u32,
    pub initial_height: u32,
    pub final_width: u32,
    pub final_height: u32,
    pub stroke_px: u32,
    pub background: u8,
    pub foreground: u8,
    pub lane_gap_px: u32,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            initial_width: 1344,
            initial_height: 1344,
            final_width: 336,
            final_height: 336,
            stroke_px: 2,
            background: 255,
            foreground: 0,
            lane_gap_px: 4,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        if self.final_width == 0 || self.final_height == 0 {
            return Err(RenderError::DimensionMismatch("final dimensions must be positive".into()));
        }
        if !self.initial_width.is_multiple_of(self.final_width) || !self.initial_height.is_multiple_of(self.final_height) {
            return Err(RenderError::DimensionMismatch(format!(
                "initial {}x{} is not an integer multiple of final {}x{}",
                self.initial_width, self.initial_height, self.final_width, self.final_height
            )));
        }
        if self.stroke_px == 0 {
            return Err(RenderError::DimensionMismatch("stroke_px must be at least 1".into()));
        }
        Ok(())
    }

    /// Box size per axis.
    pub fn block(&self) -> (u32, u32) {
        (self.initial_width / self.final_width, self.initial_height / self.final_height)
    }

    /// Lane height at the initial resolution for `channels` lanes.
    pub fn lane_height(&self, channels: usize) -> Result<u32, RenderError> {
        if channels == 0 {
            return Err(RenderError::NoChannels);
        }
        let gaps = (channels as i64 - 1) * i64::from(self.lane_gap_px);
        let lane = (i64::from(self.initial_height) - gaps) / channels as i64;
        if lane < 4 {
            return Err(RenderError::TooManyChannels { channels, lane_height: lane });
        }
        Ok(lane as u32)
    }

    /// Inclusive row range `[top, bottom]` of lane `c` at the initial resolution.
    pub fn lane_rows(&self, channels: usize, c: usize) -> Result<(u32, u32), RenderError> {
        let h = self.lane_height(channels)?;
        let top = c as u32 * (h + self.lane_gap_px);
        Ok((top, top + h - 1))
    }
}

/// Row for value `v` inside a lane spanning `[top, top + height - 1]`.
fn value_row(v: f64, top: u32, height: u32) -> i64 {
    i64::from(top) + ((1.0 - v) / 2.0 * f64::from(height - 1)).round() as i64
}

/// Column for sample `k` of `n`, rounded half up.
fn sample_column(k: usize, n: usize, width: u32) -> i64 {
    if n <= 1 {
        return 0;
    }
    let span = (n - 1) as i64;
    (2 * k as i64 * (i64::from(width) - 1) + span) / (2 * span)
}

struct Canvas<'a> {
    img: &'a mut GrayImage,
    ink: u8,
    lane_top: i64,
    lane_bottom: i64,
    up: i64,
    down: i64,
}

impl Canvas<'_> {
    fn stamp(&mut self, x: i64, y: i64) {
        let lo = (y - self.up).max(self.lane_top);
        let hi = (y + self.down).min(self.lane_bottom);
        for row in lo..=hi {
            self.img.set(x as u32, row as u32, self.ink);
        }
    }

    fn segment(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64)) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.stamp(x, y);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }
}

/// High-resolution lane plot of a scaled epoch.
pub fn render_epoch(epoch: &EpochMatrix, cfg: &RenderConfig) -> Result<GrayImage, RenderError> {
    cfg.validate()?;
    let channels = epoch.channels;
    let lane_h = cfg.lane_height(channels)?;
    for (c, row) in epoch.rows().enumerate() {
        if let Some((index, &value)) = row.iter().enumerate().find(|(_, v)| !(v.abs() <= 1.0)) {
            return Err(RenderError::OutOfRange { channel: c, index, value });
        }
    }
    let mut img = GrayImage::filled(cfg.initial_width, cfg.initial_height, cfg.background);
    let stroke = i64::from(cfg.stroke_px);
    for (c, row) in epoch.rows().enumerate() {
        let (top, bottom) = cfg.lane_rows(channels, c)?;
        let mut canvas = Canvas {
            img: &mut img,
            ink: cfg.foreground,
            lane_top: i64::from(top),
            lane_bottom: i64::from(bottom),
            up: stroke / 2,
            down: (stroke - 1) / 2,
        };
        let n = row.len();
        let mut prev: Option<(i64, i64)> = None;
        for (k, &v) in row.iter().enumerate() {
            let p = (sample_column(k, n, cfg.initial_width), value_row(v, top, lane_h));
            match prev {
                None => canvas.stamp(p.0, p.1),
                Some(q) if q != p => canvas.segment(q, p),
                Some(_) => {}
            }
            prev = Some(p);
        }
    }
    Ok(img)
}

/// Exact box-filter reduction: each output pixel is the mean of its source
/// block, rounded half to even.
pub fn downsample(hr: &GrayImage, cfg: &RenderConfig) -> Result<GrayImage, RenderError> {
    cfg.validate()?;
    if hr.width != cfg.initial_width || hr.height != cfg.initial_height {
        return Err(RenderError::DimensionMismatch(format!(
            "raster is {}x{}, configuration expects {}x{}",
            hr.width, hr.height, cfg.initial_width, cfg.initial_height
        )));
    }
    let (bx, by) = cfg.block();
    let area = bx * by;
    let mut out = GrayImage::filled(cfg.final_width, cfg.final_height, 0);
    let mut sums = vec![0u32; cfg.final_width as usize];
    for oy in 0..cfg.final_height {
        sums.iter_mut().for_each(|s| *s = 0);
        for y in oy * by..(oy + 1) * by {
            for (ox, chunk) in hr.row(y).chunks_exact(bx as usize).enumerate() {
                sums[ox] += chunk.iter().map(|&v| u32::from(v)).sum::<u32>();
            }
        }
        for (ox, &sum) in sums.iter().enumerate() {
            out.set(ox as u32, oy, round_half_even(sum, area));
        }
    }
    Ok(out)
}

fn round_half_even(sum: u32, n: u32) -> u8 {
    let (q, r) = (sum / n, sum % n);
    let v = match (2 * r).cmp(&n) {
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => q + (q & 1),
        std::cmp::Ordering::Less => q,
    };
    v as u8
}

/// Full signal-to-image projection for one scaled epoch.
pub fn epoch_to_image(epoch: &EpochMatrix, cfg: &RenderConfig) -> Result<GrayImage, RenderError> {
    downsample(&render_epoch(epoch, cfg)?, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ink_rows(img: &GrayImage, cfg: &RenderConfig) -> Vec<u32> {
        (0..img.height).filter(|&y| img.row(y).contains(&cfg.foreground)).collect()
    }

    #[test]
    fn flat_zero_epoch_is_a_midline() {
        let cfg = RenderConfig::default();
        let img = render_epoch(&EpochMatrix::from_rows(vec![vec![0.0; 100]]), &cfg).unwrap();
        // lane spans 0..=1343, zero maps to round(671.5) = 672; 2 px stroke adds the row above
        assert_eq!(ink_rows(&img, &cfg), vec![671, 672]);
        assert!(img.row(672).iter().all(|&v| v == 0));
    }

    #[test]
    fn endpoints_map_to_lane_edges() {
        let cfg = RenderConfig::default();
        let e = EpochMatrix::from_rows(vec![vec![1.0; 50], vec![-1.0; 50]]);
        let img = render_epoch(&e, &cfg).unwrap();
        let (t0, _) = cfg.lane_rows(2, 0).unwrap();
        let (_, b1) = cfg.lane_rows(2, 1).unwrap();
        assert_eq!(ink_rows(&img, &cfg), vec![t0, b1 - 1, b1]);
        assert_eq!(cfg.lane_height(2).unwrap(), 670);
    }

    #[test]
    fn too_many_channels() {
        let cfg = RenderConfig::default();
        // (1344 - 4 (C - 1)) / C >= 4  <=>  C <= 168
        assert_eq!(cfg.lane_height(168).unwrap(), 4);
        assert!(matches!(cfg.lane_height(169), Err(RenderError::TooManyChannels { .. })));
        assert_eq!(cfg.lane_height(0), Err(RenderError::NoChannels));
    }

    #[test]
    fn out_of_range_values_rejected() {
        let e = EpochMatrix::from_rows(vec![vec![0.0, 1.5]]);
        assert!(matches!(render_epoch(&e, &RenderConfig::default()), Err(RenderError::OutOfRange { index: 1, .. })));
        let e = EpochMatrix::from_rows(vec![vec![f64::NAN]]);
        assert!(render_epoch(&e, &RenderConfig::default()).is_err());
    }

    #[test]
    fn downsample_uniform_and_block() {
        let cfg = RenderConfig::default();
        let white = GrayImage::filled(1344, 1344, 255);
        assert!(downsample(&white, &cfg).unwrap().pixels.iter().all(|&v| v == 255));

        let mut hr = white;
        for y in 8..12 {
            for x in 20..24 {
                hr.set(x, y, 0);
            }
        }
        let out = downsample(&hr, &cfg).unwrap();
        assert_eq!(out.get(5, 2), 0);
        assert_eq!(out.pixels.iter().filter(|&&v| v != 255).count(), 1);
    }

    #[test]
    fn checkerboard_rounds_half_to_even() {
        let cfg = RenderConfig::default();
        let mut hr = GrayImage::filled(1344, 1344, 0);
        for y in 0..1344 {
            for x in 0..1344 {
                if (x + y) % 2 == 0 {
                    hr.set(x, y, 255);
                }
            }
        }
        // 8 × 255 / 16 = 127.5 → 128
        assert!(downsample(&hr, &cfg).unwrap().pixels.iter().all(|&v| v == 128));
        assert_eq!(round_half_even(8 * 255 - 8, 16), 127);
        assert_eq!(round_half_even(254 * 16 + 8, 16), 254);
        assert_eq!(round_half_even(253 * 16 + 8, 16), 254);
    }

    #[test]
    fn downsample_rejects_wrong_size() {
        let cfg = RenderConfig::default();
        assert!(matches!(downsample(&GrayImage::filled(10, 10, 0), &cfg), Err(RenderError::DimensionMismatch(_))));
        let bad = RenderConfig { initial_width: 1000, ..RenderConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn triangle_wave_spans_the_lane() {
        let cfg = RenderConfig::default();
        let tri: Vec<f64> = (0..600).map(|k| 1.0 - 2.0 * ((k % 200) as f64 - 100.0).abs() / 100.0).collect();
        let e = EpochMatrix::from_rows(vec![vec![0.3; 600], tri, vec![-0.2; 600]]);
        let img = render_epoch(&e, &cfg).unwrap();
        let (top, bottom) = cfg.lane_rows(3, 1).unwrap();
        let rows: Vec<u32> = ink_rows(&img, &cfg).into_iter().filter(|&r| r >= top && r <= bottom).collect();
        let (lo, hi) = (rows[0], *rows.last().unwrap());
        assert!(lo - top <= cfg.stroke_px && bottom - hi <= cfg.stroke_px);
    }

    #[test]
    fn columns_are_monotone_and_cover_width() {
        assert_eq!(sample_column(0, 6000, 1344), 0);
        assert_eq!(sample_column(5999, 6000, 1344), 1343);
        let mut last = 0;
        for k in 0..6000 {
            let c = sample_column(k, 6000, 1344);
            assert!(c >= last);
            last = c;
        }
    }
}
