//! Rational-ratio sample rate conversion with a Kaiser-windowed sinc
//! polyphase filter bank.
//!
//! For an input at `f_orig` and a target `f_target`, the reduced ratio
//! `f_target / f_orig = L / M` fixes where each output sample lands on the
//! input grid: output `m` sits at input position `m * M / L`, so the
//! fractional offset cycles through exactly `L` phases. One set of taps is
//! built per phase and reused for the whole recording, which keeps long
//! recordings drift-free. Samples outside the signal are treated as zero.

use crate::record::{round_half_up, Channel, Rate, Rational, SignalRecord};
use rayon::prelude::*;
use std::f64::consts::PI;
use thiserror::Error;

/// Bank sizes above this are evaluated per output sample instead.
const MAX_BANK_TAPS: usize = 1 << 22;

#[derive(Debug, Error, PartialEq)]
pub enum ResampleError {
    #[error("non-finite sample {value} at index {index}")]
    NonFiniteInput { index: usize, value: f64 },
    #[error("invalid resampler configuration: {0}")]
    InvalidConfig(String),
    #[error("channel `{label}`: {source}")]
    Channel {
        label: String,
        #[source]
        source: Box<ResampleError>,
    },
    #[error("record has no channels")]
    EmptyRecord,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResamplerConfig {
    pub target: Rate,
    /// Half-length of the filter, counted in samples of the lower of the two rates.
    pub filter_half_width: usize,
    pub kaiser_beta: f64,
    /// Passband edge as a fraction of the lower rate's Nyquist frequency.
    pub cutoff_fraction: f64,
}

impl ResamplerConfig {
    pub fn new(target: Rate) -> Self {
        ResamplerConfig { target, filter_half_width: 32, kaiser_beta: 8.6, cutoff_fraction: 0.9 }
    }

    pub fn validate(&self) -> Result<(), ResampleError> {
        if !self.target.is_positive() {
            return Err(ResampleError::InvalidConfig("target rate must be positive".into()));
        }
        if self.filter_half_width < 8 {
            return Err(ResampleError::InvalidConfig("filter_half_width must be at least 8".into()));
        }
        if !(self.cutoff_fraction > 0.0 && self.cutoff_fraction <= 1.0) {
            return Err(ResampleError::InvalidConfig("cutoff_fraction must lie in (0, 1]".into()));
        }
        if !(self.kaiser_beta.is_finite() && self.kaiser_beta >= 0.0) {
            return Err(ResampleError::InvalidConfig("kaiser_beta must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Low-pass kernel in units of input samples.
struct Kernel {
    /// Cutoff in cycles per input sample.
    cutoff: f64,
    half_width: f64,
    beta: f64,
    i0_beta: f64,
}

impl Kernel {
    fn new(cfg: &ResamplerConfig, up: u64, down: u64) -> Self {
        let scale = (up as f64 / down as f64).min(1.0);
        Kernel {
            cutoff: 0.5 * cfg.cutoff_fraction * scale,
            half_width: cfg.filter_half_width as f64 / scale,
            beta: cfg.kaiser_beta,
            i0_beta: bessel_i0(cfg.kaiser_beta),
        }
    }

    fn eval(&self, t: f64) -> f64 {
        let u = t / self.half_width;
        if u.abs() >= 1.0 {
            return 0.0;
        }
        let window = bessel_i0(self.beta * (1.0 - u * u).sqrt()) / self.i0_beta;
        2.0 * self.cutoff * sinc(2.0 * self.cutoff * t) * window
    }

    /// Taps for input offsets `base - reach + 1 ..= base + reach` at fractional
    /// phase `frac`, normalized to unit DC gain.
    fn taps(&self, frac: f64, reach: i64) -> Vec<f64> {
        let mut taps: Vec<f64> = (-reach + 1..=reach).map(|j| self.eval(frac - j as f64)).collect();
        let sum: f64 = taps.iter().sum();
        if sum != 0.0 {
            taps.iter_mut().for_each(|t| *t /= sum);
        }
        taps
    }
}

/// Output length for `len` input samples converted by `target / orig`.
pub fn resampled_len(len: usize, orig: Rate, target: Rate) -> usize {
    round_half_up(Rational::from_integer(len as u64) * target.0 / orig.0) as usize
}

/// Converts one channel from `orig` to `cfg.target`.
pub fn resample_channel(samples: &[f64], orig: Rate, cfg: &ResamplerConfig) -> Result<Vec<f64>, ResampleError> {
    cfg.validate()?;
    if !orig.is_positive() {
        return Err(ResampleError::InvalidConfig("source rate must be positive".into()));
    }
    if let Some((index, &value)) = samples.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(ResampleError::NonFiniteInput { index, value });
    }
    if orig == cfg.target {
        return Ok(samples.to_vec());
    }

    let ratio = cfg.target.0 / orig.0;
    let (up, down) = (*ratio.numer(), *ratio.denom());
    let out_len = resampled_len(samples.len(), orig, cfg.target);
    let kernel = Kernel::new(cfg, up, down);
    let reach = kernel.half_width.ceil() as i64;
    let n_taps = (2 * reach) as usize;

    let bank: Option<Vec<Vec<f64>>> = if (up as usize).saturating_mul(n_taps) <= MAX_BANK_TAPS {
        Some((0..up).map(|phase| kernel.taps(phase as f64 / up as f64, reach)).collect())
    } else {
        None
    };

    let len = samples.len() as i64;
    let mut out = Vec::with_capacity(out_len);
    for m in 0..out_len as u64 {
        let pos = m as u128 * down as u128;
        let base = (pos / up as u128) as i64;
        let phase = (pos % up as u128) as u64;
        let owned;
        let taps: &[f64] = match &bank {
            Some(bank) => &bank[phase as usize],
            None => {
                owned = kernel.taps(phase as f64 / up as f64, reach);
                &owned
            }
        };
        let first = base - reach + 1;
        let lo = first.max(0);
        let hi = (base + reach).min(len - 1);
        let mut acc = 0.0;
        if lo <= hi {
            for n in lo..=hi {
                acc += samples[n as usize] * taps[(n - first) as usize];
            }
        }
        out.push(acc);
    }
    Ok(out)
}

/// Brings every channel to the target rate and truncates all of them to the
/// shortest resulting length.
pub fn unify_record(record: &SignalRecord, cfg: &ResamplerConfig) -> Result<SignalRecord, ResampleError> {
    if record.channels.is_empty() {
        return Err(ResampleError::EmptyRecord);
    }
    let resampled: Vec<Vec<f64>> = record
        .channels
        .par_iter()
        .map(|ch| {
            resample_channel(&ch.samples, ch.rate, cfg)
                .map_err(|e| ResampleError::Channel { label: ch.label.clone(), source: Box::new(e) })
        })
        .collect::<Result<_, _>>()?;
    let common = resampled.iter().map(Vec::len).min().unwrap_or(0);
    let channels = record
        .channels
        .iter()
        .zip(resampled)
        .map(|(ch, mut s)| {
            s.truncate(common);
            Channel::new(ch.label.clone(), cfg.target, s)
        })
        .collect();
    let duration = Rational::from_integer(common as u64) / cfg.target.0;
    Ok(SignalRecord::new(record.subject_id.clone(), channels, duration))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(hz: u64) -> ResamplerConfig {
        ResamplerConfig::new(Rate::hz(hz))
    }

    #[test]
    fn identity_rate_is_bit_exact() {
        let x: Vec<f64> = (0..100).map(|i| (i as f64).sqrt() * 1.234567).collect();
        assert_eq!(resample_channel(&x, Rate::hz(200), &cfg(200)).unwrap(), x);
    }

    #[test]
    fn zeros_stay_zero() {
        for len in [0, 1, 7, 513] {
            let out = resample_channel(&vec![0.0; len], Rate::hz(256), &cfg(200)).unwrap();
            assert_eq!(out.len(), resampled_len(len, Rate::hz(256), Rate::hz(200)));
            assert!(out.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn output_length_rounds() {
        assert_eq!(resampled_len(2048, Rate::hz(256), Rate::hz(200)), 1600);
        assert_eq!(resampled_len(3, Rate::hz(2), Rate::hz(1)), 2);
        assert_eq!(resampled_len(10, Rate::hz(10), Rate::hz(125)), 125);
    }

    #[test]
    fn dc_is_preserved_in_the_interior() {
        let x = vec![3.5; 1000];
        let out = resample_channel(&x, Rate::hz(50), &cfg(125)).unwrap();
        for v in &out[200..out.len() - 200] {
            assert!((v - 3.5).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn rejects_non_finite() {
        let err = resample_channel(&[0.0, f64::NAN], Rate::hz(100), &cfg(200)).unwrap_err();
        assert!(matches!(err, ResampleError::NonFiniteInput { index: 1, .. }));
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(200);
        c.filter_half_width = 4;
        assert!(c.validate().is_err());
        let mut c = cfg(200);
        c.cutoff_fraction = 0.0;
        assert!(c.validate().is_err());
        assert!(ResamplerConfig::new(Rate::hz(0)).validate().is_err());
    }

    #[test]
    fn bessel_i0_reference_values() {
        // Abramowitz & Stegun table 9.8
        assert!((bessel_i0(0.0) - 1.0).abs() < 1e-15);
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_4).abs() < 1e-14);
        assert!((bessel_i0(5.0) - 27.239_871_823_604_44).abs() < 1e-11);
    }

    #[test]
    fn unify_shhs_style_rates() {
        let seconds = 60u64;
        let ch = |label: &str, hz: u64| Channel::new(label, Rate::hz(hz), (0..hz * seconds).map(|i| (i % 7) as f64).collect());
        let rec = SignalRecord::new(
            "shhs",
            vec![ch("EEG", 125), ch("EOG", 50), ch("THOR", 10)],
            Rational::from_integer(seconds),
        );
        let out = unify_record(&rec, &cfg(125)).unwrap();
        for c in &out.channels {
            assert_eq!(c.rate, Rate::hz(125));
            assert_eq!(c.samples.len(), 125 * 60);
        }
        assert_eq!(out.channels[0].samples, rec.channels[0].samples);
        assert_eq!(out.duration, Rational::from_integer(60));
    }

    #[test]
    fn unify_reports_channel_label() {
        let rec = SignalRecord::new(
            "s",
            vec![Channel::new("EMG", Rate::hz(100), vec![1.0, f64::INFINITY])],
            Rational::new(1, 50),
        );
        match unify_record(&rec, &cfg(200)).unwrap_err() {
            ResampleError::Channel { label, .. } => assert_eq!(label, "EMG"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
