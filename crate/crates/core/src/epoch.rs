//! Fixed-length epoching and per-epoch, per-channel min-max scaling to [-1, 1].

use crate::record::{Rational, SignalRecord};
use crate::stage::SleepStage;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EpochError {
    #[error("channels disagree on rate or length (channel `{0}`)")]
    Misaligned(String),
    #[error("epoch of {seconds} s at {rate} Hz is not a whole number of samples")]
    FractionalEpoch { seconds: u32, rate: String },
    #[error("non-finite value {value} in channel {channel} at sample {index}")]
    NonFiniteInput { channel: usize, index: usize, value: f64 },
    #[error("record has no channels")]
    Empty,
}

/// Channel-major `channels × len` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMatrix {
    pub channels: usize,
    pub len: usize,
    pub data: Vec<f64>,
}

impl EpochMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let channels = rows.len();
        let len = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == len), "ragged epoch rows");
        EpochMatrix { channels, len, data: rows.concat() }
    }

    pub fn row(&self, c: usize) -> &[f64] {
        &self.data[c * self.len..(c + 1) * self.len]
    }

    pub fn row_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.len..(c + 1) * self.len]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.channels).map(move |c| self.row(c))
    }
}

/// One scaled epoch ready for rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochTensor {
    pub data: EpochMatrix,
    /// 1-based position in the recording.
    pub epoch_index: usize,
    pub subject_id: String,
    pub label: Option<SleepStage>,
}

/// Samples per epoch, `t_epoch_s × f_target`; must be integral.
pub fn samples_per_epoch(record: &SignalRecord, t_epoch_s: u32) -> Result<usize, EpochError> {
    let first = record.channels.first().ok_or(EpochError::Empty)?;
    let n = first.rate.0 * Rational::from_integer(u64::from(t_epoch_s));
    if !n.is_integer() {
        return Err(EpochError::FractionalEpoch { seconds: t_epoch_s, rate: first.rate.to_string() });
    }
    Ok(n.to_integer() as usize)
}

/// Splits a rate-unified record into consecutive non-overlapping epochs.
/// A trailing partial epoch is dropped. A record shorter than one epoch
/// yields no epochs (logged, not an error).
pub fn epoch_signal(record: &SignalRecord, t_epoch_s: u32) -> Result<Vec<EpochMatrix>, EpochError> {
    let n_epoch = samples_per_epoch(record, t_epoch_s)?;
    let first = &record.channels[0];
    for ch in &record.channels {
        if ch.rate != first.rate || ch.samples.len() != first.samples.len() {
            return Err(EpochError::Misaligned(ch.label.clone()));
        }
    }
    let total = first.samples.len();
    if n_epoch == 0 || n_epoch > total {
        tracing::warn!(subject = %record.subject_id, n_epoch, total, "recording shorter than one epoch");
        return Ok(Vec::new());
    }
    let count = total / n_epoch;
    Ok((0..count)
        .map(|i| {
            let span = i * n_epoch..(i + 1) * n_epoch;
            EpochMatrix::from_rows(record.channels.iter().map(|ch| ch.samples[span.clone()].to_vec()).collect())
        })
        .collect())
}

/// Scales each row independently: `2 (x - min) / (max - min) - 1`.
/// A flat row becomes all zeros.
pub fn scale_epoch(raw: &EpochMatrix) -> Result<EpochMatrix, EpochError> {
    let mut out = raw.clone();
    for c in 0..raw.channels {
        let row = raw.row(c);
        if let Some((index, &value)) = row.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(EpochError::NonFiniteInput { channel: c, index, value });
        }
        let (lo, hi) = row.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let dst = out.row_mut(c);
        if row.is_empty() {
            continue;
        }
        if hi == lo {
            dst.fill(0.0);
            continue;
        }
        let span = hi - lo;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = 2.0 * (v - lo) / span - 1.0;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::{Channel, Rate};
    use proptest::prelude::*;

    fn record(len: usize, hz: u64) -> SignalRecord {
        let ch = |l: &str| Channel::new(l, Rate::hz(hz), (0..len).map(|i| i as f64).collect());
        SignalRecord::new("s", vec![ch("A"), ch("B")], Rational::new(len as u64, hz))
    }

    #[test]
    fn thirty_seconds_at_200_hz() {
        assert_eq!(samples_per_epoch(&record(10, 200), 30).unwrap(), 6000);
    }

    #[test]
    fn trailing_remainder_dropped() {
        let rec = record(3 * 6000 + 17, 200);
        let epochs = epoch_signal(&rec, 30).unwrap();
        assert_eq!(epochs.len(), 3);
        assert_eq!(epochs[2].row(1)[0], 12000.0);
        assert_eq!(epochs[2].len, 6000);
    }

    #[test]
    fn exact_single_epoch_is_the_input() {
        let rec = record(6000, 200);
        let epochs = epoch_signal(&rec, 30).unwrap();
        assert_eq!(epochs.len(), 1);
        assert_eq!(epochs[0].row(0), rec.channels[0].samples.as_slice());
    }

    #[test]
    fn too_short_yields_nothing() {
        assert!(epoch_signal(&record(5999, 200), 30).unwrap().is_empty());
    }

    #[test]
    fn fractional_epoch_rejected() {
        let ch = Channel::new("A", Rate::new(1, 7), vec![0.0; 10]);
        let rec = SignalRecord::new("s", vec![ch], Rational::from_integer(70));
        assert!(matches!(epoch_signal(&rec, 30), Err(EpochError::FractionalEpoch { .. })));
    }

    #[test]
    fn misaligned_channels_rejected() {
        let mut rec = record(6000, 200);
        rec.channels[1].samples.pop();
        assert_eq!(epoch_signal(&rec, 30), Err(EpochError::Misaligned("B".into())));
    }

    #[test]
    fn scaling_examples() {
        let m = EpochMatrix::from_rows(vec![vec![0.0, 5.0, 10.0], vec![7.0, 7.0, 7.0]]);
        let s = scale_epoch(&m).unwrap();
        assert_eq!(s.row(0), &[-1.0, 0.0, 1.0]);
        assert_eq!(s.row(1), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn scaling_rejects_nan() {
        let m = EpochMatrix::from_rows(vec![vec![0.0, f64::NAN]]);
        assert!(matches!(scale_epoch(&m), Err(EpochError::NonFiniteInput { channel: 0, index: 1, .. })));
    }

    fn non_flat_row() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1e4f64..1e4, 2..64).prop_filter("non-flat", |v| {
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            hi - lo > 1e-3
        })
    }

    proptest! {
        #[test]
        fn scaled_rows_hit_both_bounds(row in non_flat_row()) {
            let s = scale_epoch(&EpochMatrix::from_rows(vec![row])).unwrap();
            let r = s.row(0);
            prop_assert_eq!(r.iter().cloned().fold(f64::INFINITY, f64::min), -1.0);
            prop_assert_eq!(r.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 1.0);
        }

        #[test]
        fn affine_invariance(
            row in prop::collection::vec(-100f64..100.0, 2..64).prop_filter("span", |v| {
                v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min) > 10.0
            }),
            a in 0.5f64..2.0,
            b in -50f64..50.0,
        ) {
            let base = scale_epoch(&EpochMatrix::from_rows(vec![row.clone()])).unwrap();
            let moved = scale_epoch(&EpochMatrix::from_rows(vec![row.iter().map(|v| a * v + b).collect()])).unwrap();
            for (x, y) in base.data.iter().zip(&moved.data) {
                prop_assert!((x - y).abs() <= 1e-12, "{} vs {}", x, y);
            }
        }

        #[test]
        fn anti_symmetry_and_idempotence(row in non_flat_row()) {
            let base = scale_epoch(&EpochMatrix::from_rows(vec![row.clone()])).unwrap();
            let neg = scale_epoch(&EpochMatrix::from_rows(vec![row.iter().map(|v| -v).collect()])).unwrap();
            for (x, y) in base.data.iter().zip(&neg.data) {
                prop_assert!((x + y).abs() <= 1e-12);
            }
            prop_assert_eq!(scale_epoch(&base).unwrap(), base);
        }

        #[test]
        fn epoch_count_bounds(len in 0usize..20_000) {
            let rec = record(len, 100);
            let n = epoch_signal(&rec, 30).unwrap().len();
            prop_assert!(n * 3000 <= len && len < (n + 1) * 3000);
        }
    }
}
