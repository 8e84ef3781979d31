//! In-memory multi-channel signal container shared by every pipeline stage.

use num_rational::Ratio;
use std::fmt;

/// Exact rational quantity (Hz or seconds). EDF files routinely mix rates like
/// 125 Hz and 10 Hz, and record durations such as 0.5 s, so neither is rounded.
pub type Rational = Ratio<u64>;

/// Sampling rate in Hz, carried exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Rate(pub Rational);

impl Rate {
    pub fn hz(value: u64) -> Self {
        Rate(Rational::from_integer(value))
    }

    pub fn new(numer: u64, denom: u64) -> Self {
        Rate(Rational::new(numer, denom))
    }

    pub fn as_f64(self) -> f64 {
        *self.0.numer() as f64 / *self.0.denom() as f64
    }

    pub fn is_positive(self) -> bool {
        *self.0.numer() > 0
    }

    /// Parses `"200"`, `"0.5"` or `"125/2"`.
    pub fn parse(text: &str) -> Option<Self> {
        parse_rational(text).map(Rate)
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self.0.denom() == 1 {
            write!(f, "{}", self.0.numer())
        } else {
            write!(f, "{}/{}", self.0.numer(), self.0.denom())
        }
    }
}

/// Parses a non-negative decimal (`"30"`, `"0.25"`) or fraction (`"125/2"`)
/// into an exact rational.
pub fn parse_rational(text: &str) -> Option<Rational> {
    let text = text.trim();
    if let Some((n, d)) = text.split_once('/') {
        let n: u64 = n.trim().parse().ok()?;
        let d: u64 = d.trim().parse().ok()?;
        if d == 0 {
            return None;
        }
        return Some(Rational::new(n, d));
    }
    let text = text.strip_prefix('+').unwrap_or(text);
    let (int_part, frac_part) = match text.split_once('.') {
        Some((i, f)) => (i, f),
        None => (text, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.bytes().all(|b| b.is_ascii_digit()) || !frac_part.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if frac_part.len() > 18 {
        return None;
    }
    let int_value: u64 = if int_part.is_empty() { 0 } else { int_part.parse().ok()? };
    let scale = 10u64.pow(frac_part.len() as u32);
    let frac_value: u64 = if frac_part.is_empty() { 0 } else { frac_part.parse().ok()? };
    let numer = int_value.checked_mul(scale)?.checked_add(frac_value)?;
    Some(Rational::new(numer, scale))
}

/// Rounds a non-negative rational to the nearest integer, halves up.
pub fn round_half_up(value: Rational) -> u64 {
    let (n, d) = (*value.numer() as u128, *value.denom() as u128);
    ((2 * n + d) / (2 * d)) as u64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Channel {
    pub label: String,
    pub rate: Rate,
    /// Physical values (µV for EEG).
    pub samples: Vec<f64>,
}

impl Channel {
    pub fn new(label: impl Into<String>, rate: Rate, samples: Vec<f64>) -> Self {
        Channel { label: label.into(), rate, samples }
    }
}

/// A multi-channel recording. Immutable once built; stages return new values.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalRecord {
    pub subject_id: String,
    pub channels: Vec<Channel>,
    /// Total recording length in seconds.
    pub duration: Rational,
}

impl SignalRecord {
    pub fn new(subject_id: impl Into<String>, channels: Vec<Channel>, duration: Rational) -> Self {
        SignalRecord { subject_id: subject_id.into(), channels, duration }
    }

    pub fn duration_s(&self) -> f64 {
        *self.duration.numer() as f64 / *self.duration.denom() as f64
    }

    pub fn channel(&self, label: &str) -> Option<&Channel> {
        self.channels.iter().find(|c| c.label == label)
    }

    pub fn channel_index(&self, label: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.label == label)
    }

    pub fn labels(&self) -> Vec<&str> {
        self.channels.iter().map(|c| c.label.as_str()).collect()
    }

    /// Expected sample count for a channel at `rate` given the record duration.
    pub fn expected_len(&self, rate: Rate) -> u64 {
        round_half_up(rate.0 * self.duration)
    }
}
