//! Channel-failure simulation.
//!
//! A plan picks round(0.70·|S|) subjects. For each, `k_channels` distinct
//! core EEG channels fail from a uniformly drawn onset `t_fail` to the end of
//! the recording; the failed segment becomes white Gaussian noise or zeros,
//! chosen by a fair coin. Everything before the onset, every other channel,
//! and every non-selected subject is left untouched.

use crate::record::SignalRecord;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;
use thiserror::Error;

/// Core EEG electrodes eligible for failure.
pub const CORE_CHANNELS: [&str; 6] = ["C3", "C4", "F3", "F4", "O1", "O2"];
/// Share of subjects that receive a failure.
pub const AUGMENT_FRACTION: f64 = 0.70;

#[derive(Debug, Error, PartialEq)]
pub enum CorruptError {
    #[error("subject `{subject}` has no channel `{channel}`")]
    MissingChannel { subject: String, channel: String },
    #[error("invalid plan request: {0}")]
    InvalidRequest(String),
    #[error("plan line {line}: {detail}")]
    Parse { line: usize, detail: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FailureMode {
    Noise,
    Zero,
}

impl FailureMode {
    fn as_str(self) -> &'static str {
        match self {
            FailureMode::Noise => "noise",
            FailureMode::Zero => "zero",
        }
    }
}

impl FromStr for FailureMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "noise" => Ok(FailureMode::Noise),
            "zero" => Ok(FailureMode::Zero),
            other => Err(format!("unknown failure mode `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionEntry {
    pub subject: String,
    pub channel: String,
    pub t_fail_s: f64,
    pub mode: FailureMode,
    /// Noise standard deviation; `None` means "pre-onset std of the channel".
    pub noise_sigma: Option<f64>,
    /// Seed of the noise stream for this entry.
    pub noise_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionPlan {
    pub seed: u64,
    pub k_channels: usize,
    pub subject_count: usize,
    pub entries: Vec<CorruptionEntry>,
}

/// `round(0.70 × n)` with halves rounded up.
pub fn augmented_count(n: usize) -> usize {
    (7 * n + 5) / 10
}

/// Draws a plan. Pure in `(subjects, durations, seed, k_channels)`.
pub fn make_plan(
    subjects: &[String],
    durations_s: &[f64],
    seed: u64,
    k_channels: usize,
) -> Result<CorruptionPlan, CorruptError> {
    if subjects.is_empty() {
        return Err(CorruptError::InvalidRequest("no subjects".into()));
    }
    if subjects.len() != durations_s.len() {
        return Err(CorruptError::InvalidRequest(format!(
            "{} subjects but {} durations",
            subjects.len(),
            durations_s.len()
        )));
    }
    if k_channels == 0 || k_channels > CORE_CHANNELS.len() {
        return Err(CorruptError::InvalidRequest(format!("k_channels must be in 1..=6, got {k_channels}")));
    }
    if let Some(d) = durations_s.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
        return Err(CorruptError::InvalidRequest(format!("invalid duration {d}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = sample(&mut rng, subjects.len(), augmented_count(subjects.len())).into_vec();
    chosen.sort_unstable();

    let mut entries = Vec::new();
    for idx in chosen {
        let duration = durations_s[idx];
        let channels = sample(&mut rng, CORE_CHANNELS.len(), k_channels).into_vec();
        for ch in channels {
            let t_fail_s = rng.random_range(0.0..=duration);
            let mode = if rng.random_bool(0.5) { FailureMode::Noise } else { FailureMode::Zero };
            entries.push(CorruptionEntry {
                subject: subjects[idx].clone(),
                channel: CORE_CHANNELS[ch].to_string(),
                t_fail_s,
                mode,
                noise_sigma: None,
                noise_seed: rng.random(),
            });
        }
    }
    Ok(CorruptionPlan { seed, k_channels, subject_count: subjects.len(), entries })
}

impl CorruptionPlan {
    pub fn augmented_subjects(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.subject.as_str()).collect()
    }

    pub fn entries_for<'a>(&'a self, subject: &'a str) -> impl Iterator<Item = &'a CorruptionEntry> + 'a {
        self.entries.iter().filter(move |e| e.subject == subject)
    }

    /// Tab-separated, one entry per line, after `#` header lines.
    pub fn to_text(&self, provenance: Option<&str>) -> String {
        let mut out = String::from("# psgforge corruption plan\n");
        let _ = write!(
            out,
            "# seed={} k_channels={} subjects={} fraction={}",
            self.seed, self.k_channels, self.subject_count, AUGMENT_FRACTION
        );
        if let Some(p) = provenance {
            let _ = write!(out, " provenance={p}");
        }
        out.push('\n');
        out.push_str("subject\tchannel\tt_fail_s\tmode\tsigma\tnoise_seed\n");
        for e in &self.entries {
            let sigma = e.noise_sigma.map_or_else(|| "auto".to_string(), |s| format!("{s:?}"));
            let _ = writeln!(
                out,
                "{}\t{}\t{:?}\t{}\t{}\t{}",
                e.subject,
                e.channel,
                e.t_fail_s,
                e.mode.as_str(),
                sigma,
                e.noise_seed
            );
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, CorruptError> {
        let mut seed = None;
        let mut k_channels = None;
        let mut subject_count = None;
        let mut entries = Vec::new();
        let mut saw_columns = false;
        for (i, line) in text.lines().enumerate() {
            let err = |detail: String| CorruptError::Parse { line: i + 1, detail };
            if let Some(meta) = line.strip_prefix('#') {
                for kv in meta.split_whitespace() {
                    if let Some((k, v)) = kv.split_once('=') {
                        let parse = |v: &str| v.parse::<u64>().map_err(|e| err(format!("{k}: {e}")));
                        match k {
                            "seed" => seed = Some(parse(v)?),
                            "k_channels" => k_channels = Some(parse(v)? as usize),
                            "subjects" => subject_count = Some(parse(v)? as usize),
                            _ => {}
                        }
                    }
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            if !saw_columns {
                saw_columns = true;
                if line.starts_with("subject\t") {
                    continue;
                }
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(err(format!("expected 6 tab-separated fields, found {}", f.len())));
            }
            let t_fail_s: f64 = f[2].parse().map_err(|e| err(format!("t_fail_s: {e}")))?;
            let noise_sigma = match f[4] {
                "auto" => None,
                s => Some(s.parse::<f64>().map_err(|e| err(format!("sigma: {e}")))?),
            };
            entries.push(CorruptionEntry {
                subject: f[0].to_string(),
                channel: f[1].to_string(),
                t_fail_s,
                mode: f[3].parse().map_err(err)?,
                noise_sigma,
                noise_seed: f[5].parse().map_err(|e| err(format!("noise_seed: {e}")))?,
            });
        }
        let missing = |what: &str| CorruptError::Parse { line: 0, detail: format!("header lacks {what}") };
        Ok(CorruptionPlan {
            seed: seed.ok_or_else(|| missing("seed"))?,
            k_channels: k_channels.ok_or_else(|| missing("k_channels"))?,
            subject_count: subject_count.ok_or_else(|| missing("subjects"))?,
            entries,
        })
    }
}

fn onset_index(t_fail_s: f64, rate_hz: f64, len: usize) -> usize {
    let idx = (t_fail_s * rate_hz).ceil();
    if idx <= 0.0 {
        0
    } else {
        (idx as usize).min(len)
    }
}

fn population_std(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Noise level an entry will use: the override, else the std of the
/// pre-onset samples, else (fewer than two pre-onset samples) the std of the
/// whole channel.
pub fn resolve_sigma(record: &SignalRecord, entry: &CorruptionEntry) -> Result<f64, CorruptError> {
    if let Some(s) = entry.noise_sigma {
        return Ok(s);
    }
    let ch = record.channel(&entry.channel).ok_or_else(|| CorruptError::MissingChannel {
        subject: record.subject_id.clone(),
        channel: entry.channel.clone(),
    })?;
    let onset = onset_index(entry.t_fail_s, ch.rate.as_f64(), ch.samples.len());
    Ok(if onset >= 2 { population_std(&ch.samples[..onset]) } else { population_std(&ch.samples) })
}

/// Applies one entry. Samples at `t >= t_fail` are replaced.
pub fn apply_plan(record: &SignalRecord, entry: &CorruptionEntry) -> Result<SignalRecord, CorruptError> {
    let idx = record.channel_index(&entry.channel).ok_or_else(|| CorruptError::MissingChannel {
        subject: record.subject_id.clone(),
        channel: entry.channel.clone(),
    })?;
    let sigma = resolve_sigma(record, entry)?;
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(CorruptError::InvalidRequest(format!("noise sigma {sigma} is not a valid standard deviation")));
    }
    let mut out = record.clone();
    let ch = &mut out.channels[idx];
    let onset = onset_index(entry.t_fail_s, ch.rate.as_f64(), ch.samples.len());
    let tail = &mut ch.samples[onset..];
    match entry.mode {
        FailureMode::Zero => tail.fill(0.0),
        FailureMode::Noise => {
            let normal = Normal::new(0.0, sigma).expect("validated sigma");
            let mut rng = ChaCha8Rng::seed_from_u64(entry.noise_seed);
            tail.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        }
    }
    Ok(out)
}

/// Applies every entry of `plan` that targets this record's subject.
pub fn apply_subject(record: &SignalRecord, plan: &CorruptionPlan) -> Result<SignalRecord, CorruptError> {
    plan.entries_for(&record.subject_id)
        .try_fold(record.clone(), |rec, entry| apply_plan(&rec, entry))
}
