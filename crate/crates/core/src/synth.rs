//! Seeded synthetic recordings and hypnograms for tests and demos.

use crate::edf::{write_edf, EdfError, EdfWriteOptions};
use crate::record::{Channel, Rate, Rational, SignalRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::path::{Path, PathBuf};

/// R&K tokens drawn for synthetic hypnograms, with the occasional movement epoch.
const TOKENS: [&str; 7] = ["W", "S1", "S2", "S3", "S4", "REM", "MOVEMENT"];
const TOKEN_WEIGHTS: [u32; 7] = [20, 10, 35, 8, 7, 18, 2];

#[derive(Clone, Debug)]
pub struct SynthChannel {
    pub label: String,
    pub rate: Rate,
}

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub channels: Vec<SynthChannel>,
    /// Whole seconds per subject.
    pub durations_s: Vec<u64>,
    pub seed: u64,
}

impl SynthSpec {
    /// Six EEG leads at 256 Hz (two under montage names) and an EOG lead at 100 Hz.
    pub fn standard(durations_s: Vec<u64>, seed: u64) -> Self {
        let eeg = |l: &str| SynthChannel { label: l.into(), rate: Rate::hz(256) };
        SynthSpec {
            channels: vec![
                eeg("EEG F3-A2"),
                eeg("F4"),
                eeg("EEG C3-A2"),
                eeg("C4"),
                eeg("O1"),
                eeg("O2"),
                SynthChannel { label: "EOG".into(), rate: Rate::hz(100) },
            ],
            durations_s,
            seed,
        }
    }
}

pub fn subject_name(i: usize) -> String {
    format!("subj{:03}", i + 1)
}

fn subject_rng(seed: u64, subject: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(subject as u64 + 1);
    rng
}

/// Mixture of a few sinusoids plus white noise, tens of microvolts.
pub fn synth_record(spec: &SynthSpec, subject: usize) -> SignalRecord {
    let mut rng = subject_rng(spec.seed, subject);
    let seconds = spec.durations_s[subject];
    let noise = Normal::new(0.0, 5.0).expect("valid normal");
    let channels = spec
        .channels
        .iter()
        .map(|c| {
            let n = (c.rate.0 * Rational::from_integer(seconds)).to_integer() as usize;
            let fs = c.rate.as_f64();
            let tones: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| (rng.random_range(0.5..12.0), rng.random_range(5.0..40.0), rng.random_range(0.0..std::f64::consts::TAU)))
                .collect();
            let samples = (0..n)
                .map(|i| {
                    let t = i as f64 / fs;
                    tones.iter().map(|(f, a, p)| a * (std::f64::consts::TAU * f * t + p).sin()).sum::<f64>() + noise.sample(&mut rng)
                })
                .collect();
            Channel::new(c.label.clone(), c.rate, samples)
        })
        .collect();
    SignalRecord::new(subject_name(subject), channels, Rational::from_integer(seconds))
}

/// One token per full 30 s epoch.
pub fn synth_hypnogram(spec: &SynthSpec, subject: usize) -> Vec<&'static str> {
    let mut rng = subject_rng(spec.seed ^ 0x5151, subject);
    let total: u32 = TOKEN_WEIGHTS.iter().sum();
    (0..spec.durations_s[subject] / 30)
        .map(|_| {
            let mut x = rng.random_range(0..total);
            for (tok, w) in TOKENS.iter().zip(TOKEN_WEIGHTS) {
                if x < w {
                    return *tok;
                }
                x -= w;
            }
            unreachable!("weights cover the range")
        })
        .collect()
}

/// Paths of one generated subject.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthFiles {
    pub subject: String,
    pub edf: PathBuf,
    pub hypnogram: PathBuf,
}

/// Writes `<subject>.edf` and `<subject>.txt` for every subject into `dir`.
pub fn write_fixture(spec: &SynthSpec, dir: &Path) -> Result<Vec<SynthFiles>, EdfError> {
    std::fs::create_dir_all(dir).map_err(|source| EdfError::Io { path: dir.display().to_string(), source })?;
    (0..spec.durations_s.len())
        .map(|i| {
            let record = synth_record(spec, i);
            let subject = record.subject_id.clone();
            let opts = EdfWriteOptions { patient_id: format!("{subject} X X X"), ..Default::default() };
            let edf = dir.join(format!("{subject}.edf"));
            let hypnogram = dir.join(format!("{subject}.txt"));
            let io = |path: &Path, source| EdfError::Io { path: path.display().to_string(), source };
            std::fs::write(&edf, write_edf(&record, &opts)?).map_err(|e| io(&edf, e))?;
            let mut text = synth_hypnogram(spec, i).join("\n");
            text.push('\n');
            std::fs::write(&hypnogram, text).map_err(|e| io(&hypnogram, e))?;
            Ok(SynthFiles { subject, edf, hypnogram })
        })
        .collect()
}

/// Alias map matching the montage names used by [`SynthSpec::standard`].
pub fn standard_aliases() -> std::collections::BTreeMap<String, String> {
    [("EEG F3-A2", "F3"), ("EEG C3-A2", "C3")].into_iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
}
