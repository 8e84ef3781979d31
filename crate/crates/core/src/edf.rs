//! EDF / EDF+ reading and writing.
//!
//! Layout: a 256-byte fixed header, then 256 bytes per signal laid out
//! field-by-field (all labels, then all transducers, ...), then `num_records`
//! data records, each holding `samples_per_record` little-endian `i16` values
//! for every signal in header order.
//!
//! BDF (24-bit) is not supported. Annotation signals (`EDF Annotations`) are
//! parsed as specs but never surface as channels of the [`SignalRecord`].

use crate::record::{parse_rational, Channel, Rate, Rational, SignalRecord};
use chrono::{NaiveDate, NaiveDateTime, NaiveTime};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

pub const ANNOTATION_LABEL: &str = "EDF Annotations";

const FIXED_HEADER_LEN: usize = 256;
const PER_SIGNAL_HEADER_LEN: usize = 256;

#[derive(Debug, Error)]
pub enum EdfError {
    #[error("truncated file: expected at least {expected} bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("malformed header field `{field}`: {detail}")]
    MalformedHeader { field: String, detail: String },
    #[error("degenerate calibration for signal `{label}`")]
    DegenerateCalibration { label: String },
    #[error("missing channel(s): {}", .0.join(", "))]
    MissingChannel(Vec<String>),
    #[error("channel `{0}` requested more than once")]
    DuplicateChannel(String),
    #[error("cannot encode as EDF: {0}")]
    Unencodable(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn malformed(field: &str, detail: impl Into<String>) -> EdfError {
    EdfError::MalformedHeader { field: field.to_string(), detail: detail.into() }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdfHeader {
    pub version: String,
    pub patient_id: String,
    pub recording_id: String,
    pub start: NaiveDateTime,
    pub header_bytes: usize,
    /// `EDF+C` / `EDF+D` for EDF+ files, blank otherwise.
    pub reserved: String,
    pub num_records: u64,
    pub record_duration: Rational,
    pub num_signals: usize,
}

impl EdfHeader {
    pub fn record_duration_s(&self) -> f64 {
        *self.record_duration.numer() as f64 / *self.record_duration.denom() as f64
    }

    pub fn is_edf_plus(&self) -> bool {
        self.reserved.starts_with("EDF+")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSpec {
    pub label: String,
    pub transducer: String,
    pub physical_dim: String,
    pub physical_min: f64,
    pub physical_max: f64,
    pub digital_min: i32,
    pub digital_max: i32,
    pub prefilter: String,
    pub samples_per_record: u64,
}

impl ChannelSpec {
    pub fn gain(&self) -> f64 {
        (self.physical_max - self.physical_min) / f64::from(self.digital_max - self.digital_min)
    }

    /// `physical = (digital - digital_min) * gain + physical_min`
    pub fn to_physical(&self, digital: i16) -> f64 {
        (f64::from(digital) - f64::from(self.digital_min)) * self.gain() + self.physical_min
    }

    pub fn is_annotation(&self) -> bool {
        self.label == ANNOTATION_LABEL
    }

    pub fn rate(&self, record_duration: Rational) -> Rate {
        Rate(Rational::from_integer(self.samples_per_record) / record_duration)
    }

    fn validate(&self) -> Result<(), EdfError> {
        let gain = self.gain();
        if self.digital_max <= self.digital_min
            || !self.physical_min.is_finite()
            || !self.physical_max.is_finite()
            || !gain.is_finite()
            || gain == 0.0
        {
            return Err(EdfError::DegenerateCalibration { label: self.label.clone() });
        }
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize, field: &str) -> Result<&'a str, EdfError> {
        let end = self.pos + len;
        if end > self.bytes.len() {
            return Err(EdfError::TruncatedFile { expected: end, found: self.bytes.len() });
        }
        let raw = &self.bytes[self.pos..end];
        self.pos = end;
        if !raw.is_ascii() {
            return Err(malformed(field, "non-ASCII bytes"));
        }
        // ASCII was checked above, so this cannot fail.
        Ok(std::str::from_utf8(raw).map_err(|e| malformed(field, e.to_string()))?.trim_end())
    }
}

fn parse_int(text: &str, field: &str) -> Result<i64, EdfError> {
    text.trim().parse::<i64>().map_err(|_| malformed(field, format!("not an integer: {text:?}")))
}

fn parse_real(text: &str, field: &str) -> Result<f64, EdfError> {
    let value = text
        .trim()
        .parse::<f64>()
        .map_err(|_| malformed(field, format!("not a number: {text:?}")))?;
    if !value.is_finite() {
        return Err(malformed(field, format!("not finite: {text:?}")));
    }
    Ok(value)
}

fn parse_start(date: &str, time: &str) -> Result<NaiveDateTime, EdfError> {
    let parts = |s: &str, field: &str| -> Result<[u32; 3], EdfError> {
        let v: Vec<&str> = s.trim().split(['.', ':']).collect();
        if v.len() != 3 {
            return Err(malformed(field, format!("expected xx.xx.xx, got {s:?}")));
        }
        let mut out = [0u32; 3];
        for (slot, p) in out.iter_mut().zip(&v) {
            *slot = p.parse().map_err(|_| malformed(field, format!("bad component in {s:?}")))?;
        }
        Ok(out)
    };
    let [d, m, y] = parts(date, "startdate")?;
    let [hh, mm, ss] = parts(time, "starttime")?;
    // EDF two-digit years: 85..=99 are 19xx, everything else 20xx.
    let year = if y >= 85 { 1900 + y } else { 2000 + y } as i32;
    let date = NaiveDate::from_ymd_opt(year, m, d).ok_or_else(|| malformed("startdate", "invalid calendar date"))?;
    let time = NaiveTime::from_hms_opt(hh, mm, ss).ok_or_else(|| malformed("starttime", "invalid clock time"))?;
    Ok(NaiveDateTime::new(date, time))
}

/// Parses a complete EDF/EDF+ byte stream.
///
/// The subject id of the returned record is the first token of the patient
/// field (the EDF+ patient code); [`read_edf`] overrides it with the file stem.
pub fn parse_edf(bytes: &[u8]) -> Result<(EdfHeader, Vec<ChannelSpec>, SignalRecord), EdfError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let version = cur.take(8, "version")?.to_string();
    let patient_id = cur.take(80, "patient")?.to_string();
    let recording_id = cur.take(80, "recording")?.to_string();
    let date = cur.take(8, "startdate")?;
    let time = cur.take(8, "starttime")?;
    let start = parse_start(date, time)?;
    let header_bytes = parse_int(cur.take(8, "header_bytes")?, "header_bytes")?;
    let reserved = cur.take(44, "reserved")?.to_string();
    let num_records_raw = parse_int(cur.take(8, "num_records")?, "num_records")?;
    let duration_text = cur.take(8, "record_duration")?;
    let record_duration = parse_rational(duration_text)
        .ok_or_else(|| malformed("record_duration", format!("not a non-negative number: {duration_text:?}")))?;
    if *record_duration.numer() == 0 {
        return Err(malformed("record_duration", "must be positive"));
    }
    let num_signals = parse_int(cur.take(4, "num_signals")?, "num_signals")?;
    if num_signals < 1 {
        return Err(malformed("num_signals", format!("must be >= 1, got {num_signals}")));
    }
    let ns = num_signals as usize;
    let expected_header = FIXED_HEADER_LEN + PER_SIGNAL_HEADER_LEN * ns;
    if header_bytes != expected_header as i64 {
        return Err(malformed(
            "header_bytes",
            format!("declared {header_bytes}, layout requires {expected_header}"),
        ));
    }

    let mut column = |len: usize, field: &str| -> Result<Vec<String>, EdfError> {
        (0..ns).map(|_| cur.take(len, field).map(|s| s.trim().to_string())).collect()
    };
    let labels = column(16, "label")?;
    let transducers = column(80, "transducer")?;
    let dims = column(8, "physical_dim")?;
    let pmins = column(8, "physical_min")?;
    let pmaxs = column(8, "physical_max")?;
    let dmins = column(8, "digital_min")?;
    let dmaxs = column(8, "digital_max")?;
    let prefilters = column(80, "prefilter")?;
    let sprs = column(8, "samples_per_record")?;
    let _reserved = column(32, "signal_reserved")?;

    let mut specs = Vec::with_capacity(ns);
    for i in 0..ns {
        let spr = parse_int(&sprs[i], "samples_per_record")?;
        if spr < 0 {
            return Err(malformed("samples_per_record", format!("negative for signal {i}")));
        }
        let dmin = parse_int(&dmins[i], "digital_min")?;
        let dmax = parse_int(&dmaxs[i], "digital_max")?;
        let in_i16 = |v: i64| (i64::from(i16::MIN)..=i64::from(i16::MAX)).contains(&v);
        if !in_i16(dmin) || !in_i16(dmax) {
            return Err(malformed("digital_min/max", format!("outside 16-bit range for signal {i}")));
        }
        let spec = ChannelSpec {
            label: labels[i].clone(),
            transducer: transducers[i].clone(),
            physical_dim: dims[i].clone(),
            physical_min: parse_real(&pmins[i], "physical_min")?,
            physical_max: parse_real(&pmaxs[i], "physical_max")?,
            digital_min: dmin as i32,
            digital_max: dmax as i32,
            prefilter: prefilters[i].clone(),
            samples_per_record: spr as u64,
        };
        if !spec.is_annotation() {
            spec.validate()?;
        }
        specs.push(spec);
    }

    let record_len: usize = specs.iter().map(|s| s.samples_per_record as usize * 2).sum();
    let data = &bytes[expected_header..];
    let num_records = match num_records_raw {
        // -1 means "unknown" (recording interrupted); infer from the payload.
        -1 if record_len > 0 => (data.len() / record_len) as u64,
        n if n >= 0 => n as u64,
        n => return Err(malformed("num_records", format!("must be >= 0, got {n}"))),
    };
    let needed = expected_header + record_len * num_records as usize;
    if bytes.len() < needed {
        return Err(EdfError::TruncatedFile { expected: needed, found: bytes.len() });
    }

    let mut samples: Vec<Vec<f64>> = specs
        .iter()
        .map(|s| {
            if s.is_annotation() {
                Vec::new()
            } else {
                Vec::with_capacity(s.samples_per_record as usize * num_records as usize)
            }
        })
        .collect();
    let mut offset = 0usize;
    for _ in 0..num_records {
        for (spec, out) in specs.iter().zip(samples.iter_mut()) {
            let n = spec.samples_per_record as usize;
            let chunk = &data[offset..offset + 2 * n];
            offset += 2 * n;
            if spec.is_annotation() {
                continue;
            }
            out.extend(chunk.chunks_exact(2).map(|b| spec.to_physical(i16::from_le_bytes([b[0], b[1]]))));
        }
    }

    let header = EdfHeader {
        version,
        patient_id: patient_id.clone(),
        recording_id,
        start,
        header_bytes: expected_header,
        reserved,
        num_records,
        record_duration,
        num_signals: ns,
    };
    let channels = specs
        .iter()
        .zip(samples)
        .filter(|(spec, _)| !spec.is_annotation())
        .map(|(spec, s)| Channel::new(spec.label.clone(), spec.rate(record_duration), s))
        .collect();
    let subject = patient_id.split_whitespace().next().unwrap_or("").to_string();
    let duration = record_duration * Rational::from_integer(num_records);
    Ok((header, specs, SignalRecord::new(subject, channels, duration)))
}

/// Reads and parses an EDF file; the subject id becomes the file stem.
pub fn read_edf(path: &Path) -> Result<(EdfHeader, Vec<ChannelSpec>, SignalRecord), EdfError> {
    let bytes = std::fs::read(path).map_err(|source| EdfError::Io { path: path.display().to_string(), source })?;
    let (header, specs, mut record) = parse_edf(&bytes)?;
    if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
        record.subject_id = stem.to_string();
    }
    Ok((header, specs, record))
}

/// Picks `wanted` channels in order, resolving each label either exactly or
/// through `aliases` (file label → canonical label). Every unresolved label is
/// reported; nothing is silently dropped.
pub fn select_channels(
    record: &SignalRecord,
    wanted: &[String],
    aliases: &BTreeMap<String, String>,
) -> Result<SignalRecord, EdfError> {
    let mut seen = std::collections::BTreeSet::new();
    let mut missing = Vec::new();
    let mut channels = Vec::with_capacity(wanted.len());
    for label in wanted {
        if !seen.insert(label.as_str()) {
            return Err(EdfError::DuplicateChannel(label.clone()));
        }
        let found = record.channel(label).or_else(|| {
            record
                .channels
                .iter()
                .find(|c| aliases.get(&c.label).is_some_and(|target| target == label))
        });
        match found {
            Some(ch) => channels.push(Channel::new(label.clone(), ch.rate, ch.samples.clone())),
            None => missing.push(label.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(EdfError::MissingChannel(missing));
    }
    Ok(SignalRecord::new(record.subject_id.clone(), channels, record.duration))
}

/// Header-level metadata for [`write_edf`].
#[derive(Clone, Debug)]
pub struct EdfWriteOptions {
    pub patient_id: String,
    pub recording_id: String,
    pub start: NaiveDateTime,
    pub record_duration: Rational,
    pub physical_dim: String,
}

impl Default for EdfWriteOptions {
    fn default() -> Self {
        EdfWriteOptions {
            patient_id: "X X X X".into(),
            recording_id: "Startdate X X X X".into(),
            start: NaiveDate::from_ymd_opt(2001, 1, 1).unwrap().and_hms_opt(22, 0, 0).unwrap(),
            record_duration: Rational::from_integer(1),
            physical_dim: "uV".into(),
        }
    }
}

fn push_field(out: &mut Vec<u8>, value: &str, width: usize) -> Result<(), EdfError> {
    if !value.is_ascii() || value.len() > width {
        return Err(EdfError::Unencodable(format!("field {value:?} does not fit {width} ASCII bytes")));
    }
    out.extend_from_slice(value.as_bytes());
    out.extend(std::iter::repeat_n(b' ', width - value.len()));
    Ok(())
}

/// Shortest decimal representation of `value` that fits in 8 characters,
/// rounded outward (`down` toward -inf, else toward +inf) so the written
/// range still contains the data.
fn fit8(value: f64, down: bool) -> Result<String, EdfError> {
    for decimals in (0..=7).rev() {
        let scale = 10f64.powi(decimals);
        let rounded = if down { (value * scale).floor() / scale } else { (value * scale).ceil() / scale };
        let text = format!("{rounded:.*}", decimals as usize);
        let text = if text.contains('.') {
            text.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            text
        };
        if text.len() <= 8 {
            return Ok(text);
        }
    }
    Err(EdfError::Unencodable(format!("physical bound {value} does not fit 8 characters")))
}

/// Encodes a record as EDF with full 16-bit digital range. The physical range
/// per channel is the data range (widened when flat). Every channel must hold
/// an integral number of samples per data record.
pub fn write_edf(record: &SignalRecord, opts: &EdfWriteOptions) -> Result<Vec<u8>, EdfError> {
    let ns = record.channels.len();
    if ns == 0 {
        return Err(EdfError::Unencodable("record has no channels".into()));
    }
    let records_ratio = record.duration / opts.record_duration;
    if !records_ratio.is_integer() {
        return Err(EdfError::Unencodable("duration is not a whole number of data records".into()));
    }
    let num_records = records_ratio.to_integer();

    let mut specs = Vec::with_capacity(ns);
    for ch in &record.channels {
        let spr = ch.rate.0 * opts.record_duration;
        if !spr.is_integer() {
            return Err(EdfError::Unencodable(format!("channel {} has fractional samples per record", ch.label)));
        }
        let spr = spr.to_integer();
        if ch.samples.len() as u64 != spr * num_records {
            return Err(EdfError::Unencodable(format!("channel {} sample count disagrees with duration", ch.label)));
        }
        if let Some(bad) = ch.samples.iter().find(|v| !v.is_finite()) {
            return Err(EdfError::Unencodable(format!("channel {} holds non-finite value {bad}", ch.label)));
        }
        let (mut lo, mut hi) = ch.samples.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if ch.samples.is_empty() {
            (lo, hi) = (-1.0, 1.0);
        }
        if hi - lo < 1e-6 {
            lo -= 1.0;
            hi += 1.0;
        }
        // Round-trip through the 8-character text so quantization uses exactly
        // the calibration a reader will see.
        let pmin: f64 = fit8(lo, true)?.parse().expect("formatted number");
        let pmax: f64 = fit8(hi, false)?.parse().expect("formatted number");
        specs.push(ChannelSpec {
            label: ch.label.clone(),
            transducer: String::new(),
            physical_dim: opts.physical_dim.clone(),
            physical_min: pmin,
            physical_max: pmax,
            digital_min: i32::from(i16::MIN),
            digital_max: i32::from(i16::MAX),
            prefilter: String::new(),
            samples_per_record: spr,
        });
    }

    let header_bytes = FIXED_HEADER_LEN + PER_SIGNAL_HEADER_LEN * ns;
    let mut out = Vec::with_capacity(header_bytes);
    push_field(&mut out, "0", 8)?;
    push_field(&mut out, &opts.patient_id, 80)?;
    push_field(&mut out, &opts.recording_id, 80)?;
    push_field(&mut out, &opts.start.format("%d.%m.%y").to_string(), 8)?;
    push_field(&mut out, &opts.start.format("%H.%M.%S").to_string(), 8)?;
    push_field(&mut out, &header_bytes.to_string(), 8)?;
    push_field(&mut out, "", 44)?;
    push_field(&mut out, &num_records.to_string(), 8)?;
    let dur = opts.record_duration;
    let dur_text = if dur.is_integer() {
        dur.to_integer().to_string()
    } else {
        let v = *dur.numer() as f64 / *dur.denom() as f64;
        let text = v.to_string();
        if parse_rational(&text) != Some(dur) {
            return Err(EdfError::Unencodable(format!("record duration {dur} has no exact decimal form")));
        }
        text
    };
    push_field(&mut out, &dur_text, 8)?;
    push_field(&mut out, &ns.to_string(), 4)?;
    for s in &specs {
        push_field(&mut out, &s.label, 16)?;
    }
    for s in &specs {
        push_field(&mut out, &s.transducer, 80)?;
    }
    for s in &specs {
        push_field(&mut out, &s.physical_dim, 8)?;
    }
    for s in &specs {
        push_field(&mut out, &fit8(s.physical_min, true)?, 8)?;
    }
    for s in &specs {
        push_field(&mut out, &fit8(s.physical_max, false)?, 8)?;
    }
    for s in &specs {
        push_field(&mut out, &s.digital_min.to_string(), 8)?;
    }
    for s in &specs {
        push_field(&mut out, &s.digital_max.to_string(), 8)?;
    }
    for s in &specs {
        push_field(&mut out, &s.prefilter, 80)?;
    }
    for s in &specs {
        push_field(&mut out, &s.samples_per_record.to_string(), 8)?;
    }
    for _ in &specs {
        push_field(&mut out, "", 32)?;
    }
    debug_assert_eq!(out.len(), header_bytes);

    for r in 0..num_records as usize {
        for (spec, ch) in specs.iter().zip(&record.channels) {
            let n = spec.samples_per_record as usize;
            let gain = spec.gain();
            for &v in &ch.samples[r * n..(r + 1) * n] {
                let digital = ((v - spec.physical_min) / gain + f64::from(spec.digital_min)).round();
                let digital = digital.clamp(f64::from(spec.digital_min), f64::from(spec.digital_max)) as i16;
                out.extend_from_slice(&digital.to_le_bytes());
            }
        }
    }
    Ok(out)
}
