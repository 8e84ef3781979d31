//! EDF files assembled byte by byte here, independently of the library writer.

use psgforge_core::edf::{parse_edf, select_channels, write_edf, EdfError, EdfWriteOptions, ANNOTATION_LABEL};
use psgforge_core::record::{Rate, Rational};
use std::collections::BTreeMap;

struct Sig {
    label: &'static str,
    pmin: &'static str,
    pmax: &'static str,
    dmin: i32,
    dmax: i32,
    spr: usize,
}

fn field(out: &mut Vec<u8>, text: &str, width: usize) {
    assert!(text.len() <= width);
    out.extend_from_slice(text.as_bytes());
    out.resize(out.len() + width - text.len(), b' ');
}

/// `data[record][signal]` holds that record's digital samples.
fn build(sigs: &[Sig], num_records: &str, duration: &str, data: &[Vec<Vec<i16>>]) -> Vec<u8> {
    let mut b = Vec::new();
    field(&mut b, "0", 8);
    field(&mut b, "P001 M 01-JAN-1970 X", 80);
    field(&mut b, "Startdate 02-MAR-2004 X X X", 80);
    field(&mut b, "02.03.04", 8);
    field(&mut b, "23.15.00", 8);
    field(&mut b, &(256 + 256 * sigs.len()).to_string(), 8);
    field(&mut b, "", 44);
    field(&mut b, num_records, 8);
    field(&mut b, duration, 8);
    field(&mut b, &sigs.len().to_string(), 4);
    for s in sigs {
        field(&mut b, s.label, 16);
    }
    for _ in sigs {
        field(&mut b, "AgAgCl electrode", 80);
    }
    for _ in sigs {
        field(&mut b, "uV", 8);
    }
    for s in sigs {
        field(&mut b, s.pmin, 8);
    }
    for s in sigs {
        field(&mut b, s.pmax, 8);
    }
    for s in sigs {
        field(&mut b, &s.dmin.to_string(), 8);
    }
    for s in sigs {
        field(&mut b, &s.dmax.to_string(), 8);
    }
    for _ in sigs {
        field(&mut b, "HP:0.1Hz", 80);
    }
    for s in sigs {
        field(&mut b, &s.spr.to_string(), 8);
    }
    for _ in sigs {
        field(&mut b, "", 32);
    }
    assert_eq!(b.len(), 256 + 256 * sigs.len());
    for rec in data {
        for (s, samples) in sigs.iter().zip(rec) {
            assert_eq!(samples.len(), s.spr);
            for v in samples {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    b
}

fn two_signal_fixture() -> (Vec<Sig>, Vec<Vec<Vec<i16>>>) {
    let sigs = vec![
        Sig { label: "EEG C3-A2", pmin: "-200", pmax: "200", dmin: -2048, dmax: 2047, spr: 100 },
        Sig { label: "EOG", pmin: "-500", pmax: "500", dmin: -32768, dmax: 32767, spr: 100 },
    ];
    let data = (0..3)
        .map(|r| {
            vec![
                (0..100).map(|i| (((r * 100 + i) * 37) % 4096) as i16 - 2048).collect(),
                (0..100).map(|i| ((r * 100 + i) as i16).wrapping_mul(211)).collect(),
            ]
        })
        .collect();
    (sigs, data)
}

fn physical(d: i16, s: &Sig) -> f64 {
    let pmin: f64 = s.pmin.parse().unwrap();
    let pmax: f64 = s.pmax.parse().unwrap();
    (f64::from(d) - f64::from(s.dmin)) * (pmax - pmin) / f64::from(s.dmax - s.dmin) + pmin
}

#[test]
fn two_signals_three_records() {
    let (sigs, data) = two_signal_fixture();
    let bytes = build(&sigs, "3", "1", &data);
    let (header, specs, rec) = parse_edf(&bytes).unwrap();
    assert_eq!(header.num_records, 3);
    assert_eq!(header.num_signals, 2);
    assert_eq!(header.start.to_string(), "2004-03-02 23:15:00");
    assert_eq!(specs[1].samples_per_record, 100);
    assert_eq!(rec.subject_id, "P001");
    assert_eq!(rec.duration, Rational::from_integer(3));
    assert_eq!(rec.channels.len(), 2);
    for (c, s) in sigs.iter().enumerate() {
        assert_eq!(rec.channels[c].label, s.label);
        assert_eq!(rec.channels[c].rate, Rate::hz(100));
        assert_eq!(rec.channels[c].samples.len(), 300);
        for (r, record) in data.iter().enumerate() {
            for (i, &digital) in record[c].iter().enumerate() {
                let got = rec.channels[c].samples[r * 100 + i];
                let want = physical(digital, s);
                assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{c} {r} {i}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn calibration_endpoints_are_exact() {
    let sigs = vec![Sig { label: "C4", pmin: "-187.5", pmax: "312.25", dmin: -1000, dmax: 3000, spr: 2 }];
    let bytes = build(&sigs, "1", "1", &[vec![vec![-1000, 3000]]]);
    let (_, _, rec) = parse_edf(&bytes).unwrap();
    assert_eq!(rec.channels[0].samples, vec![-187.5, 312.25]);
}

#[test]
fn zero_records_is_empty_not_error() {
    let (sigs, _) = two_signal_fixture();
    let (h, _, rec) = parse_edf(&build(&sigs, "0", "1", &[])).unwrap();
    assert_eq!(h.num_records, 0);
    assert!(rec.channels.iter().all(|c| c.samples.is_empty()));
}

#[test]
fn unknown_record_count_is_inferred() {
    let (sigs, data) = two_signal_fixture();
    let (h, _, rec) = parse_edf(&build(&sigs, "-1", "1", &data)).unwrap();
    assert_eq!(h.num_records, 3);
    assert_eq!(rec.channels[0].samples.len(), 300);
}

#[test]
fn fractional_rates_stay_rational() {
    // 25 samples per 2 s record: 12.5 Hz
    let sigs = vec![Sig { label: "Resp", pmin: "-1", pmax: "1", dmin: -100, dmax: 100, spr: 25 }];
    let (_, _, rec) = parse_edf(&build(&sigs, "2", "2", &[vec![vec![0; 25]], vec![vec![0; 25]]])).unwrap();
    assert_eq!(rec.channels[0].rate, Rate::new(25, 2));
    assert_eq!(rec.channels[0].samples.len(), 50);
}

#[test]
fn annotation_signal_is_skipped() {
    let (mut sigs, data) = two_signal_fixture();
    sigs.push(Sig { label: ANNOTATION_LABEL, pmin: "-1", pmax: "1", dmin: -32768, dmax: 32767, spr: 30 });
    let data: Vec<_> = data
        .into_iter()
        .map(|mut r| {
            r.push(vec![0; 30]);
            r
        })
        .collect();
    let (_, specs, rec) = parse_edf(&build(&sigs, "3", "1", &data)).unwrap();
    assert_eq!(specs.len(), 3);
    assert_eq!(rec.labels(), vec!["EEG C3-A2", "EOG"]);
}

#[test]
fn truncated_payload() {
    let (sigs, data) = two_signal_fixture();
    let mut bytes = build(&sigs, "3", "1", &data);
    bytes.truncate(bytes.len() - 1);
    match parse_edf(&bytes) {
        Err(EdfError::TruncatedFile { expected, found }) => assert_eq!(expected, found + 1),
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(parse_edf(&bytes[..100]), Err(EdfError::TruncatedFile { .. })));
}

#[test]
fn non_numeric_header_field() {
    let (sigs, data) = two_signal_fixture();
    let bytes = build(&sigs, "three", "1", &data);
    assert!(matches!(parse_edf(&bytes), Err(EdfError::MalformedHeader { .. })));
}

#[test]
fn equal_digital_bounds_are_degenerate() {
    let sigs = vec![Sig { label: "F3", pmin: "-1", pmax: "1", dmin: 5, dmax: 5, spr: 1 }];
    assert!(matches!(parse_edf(&build(&sigs, "1", "1", &[vec![vec![5]]])), Err(EdfError::DegenerateCalibration { .. })));
}

#[test]
fn select_with_alias_and_missing() {
    let (sigs, data) = two_signal_fixture();
    let (_, _, rec) = parse_edf(&build(&sigs, "3", "1", &data)).unwrap();
    let aliases: BTreeMap<String, String> = [("EEG C3-A2".to_string(), "C3".to_string())].into();
    let sel = select_channels(&rec, &["C3".to_string()], &aliases).unwrap();
    assert_eq!(sel.labels(), vec!["C3"]);
    assert_eq!(sel.channels[0].samples, rec.channels[0].samples);

    let same = select_channels(&rec, &["EEG C3-A2".to_string(), "EOG".to_string()], &BTreeMap::new()).unwrap();
    assert_eq!(same, rec);

    match select_channels(&rec, &["XX".to_string(), "EOG".to_string(), "YY".to_string()], &aliases) {
        Err(EdfError::MissingChannel(m)) => assert_eq!(m, vec!["XX", "YY"]),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn library_writer_round_trips_within_one_step() {
    let (sigs, data) = two_signal_fixture();
    let (_, specs, rec) = parse_edf(&build(&sigs, "3", "1", &data)).unwrap();
    let again = write_edf(&rec, &EdfWriteOptions::default()).unwrap();
    let (_, specs2, rec2) = parse_edf(&again).unwrap();
    for c in 0..2 {
        let step = specs[c].gain().abs().max(specs2[c].gain().abs());
        for (a, b) in rec.channels[c].samples.iter().zip(&rec2.channels[c].samples) {
            assert!((a - b).abs() <= step, "channel {c}: {a} vs {b}");
        }
    }
}
