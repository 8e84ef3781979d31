mod common;

use common::{max_rel_err, numeric_grads, random_layer, random_matrix, rng};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use psgforge_core::tune::{lora_forward, lora_grads, lr_at, trainable_params, LoraLayer, LrSchedule, TrainingDefaults, TuneError};
use rand::Rng;

#[test]
fn forward_matches_dense_weight() {
    let mut r = rng(8);
    for _ in 0..50 {
        let layer = random_layer(&mut r, 8, 6, 2);
        let x = DVector::from_fn(6, |_, _| r.random_range(-2.0..2.0));
        let h = lora_forward(&layer, &x).unwrap();
        // dense oracle: build W entry by entry
        let s = layer.alpha / 2.0;
        let mut w = layer.w0.clone();
        for i in 0..8 {
            for j in 0..6 {
                for q in 0..2 {
                    w[(i, j)] += s * layer.b[(i, q)] * layer.a[(q, j)];
                }
            }
        }
        let dense = &w * &x;
        for i in 0..8 {
            assert!((h[i] - dense[i]).abs() <= 1e-12, "{} vs {}", h[i], dense[i]);
        }
    }
}

#[test]
fn zero_b_is_the_frozen_layer() {
    let mut r = rng(1);
    let w0 = random_matrix(&mut r, 5, 4);
    let layer = LoraLayer::new(w0.clone(), random_matrix(&mut r, 2, 4), DMatrix::zeros(5, 2), 16.0).unwrap();
    let x = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
    assert_eq!(lora_forward(&layer, &x).unwrap(), &w0 * &x);
}

#[test]
fn unit_scaling_when_alpha_equals_rank() {
    let mut r = rng(2);
    let layer = LoraLayer::new(random_matrix(&mut r, 5, 4), random_matrix(&mut r, 3, 4), random_matrix(&mut r, 5, 3), 3.0).unwrap();
    let x = DVector::from_vec(vec![0.1, 0.2, 0.3, 0.4]);
    let want = &layer.w0 * &x + &layer.b * (&layer.a * &x);
    assert!((lora_forward(&layer, &x).unwrap() - want).amax() <= 1e-15);
}

#[test]
fn shape_errors() {
    let mut r = rng(3);
    let layer = random_layer(&mut r, 4, 3, 1);
    assert!(matches!(lora_forward(&layer, &DVector::zeros(4)), Err(TuneError::ShapeMismatch(_))));
    assert!(LoraLayer::new(DMatrix::zeros(4, 3), DMatrix::zeros(1, 4), DMatrix::zeros(4, 1), 1.0).is_err());
    assert_eq!(
        LoraLayer::new(DMatrix::zeros(4, 3), DMatrix::zeros(3, 3), DMatrix::zeros(4, 3), 1.0),
        Err(TuneError::RankTooLarge { rank: 3, limit: 3 })
    );
}

#[test]
fn gradients_match_central_differences() {
    let mut r = rng(77);
    for (d, k, rank) in [(8, 6, 2), (5, 7, 3), (10, 4, 1), (6, 6, 4)] {
        let layer = random_layer(&mut r, d, k, rank);
        let x = DVector::from_fn(k, |_, _| r.random_range(-1.0..1.0));
        let u = DVector::from_fn(d, |_, _| r.random_range(-1.0..1.0));
        let (ga, gb) = lora_grads(&layer, &x, &u).unwrap();
        let (na, nb) = numeric_grads(&layer, &x, &u, 1e-5);
        assert!(max_rel_err(&ga, &na, 1e-3) <= 1e-5, "dA {d}x{k} r{rank}");
        assert!(max_rel_err(&gb, &nb, 1e-3) <= 1e-5, "dB {d}x{k} r{rank}");
    }
}

#[test]
fn parameter_accounting() {
    assert_eq!(trainable_params(4096, 4096, 16), Ok(131_072));
    assert_eq!(trainable_params(4096, 4096, TrainingDefaults::default().lora_rank), Ok(131_072));
    assert_eq!(trainable_params(8, 6, 6), Err(TuneError::RankTooLarge { rank: 6, limit: 6 }));
}

#[test]
fn schedule_endpoints_and_junction() {
    let s = LrSchedule::new(1e-4, 1e-6, 1000, 0.1).unwrap();
    assert_eq!(s.warmup_steps, 100);
    assert_eq!(lr_at(&s, 0).unwrap(), 0.0);
    assert_eq!(lr_at(&s, 100).unwrap(), 1e-4);
    assert_eq!(lr_at(&s, 1000).unwrap(), 1e-6);
    assert!(matches!(lr_at(&s, 1001), Err(TuneError::StepOutOfRange { .. })));
    // 0.1 * 25 = 2.5 rounds up to 3
    assert_eq!(LrSchedule::with_defaults(1e-4, 25).unwrap().warmup_steps, 3);
}

proptest! {
    #[test]
    fn schedule_shape(total in 20u64..5000, eta_max in 1e-6f64..1e-2, floor_frac in 0.0f64..1.0) {
        let s = LrSchedule::new(eta_max, eta_max * floor_frac, total, 0.1).unwrap();
        let lr: Vec<f64> = (0..=total).map(|t| lr_at(&s, t).unwrap()).collect();
        for t in 1..=s.warmup_steps as usize {
            prop_assert!(lr[t] > lr[t - 1]);
        }
        for t in s.warmup_steps as usize + 1..=total as usize {
            prop_assert!(lr[t] <= lr[t - 1]);
        }
        prop_assert_eq!(lr[s.warmup_steps as usize], eta_max);
        prop_assert_eq!(lr[total as usize], eta_max * floor_frac);
    }
}
