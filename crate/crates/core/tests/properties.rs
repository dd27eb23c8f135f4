use proptest::prelude::*;

use sit_core::backbone::{decode_sitf, encode_sitf, FeatureMap, Provenance};
use sit_core::gradcheck::{grad_check, GradCheckOptions};
use sit_core::layer::{LayerNorm, Linear};
use sit_core::ops::{self, Mode};
use sit_core::train::adam::{adam_step, AdamState};
use sit_core::train::{compute_metrics, mse_loss, EarlyStopState, SchedulerState, StopDecision};
use sit_core::transformer::{MultiHeadAttention, TransformerBlock};
use sit_core::{RngStream, Tensor};

fn tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = RngStream::new(seed);
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = rng.uniform(lo, hi));
    t
}

/// Epochs (1-based) at which the learning rate is cut, derived from the loss
/// sequence by looking back at the last improvement or cut.
fn oracle_lr(losses: &[f64], lr0: f64, patience: usize, factor: f64) -> Vec<f64> {
    let mut last_event = 0;
    let mut lr = lr0;
    let mut out = Vec::new();
    for t in 1..=losses.len() {
        let prefix_min = losses[..t - 1].iter().copied().fold(f64::INFINITY, f64::min);
        if losses[t - 1] < prefix_min {
            last_event = t;
        } else if t - last_event == patience {
            lr *= factor;
            last_event = t;
        }
        out.push(lr);
    }
    out
}

/// Stop epoch and restored epoch: the first epoch lying `patience` epochs
/// past the first occurrence of the running minimum.
fn oracle_stop(losses: &[f64], patience: usize) -> (Option<usize>, usize) {
    let argmin = |upto: usize| {
        let mut best = 0;
        for i in 1..upto {
            if losses[i] < losses[best] {
                best = i;
            }
        }
        best
    };
    for t in 1..=losses.len() {
        if t - 1 - argmin(t) >= patience {
            return (Some(t), argmin(t) + 1);
        }
    }
    (None, argmin(losses.len()) + 1)
}

fn loss_sequence() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![0.0..2.0f64, Just(1.0), Just(0.5)], 1..80)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn scheduler_matches_lookback_oracle(losses in loss_sequence(), patience in 1usize..8) {
        let mut s = SchedulerState::new(1e-4, patience, 0.5);
        let got: Vec<f64> = losses.iter().map(|&l| s.update(l)).collect();
        prop_assert_eq!(got, oracle_lr(&losses, 1e-4, patience, 0.5));
    }

    #[test]
    fn early_stop_matches_argmin_oracle(losses in loss_sequence(), patience in 1usize..12) {
        let mut e = EarlyStopState::new(patience);
        let mut stopped = None;
        for (i, &l) in losses.iter().enumerate() {
            if e.update(i + 1, l, &(i + 1)) == StopDecision::Stop {
                stopped = Some(i + 1);
                break;
            }
        }
        let (stop, restored) = oracle_stop(&losses, patience);
        prop_assert_eq!(stopped, stop);
        prop_assert_eq!(e.restore().copied(), Some(restored));
    }

    #[test]
    fn metrics_match_direct_summation(
        pairs in prop::collection::vec((1.0..5.0f64, 0.0..6.0f64), 3..60)
    ) {
        let (y, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let n = y.len() as f64;
        let mae: f64 = y.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
        let rmse = (y.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n).sqrt();
        let (sy, sp) = (y.iter().sum::<f64>(), p.iter().sum::<f64>());
        let sxy: f64 = y.iter().zip(&p).map(|(a, b)| a * b).sum();
        let (syy, spp): (f64, f64) = (y.iter().map(|a| a * a).sum(), p.iter().map(|b| b * b).sum());
        let pc = (n * sxy - sy * sp) / ((n * syy - sy * sy).sqrt() * (n * spp - sp * sp).sqrt());
        let m = compute_metrics(&y, &p).unwrap();
        prop_assert!((m.mae - mae).abs() <= 1e-12);
        prop_assert!((m.rmse - rmse).abs() <= 1e-12);
        prop_assert!((m.pearson - pc).abs() <= 1e-9, "{} vs {}", m.pearson, pc);
        prop_assert!(m.rmse >= m.mae && m.mae >= 0.0);
        prop_assert!((-1.0..=1.0).contains(&m.pearson));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pearson_is_invariant_under_positive_affine_maps(
        pairs in prop::collection::vec((1.0..5.0f64, 0.0..6.0f64), 3..40),
        a in 0.5..4.0f64,
        b in -3.0..3.0f64,
    ) {
        let (y, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let q: Vec<f64> = p.iter().map(|v| a * v + b).collect();
        let m1 = compute_metrics(&y, &p).unwrap();
        let m2 = compute_metrics(&y, &q).unwrap();
        prop_assert!((m1.pearson - m2.pearson).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..10, seed in any::<u64>(), scale in 0.1..50.0f64) {
        let x = tensor(&[rows, cols], seed, -scale, scale);
        let y = ops::softmax_rows(&x).unwrap();
        for i in 0..rows {
            prop_assert!((y.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(y.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn layer_norm_standardises_rows(rows in 1usize..5, cols in 2usize..40, seed in any::<u64>(), spread in 0.5..100.0f64) {
        let x = tensor(&[rows, cols], seed, -spread, spread);
        let ln = LayerNorm::new(cols);
        let (y, _) = ops::layer_norm(&x, &ln.gamma, &ln.beta, ln.eps).unwrap();
        for i in 0..rows {
            let r = y.row(i);
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn mse_is_nonnegative_and_zero_on_identity(y in prop::collection::vec(-5.0..5.0f64, 1..30)) {
        prop_assert_eq!(mse_loss(&y, &y).unwrap(), 0.0);
        let shifted: Vec<f64> = y.iter().map(|v| v + 1.0).collect();
        prop_assert!((mse_loss(&y, &shifted).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_adam_step_is_bitwise_identity(seed in any::<u64>(), steps in 1usize..5) {
        let mut p = tensor(&[4, 3], seed, -2.0, 2.0);
        let before = p.clone();
        let mut st = AdamState::new([p.shape()]);
        for _ in 0..steps {
            adam_step(&mut [&mut p], &[Tensor::zeros(&[4, 3])], &mut st, 1e-4).unwrap();
        }
        prop_assert!(p.data().iter().zip(before.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn sitf_roundtrip_is_bitwise(h in 1usize..6, w in 1usize..6, c in 1usize..9, seed in any::<u64>()) {
        let mut t = tensor(&[h, w, c], seed, -3.0, 3.0);
        t.data_mut().iter_mut().for_each(|v| *v = f64::from(*v as f32));
        let fm = FeatureMap::new(t, Provenance::Precomputed).unwrap();
        let bytes = encode_sitf(&fm).unwrap();
        let back = decode_sitf(&bytes, Some([h, w, c])).unwrap();
        prop_assert_eq!(encode_sitf(&back).unwrap(), bytes);
        prop_assert!(back.data.data().iter().zip(fm.data.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_layers_pass_gradient_check(seed in any::<u64>()) {
        let opts = GradCheckOptions { seed, max_coords: 12, ..Default::default() };
        let x = tensor(&[3, 8], seed, -1.5, 1.5);
        let mut lin = Linear::new(8, 5, &mut RngStream::new(seed));
        prop_assert!(grad_check(&mut lin, &x, &opts).unwrap().passed());
        let mut ln = LayerNorm::new(8);
        ln.gamma = tensor(&[8], seed ^ 1, 0.5, 1.5);
        prop_assert!(grad_check(&mut ln, &x, &opts).unwrap().passed());
        let mut mha = MultiHeadAttention::new(8, 2, &RngStream::new(seed)).unwrap();
        prop_assert!(grad_check(&mut mha, &x, &opts).unwrap().passed());
        let mut block = TransformerBlock::new(8, 2, 16, 0.2, 0, seed).unwrap();
        let train = GradCheckOptions { mode: Mode::Train, ..opts };
        prop_assert!(grad_check(&mut block, &x, &train).unwrap().passed());
    }
}
