use sit_core::layer::Layer;
use sit_core::model::{build_variant, AblationVariant, Graph, ModelConfig};
use sit_core::pyramid::ScaleSequence;
use sit_core::transformer::{encoder_forward, Encoder};
use sit_core::{Mode, RngStream, Tensor};

fn features(c: usize, seed: u64) -> Tensor {
    let mut rng = RngStream::new(seed);
    let mut t = Tensor::zeros(&[7, 7, c]);
    t.data_mut().iter_mut().for_each(|v| *v = rng.uniform(0.0, 2.0));
    t
}

fn permute_rows(x: &Tensor, perm: &[usize]) -> Tensor {
    let d = x.shape()[1];
    Tensor::new(vec![perm.len(), d], perm.iter().flat_map(|&i| x.row(i).to_vec()).collect()).unwrap()
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn default_configuration_shapes() {
    let model = build_variant(AblationVariant::Full, &ModelConfig::default()).unwrap();
    assert_eq!(model.backbone_channels(), 1280);
    let trace = model.trace(&features(1280, 1)).unwrap();
    assert_eq!(trace.branch_maps.len(), 3);
    for f in &trace.branch_maps {
        assert_eq!(f.shape(), &[7, 7, 64]);
    }
    assert_eq!(trace.sequence.shape(), &[3, 128]);
    assert_eq!(trace.projected.shape(), &[3, 128]);
    assert_eq!(trace.encoded.shape(), &[3, 128]);
    assert_eq!(trace.pooled.shape(), &[128]);
    assert!(trace.prediction.is_finite());
    assert_eq!(trace.attention_weights.len(), 2 * 4);
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = ModelConfig { backbone_channels: 16, ..ModelConfig::default() };
    let model = build_variant(AblationVariant::Full, &cfg).unwrap();
    for seed in 0..5 {
        let trace = model.trace(&features(16, seed)).unwrap();
        for w in &trace.attention_weights {
            assert_eq!(w.shape(), &[3, 3]);
            for i in 0..3 {
                assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn encoder_is_permutation_equivariant_bitwise() {
    let encoder = Encoder::new(128, 2, 4, 512, 0.1, 3).unwrap();
    let mut rng = RngStream::new(4);
    let mut x = Tensor::zeros(&[3, 128]);
    x.data_mut().iter_mut().for_each(|v| *v = rng.normal());
    let y = encoder_forward(&x, &encoder, Mode::Eval, &RngStream::new(0)).unwrap();
    for perm in [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
        let yp = encoder_forward(&permute_rows(&x, &perm), &encoder, Mode::Eval, &RngStream::new(0)).unwrap();
        assert_eq!(bits(&yp), bits(&permute_rows(&y, &perm)), "{perm:?}");
    }
}

#[test]
fn full_model_ignores_scale_order_bitwise() {
    let cfg = ModelConfig { backbone_channels: 16, seed: 8, ..ModelConfig::default() };
    for variant in [AblationVariant::Full, AblationVariant::NoGmp] {
        let model = build_variant(variant, &cfg).unwrap();
        let trace = model.trace(&features(16, 2)).unwrap();
        let base = model.predict_from_sequence(&ScaleSequence { data: trace.sequence.clone() }).unwrap();
        assert_eq!(base.to_bits(), trace.prediction.to_bits());
        for perm in [[2, 1, 0], [1, 2, 0], [0, 2, 1]] {
            let s = ScaleSequence { data: permute_rows(&trace.sequence, &perm) };
            assert_eq!(model.predict_from_sequence(&s).unwrap().to_bits(), base.to_bits(), "{variant} {perm:?}");
        }
    }
}

#[test]
fn variant_parameter_sets() {
    let cfg = ModelConfig { backbone_channels: 32, ..ModelConfig::default() };
    let names = |v| -> Vec<String> { build_variant(v, &cfg).unwrap().named_params().into_iter().map(|p| p.0).collect() };
    for v in [AblationVariant::Baseline, AblationVariant::NoTransformer] {
        assert!(names(v).iter().all(|n| !n.contains("attention")), "{v}");
    }
    assert!(names(AblationVariant::Baseline).iter().all(|n| !n.contains("branch")));
    let full = names(AblationVariant::Full);
    for k in ["branch1x1", "branch3x3", "branch5x5", "attention", "projection", "head"] {
        assert!(full.iter().any(|n| n.contains(k)), "{k}");
    }
    let no_gmp = build_variant(AblationVariant::NoGmp, &cfg).unwrap();
    let trace = no_gmp.trace(&features(32, 0)).unwrap();
    assert_eq!(trace.sequence.shape(), &[3, 64]);
    let Graph::NoTransformer { dense, .. } = &build_variant(AblationVariant::NoTransformer, &cfg).unwrap().graph else {
        panic!("wrong graph");
    };
    assert_eq!(dense.inputs(), 384);
}
