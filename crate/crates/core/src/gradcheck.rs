//! Central finite-difference verification of analytic backward passes.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::layer::{Corrupted, Layer};
use crate::ops::Mode;
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    pub mode: Mode,
    /// Seeds both the (frozen) forward stream and the probe directions.
    pub seed: u64,
    /// Tensors larger than this are checked on a seeded sample of coordinates.
    pub max_coords: usize,
    pub check_input: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: DEFAULT_STEP, tol: 1e-4, mode: Mode::Eval, seed: 0, max_coords: usize::MAX, check_input: true }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    /// Coordinates whose probes crossed a ReLU gate or moved a max-pool winner.
    pub skipped: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tol: f64,
    pub entries: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    /// Every tensor had at least one usable coordinate and stayed within tolerance.
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.checked > 0 && e.max_rel_error <= self.tol)
    }
}

/// `|a − b| / max(1, |a|, |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

fn sample_coords(len: usize, max: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    if len <= max {
        return idx;
    }
    for i in 0..max {
        let j = i + rng.below(len - i);
        idx.swap(i, j);
    }
    idx.truncate(max);
    idx.sort_unstable();
    idx
}

struct Probe {
    loss: f64,
    kinks: u64,
}

fn probe<L: Layer>(layer: &L, x: &Tensor, weights: &Tensor, opts: &GradCheckOptions) -> Result<Probe> {
    let rng = RngStream::new(opts.seed);
    let (y, cache) = layer.forward(x, opts.mode, &rng)?;
    let mut h = DefaultHasher::new();
    layer.hash_kinks(&cache, &mut h);
    Ok(Probe { loss: y.dot(weights)?, kinks: h.finish() })
}

/// Compares analytic gradients of the scalar `⟨layer(x), r⟩` (with `r` a fixed
/// random direction) against central differences, for the input and every
/// parameter tensor. The forward stream is re-created from `opts.seed` on
/// every evaluation, so dropout masks stay frozen across probes.
pub fn grad_check<L: Layer>(layer: &mut L, input: &Tensor, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let rng = RngStream::new(opts.seed);
    let (y, cache) = layer.forward(input, opts.mode, &rng)?;
    let (y2, _) = layer.forward(input, opts.mode, &rng)?;
    if y.data().iter().zip(y2.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err(Error::NonDeterministicLayer("repeated forward under a frozen seed disagrees".into()));
    }
    let mut dir_rng = rng.derive_named("gradcheck.direction");
    let mut weights = Tensor::zeros(y.shape());
    for v in weights.data_mut() {
        *v = dir_rng.normal();
    }
    let base_kinks = {
        let mut h = DefaultHasher::new();
        layer.hash_kinks(&cache, &mut h);
        h.finish()
    };

    let mut grads = layer.zero_grads();
    let dx = layer.backward(&cache, &weights, &mut grads)?;
    drop(cache);

    let mut coord_rng = rng.derive_named("gradcheck.coords");
    let mut entries = Vec::new();

    if opts.check_input {
        let mut x = input.clone();
        let mut entry = TensorCheck { name: "input".into(), checked: 0, skipped: 0, max_rel_error: 0.0 };
        for i in sample_coords(x.len(), opts.max_coords, &mut coord_rng) {
            let orig = x.data()[i];
            x.data_mut()[i] = orig + opts.step;
            let plus = probe(layer, &x, &weights, opts)?;
            x.data_mut()[i] = orig - opts.step;
            let minus = probe(layer, &x, &weights, opts)?;
            x.data_mut()[i] = orig;
            record(&mut entry, dx.data()[i], &plus, &minus, base_kinks, opts.step);
        }
        entries.push(entry);
    }

    let names: Vec<String> = layer.named_params().into_iter().map(|(n, _)| n).collect();
    for (p, name) in names.into_iter().enumerate() {
        let len = grads[p].len();
        let mut entry = TensorCheck { name, checked: 0, skipped: 0, max_rel_error: 0.0 };
        for i in sample_coords(len, opts.max_coords, &mut coord_rng) {
            let orig = layer.params_mut()[p].data()[i];
            layer.params_mut()[p].data_mut()[i] = orig + opts.step;
            let plus = probe(layer, input, &weights, opts);
            layer.params_mut()[p].data_mut()[i] = orig - opts.step;
            let minus = probe(layer, input, &weights, opts);
            layer.params_mut()[p].data_mut()[i] = orig;
            record(&mut entry, grads[p].data()[i], &plus?, &minus?, base_kinks, opts.step);
        }
        entries.push(entry);
    }
    Ok(GradCheckReport { tol: opts.tol, entries })
}

fn record(entry: &mut TensorCheck, analytic: f64, plus: &Probe, minus: &Probe, base: u64, step: f64) {
    if plus.kinks != base || minus.kinks != base {
        entry.skipped += 1;
        return;
    }
    let numeric = (plus.loss - minus.loss) / (2.0 * step);
    entry.checked += 1;
    entry.max_rel_error = entry.max_rel_error.max(relative_error(analytic, numeric));
}

/// One row of [`run_suite`].
#[derive(Clone, Debug, Serialize)]
pub struct SuiteRow {
    pub layer: String,
    pub passed: bool,
    pub max_rel_error: f64,
    pub report: GradCheckReport,
}

/// Layer names understood by the `corrupt` argument of [`run_suite`].
pub const SUITE_LAYERS: [&str; 22] = [
    "affine",
    "matmul",
    "conv1x1",
    "conv3x3",
    "conv5x5",
    "conv3x3-stride2",
    "relu",
    "layer-norm",
    "softmax",
    "softmax-attention",
    "dropout-frozen",
    "global-avg-pool",
    "global-max-pool",
    "feed-forward",
    "transformer-block",
    "scale-pyramid",
    "regression-head",
    "synthetic-backbone",
    "model-baseline",
    "model-no-transformer",
    "model-no-gmp",
    "model-full",
];

fn random_tensor(shape: &[usize], rng: &mut RngStream, lo: f64, hi: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = rng.uniform(lo, hi));
    t
}

fn check_row<L: Layer>(
    name: &str,
    mut layer: L,
    input: &Tensor,
    opts: &GradCheckOptions,
    corrupt: Option<&str>,
) -> Result<SuiteRow> {
    let report = if corrupt == Some(name) {
        grad_check(&mut Corrupted(layer), input, opts)?
    } else {
        grad_check(&mut layer, input, opts)?
    };
    Ok(SuiteRow { layer: name.into(), passed: report.passed(), max_rel_error: report.max_rel_error(), report })
}

/// Finite-difference checks over every layer type and the four model
/// variants at `backbone_channels` input channels. `corrupt` names one row
/// whose backward is deliberately doubled.
pub fn run_suite(seed: u64, backbone_channels: usize, tol: f64, corrupt: Option<&str>) -> Result<Vec<SuiteRow>> {
    use crate::backbone::SyntheticBackbone;
    use crate::layer::{Conv2d, Dropout, GlobalAvgPool, GlobalMaxPool, LayerNorm, Linear, MatMul, Relu, Softmax};
    use crate::model::{build_variant, AblationVariant, ModelConfig};
    use crate::pyramid::{Pooling, ScalePyramid};
    use crate::transformer::{FeedForward, MultiHeadAttention, RegressionHead, TransformerBlock};

    if let Some(c) = corrupt {
        if !SUITE_LAYERS.contains(&c) {
            return Err(Error::InvalidConfig(format!("unknown layer {c:?} for corruption")));
        }
    }
    let cb = backbone_channels;
    let root = RngStream::new(seed).derive_named("gradcheck.suite");
    let mut rng = root.derive_named("inputs");
    let eval = GradCheckOptions { tol, seed, max_coords: 24, ..Default::default() };
    let train = GradCheckOptions { mode: Mode::Train, ..eval.clone() };
    let seq = random_tensor(&[3, 16], &mut rng, -1.0, 1.0);
    let fmap = random_tensor(&[7, 7, cb], &mut rng, 0.0, 1.0);
    let mut w = root.derive_named("weights");
    let mut rows = Vec::new();

    rows.push(check_row("affine", Linear::new(16, 8, &mut w), &seq, &eval, corrupt)?);
    let mm = MatMul { weight: random_tensor(&[16, 5], &mut w, -1.0, 1.0) };
    rows.push(check_row("matmul", mm, &seq, &eval, corrupt)?);
    for k in [1, 3, 5] {
        rows.push(check_row(&format!("conv{k}x{k}"), Conv2d::new(k, cb, 6, 1, &mut w)?, &fmap, &eval, corrupt)?);
    }
    let img = random_tensor(&[9, 9, 3], &mut rng, 0.0, 1.0);
    rows.push(check_row("conv3x3-stride2", Conv2d::new(3, 3, 4, 2, &mut w)?, &img, &eval, corrupt)?);
    rows.push(check_row("relu", Relu, &seq, &eval, corrupt)?);
    let mut ln = LayerNorm::new(16);
    ln.gamma = random_tensor(&[16], &mut w, 0.5, 1.5);
    ln.beta = random_tensor(&[16], &mut w, -0.5, 0.5);
    rows.push(check_row("layer-norm", ln, &seq, &eval, corrupt)?);
    rows.push(check_row("softmax", Softmax, &seq, &eval, corrupt)?);
    rows.push(check_row("softmax-attention", MultiHeadAttention::new(16, 4, &w.derive(1))?, &seq, &eval, corrupt)?);
    rows.push(check_row("dropout-frozen", Dropout::new(0.3, 7)?, &seq, &train, corrupt)?);
    rows.push(check_row("global-avg-pool", GlobalAvgPool, &fmap, &eval, corrupt)?);
    rows.push(check_row("global-max-pool", GlobalMaxPool, &fmap, &eval, corrupt)?);
    rows.push(check_row("feed-forward", FeedForward::new(16, 32, &w.derive(2)), &seq, &eval, corrupt)?);
    let block = TransformerBlock::new(16, 4, 32, 0.1, 0, seed)?;
    rows.push(check_row("transformer-block", block, &seq, &train, corrupt)?);
    let pyramid = ScalePyramid::new(cb, Pooling::AvgMax, seed);
    rows.push(check_row("scale-pyramid", pyramid, &fmap, &eval, corrupt)?);
    let head = RegressionHead::new(16, 0.1, seed)?;
    let v = random_tensor(&[16], &mut rng, -1.0, 1.0);
    rows.push(check_row("regression-head", head, &v, &train, corrupt)?);
    let image = random_tensor(&[224, 224, 3], &mut rng, 0.0, 1.0);
    let backbone = SyntheticBackbone::new(cb, seed, true);
    rows.push(check_row("synthetic-backbone", backbone, &image, &eval, corrupt)?);

    let cfg = ModelConfig { backbone_channels: cb, seed, ..ModelConfig::default() };
    for variant in AblationVariant::ALL {
        let model = build_variant(variant, &cfg)?;
        rows.push(check_row(&format!("model-{}", variant.name()), model, &fmap, &train, corrupt)?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::{MatMul, Relu};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = RngStream::new(seed);
        let mut t = Tensor::zeros(shape);
        t.data_mut().iter_mut().for_each(|v| *v = rng.uniform(-1.0, 1.0));
        t
    }

    #[test]
    fn relu_passes_tight() {
        let x = random(&[4, 6], 1);
        let opts = GradCheckOptions { tol: 1e-6, ..Default::default() };
        let report = grad_check(&mut Relu, &x, &opts).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn matmul_passes_tight() {
        let mut layer = MatMul { weight: random(&[5, 3], 2) };
        let x = random(&[4, 5], 3);
        let opts = GradCheckOptions { tol: 1e-7, ..Default::default() };
        let report = grad_check(&mut layer, &x, &opts).unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.entries.len(), 2);
    }

    #[test]
    fn corrupted_backward_fails() {
        let x = random(&[4, 6], 4);
        let report = grad_check(&mut Corrupted(Relu), &x, &GradCheckOptions::default()).unwrap();
        assert!(!report.passed());
        let mut layer = Corrupted(MatMul { weight: random(&[5, 3], 2) });
        let report = grad_check(&mut layer, &random(&[4, 5], 3), &GradCheckOptions::default()).unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn sampled_coords_are_distinct_and_bounded() {
        let mut rng = RngStream::new(9);
        let c = sample_coords(1000, 20, &mut rng);
        assert_eq!(c.len(), 20);
        assert!(c.windows(2).all(|w| w[0] < w[1]) && c[19] < 1000);
        assert_eq!(sample_coords(5, 20, &mut rng), vec![0, 1, 2, 3, 4]);
    }

    struct Flaky(std::cell::Cell<u64>);

    impl Layer for Flaky {
        type Cache = ();
        fn forward(&self, x: &Tensor, _: Mode, _: &RngStream) -> Result<(Tensor, ())> {
            self.0.set(self.0.get() + 1);
            Ok((x.scale(self.0.get() as f64), ()))
        }
        fn backward(&self, _: &(), dy: &Tensor, _: &mut [Tensor]) -> Result<Tensor> {
            Ok(dy.clone())
        }
    }

    #[test]
    fn nondeterministic_layer_is_rejected() {
        let err = grad_check(&mut Flaky(std::cell::Cell::new(0)), &random(&[3], 1), &GradCheckOptions::default());
        assert!(matches!(err, Err(Error::NonDeterministicLayer(_))));
    }

    #[test]
    fn suite_rows_are_unique_and_named() {
        assert!(run_suite(0, 4, 1e-4, Some("nope")).is_err());
        let mut names = SUITE_LAYERS.to_vec();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), SUITE_LAYERS.len());
    }
}
