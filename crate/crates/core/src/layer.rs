//! The layer contract and the primitive layers built on [`crate::ops`].

use std::collections::hash_map::DefaultHasher;
use std::hash::Hash;

use crate::error::{Error, Result};
use crate::ops::{self, Mode};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// A differentiable map with explicit, per-invocation caches.
///
/// `forward` never mutates the layer; everything `backward` needs travels in
/// the returned cache, so a backward can only be issued against a forward that
/// actually happened. `backward` accumulates parameter gradients into `grads`,
/// which is aligned with [`Layer::named_params`], and returns the input gradient.
pub trait Layer {
    type Cache;

    fn forward(&self, x: &Tensor, mode: Mode, rng: &RngStream) -> Result<(Tensor, Self::Cache)>;

    fn backward(&self, cache: &Self::Cache, dy: &Tensor, grads: &mut [Tensor]) -> Result<Tensor>;

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        Vec::new()
    }

    fn param_count(&self) -> usize {
        self.named_params().len()
    }

    fn zero_grads(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, p)| Tensor::zeros(p.shape())).collect()
    }

    /// Feeds every discrete branch decision taken by the forward pass (ReLU
    /// gates, max-pool winners) into `state`. Two forwards with equal hashes
    /// lie on the same smooth piece of the function.
    fn hash_kinks(&self, _cache: &Self::Cache, _state: &mut DefaultHasher) {}
}

pub(crate) fn prefixed<'a>(prefix: &str, params: Vec<(String, &'a Tensor)>) -> Vec<(String, &'a Tensor)> {
    params.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

/// Splits an aligned gradient slice into consecutive chunks of the given sizes.
pub(crate) fn split_grads<'a>(mut grads: &'a mut [Tensor], counts: &[usize]) -> Vec<&'a mut [Tensor]> {
    let mut out = Vec::with_capacity(counts.len());
    for &c in counts {
        let (head, tail) = grads.split_at_mut(c);
        out.push(head);
        grads = tail;
    }
    out
}

pub(crate) fn hash_relu_gate(x: &Tensor, state: &mut DefaultHasher) {
    for chunk in x.data().chunks(64) {
        let bits = chunk.iter().enumerate().fold(0u64, |acc, (i, &v)| acc | (u64::from(v > 0.0) << i));
        bits.hash(state);
    }
}

/// Uniform Glorot initialization: `U(-l, l)` with `l = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.uniform(-limit, limit);
    }
    t
}

/// `y = x · W` for a rank-2 input.
#[derive(Clone, Debug, PartialEq)]
pub struct MatMul {
    pub weight: Tensor,
}

impl Layer for MatMul {
    type Cache = Tensor;

    fn forward(&self, x: &Tensor, _mode: Mode, _rng: &RngStream) -> Result<(Tensor, Tensor)> {
        Ok((ops::matmul(x, &self.weight)?, x.clone()))
    }

    fn backward(&self, x: &Tensor, dy: &Tensor, grads: &mut [Tensor]) -> Result<Tensor> {
        let (dx, dw) = ops::matmul_backward(x, &self.weight, dy)?;
        grads[0].add_assign(&dw)?;
        Ok(dx)
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight)]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight]
    }
}

/// Row-wise affine map `y = x · W + b` on an `n × in` input.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new(inputs: usize, outputs: usize, rng: &mut RngStream) -> Self {
        Self {
            weight: glorot_uniform(&[inputs, outputs], inputs, outputs, rng),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (_, out) = weight.dims2()?;
        bias.expect_shape("Linear bias", &[out])?;
        Ok(Self { weight, bias })
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl Layer for Linear {
    type Cache = Tensor;

    fn forward(&self, x: &Tensor, _mode: Mode, _rng: &RngStream) -> Result<(Tensor, Tensor)> {
        let mut y = ops::matmul(x, &self.weight)?;
        ops::add_row_bias(&mut y, &self.bias)?;
        Ok((y, x.clone()))
    }

    fn backward(&self, x: &Tensor, dy: &Tensor, grads: &mut [Tensor]) -> Result<Tensor> {
        let (dx, dw) = ops::matmul_backward(x, &self.weight, dy)?;
        grads[0].add_assign(&dw)?;
        grads[1].add_assign(&ops::sum_rows(dy)?)?;
        Ok(dx)
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// 2-D convolution with `(k-1)/2` zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl Conv2d {
    /// Glorot-uniform kernel (receptive field counted in both fans), zero bias.
    pub fn new(k: usize, cin: usize, cout: usize, stride: usize, rng: &mut RngStream) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::InvalidKernel(k));
        }
        Ok(Self {
            kernel: glorot_uniform(&[k, k, cin, cout], k * k * cin, k * k * cout, rng),
            bias: Tensor::zeros(&[cout]),
            stride,
        })
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[3]
    }

    pub(crate) fn backward_inner(
        &self,
        x: &Tensor,
        dy: &Tensor,
        grads: &mut [Tensor],
        need_dx: bool,
    ) -> Result<Option<Tensor>> {
        let g = ops::conv2d_backward(x, &self.kernel, dy, self.stride, need_dx)?;
        grads[0].add_assign(&g.dkernel)?;
        grads[1].add_assign(&g.dbias)?;
        Ok(g.dx)
    }
}

impl Layer for Conv2d {
    type Cache = Tensor;

    fn forward(&self, x: &Tensor, _mode: Mode, _rng: &RngStream) -> Result<(Tensor, Tensor)> {
        Ok((ops::conv2d(x, &self.kernel, &self.bias, self.stride)?, x.clone()))
    }

    fn backward(&self, x: &Tensor, dy: &Tensor, grads: &mut [Tensor]) -> Result<Tensor> {
        Ok(self.backward_inner(x, dy, grads, true)?.expect("input gradient requested"))
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![("kernel".into(), &self.kernel), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.kernel, &mut self.bias]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Relu;

impl Layer for Relu {
    type Cache = Tensor;

    fn forward(&self, x: &Tensor, _mode: Mode, _rng: &RngStream) -> Result<(Tensor, Tensor)> {
        Ok((ops::relu(x), x.clone()))
    }

    fn backward(&self, x: &Tensor, dy: &Tensor, _grads: &mut [Tensor]) -> Result<Tensor> {
        ops::relu_backward(x, dy)
    }

    fn hash_kinks(&self, x: &Tensor, state: &mut DefaultHasher) {
        hash_relu_gate(x, state);
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Softmax;

impl Layer for Softmax {
    type Cache = Tensor;

    fn forward(&self, x: &Tensor, _mode: Mode, _rng: &RngStream) -> Result<(Tensor, Tensor)> {
        let y = ops::softmax_rows(x)?;
        Ok((y.clone(), y))
    }

    fn backward(&self, y: &Tensor, dy: &Tensor, _grads: &mut [Tensor]) -> Result<Tensor> {
        ops::softmax_rows_backward(y, dy)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: Tensor::full(&[width], 1.0),
            beta: Tensor::zeros(&[width]),
            eps: ops::LAYER_NORM_EPS,
        }
    }
}

impl Layer for LayerNorm {
    type Cache = ops::LayerNormCache;

    fn forward(&self, x: &Tensor, _mode: Mode, _rng: &RngStream) -> Result<(Tensor, Self::Cache)> {
        ops::layer_norm(x, &self.gamma, &self.beta, self.eps)
    }

    fn backward(&self, cache: &Self::Cache, dy: &Tensor, grads: &mut [Tensor]) -> Result<Tensor> {
        let (dx, dgamma, dbeta) = ops::layer_norm_backward(cache, &self.gamma, dy)?;
        grads[0].add_assign(&dgamma)?;
        grads[1].add_assign(&dbeta)?;
        Ok(dx)
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![("gamma".into(), &self.gamma), ("beta".into(), &self.beta)]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GlobalAvgPool;

impl Layer for GlobalAvgPool {
    type Cache = Vec<usize>;

    fn forward(&self, x: &Tensor, _mode: Mode, _rng: &RngStream) -> Result<(Tensor, Vec<usize>)> {
        Ok((ops::global_avg_pool_hw(x)?, x.shape().to_vec()))
    }

    fn backward(&self, shape: &Vec<usize>, dy: &Tensor, _grads: &mut [Tensor]) -> Result<Tensor> {
        ops::global_avg_pool_hw_backward(shape, dy)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GlobalMaxPool;

impl Layer for GlobalMaxPool {
    type Cache = (Vec<usize>, Vec<usize>);

    fn forward(&self, x: &Tensor, _mode: Mode, _rng: &RngStream) -> Result<(Tensor, Self::Cache)> {
        let (y, arg) = ops::global_max_pool_hw(x)?;
        Ok((y, (x.shape().to_vec(), arg)))
    }

    fn backward(&self, cache: &Self::Cache, dy: &Tensor, _grads: &mut [Tensor]) -> Result<Tensor> {
        ops::global_max_pool_hw_backward(&cache.0, &cache.1, dy)
    }

    fn hash_kinks(&self, cache: &Self::Cache, state: &mut DefaultHasher) {
        cache.1.hash(state);
    }
}

/// Inverted dropout. `site` keys the child stream this layer draws its mask
/// from, so every dropout in a model sees an independent, replayable mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dropout {
    pub rate: f64,
    pub site: u64,
}

impl Dropout {
    pub fn new(rate: f64, site: u64) -> Result<Self> {
        ops::check_rate(rate)?;
        Ok(Self { rate, site })
    }
}

impl Layer for Dropout {
    type Cache = Option<Vec<f64>>;

    fn forward(&self, x: &Tensor, mode: Mode, rng: &RngStream) -> Result<(Tensor, Self::Cache)> {
        let mut stream = rng.derive(self.site);
        ops::dropout(x, self.rate, mode, &mut stream)
    }

    fn backward(&self, mask: &Self::Cache, dy: &Tensor, _grads: &mut [Tensor]) -> Result<Tensor> {
        ops::dropout_backward(mask.as_deref(), dy)
    }
}

/// Test hook: wraps a layer and doubles every gradient its backward produces.
#[derive(Clone, Debug)]
pub struct Corrupted<L>(pub L);

impl<L: Layer> Layer for Corrupted<L> {
    type Cache = L::Cache;

    fn forward(&self, x: &Tensor, mode: Mode, rng: &RngStream) -> Result<(Tensor, L::Cache)> {
        self.0.forward(x, mode, rng)
    }

    fn backward(&self, cache: &L::Cache, dy: &Tensor, grads: &mut [Tensor]) -> Result<Tensor> {
        let mut local = self.0.zero_grads();
        let dx = self.0.backward(cache, dy, &mut local)?;
        for (g, l) in grads.iter_mut().zip(&local) {
            g.axpy(2.0, l)?;
        }
        Ok(dx.scale(2.0))
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.0.named_params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.0.params_mut()
    }

    fn hash_kinks(&self, cache: &L::Cache, state: &mut DefaultHasher) {
        self.0.hash_kinks(cache, state);
    }
}
