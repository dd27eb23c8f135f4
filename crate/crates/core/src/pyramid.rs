//! Multi-scale feature extraction: three parallel conv branches (1×1, 3×3,
//! 5×5), dual global pooling and stacking into the scale sequence.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hash;

use crate::error::{Error, Result};
use crate::layer::{hash_relu_gate, prefixed, split_grads, Conv2d, Layer};
use crate::ops::{self, Mode};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const BRANCH_KERNELS: [usize; 3] = [1, 3, 5];
pub const BRANCH_CHANNELS: usize = 64;

/// How each branch map is summarized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    /// `GAP ⊕ GMP`, 128 columns.
    AvgMax,
    /// GAP only, 64 columns.
    AvgOnly,
}

impl Pooling {
    pub fn width(self) -> usize {
        match self {
            Pooling::AvgMax => 2 * BRANCH_CHANNELS,
            Pooling::AvgOnly => BRANCH_CHANNELS,
        }
    }
}

/// `3 × width` token matrix; rows ordered 1×1, 3×3, 5×5.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleSequence {
    pub data: Tensor,
}

/// One `k×k` conv branch producing 64 channels, followed by ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleBranch {
    pub conv: Conv2d,
}

impl ScaleBranch {
    pub fn new(k: usize, backbone_channels: usize, rng: &mut RngStream) -> Result<Self> {
        Ok(Self { conv: Conv2d::new(k, backbone_channels, BRANCH_CHANNELS, 1, rng)? })
    }

    pub fn kernel_size(&self) -> usize {
        self.conv.kernel_size()
    }
}

/// `ReLU(conv_same(F_base))`; returns the activation and the pre-activation.
pub fn branch_forward(features: &Tensor, branch: &ScaleBranch) -> Result<(Tensor, Tensor)> {
    let (_, _, c) = features.dims3()?;
    if c != branch.conv.in_channels() {
        return Err(Error::shape(
            "branch_forward",
            format!("feature map has {c} channels, branch expects {}", branch.conv.in_channels()),
        ));
    }
    let pre = ops::conv2d_same(features, &branch.conv.kernel, &branch.conv.bias)?;
    Ok((ops::relu(&pre), pre))
}

/// GAP in the first half, GMP in the second (GAP only for [`Pooling::AvgOnly`]).
/// Also returns the max-pool winners for the backward pass.
pub fn pool_and_concat(map: &Tensor, pooling: Pooling) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut out = ops::global_avg_pool_hw(map)?.into_data();
    let mut arg = Vec::new();
    if pooling == Pooling::AvgMax {
        let (max, a) = ops::global_max_pool_hw(map)?;
        out.extend_from_slice(max.data());
        arg = a;
    }
    Ok((out, arg))
}

pub fn pool_and_concat_backward(
    shape: &[usize],
    argmax: &[usize],
    pooling: Pooling,
    dy: &[f64],
) -> Result<Tensor> {
    let c = shape[2];
    if dy.len() != pooling.width() || c != BRANCH_CHANNELS {
        return Err(Error::shape("pool_and_concat_backward", "gradient width does not match pooling"));
    }
    let mut dx = ops::global_avg_pool_hw_backward(shape, &Tensor::from_parts(vec![c], dy[..c].to_vec()))?;
    if pooling == Pooling::AvgMax {
        let dmax = ops::global_max_pool_hw_backward(shape, argmax, &Tensor::from_parts(vec![c], dy[c..].to_vec()))?;
        dx.add_assign(&dmax)?;
    }
    Ok(dx)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalePyramid {
    pub branches: [ScaleBranch; 3],
    pub pooling: Pooling,
}

pub struct PyramidCache {
    input: Tensor,
    /// Per branch: pre-activation and max-pool winners.
    branches: Vec<(Tensor, Vec<usize>)>,
}

impl ScalePyramid {
    /// Glorot-uniform kernels, zero biases; each branch draws from its own stream.
    pub fn new(backbone_channels: usize, pooling: Pooling, seed: u64) -> Self {
        let root = RngStream::new(seed).derive_named("pyramid");
        let branches = BRANCH_KERNELS.map(|k| {
            ScaleBranch::new(k, backbone_channels, &mut root.derive(k as u64)).expect("odd kernel")
        });
        Self { branches, pooling }
    }

    pub fn from_branches(branches: [ScaleBranch; 3], pooling: Pooling) -> Result<Self> {
        for (b, k) in branches.iter().zip(BRANCH_KERNELS) {
            if b.kernel_size() != k || b.conv.out_channels() != BRANCH_CHANNELS || b.conv.stride != 1 {
                return Err(Error::shape("ScalePyramid", format!("branch must be {k}x{k} with 64 outputs")));
            }
        }
        if branches.iter().any(|b| b.conv.in_channels() != branches[0].conv.in_channels()) {
            return Err(Error::shape("ScalePyramid", "branches disagree on input channels"));
        }
        Ok(Self { branches, pooling })
    }

    pub fn backbone_channels(&self) -> usize {
        self.branches[0].conv.in_channels()
    }

    pub fn width(&self) -> usize {
        self.pooling.width()
    }

    pub(crate) fn backward_inner(
        &self,
        cache: &PyramidCache,
        dy: &Tensor,
        grads: &mut [Tensor],
        need_dx: bool,
    ) -> Result<Option<Tensor>> {
        dy.expect_shape("ScalePyramid backward", &[3, self.width()])?;
        let mut parts = split_grads(grads, &[2, 2, 2]);
        let mut dx: Option<Tensor> = None;
        for (i, (branch, (pre, arg))) in self.branches.iter().zip(&cache.branches).enumerate() {
            let dmap = pool_and_concat_backward(pre.shape(), arg, self.pooling, dy.row(i))?;
            let dpre = ops::relu_backward(pre, &dmap)?;
            let d = branch.conv.backward_inner(&cache.input, &dpre, parts[i], need_dx)?;
            if let Some(d) = d {
                match dx.as_mut() {
                    Some(acc) => acc.add_assign(&d)?,
                    None => dx = Some(d),
                }
            }
        }
        Ok(dx)
    }
}

/// Stacks the pooled branch summaries into the scale sequence.
pub fn build_scale_sequence(features: &Tensor, pyramid: &ScalePyramid) -> Result<ScaleSequence> {
    let (data, _) = pyramid.forward(features, Mode::Eval, &RngStream::new(0))?;
    Ok(ScaleSequence { data })
}

impl Layer for ScalePyramid {
    type Cache = PyramidCache;

    fn forward(&self, x: &Tensor, _mode: Mode, _rng: &RngStream) -> Result<(Tensor, PyramidCache)> {
        let mut rows = Vec::with_capacity(3 * self.width());
        let mut branches = Vec::with_capacity(3);
        for branch in &self.branches {
            let (act, pre) = branch_forward(x, branch)?;
            let (pooled, arg) = pool_and_concat(&act, self.pooling)?;
            rows.extend_from_slice(&pooled);
            branches.push((pre, arg));
        }
        Ok((
            Tensor::from_parts(vec![3, self.width()], rows),
            PyramidCache { input: x.clone(), branches },
        ))
    }

    fn backward(&self, cache: &PyramidCache, dy: &Tensor, grads: &mut [Tensor]) -> Result<Tensor> {
        Ok(self.backward_inner(cache, dy, grads, true)?.expect("input gradient requested"))
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.branches
            .iter()
            .flat_map(|b| {
                let k = b.kernel_size();
                prefixed(&format!("branch{k}x{k}"), b.conv.named_params())
            })
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.branches.iter_mut().flat_map(|b| b.conv.params_mut()).collect()
    }

    fn hash_kinks(&self, cache: &PyramidCache, state: &mut DefaultHasher) {
        for (pre, arg) in &cache.branches {
            hash_relu_gate(pre, state);
            arg.hash(state);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_map(c: usize, seed: u64) -> Tensor {
        let mut rng = RngStream::new(seed);
        let mut t = Tensor::zeros(&[7, 7, c]);
        t.data_mut().iter_mut().for_each(|v| *v = rng.uniform(-1.0, 1.0));
        t
    }

    #[test]
    fn branch_identity_on_nonnegative_input() {
        let mut rng = RngStream::new(0);
        let mut branch = ScaleBranch::new(1, 64, &mut rng).unwrap();
        branch.conv.kernel.fill(0.0);
        for c in 0..64 {
            branch.conv.kernel.data_mut()[c * 64 + c] = 1.0;
        }
        let x = random_map(64, 1);
        let x = ops::relu(&x);
        let (y, _) = branch_forward(&x, &branch).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn branch_outputs_preserve_extent_and_are_nonnegative() {
        let p = ScalePyramid::new(16, Pooling::AvgMax, 3);
        let x = random_map(16, 2);
        for b in &p.branches {
            let (y, _) = branch_forward(&x, b).unwrap();
            assert_eq!(y.shape(), &[7, 7, 64]);
            assert!(y.data().iter().all(|&v| v >= 0.0));
        }
        let (zero, _) = branch_forward(&Tensor::zeros(&[7, 7, 16]), &p.branches[2]).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        assert!(matches!(branch_forward(&random_map(8, 1), &p.branches[0]), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn pool_and_concat_examples() {
        let (v, _) = pool_and_concat(&Tensor::full(&[7, 7, 64], 2.5), Pooling::AvgMax).unwrap();
        assert_eq!(v.len(), 128);
        assert!(v.iter().all(|&x| x == 2.5));

        let mut m = Tensor::zeros(&[2, 2, 64]);
        for c in 0..64 {
            m.data_mut()[3 * 64 + c] = 4.0;
        }
        let (v, _) = pool_and_concat(&m, Pooling::AvgMax).unwrap();
        assert!(v[..64].iter().all(|&x| x == 1.0));
        assert!(v[64..].iter().all(|&x| x == 4.0));
    }

    #[test]
    fn sequence_shape_and_max_dominates_mean() {
        let p = ScalePyramid::new(16, Pooling::AvgMax, 3);
        let s = build_scale_sequence(&random_map(16, 5), &p).unwrap();
        assert_eq!(s.data.shape(), &[3, 128]);
        for i in 0..3 {
            let r = s.data.row(i);
            for c in 0..64 {
                assert!(r[64 + c] >= r[c]);
            }
        }
        let z = build_scale_sequence(&Tensor::zeros(&[7, 7, 16]), &p).unwrap();
        assert!(z.data.data().iter().all(|&v| v == 0.0));

        let gap = ScalePyramid { pooling: Pooling::AvgOnly, ..p };
        let s = build_scale_sequence(&random_map(16, 5), &gap).unwrap();
        assert_eq!(s.data.shape(), &[3, 64]);
    }

    #[test]
    fn perturbing_one_branch_changes_only_its_row() {
        let p = ScalePyramid::new(8, Pooling::AvgMax, 7);
        let x = random_map(8, 9);
        let before = build_scale_sequence(&x, &p).unwrap().data;
        let mut q = p.clone();
        q.branches[2].conv.kernel.data_mut().iter_mut().for_each(|v| *v += 0.05);
        let after = build_scale_sequence(&x, &q).unwrap().data;
        assert_eq!(before.row(0), after.row(0));
        assert_eq!(before.row(1), after.row(1));
        assert_ne!(before.row(2), after.row(2));
    }

    #[test]
    fn branch_gradients_are_independent() {
        let p = ScalePyramid::new(8, Pooling::AvgMax, 7);
        let x = random_map(8, 9);
        let (_, cache) = p.forward(&x, Mode::Eval, &RngStream::new(0)).unwrap();
        for row in 0..3 {
            let mut dy = Tensor::zeros(&[3, 128]);
            dy.data_mut()[row * 128..(row + 1) * 128].iter_mut().for_each(|v| *v = 1.0);
            let mut grads = p.zero_grads();
            p.backward(&cache, &dy, &mut grads).unwrap();
            for (b, pair) in grads.chunks(2).enumerate() {
                let touched = pair.iter().any(|g| g.data().iter().any(|&v| v != 0.0));
                if b != row {
                    assert!(!touched, "row {row} leaked into branch {b}");
                }
            }
        }
    }
}
