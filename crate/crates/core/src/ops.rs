//! Forward and backward kernels for the fixed op set the model composes.
//!
//! Every function here is pure: forwards return whatever the matching
//! backward needs, and backwards take it back explicitly.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Whether stochastic layers (dropout) are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner extents differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = ad[i * k + t];
            let brow = &bd[t * n..(t + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(
            "matmul_bt",
            format!("inner extents differ: {:?} x {:?}ᵀ", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            out[i * n + j] = arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_at(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(
            "matmul_at",
            format!("inner extents differ: {:?}ᵀ x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0; m * n];
    for t in 0..k {
        let arow = a.row(t);
        let brow = b.row(t);
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Returns `(dA, dB)` for `C = A·B`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, dc: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((matmul_bt(dc, b)?, matmul_at(a, dc)?))
}

/// Adds a bias vector to every row of a rank-2 tensor in place.
pub fn add_row_bias(x: &mut Tensor, bias: &Tensor) -> Result<()> {
    let (_, m) = x.dims2()?;
    bias.expect_shape("add_row_bias", &[m])?;
    let b = bias.data();
    for row in x.data_mut().chunks_mut(m) {
        for (v, bv) in row.iter_mut().zip(b) {
            *v += bv;
        }
    }
    Ok(())
}

/// Column sums of a rank-2 tensor (the bias gradient of a row-wise affine map).
pub fn sum_rows(x: &Tensor) -> Result<Tensor> {
    let (_, m) = x.dims2()?;
    let mut out = vec![0.0; m];
    for row in x.data().chunks(m) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Ok(Tensor::from_parts(vec![m], out))
}

fn conv_output_extent(input: usize, k: usize, stride: usize) -> usize {
    let pad = (k - 1) / 2;
    (input + 2 * pad - k) / stride + 1
}

fn check_conv(x: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize) -> Result<[usize; 6]> {
    let (h, w, cin) = x.dims3()?;
    let (k, k2, kcin, cout) = match kernel.shape()[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => return Err(Error::shape("conv2d", format!("kernel must be rank 4, got {:?}", kernel.shape()))),
    };
    if k != k2 {
        return Err(Error::shape("conv2d", format!("kernel must be square, got {k}x{k2}")));
    }
    if k % 2 == 0 {
        return Err(Error::InvalidKernel(k));
    }
    if stride == 0 {
        return Err(Error::shape("conv2d", "stride must be positive"));
    }
    if kcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels, kernel expects {kcin}"),
        ));
    }
    bias.expect_shape("conv2d bias", &[cout])?;
    Ok([h, w, cin, k, cout, stride])
}

/// Zero-padded 2-D convolution over an `H×W×Cin` map with a `k×k×Cin×Cout`
/// kernel, padding `(k-1)/2` on every side.
pub fn conv2d(x: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let [h, w, cin, k, cout, s] = check_conv(x, kernel, bias, stride)?;
    let pad = (k - 1) / 2;
    let (ho, wo) = (conv_output_extent(h, k, s), conv_output_extent(w, k, s));
    let (xd, kd) = (x.data(), kernel.data());
    let mut out = vec![0.0; ho * wo * cout];
    for oy in 0..ho {
        for ox in 0..wo {
            let o = &mut out[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
            o.copy_from_slice(bias.data());
            for ky in 0..k {
                let Some(iy) = (oy * s + ky).checked_sub(pad).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..k {
                    let Some(ix) = (ox * s + kx).checked_sub(pad).filter(|&v| v < w) else {
                        continue;
                    };
                    let xin = &xd[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                    let kbase = (ky * k + kx) * cin * cout;
                    for (ci, &xv) in xin.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let krow = &kd[kbase + ci * cout..kbase + (ci + 1) * cout];
                        for (ov, &kv) in o.iter_mut().zip(krow) {
                            *ov += xv * kv;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![ho, wo, cout], out))
}

/// Stride-1 "same" convolution: spatial extents are preserved.
pub fn conv2d_same(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    conv2d(x, kernel, bias, 1)
}

pub struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dkernel: Tensor,
    pub dbias: Tensor,
}

/// Gradients of [`conv2d`]. The input gradient is skipped when `need_dx` is false.
pub fn conv2d_backward(
    x: &Tensor,
    kernel: &Tensor,
    dy: &Tensor,
    stride: usize,
    need_dx: bool,
) -> Result<ConvGrads> {
    let cout = kernel.shape().get(3).copied().unwrap_or(0);
    let bias = Tensor::zeros(&[cout.max(1)]);
    let [h, w, cin, k, cout, s] = check_conv(x, kernel, &bias, stride)?;
    let pad = (k - 1) / 2;
    let (ho, wo) = (conv_output_extent(h, k, s), conv_output_extent(w, k, s));
    dy.expect_shape("conv2d_backward", &[ho, wo, cout])?;

    let (xd, kd, dyd) = (x.data(), kernel.data(), dy.data());
    let mut dk = vec![0.0; kernel.len()];
    let mut db = vec![0.0; cout];
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    for oy in 0..ho {
        for ox in 0..wo {
            let g = &dyd[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
            for (b, gv) in db.iter_mut().zip(g) {
                *b += gv;
            }
            for ky in 0..k {
                let Some(iy) = (oy * s + ky).checked_sub(pad).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..k {
                    let Some(ix) = (ox * s + kx).checked_sub(pad).filter(|&v| v < w) else {
                        continue;
                    };
                    let xoff = (iy * w + ix) * cin;
                    let kbase = (ky * k + kx) * cin * cout;
                    for ci in 0..cin {
                        let krange = kbase + ci * cout..kbase + (ci + 1) * cout;
                        let xv = xd[xoff + ci];
                        if xv != 0.0 {
                            for (d, gv) in dk[krange.clone()].iter_mut().zip(g) {
                                *d += xv * gv;
                            }
                        }
                        if let Some(dx) = dx.as_mut() {
                            dx[xoff + ci] += kd[krange].iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        dx: dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        dkernel: Tensor::from_parts(kernel.shape().to_vec(), dk),
        dbias: Tensor::from_parts(vec![cout], db),
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| v.max(0.0)).collect())
}

/// Passes `dy` where `x > 0`; the subgradient at zero is zero.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    x.expect_same_shape("relu_backward", dy)?;
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

/// Sum whose result does not depend on the order of `terms` (they are
/// added in ascending order). Used along the token axis so that permuting
/// tokens permutes outputs bit for bit.
pub fn sum_unordered(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (_, m) = x.dims2()?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(m) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for v in row.iter_mut() {
            *v = (*v - max).exp();
        }
        let total = sum_unordered(&mut row.to_vec());
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Jacobian-vector product of row softmax given its output `y`:
/// `dx = y ⊙ (dy − ⟨dy, y⟩)` per row.
pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    let (_, m) = y.dims2()?;
    y.expect_same_shape("softmax_rows_backward", dy)?;
    let mut dx = vec![0.0; y.len()];
    for ((yr, gr), dr) in y.data().chunks(m).zip(dy.data().chunks(m)).zip(dx.chunks_mut(m)) {
        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d = yv * (gv - inner);
        }
    }
    Ok(Tensor::from_parts(y.shape().to_vec(), dx))
}

pub struct LayerNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

/// Per-row normalization with population variance, then `gamma ⊙ x̂ + beta`.
pub fn layer_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    let (n, d) = x.dims2()?;
    gamma.expect_shape("layer_norm gamma", &[d])?;
    beta.expect_shape("layer_norm beta", &[d])?;
    let mut xhat = vec![0.0; n * d];
    let mut out = vec![0.0; n * d];
    let mut inv_std = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        inv_std.push(r);
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            out[i * d + j] = gamma.data()[j] * h + beta.data()[j];
        }
    }
    Ok((
        Tensor::from_parts(vec![n, d], out),
        LayerNormCache { normalized: Tensor::from_parts(vec![n, d], xhat), inv_std },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, d) = cache.normalized.dims2()?;
    dy.expect_shape("layer_norm_backward", &[n, d])?;
    let mut dx = vec![0.0; n * d];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let g = gamma.data();
    for i in 0..n {
        let xh = cache.normalized.row(i);
        let dyr = dy.row(i);
        let mut mean_dh = 0.0;
        let mut mean_dh_xh = 0.0;
        for j in 0..d {
            dgamma[j] += dyr[j] * xh[j];
            dbeta[j] += dyr[j];
            let dh = dyr[j] * g[j];
            mean_dh += dh;
            mean_dh_xh += dh * xh[j];
        }
        mean_dh /= d as f64;
        mean_dh_xh /= d as f64;
        let r = cache.inv_std[i];
        for j in 0..d {
            let dh = dyr[j] * g[j];
            dx[i * d + j] = r * (dh - mean_dh - xh[j] * mean_dh_xh);
        }
    }
    Ok((
        Tensor::from_parts(vec![n, d], dx),
        Tensor::from_parts(vec![d], dgamma),
        Tensor::from_parts(vec![d], dbeta),
    ))
}

/// Spatial mean of an `H×W×C` map.
pub fn global_avg_pool_hw(x: &Tensor) -> Result<Tensor> {
    let (h, w, c) = x.dims3()?;
    let mut out = vec![0.0; c];
    for px in x.data().chunks(c) {
        for (o, v) in out.iter_mut().zip(px) {
            *o += v;
        }
    }
    let inv = 1.0 / (h * w) as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(Tensor::from_parts(vec![c], out))
}

pub fn global_avg_pool_hw_backward(input_shape: &[usize], dy: &Tensor) -> Result<Tensor> {
    let (h, w, c) = match input_shape[..] {
        [a, b, c] => (a, b, c),
        _ => return Err(Error::shape("global_avg_pool_hw_backward", "input must be rank 3")),
    };
    dy.expect_shape("global_avg_pool_hw_backward", &[c])?;
    let inv = 1.0 / (h * w) as f64;
    let spread: Vec<f64> = dy.data().iter().map(|g| g * inv).collect();
    let mut dx = Vec::with_capacity(h * w * c);
    for _ in 0..h * w {
        dx.extend_from_slice(&spread);
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), dx))
}

/// Spatial max of an `H×W×C` map together with the flat spatial index of the
/// first maximum in row-major scan order for each channel.
pub fn global_max_pool_hw(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (_, _, c) = x.dims3()?;
    let mut out = vec![f64::NEG_INFINITY; c];
    let mut arg = vec![0usize; c];
    for (p, px) in x.data().chunks(c).enumerate() {
        for ch in 0..c {
            // Strict comparison keeps the earliest maximum on ties.
            if px[ch] > out[ch] {
                out[ch] = px[ch];
                arg[ch] = p;
            }
        }
    }
    Ok((Tensor::from_parts(vec![c], out), arg))
}

pub fn global_max_pool_hw_backward(
    input_shape: &[usize],
    argmax: &[usize],
    dy: &Tensor,
) -> Result<Tensor> {
    let c = *input_shape.last().unwrap_or(&0);
    dy.expect_shape("global_max_pool_hw_backward", &[c])?;
    if argmax.len() != c {
        return Err(Error::shape("global_max_pool_hw_backward", "argmax length differs from channels"));
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (ch, (&p, &g)) in argmax.iter().zip(dy.data()).enumerate() {
        d[p * c + ch] += g;
    }
    Ok(dx)
}

pub fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidRate(rate));
    }
    Ok(())
}

/// Inverted dropout. In train mode each element is kept with probability
/// `1 - rate` (one uniform draw per element, in storage order) and survivors
/// are scaled by `1 / (1 - rate)`. Returns the output and the per-element
/// multiplier, or `None` when the op is the identity.
pub fn dropout(
    x: &Tensor,
    rate: f64,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<(Tensor, Option<Vec<f64>>)> {
    check_rate(rate)?;
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep_scale = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.next_f64() < rate { 0.0 } else { keep_scale })
        .collect();
    let out = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Ok((Tensor::from_parts(x.shape().to_vec(), out), Some(mask)))
}

pub fn dropout_backward(mask: Option<&[f64]>, dy: &Tensor) -> Result<Tensor> {
    match mask {
        None => Ok(dy.clone()),
        Some(m) => {
            if m.len() != dy.len() {
                return Err(Error::LengthMismatch { left: m.len(), right: dy.len() });
            }
            let data = dy.data().iter().zip(m).map(|(g, s)| g * s).collect();
            Ok(Tensor::from_parts(dy.shape().to_vec(), data))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let b = t2(&[&[3.0, 1.0], &[4.0, 1.0]]);
        assert_eq!(matmul(&Tensor::identity(2), &b).unwrap(), b);
        let c = matmul(&t2(&[&[1.0, 2.0]]), &t2(&[&[3.0], &[4.0]])).unwrap();
        assert_eq!(c.data(), &[11.0]);
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3]));
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_backward_matches_transposes() {
        let a = t2(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let b = t2(&[&[1.0, 0.5], &[-1.0, 2.0], &[0.0, 3.0]]);
        let dc = t2(&[&[1.0, -1.0], &[0.5, 2.0]]);
        let (da, db) = matmul_backward(&a, &b, &dc).unwrap();
        assert_eq!(da, matmul(&dc, &b.transpose2().unwrap()).unwrap());
        assert_eq!(db, matmul(&a.transpose2().unwrap(), &dc).unwrap());
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let x = Tensor::new(vec![3, 3, 2], (0..18).map(|v| v as f64 * 0.5 - 3.0).collect()).unwrap();
        let mut k = Tensor::zeros(&[1, 1, 2, 2]);
        k.data_mut()[0] = 1.0;
        k.data_mut()[3] = 1.0;
        let y = conv2d_same(&x, &k, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_all_ones_counts_window() {
        let x = Tensor::full(&[3, 3, 1], 1.0);
        let k = Tensor::full(&[3, 3, 1, 1], 1.0);
        let y = conv2d_same(&x, &k, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::zeros(&[3, 3, 3]);
        let k = Tensor::zeros(&[3, 3, 4, 2]);
        assert!(matches!(conv2d_same(&x, &k, &Tensor::zeros(&[2])), Err(Error::ShapeMismatch { .. })));
        let k = Tensor::zeros(&[2, 2, 3, 2]);
        assert!(matches!(conv2d_same(&x, &k, &Tensor::zeros(&[2])), Err(Error::InvalidKernel(2))));
    }

    #[test]
    fn conv_stride_two_halves_extent() {
        let x = Tensor::full(&[224, 224, 1], 1.0);
        let k = Tensor::full(&[3, 3, 1, 1], 1.0);
        let mut y = conv2d(&x, &k, &Tensor::zeros(&[1]), 2).unwrap();
        assert_eq!(y.shape(), &[112, 112, 1]);
        for _ in 0..4 {
            y = conv2d(&y, &k, &Tensor::zeros(&[1]), 2).unwrap();
        }
        assert_eq!(y.shape(), &[7, 7, 1]);
    }

    #[test]
    fn relu_cases() {
        let x = Tensor::from_vec(vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let x = Tensor::from_vec(vec![-1.0, 3.0]).unwrap();
        let dy = Tensor::from_vec(vec![5.0, 5.0]).unwrap();
        assert_eq!(relu_backward(&x, &dy).unwrap().data(), &[0.0, 5.0]);
        let neg = Tensor::full(&[4], -2.0);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
        assert!(relu_backward(&neg, &Tensor::full(&[4], 1.0)).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_examples() {
        let y = softmax_rows(&t2(&[&[0.0, 0.0, 0.0]])).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax_rows(&t2(&[&[1000.0, 0.0]])).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-15 && y.data()[1] < 1e-300 + 1e-15);
        let y = softmax_rows(&t2(&[&[1f64.ln(), 2f64.ln(), 3f64.ln()]])).unwrap();
        for (v, e) in y.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - e).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::full(&[2], 1.0);
        let zeros = Tensor::zeros(&[2]);
        let (y, _) = layer_norm(&t2(&[&[4.0, 4.0]]), &ones, &zeros, LAYER_NORM_EPS).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
        let beta = Tensor::from_vec(vec![0.3, -0.7]).unwrap();
        let (y, _) = layer_norm(&t2(&[&[4.0, 4.0]]), &ones, &beta, LAYER_NORM_EPS).unwrap();
        assert_eq!(y.data(), beta.data());
        // mean 2, population std 1: outputs are ±1/sqrt(1 + eps)
        let (y, _) = layer_norm(&t2(&[&[1.0, 3.0]]), &ones, &zeros, LAYER_NORM_EPS).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-5 && (y.data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn pooling_examples() {
        let x = Tensor::full(&[3, 3, 2], 5.0);
        assert_eq!(global_avg_pool_hw(&x).unwrap().data(), &[5.0, 5.0]);
        assert_eq!(global_max_pool_hw(&x).unwrap().0.data(), &[5.0, 5.0]);

        let x = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool_hw(&x).unwrap().data(), &[2.5]);
        let dx = global_avg_pool_hw_backward(&[2, 2, 1], &Tensor::scalar(1.0)).unwrap();
        assert_eq!(dx.data(), &[0.25; 4]);

        let x = Tensor::new(vec![2, 2, 1], vec![1.0, 7.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_max_pool_hw(&x).unwrap().0.data(), &[7.0]);

        let tie = Tensor::new(vec![2, 2, 1], vec![7.0, 7.0, 0.0, 0.0]).unwrap();
        let (_, arg) = global_max_pool_hw(&tie).unwrap();
        let dx = global_max_pool_hw_backward(&[2, 2, 1], &arg, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(dx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn dropout_modes() {
        let x = Tensor::new(vec![4], vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        let mut rng = RngStream::new(1);
        assert_eq!(dropout(&x, 0.5, Mode::Eval, &mut rng).unwrap().0, x);
        assert_eq!(dropout(&x, 0.0, Mode::Train, &mut rng).unwrap().0, x);
        assert!(matches!(dropout(&x, 1.0, Mode::Train, &mut rng), Err(Error::InvalidRate(_))));
        assert!(matches!(dropout(&x, -0.1, Mode::Eval, &mut rng), Err(Error::InvalidRate(_))));
    }

    #[test]
    fn dropout_mean_is_preserved() {
        let x = Tensor::full(&[100_000], 1.0);
        let (y, _) = dropout(&x, 0.5, Mode::Train, &mut RngStream::new(2024)).unwrap();
        let mean = y.sum() / y.len() as f64;
        assert!((0.98..=1.02).contains(&mean), "mean {mean}");
    }

    #[test]
    fn dropout_is_reproducible_and_backward_uses_mask() {
        let x = Tensor::new(vec![64], (0..64).map(|v| v as f64).collect()).unwrap();
        let (a, ma) = dropout(&x, 0.3, Mode::Train, &mut RngStream::at(9, 4)).unwrap();
        let (b, _) = dropout(&x, 0.3, Mode::Train, &mut RngStream::at(9, 4)).unwrap();
        assert_eq!(a, b);
        let dy = Tensor::full(&[64], 1.0);
        let dx = dropout_backward(ma.as_deref(), &dy).unwrap();
        for (i, g) in dx.data().iter().enumerate() {
            let kept = a.data()[i] != 0.0 || x.data()[i] == 0.0;
            if x.data()[i] != 0.0 {
                assert_eq!(*g != 0.0, kept);
            }
        }
    }
}
