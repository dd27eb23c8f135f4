//! Scale-interaction encoder: sequence projection, pre-norm transformer
//! blocks with multi-head self-attention, sequence pooling and the
//! regression head.

use std::collections::hash_map::DefaultHasher;

use crate::error::{Error, Result};
use crate::layer::{hash_relu_gate, prefixed, split_grads, Dropout, Layer, LayerNorm, Linear};
use crate::ops::{self, Mode};
use crate::pyramid::ScaleSequence;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// `S · W_proj + b_proj`, applied row-wise.
pub fn project_sequence(s: &ScaleSequence, projection: &Linear) -> Result<Tensor> {
    let (_, w) = s.data.dims2()?;
    if w != projection.inputs() {
        return Err(Error::shape(
            "project_sequence",
            format!("sequence width {w}, projection expects {}", projection.inputs()),
        ));
    }
    Ok(projection.forward(&s.data, Mode::Eval, &RngStream::new(0))?.0)
}

pub struct AttentionCache {
    pub weights: Tensor,
}

/// `softmax(Q Kᵀ / √d_k) V`. Returns the output and the attention weights.
pub fn scaled_dot_product_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, AttentionCache)> {
    let (_, dq) = q.dims2()?;
    let (nk, dk) = k.dims2()?;
    let (nv, _) = v.dims2()?;
    if dq != dk || nk != nv {
        return Err(Error::shape(
            "scaled_dot_product_attention",
            format!("Q {:?}, K {:?}, V {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let scores = ops::matmul_bt(q, k)?.scale(1.0 / (dk as f64).sqrt());
    let weights = ops::softmax_rows(&scores)?;
    let out = mix_rows(&weights, v);
    Ok((out, AttentionCache { weights }))
}

/// `weights · v`, summing over tokens in an order-independent way.
fn mix_rows(weights: &Tensor, v: &Tensor) -> Tensor {
    let (n, m) = (weights.shape()[0], weights.shape()[1]);
    let d = v.shape()[1];
    let mut out = Vec::with_capacity(n * d);
    let mut terms = vec![0.0; m];
    for i in 0..n {
        let w = weights.row(i);
        for c in 0..d {
            for (j, t) in terms.iter_mut().enumerate() {
                *t = w[j] * v.data()[j * d + c];
            }
            out.push(ops::sum_unordered(&mut terms));
        }
    }
    Tensor::from_parts(vec![n, d], out)
}

/// Returns `(dQ, dK, dV)`.
pub fn scaled_dot_product_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cache: &AttentionCache,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (_, dk) = k.dims2()?;
    let scale = 1.0 / (dk as f64).sqrt();
    let (dweights, dv) = ops::matmul_backward(&cache.weights, v, dout)?;
    let dscores = ops::softmax_rows_backward(&cache.weights, &dweights)?.scale(scale);
    let dq = ops::matmul(&dscores, k)?;
    let dk = ops::matmul_at(&dscores, q)?;
    Ok((dq, dk, dv))
}

/// Query, key and value projections for one head (`D → d_k`, with biases).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

impl AttentionHead {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut p = prefixed("query", self.query.named_params());
        p.extend(prefixed("key", self.key.named_params()));
        p.extend(prefixed("value", self.value.named_params()));
        p
    }
}

/// Multi-head self-attention with per-head projections and an output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub heads: Vec<AttentionHead>,
    pub output: Linear,
}

pub struct MhaCache {
    input: Tensor,
    /// Per head: Q, K, V and attention weights.
    heads: Vec<(Tensor, Tensor, Tensor, AttentionCache)>,
    concat: Tensor,
}

impl MhaCache {
    /// Attention weight matrices, one per head.
    pub fn attention_weights(&self) -> Vec<&Tensor> {
        self.heads.iter().map(|h| &h.3.weights).collect()
    }
}

impl MultiHeadAttention {
    pub fn new(width: usize, heads: usize, rng: &RngStream) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::InvalidConfig(format!("{heads} heads do not divide width {width}")));
        }
        let dk = width / heads;
        let heads = (0..heads)
            .map(|h| {
                let mut r = rng.derive(h as u64);
                AttentionHead {
                    query: Linear::new(width, dk, &mut r),
                    key: Linear::new(width, dk, &mut r),
                    value: Linear::new(width, dk, &mut r),
                }
            })
            .collect();
        let output = Linear::new(width, width, &mut rng.derive_named("output"));
        Ok(Self { heads, output })
    }

    pub fn width(&self) -> usize {
        self.output.outputs()
    }

    pub fn head_dim(&self) -> usize {
        self.heads[0].query.outputs()
    }
}

/// Self-attention: queries, keys and values all come from `x`.
pub fn multi_head_attention(x: &Tensor, attention: &MultiHeadAttention) -> Result<Tensor> {
    Ok(attention.forward(x, Mode::Eval, &RngStream::new(0))?.0)
}

impl Layer for MultiHeadAttention {
    type Cache = MhaCache;

    fn forward(&self, x: &Tensor, mode: Mode, rng: &RngStream) -> Result<(Tensor, MhaCache)> {
        let (n, d) = x.dims2()?;
        if d != self.width() {
            return Err(Error::shape("multi_head_attention", format!("input width {d}, expected {}", self.width())));
        }
        let dk = self.head_dim();
        let mut concat = vec![0.0; n * d];
        let mut heads = Vec::with_capacity(self.heads.len());
        for (h, head) in self.heads.iter().enumerate() {
            let q = head.query.forward(x, mode, rng)?.0;
            let k = head.key.forward(x, mode, rng)?.0;
            let v = head.value.forward(x, mode, rng)?.0;
            let (o, cache) = scaled_dot_product_attention(&q, &k, &v)?;
            for i in 0..n {
                concat[i * d + h * dk..i * d + (h + 1) * dk].copy_from_slice(o.row(i));
            }
            heads.push((q, k, v, cache));
        }
        let concat = Tensor::from_parts(vec![n, d], concat);
        let (y, _) = self.output.forward(&concat, mode, rng)?;
        Ok((y, MhaCache { input: x.clone(), heads, concat }))
    }

    fn backward(&self, cache: &MhaCache, dy: &Tensor, grads: &mut [Tensor]) -> Result<Tensor> {
        let (n, d) = cache.input.dims2()?;
        let dk = self.head_dim();
        let mut counts = vec![6; self.heads.len()];
        counts.push(2);
        let mut parts = split_grads(grads, &counts);
        let out_grads = parts.pop().expect("output projection grads");
        let dconcat = self.output.backward(&cache.concat, dy, out_grads)?;

        let mut dx = Tensor::zeros(&[n, d]);
        for (h, (head, (q, k, v, att))) in self.heads.iter().zip(&cache.heads).enumerate() {
            let mut dout = vec![0.0; n * dk];
            for i in 0..n {
                dout[i * dk..(i + 1) * dk].copy_from_slice(&dconcat.row(i)[h * dk..(h + 1) * dk]);
            }
            let dout = Tensor::from_parts(vec![n, dk], dout);
            let (dq, dkk, dv) = scaled_dot_product_attention_backward(q, k, v, att, &dout)?;
            let hp = split_grads(parts[h], &[2, 2, 2]);
            let mut hp = hp.into_iter();
            dx.add_assign(&head.query.backward(&cache.input, &dq, hp.next().expect("query"))?)?;
            dx.add_assign(&head.key.backward(&cache.input, &dkk, hp.next().expect("key"))?)?;
            dx.add_assign(&head.value.backward(&cache.input, &dv, hp.next().expect("value"))?)?;
        }
        Ok(dx)
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut p: Vec<_> = self
            .heads
            .iter()
            .enumerate()
            .flat_map(|(h, head)| prefixed(&format!("head{h}"), head.named_params()))
            .collect();
        p.extend(prefixed("output", self.output.named_params()));
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p: Vec<&mut Tensor> = Vec::new();
        for head in &mut self.heads {
            p.extend(head.query.params_mut());
            p.extend(head.key.params_mut());
            p.extend(head.value.params_mut());
        }
        p.extend(self.output.params_mut());
        p
    }
}

/// `ReLU(h W_1 + b_1) W_2 + b_2`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub w1: Linear,
    pub w2: Linear,
}

impl FeedForward {
    pub fn new(width: usize, hidden: usize, rng: &RngStream) -> Self {
        Self {
            w1: Linear::new(width, hidden, &mut rng.derive(1)),
            w2: Linear::new(hidden, width, &mut rng.derive(2)),
        }
    }
}

impl Layer for FeedForward {
    /// Input and hidden pre-activation.
    type Cache = (Tensor, Tensor);

    fn forward(&self, x: &Tensor, mode: Mode, rng: &RngStream) -> Result<(Tensor, Self::Cache)> {
        let (pre, _) = self.w1.forward(x, mode, rng)?;
        let (y, _) = self.w2.forward(&ops::relu(&pre), mode, rng)?;
        Ok((y, (x.clone(), pre)))
    }

    fn backward(&self, cache: &Self::Cache, dy: &Tensor, grads: &mut [Tensor]) -> Result<Tensor> {
        let (x, pre) = cache;
        let (g1, g2) = grads.split_at_mut(2);
        let dhidden = self.w2.backward(&ops::relu(pre), dy, g2)?;
        let dpre = ops::relu_backward(pre, &dhidden)?;
        self.w1.backward(x, &dpre, g1)
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut p = prefixed("w1", self.w1.named_params());
        p.extend(prefixed("w2", self.w2.named_params()));
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.w1.params_mut();
        p.extend(self.w2.params_mut());
        p
    }

    fn hash_kinks(&self, cache: &Self::Cache, state: &mut DefaultHasher) {
        hash_relu_gate(&cache.1, state);
    }
}

/// Pre-norm block:
/// `x ← x + Dropout(MHA(LN₁(x)))`, then `x ← x + Dropout(FFN(LN₂(x)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attention: MultiHeadAttention,
    pub drop1: Dropout,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
    pub drop2: Dropout,
}

pub struct BlockCache {
    ln1: ops::LayerNormCache,
    attention: MhaCache,
    drop1: Option<Vec<f64>>,
    ln2: ops::LayerNormCache,
    ffn: (Tensor, Tensor),
    drop2: Option<Vec<f64>>,
}

impl BlockCache {
    pub fn attention(&self) -> &MhaCache {
        &self.attention
    }
}

impl TransformerBlock {
    /// `index` keys the block's init stream and its two dropout sites.
    pub fn new(width: usize, heads: usize, ffn_dim: usize, dropout: f64, index: usize, seed: u64) -> Result<Self> {
        let rng = RngStream::new(seed).derive_named("block").derive(index as u64);
        let site = 100 + 2 * index as u64;
        Ok(Self {
            ln1: LayerNorm::new(width),
            attention: MultiHeadAttention::new(width, heads, &rng.derive_named("attention"))?,
            drop1: Dropout::new(dropout, site)?,
            ln2: LayerNorm::new(width),
            ffn: FeedForward::new(width, ffn_dim, &rng.derive_named("ffn")),
            drop2: Dropout::new(dropout, site + 1)?,
        })
    }

    pub fn width(&self) -> usize {
        self.attention.width()
    }

    fn counts(&self) -> [usize; 4] {
        [2, self.attention.param_count(), 2, 4]
    }
}

pub fn transformer_block_forward(x: &Tensor, block: &TransformerBlock, mode: Mode, rng: &RngStream) -> Result<Tensor> {
    Ok(block.forward(x, mode, rng)?.0)
}

impl Layer for TransformerBlock {
    type Cache = BlockCache;

    fn forward(&self, x: &Tensor, mode: Mode, rng: &RngStream) -> Result<(Tensor, BlockCache)> {
        let (h, ln1) = self.ln1.forward(x, mode, rng)?;
        let (a, attention) = self.attention.forward(&h, mode, rng)?;
        let (a, drop1) = self.drop1.forward(&a, mode, rng)?;
        let x1 = x.add(&a)?;
        let (h, ln2) = self.ln2.forward(&x1, mode, rng)?;
        let (f, ffn) = self.ffn.forward(&h, mode, rng)?;
        let (f, drop2) = self.drop2.forward(&f, mode, rng)?;
        let x2 = x1.add(&f)?;
        Ok((x2, BlockCache { ln1, attention, drop1, ln2, ffn, drop2 }))
    }

    fn backward(&self, cache: &BlockCache, dy: &Tensor, grads: &mut [Tensor]) -> Result<Tensor> {
        let mut parts = split_grads(grads, &self.counts()).into_iter();
        let (g_ln1, g_att, g_ln2, g_ffn) = (
            parts.next().expect("ln1"),
            parts.next().expect("attention"),
            parts.next().expect("ln2"),
            parts.next().expect("ffn"),
        );
        let df = self.drop2.backward(&cache.drop2, dy, &mut [])?;
        let dh = self.ffn.backward(&cache.ffn, &df, g_ffn)?;
        let mut dx1 = self.ln2.backward(&cache.ln2, &dh, g_ln2)?;
        dx1.add_assign(dy)?;

        let da = self.drop1.backward(&cache.drop1, &dx1, &mut [])?;
        let dh = self.attention.backward(&cache.attention, &da, g_att)?;
        let mut dx0 = self.ln1.backward(&cache.ln1, &dh, g_ln1)?;
        dx0.add_assign(&dx1)?;
        Ok(dx0)
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut p = prefixed("ln1", self.ln1.named_params());
        p.extend(prefixed("attention", self.attention.named_params()));
        p.extend(prefixed("ln2", self.ln2.named_params()));
        p.extend(prefixed("ffn", self.ffn.named_params()));
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.ln1.params_mut();
        p.extend(self.attention.params_mut());
        p.extend(self.ln2.params_mut());
        p.extend(self.ffn.params_mut());
        p
    }

    fn hash_kinks(&self, cache: &BlockCache, state: &mut DefaultHasher) {
        self.ffn.hash_kinks(&cache.ffn, state);
    }
}

/// A stack of transformer blocks with no final normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub blocks: Vec<TransformerBlock>,
}

impl Encoder {
    pub fn new(width: usize, blocks: usize, heads: usize, ffn_dim: usize, dropout: f64, seed: u64) -> Result<Self> {
        let blocks = (0..blocks)
            .map(|i| TransformerBlock::new(width, heads, ffn_dim, dropout, i, seed))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }
}

pub fn encoder_forward(x: &Tensor, encoder: &Encoder, mode: Mode, rng: &RngStream) -> Result<Tensor> {
    Ok(encoder.forward(x, mode, rng)?.0)
}

impl Layer for Encoder {
    type Cache = Vec<BlockCache>;

    fn forward(&self, x: &Tensor, mode: Mode, rng: &RngStream) -> Result<(Tensor, Self::Cache)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&h, mode, rng)?;
            caches.push(cache);
            h = next;
        }
        Ok((h, caches))
    }

    fn backward(&self, caches: &Self::Cache, dy: &Tensor, grads: &mut [Tensor]) -> Result<Tensor> {
        let counts: Vec<usize> = self.blocks.iter().map(Layer::param_count).collect();
        let mut parts = split_grads(grads, &counts);
        let mut g = dy.clone();
        for (i, (block, cache)) in self.blocks.iter().zip(caches).enumerate().rev() {
            g = block.backward(cache, &g, parts[i])?;
        }
        Ok(g)
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| prefixed(&i.to_string(), b.named_params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect()
    }

    fn hash_kinks(&self, caches: &Self::Cache, state: &mut DefaultHasher) {
        for (b, c) in self.blocks.iter().zip(caches) {
            b.hash_kinks(c, state);
        }
    }
}

/// Column-wise mean over the sequence rows.
pub fn sequence_pool(x: &Tensor) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    let mut column = vec![0.0; n];
    let mean = (0..d)
        .map(|c| {
            for (i, t) in column.iter_mut().enumerate() {
                *t = x.data()[i * d + c];
            }
            ops::sum_unordered(&mut column) / n as f64
        })
        .collect();
    Ok(Tensor::from_parts(vec![d], mean))
}

pub fn sequence_pool_backward(rows: usize, dy: &Tensor) -> Result<Tensor> {
    let d = dy.len();
    let g = dy.scale(1.0 / rows as f64);
    let mut out = Vec::with_capacity(rows * d);
    for _ in 0..rows {
        out.extend_from_slice(g.data());
    }
    Ok(Tensor::from_parts(vec![rows, d], out))
}

/// `ŷ = W_reg · Dropout(v) + b_reg`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionHead {
    pub dropout: Dropout,
    pub linear: Linear,
}

pub const HEAD_DROPOUT_SITE: u64 = 1;

impl RegressionHead {
    pub fn new(width: usize, dropout: f64, seed: u64) -> Result<Self> {
        let mut rng = RngStream::new(seed).derive_named("head");
        Ok(Self { dropout: Dropout::new(dropout, HEAD_DROPOUT_SITE)?, linear: Linear::new(width, 1, &mut rng) })
    }
}

pub fn regression_head(v: &Tensor, head: &RegressionHead, mode: Mode, rng: &RngStream) -> Result<f64> {
    Ok(head.forward(v, mode, rng)?.0.data()[0])
}

impl Layer for RegressionHead {
    type Cache = (Option<Vec<f64>>, Tensor);

    /// `v` has shape `[D]`; the output has shape `[1]`.
    fn forward(&self, v: &Tensor, mode: Mode, rng: &RngStream) -> Result<(Tensor, Self::Cache)> {
        let row = v.clone().reshape(vec![1, v.len()])?;
        let (dropped, mask) = self.dropout.forward(&row, mode, rng)?;
        let (y, _) = self.linear.forward(&dropped, mode, rng)?;
        Ok((y.reshape(vec![1])?, (mask, dropped)))
    }

    fn backward(&self, cache: &Self::Cache, dy: &Tensor, grads: &mut [Tensor]) -> Result<Tensor> {
        let dy = dy.clone().reshape(vec![1, 1])?;
        let ddropped = self.linear.backward(&cache.1, &dy, grads)?;
        let dv = self.dropout.backward(&cache.0, &ddropped, &mut [])?;
        let n = dv.len();
        dv.reshape(vec![n])
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.linear.named_params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.linear.params_mut()
    }
}
