//! The complete scale-interaction model and its ablation variants.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureMap, ImageTensor, SyntheticBackbone};
use crate::error::{Error, Result};
use crate::layer::{prefixed, split_grads, Layer, Linear};
use crate::ops::{self, Mode};
use crate::pyramid::{self, Pooling, ScalePyramid, ScaleSequence};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::transformer::{self, Encoder, RegressionHead};

/// Computation graphs compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationVariant {
    /// Backbone → GAP over the base map → dense → score.
    Baseline,
    /// Scale pyramid → concatenated 3×128 summaries → dense → score.
    NoTransformer,
    /// Full pipeline with GAP-only scale tokens (3×64).
    NoGmp,
    Full,
}

impl AblationVariant {
    /// Row order of the ablation table.
    pub const ALL: [AblationVariant; 4] =
        [AblationVariant::Baseline, AblationVariant::NoTransformer, AblationVariant::NoGmp, AblationVariant::Full];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Baseline => "baseline",
            AblationVariant::NoTransformer => "no-transformer",
            AblationVariant::NoGmp => "no-gmp",
            AblationVariant::Full => "full",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            AblationVariant::Baseline => 0,
            AblationVariant::NoTransformer => 1,
            AblationVariant::NoGmp => 2,
            AblationVariant::Full => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(usize::from(tag)).copied()
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant {s:?} (expected baseline|no-transformer|no-gmp|full)")))
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone_channels: usize,
    pub d_proj: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub seed: u64,
    /// `Some(trainable)` attaches a synthetic image backbone.
    pub synthetic_backbone: Option<bool>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone_channels: crate::backbone::PAPER_BACKBONE_CHANNELS,
            d_proj: 128,
            blocks: 2,
            heads: 4,
            ffn_dim: 512,
            dropout: 0.1,
            seed: 0,
            synthetic_backbone: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Graph {
    Baseline { dense: Linear },
    NoTransformer { pyramid: ScalePyramid, dense: Linear },
    Interaction { pyramid: ScalePyramid, projection: Linear, encoder: Encoder, head: RegressionHead },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SitModel {
    pub variant: AblationVariant,
    pub backbone: Option<SyntheticBackbone>,
    pub graph: Graph,
}

/// Input to [`SitModel::predict`].
pub enum SitInput<'a> {
    Image(&'a ImageTensor),
    Features(&'a FeatureMap),
}

/// Eval-mode intermediates of the interaction graph.
#[derive(Clone, Debug)]
pub struct Trace {
    pub branch_maps: Vec<Tensor>,
    pub sequence: Tensor,
    pub projected: Tensor,
    pub encoded: Tensor,
    pub pooled: Tensor,
    pub attention_weights: Vec<Tensor>,
    pub prediction: f64,
}

pub enum GraphCache {
    Baseline { feature_shape: Vec<usize>, pooled: Tensor },
    NoTransformer { pyramid: pyramid::PyramidCache, flat: Tensor },
    Interaction {
        pyramid: pyramid::PyramidCache,
        sequence: Tensor,
        encoder: Vec<transformer::BlockCache>,
        rows: usize,
        head: <RegressionHead as Layer>::Cache,
    },
}

pub struct ModelCache {
    backbone: Option<<SyntheticBackbone as Layer>::Cache>,
    graph: GraphCache,
}

/// Builds the model for an ablation variant.
pub fn build_variant(variant: AblationVariant, cfg: &ModelConfig) -> Result<SitModel> {
    ops::check_rate(cfg.dropout)?;
    let seed = cfg.seed;
    let backbone = cfg.synthetic_backbone.map(|t| SyntheticBackbone::new(cfg.backbone_channels, seed, t));
    let dense_rng = |inputs| Linear::new(inputs, 1, &mut RngStream::new(seed).derive_named("dense"));
    let graph = match variant {
        AblationVariant::Baseline => Graph::Baseline { dense: dense_rng(cfg.backbone_channels) },
        AblationVariant::NoTransformer => {
            let pyramid = ScalePyramid::new(cfg.backbone_channels, Pooling::AvgMax, seed);
            Graph::NoTransformer { dense: dense_rng(3 * pyramid.width()), pyramid }
        }
        AblationVariant::NoGmp | AblationVariant::Full => {
            let pooling = if variant == AblationVariant::Full { Pooling::AvgMax } else { Pooling::AvgOnly };
            let pyramid = ScalePyramid::new(cfg.backbone_channels, pooling, seed);
            let projection = Linear::new(pyramid.width(), cfg.d_proj, &mut RngStream::new(seed).derive_named("projection"));
            let encoder = Encoder::new(cfg.d_proj, cfg.blocks, cfg.heads, cfg.ffn_dim, cfg.dropout, seed)?;
            let head = RegressionHead::new(cfg.d_proj, cfg.dropout, seed)?;
            Graph::Interaction { pyramid, projection, encoder, head }
        }
    };
    Ok(SitModel { variant, backbone, graph })
}

impl SitModel {
    pub fn backbone_channels(&self) -> usize {
        match &self.graph {
            Graph::Baseline { dense } => dense.inputs(),
            Graph::NoTransformer { pyramid, .. } | Graph::Interaction { pyramid, .. } => pyramid.backbone_channels(),
        }
    }

    pub fn pyramid(&self) -> Option<&ScalePyramid> {
        match &self.graph {
            Graph::Baseline { .. } => None,
            Graph::NoTransformer { pyramid, .. } | Graph::Interaction { pyramid, .. } => Some(pyramid),
        }
    }

    /// Scalar prediction for one input.
    pub fn predict(&self, input: SitInput<'_>, mode: Mode, rng: &RngStream) -> Result<f64> {
        match input {
            SitInput::Image(img) => {
                let backbone = self.backbone.as_ref().ok_or_else(|| {
                    Error::InvalidConfig("model has no synthetic backbone; feed precomputed features".into())
                })?;
                let (features, _) = backbone.forward(img.tensor(), mode, rng)?;
                Ok(self.graph_forward(&features, mode, rng)?.0)
            }
            SitInput::Features(fm) => Ok(self.graph_forward(&fm.data, mode, rng)?.0),
        }
    }

    /// Eval-mode prediction from a base feature tensor.
    pub fn predict_features(&self, features: &Tensor) -> Result<f64> {
        Ok(self.graph_forward(features, Mode::Eval, &RngStream::new(0))?.0)
    }

    /// Eval-mode prediction of the interaction graph from an explicit scale sequence.
    pub fn predict_from_sequence(&self, sequence: &ScaleSequence) -> Result<f64> {
        let Graph::Interaction { projection, encoder, head, .. } = &self.graph else {
            return Err(Error::InvalidConfig(format!("{} has no scale sequence stage", self.variant)));
        };
        let rng = RngStream::new(0);
        let projected = transformer::project_sequence(sequence, projection)?;
        let encoded = transformer::encoder_forward(&projected, encoder, Mode::Eval, &rng)?;
        let pooled = transformer::sequence_pool(&encoded)?;
        transformer::regression_head(&pooled, head, Mode::Eval, &rng)
    }

    /// Eval-mode intermediates for the interaction graph.
    pub fn trace(&self, features: &Tensor) -> Result<Trace> {
        let Graph::Interaction { pyramid, projection, encoder, head } = &self.graph else {
            return Err(Error::InvalidConfig(format!("{} has no interaction stage to trace", self.variant)));
        };
        let rng = RngStream::new(0);
        let branch_maps = pyramid
            .branches
            .iter()
            .map(|b| pyramid::branch_forward(features, b).map(|(act, _)| act))
            .collect::<Result<Vec<_>>>()?;
        let sequence = pyramid::build_scale_sequence(features, pyramid)?;
        let projected = transformer::project_sequence(&sequence, projection)?;
        let (encoded, caches) = encoder.forward(&projected, Mode::Eval, &rng)?;
        let attention_weights = caches
            .iter()
            .flat_map(|c| c.attention().attention_weights().into_iter().cloned())
            .collect();
        let pooled = transformer::sequence_pool(&encoded)?;
        let prediction = transformer::regression_head(&pooled, head, Mode::Eval, &rng)?;
        Ok(Trace { branch_maps, sequence: sequence.data, projected, encoded, pooled, attention_weights, prediction })
    }

    fn graph_forward(&self, features: &Tensor, mode: Mode, rng: &RngStream) -> Result<(f64, GraphCache)> {
        let (_, _, c) = features.dims3()?;
        if c != self.backbone_channels() {
            return Err(Error::shape(
                "sit_forward",
                format!("feature map has {c} channels, model expects {}", self.backbone_channels()),
            ));
        }
        match &self.graph {
            Graph::Baseline { dense } => {
                let pooled = ops::global_avg_pool_hw(features)?.reshape(vec![1, c])?;
                let (y, _) = dense.forward(&pooled, mode, rng)?;
                Ok((y.data()[0], GraphCache::Baseline { feature_shape: features.shape().to_vec(), pooled }))
            }
            Graph::NoTransformer { pyramid, dense } => {
                let (s, pc) = pyramid.forward(features, mode, rng)?;
                let flat = s.reshape(vec![1, 3 * pyramid.width()])?;
                let (y, _) = dense.forward(&flat, mode, rng)?;
                Ok((y.data()[0], GraphCache::NoTransformer { pyramid: pc, flat }))
            }
            Graph::Interaction { pyramid, projection, encoder, head } => {
                let (s, pc) = pyramid.forward(features, mode, rng)?;
                let (projected, _) = projection.forward(&s, mode, rng)?;
                let (encoded, ec) = encoder.forward(&projected, mode, rng)?;
                let rows = encoded.shape()[0];
                let pooled = transformer::sequence_pool(&encoded)?;
                let (y, hc) = head.forward(&pooled, mode, rng)?;
                Ok((y.data()[0], GraphCache::Interaction { pyramid: pc, sequence: s, encoder: ec, rows, head: hc }))
            }
        }
    }

    fn graph_param_count(&self) -> usize {
        match &self.graph {
            Graph::Baseline { dense } => dense.param_count(),
            Graph::NoTransformer { pyramid, dense } => pyramid.param_count() + dense.param_count(),
            Graph::Interaction { pyramid, projection, encoder, head } => {
                pyramid.param_count() + projection.param_count() + encoder.param_count() + head.param_count()
            }
        }
    }

    /// Accumulates parameter gradients for upstream gradient `dy` on the
    /// prediction. Returns the gradient with respect to the base feature map
    /// when `need_dx` is set.
    fn graph_backward(&self, cache: &GraphCache, dy: f64, grads: &mut [Tensor], need_dx: bool) -> Result<Option<Tensor>> {
        let dy_row = Tensor::from_parts(vec![1, 1], vec![dy]);
        match (&self.graph, cache) {
            (Graph::Baseline { dense }, GraphCache::Baseline { feature_shape, pooled }) => {
                let dpooled = dense.backward(pooled, &dy_row, grads)?;
                if !need_dx {
                    return Ok(None);
                }
                let c = feature_shape[2];
                let dpooled = dpooled.reshape(vec![c])?;
                Ok(Some(ops::global_avg_pool_hw_backward(feature_shape, &dpooled)?))
            }
            (Graph::NoTransformer { pyramid, dense }, GraphCache::NoTransformer { pyramid: pc, flat }) => {
                let (gp, gd) = grads.split_at_mut(pyramid.param_count());
                let dflat = dense.backward(flat, &dy_row, gd)?;
                let ds = dflat.reshape(vec![3, pyramid.width()])?;
                pyramid.backward_inner(pc, &ds, gp, need_dx)
            }
            (
                Graph::Interaction { pyramid, projection, encoder, head },
                GraphCache::Interaction { pyramid: pc, sequence, encoder: ec, rows, head: hc },
            ) => {
                let counts = [pyramid.param_count(), projection.param_count(), encoder.param_count(), head.param_count()];
                let mut parts = split_grads(grads, &counts).into_iter();
                let (gp, gproj, genc, ghead) = (
                    parts.next().expect("pyramid"),
                    parts.next().expect("projection"),
                    parts.next().expect("encoder"),
                    parts.next().expect("head"),
                );
                let dpooled = head.backward(hc, &Tensor::scalar(dy), ghead)?;
                let dencoded = transformer::sequence_pool_backward(*rows, &dpooled)?;
                let dprojected = encoder.backward(ec, &dencoded, genc)?;
                let ds = projection.backward(sequence, &dprojected, gproj)?;
                pyramid.backward_inner(pc, &ds, gp, need_dx)
            }
            _ => Err(Error::InvalidConfig("cache does not belong to this model graph".into())),
        }
    }

    /// Forward in `mode`, then accumulate `dloss/dprediction · ∂prediction/∂θ`
    /// into `grads`. A frozen backbone receives no gradient. Returns the prediction.
    pub fn forward_backward(
        &self,
        input: &Tensor,
        mode: Mode,
        rng: &RngStream,
        dloss: impl FnOnce(f64) -> f64,
        grads: &mut [Tensor],
    ) -> Result<f64> {
        let (y, cache) = self.forward_scalar(input, mode, rng)?;
        let dy = dloss(y);
        self.backward_scalar(&cache, dy, grads, false)?;
        Ok(y)
    }

    fn forward_scalar(&self, input: &Tensor, mode: Mode, rng: &RngStream) -> Result<(f64, ModelCache)> {
        match &self.backbone {
            Some(bb) => {
                let (features, bc) = bb.forward(input, mode, rng)?;
                let (y, graph) = self.graph_forward(&features, mode, rng)?;
                Ok((y, ModelCache { backbone: Some(bc), graph }))
            }
            None => {
                let (y, graph) = self.graph_forward(input, mode, rng)?;
                Ok((y, ModelCache { backbone: None, graph }))
            }
        }
    }

    fn backward_scalar(&self, cache: &ModelCache, dy: f64, grads: &mut [Tensor], need_input: bool) -> Result<Option<Tensor>> {
        let nb = self.backbone.as_ref().map_or(0, Layer::param_count);
        let (gb, gg) = grads.split_at_mut(nb);
        match (&self.backbone, &cache.backbone) {
            (Some(bb), Some(bc)) => {
                let train_backbone = bb.trainable || need_input;
                let dfeat = self.graph_backward(&cache.graph, dy, gg, train_backbone)?;
                match dfeat {
                    Some(df) => bb.backward_inner(bc, &df, gb, need_input),
                    None => Ok(None),
                }
            }
            _ => self.graph_backward(&cache.graph, dy, gg, need_input),
        }
    }
}

impl Layer for SitModel {
    type Cache = ModelCache;

    /// The input is an image when a synthetic backbone is attached, otherwise
    /// a base feature map. The output has shape `[1]`.
    fn forward(&self, x: &Tensor, mode: Mode, rng: &RngStream) -> Result<(Tensor, ModelCache)> {
        let (y, cache) = self.forward_scalar(x, mode, rng)?;
        Ok((Tensor::scalar(y), cache))
    }

    fn backward(&self, cache: &ModelCache, dy: &Tensor, grads: &mut [Tensor]) -> Result<Tensor> {
        dy.expect_shape("SitModel backward", &[1])?;
        // Full gradients: a frozen backbone is still differentiated here.
        let nb = self.backbone.as_ref().map_or(0, Layer::param_count);
        let (gb, gg) = grads.split_at_mut(nb);
        match (&self.backbone, &cache.backbone) {
            (Some(bb), Some(bc)) => {
                let df = self.graph_backward(&cache.graph, dy.data()[0], gg, true)?.expect("feature gradient");
                bb.backward(bc, &df, gb)
            }
            _ => Ok(self.graph_backward(&cache.graph, dy.data()[0], gg, true)?.expect("feature gradient")),
        }
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut p = Vec::new();
        if let Some(bb) = &self.backbone {
            p.extend(prefixed("backbone", bb.named_params()));
        }
        match &self.graph {
            Graph::Baseline { dense } => p.extend(prefixed("dense", dense.named_params())),
            Graph::NoTransformer { pyramid, dense } => {
                p.extend(prefixed("pyramid", pyramid.named_params()));
                p.extend(prefixed("dense", dense.named_params()));
            }
            Graph::Interaction { pyramid, projection, encoder, head } => {
                p.extend(prefixed("pyramid", pyramid.named_params()));
                p.extend(prefixed("projection", projection.named_params()));
                p.extend(prefixed("encoder", encoder.named_params()));
                p.extend(prefixed("head", head.named_params()));
            }
        }
        debug_assert_eq!(p.len(), self.backbone.as_ref().map_or(0, Layer::param_count) + self.graph_param_count());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = Vec::new();
        if let Some(bb) = &mut self.backbone {
            p.extend(bb.params_mut());
        }
        match &mut self.graph {
            Graph::Baseline { dense } => p.extend(dense.params_mut()),
            Graph::NoTransformer { pyramid, dense } => {
                p.extend(pyramid.params_mut());
                p.extend(dense.params_mut());
            }
            Graph::Interaction { pyramid, projection, encoder, head } => {
                p.extend(pyramid.params_mut());
                p.extend(projection.params_mut());
                p.extend(encoder.params_mut());
                p.extend(head.params_mut());
            }
        }
        p
    }

    fn hash_kinks(&self, cache: &ModelCache, state: &mut DefaultHasher) {
        if let (Some(bb), Some(bc)) = (&self.backbone, &cache.backbone) {
            bb.hash_kinks(bc, state);
        }
        match (&self.graph, &cache.graph) {
            (Graph::NoTransformer { pyramid, .. }, GraphCache::NoTransformer { pyramid: pc, .. }) => {
                pyramid.hash_kinks(pc, state);
            }
            (Graph::Interaction { pyramid, encoder, .. }, GraphCache::Interaction { pyramid: pc, encoder: ec, .. }) => {
                pyramid.hash_kinks(pc, state);
                encoder.hash_kinks(ec, state);
            }
            _ => {}
        }
    }
}
