//! SITM: a named-tensor container for model parameters.
//!
//! Layout (little-endian): magic `SITM`, u8 version, u8 variant tag, u32
//! tensor count, then per tensor a u32 name length, UTF-8 name, u8 rank, u32
//! extents and f64 payload. Hyperparameters that shapes cannot reveal are
//! stored as `meta.*` tensors.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layer::Layer;
use crate::model::{build_variant, AblationVariant, ModelConfig, SitModel};
use crate::tensor::Tensor;

pub const SITM_MAGIC: [u8; 4] = *b"SITM";
pub const SITM_VERSION: u8 = 1;

const META_DROPOUT: &str = "meta.dropout";
const META_TRAINABLE: &str = "meta.backbone_trainable";

/// Parameters plus metadata, in serialization order.
pub fn named_tensors(model: &SitModel) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> =
        model.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect();
    out.push((META_DROPOUT.into(), Tensor::scalar(model_dropout(model))));
    if let Some(bb) = &model.backbone {
        out.push((META_TRAINABLE.into(), Tensor::scalar(if bb.trainable { 1.0 } else { 0.0 })));
    }
    out
}

fn model_dropout(model: &SitModel) -> f64 {
    match &model.graph {
        crate::model::Graph::Interaction { head, .. } => head.dropout.rate,
        _ => 0.0,
    }
}

pub fn encode_model(model: &SitModel) -> Vec<u8> {
    let tensors = named_tensors(model);
    let mut out = Vec::new();
    out.extend_from_slice(&SITM_MAGIC);
    out.push(SITM_VERSION);
    out.push(model.variant.tag());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.ndim() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::TruncatedPayload {
            expected: self.pos.saturating_add(n),
            found: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

/// Decodes the variant tag and raw named tensors.
pub fn decode_tensors(bytes: &[u8]) -> Result<(AblationVariant, Vec<(String, Tensor)>)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4).map_err(|_| Error::MalformedFile("file shorter than the SITM header".into()))?
        .try_into()
        .expect("4 bytes");
    if magic != SITM_MAGIC {
        return Err(Error::BadMagic { expected: SITM_MAGIC, found: magic });
    }
    let version = r.u8()?;
    if version != SITM_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let tag = r.u8()?;
    let variant = AblationVariant::from_tag(tag).ok_or_else(|| Error::MalformedFile(format!("unknown variant tag {tag}")))?;
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::MalformedFile("tensor name is not UTF-8".into()))?
            .to_owned();
        let ndim = usize::from(r.u8()?);
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let n = n
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::MalformedFile(format!("tensor {name:?} is too large")))?;
        let data = r.take(n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::MalformedFile(format!("tensor {name:?}: {e}")))?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::MalformedFile(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((variant, tensors))
}

pub fn decode_model(bytes: &[u8]) -> Result<SitModel> {
    let (variant, tensors) = decode_tensors(bytes)?;
    from_named_tensors(variant, tensors)
}

fn dim(map: &BTreeMap<String, Tensor>, name: &str, axis: usize) -> Result<usize> {
    let t = map.get(name).ok_or_else(|| Error::MissingTensor(name.into()))?;
    t.shape().get(axis).copied().ok_or_else(|| Error::shape("load_model", format!("{name} has rank {}", t.ndim())))
}

fn meta(map: &mut BTreeMap<String, Tensor>, name: &str) -> Option<f64> {
    map.remove(name).map(|t| t.data()[0])
}

/// Rebuilds a `variant` model from named tensors, inferring widths and depths
/// from tensor shapes. Every model parameter must be present with a matching
/// shape and no name may be left over.
pub fn from_named_tensors(variant: AblationVariant, tensors: Vec<(String, Tensor)>) -> Result<SitModel> {
    let mut map = BTreeMap::new();
    for (name, t) in tensors {
        if map.insert(name.clone(), t).is_some() {
            return Err(Error::MalformedFile(format!("duplicate tensor {name:?}")));
        }
    }
    let dropout = meta(&mut map, META_DROPOUT).unwrap_or(0.0);
    let trainable = meta(&mut map, META_TRAINABLE);
    let backbone = map.contains_key("backbone.stage4.kernel").then(|| trainable.unwrap_or(0.0) != 0.0);

    let mut cfg = ModelConfig { dropout, synthetic_backbone: backbone, ..ModelConfig::default() };
    match variant {
        AblationVariant::Baseline => cfg.backbone_channels = dim(&map, "dense.weight", 0)?,
        AblationVariant::NoTransformer => cfg.backbone_channels = dim(&map, "pyramid.branch1x1.kernel", 2)?,
        AblationVariant::NoGmp | AblationVariant::Full => {
            cfg.backbone_channels = dim(&map, "pyramid.branch1x1.kernel", 2)?;
            cfg.d_proj = dim(&map, "projection.weight", 1)?;
            cfg.blocks = (0..).take_while(|i| map.contains_key(&format!("encoder.{i}.ln1.gamma"))).count();
            if cfg.blocks > 0 {
                cfg.heads =
                    (0..).take_while(|h| map.contains_key(&format!("encoder.0.attention.head{h}.query.weight"))).count();
                cfg.ffn_dim = dim(&map, "encoder.0.ffn.w1.weight", 1)?;
            } else {
                cfg.heads = 1;
            }
        }
    }
    if let Some(true) | Some(false) = backbone {
        let stage_out = dim(&map, "backbone.stage4.kernel", 3)?;
        if stage_out != cfg.backbone_channels {
            return Err(Error::shape("load_model", "backbone output channels disagree with the head"));
        }
    }
    let mut model = build_variant(variant, &cfg)
        .map_err(|e| Error::MalformedFile(format!("inferred architecture is invalid: {e}")))?;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    for (name, slot) in names.iter().zip(model.params_mut()) {
        let t = map.remove(name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
        if t.shape() != slot.shape() {
            return Err(Error::shape(
                "load_model",
                format!("{name}: file has {:?}, model expects {:?}", t.shape(), slot.shape()),
            ));
        }
        *slot = t;
    }
    if let Some(name) = map.into_keys().next() {
        return Err(Error::UnknownTensorName(name));
    }
    Ok(model)
}

pub fn save_model(model: &SitModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_model(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SitModel> {
    decode_model(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig { backbone_channels: 8, d_proj: 16, heads: 2, ffn_dim: 24, blocks: 3, seed: 11, ..Default::default() }
    }

    #[test]
    fn roundtrip_all_variants() {
        for v in AblationVariant::ALL {
            let m = build_variant(v, &cfg()).unwrap();
            let bytes = encode_model(&m);
            let back = decode_model(&bytes).unwrap();
            assert_eq!(back, m, "{v}");
            assert_eq!(encode_model(&back), bytes);
        }
        let with_backbone = ModelConfig { synthetic_backbone: Some(false), ..cfg() };
        let m = build_variant(AblationVariant::Full, &with_backbone).unwrap();
        assert_eq!(decode_model(&encode_model(&m)).unwrap(), m);
    }

    #[test]
    fn baseline_tensors_do_not_load_as_full() {
        let m = build_variant(AblationVariant::Baseline, &cfg()).unwrap();
        let (_, tensors) = decode_tensors(&encode_model(&m)).unwrap();
        let err = from_named_tensors(AblationVariant::Full, tensors).unwrap_err();
        assert!(matches!(err, Error::MissingTensor(_) | Error::UnknownTensorName(_)), "{err}");
    }

    #[test]
    fn extra_tensor_is_unknown() {
        let m = build_variant(AblationVariant::NoTransformer, &cfg()).unwrap();
        let mut tensors = named_tensors(&m);
        tensors.push(("encoder.0.ln1.gamma".into(), Tensor::zeros(&[4])));
        assert!(matches!(
            from_named_tensors(AblationVariant::NoTransformer, tensors),
            Err(Error::UnknownTensorName(n)) if n == "encoder.0.ln1.gamma"
        ));
    }

    #[test]
    fn corrupt_headers() {
        let m = build_variant(AblationVariant::Baseline, &cfg()).unwrap();
        let mut bytes = encode_model(&m);
        let good = bytes.clone();
        bytes[0] = b'X';
        assert!(matches!(decode_model(&bytes), Err(Error::BadMagic { .. })));
        let mut bytes = good.clone();
        bytes[4] = 9;
        assert!(matches!(decode_model(&bytes), Err(Error::UnsupportedVersion(9))));
        assert!(matches!(decode_model(&good[..good.len() - 3]), Err(Error::TruncatedPayload { .. })));
        let mut bytes = good;
        bytes.push(0);
        assert!(matches!(decode_model(&bytes), Err(Error::MalformedFile(_))));
    }
}
