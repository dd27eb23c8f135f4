//! Base feature maps: image normalization, the seeded synthetic backbone and
//! the SITF feature-file format.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layer::{hash_relu_gate, prefixed, split_grads, Conv2d, Layer};
use crate::ops::{self, Mode};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 224;
pub const FEATURE_SIZE: usize = 7;
pub const PAPER_BACKBONE_CHANNELS: usize = 1280;

/// Normalized RGB image, `224×224×3` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Tensor,
}

impl ImageTensor {
    pub fn new(data: Tensor) -> Result<Self> {
        let expected = vec![IMAGE_SIZE, IMAGE_SIZE, 3];
        if data.shape() != expected.as_slice() {
            return Err(Error::BadDimensions { expected, found: data.shape().to_vec() });
        }
        if data.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidConfig("image values must lie in [0, 1]".into()));
        }
        Ok(Self { data })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }
}

/// Divides raw `H×W×3` bytes by 255. Resizing is the caller's job: anything
/// other than `224×224×3` is rejected.
pub fn normalize_image(raw: &[u8], height: usize, width: usize) -> Result<ImageTensor> {
    let expected = vec![IMAGE_SIZE, IMAGE_SIZE, 3];
    if height != IMAGE_SIZE || width != IMAGE_SIZE || raw.len() != height * width * 3 {
        return Err(Error::BadDimensions { expected, found: vec![height, width, raw.len() / (height * width).max(1)] });
    }
    let data = raw.iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(ImageTensor { data: Tensor::from_parts(expected, data) })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Synthetic,
    Precomputed,
}

/// Backbone output `H_b×W_b×C_b`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Tensor,
    pub provenance: Provenance,
}

impl FeatureMap {
    pub fn new(data: Tensor, provenance: Provenance) -> Result<Self> {
        data.dims3()?;
        if !data.is_finite() {
            return Err(Error::NonFinite("FeatureMap"));
        }
        Ok(Self { data, provenance })
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }
}

/// Channel widths of the five stride-2 stages; the last is replaced by `C_b`.
const STAGE_WIDTHS: [usize; 4] = [8, 16, 32, 64];

/// Five stride-2 `3×3` conv + ReLU stages taking `224×224×3` to `7×7×C_b`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBackbone {
    pub stages: Vec<Conv2d>,
    pub trainable: bool,
}

impl SyntheticBackbone {
    pub fn new(channels: usize, seed: u64, trainable: bool) -> Self {
        let root = RngStream::new(seed).derive_named("backbone");
        let mut cin = 3;
        let stages = STAGE_WIDTHS
            .iter()
            .copied()
            .chain(std::iter::once(channels))
            .enumerate()
            .map(|(i, cout)| {
                let mut rng = root.derive(i as u64);
                let conv = Conv2d::new(3, cin, cout, 2, &mut rng).expect("odd kernel");
                cin = cout;
                conv
            })
            .collect();
        Self { stages, trainable }
    }

    pub fn from_stages(stages: Vec<Conv2d>, trainable: bool) -> Result<Self> {
        if stages.len() != 5 || stages[0].in_channels() != 3 {
            return Err(Error::MalformedFile("backbone needs five stages starting from 3 channels".into()));
        }
        for pair in stages.windows(2) {
            if pair[0].out_channels() != pair[1].in_channels() {
                return Err(Error::shape("SyntheticBackbone", "stage channel chain is broken"));
            }
        }
        Ok(Self { stages, trainable })
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [FEATURE_SIZE, FEATURE_SIZE, self.stages[4].out_channels()]
    }

    pub fn extract(&self, image: &ImageTensor) -> Result<FeatureMap> {
        let (y, _) = self.forward(image.tensor(), Mode::Eval, &RngStream::new(0))?;
        FeatureMap::new(y, Provenance::Synthetic)
    }

    pub(crate) fn backward_inner(
        &self,
        cache: &[(Tensor, Tensor)],
        dy: &Tensor,
        grads: &mut [Tensor],
        need_dx: bool,
    ) -> Result<Option<Tensor>> {
        let mut parts = split_grads(grads, &[2; 5]);
        let mut g = dy.clone();
        for (i, (stage, (x, pre))) in self.stages.iter().zip(cache).enumerate().rev() {
            let gpre = ops::relu_backward(pre, &g)?;
            match stage.backward_inner(x, &gpre, parts[i], need_dx || i > 0)? {
                Some(dx) => g = dx,
                None => return Ok(None),
            }
        }
        Ok(Some(g))
    }
}

/// Computes the base feature map with the synthetic backbone.
pub fn synthetic_backbone_forward(image: &ImageTensor, backbone: &SyntheticBackbone) -> Result<FeatureMap> {
    backbone.extract(image)
}

impl Layer for SyntheticBackbone {
    /// Per stage: the stage input and its pre-activation.
    type Cache = Vec<(Tensor, Tensor)>;

    fn forward(&self, x: &Tensor, mode: Mode, rng: &RngStream) -> Result<(Tensor, Self::Cache)> {
        let mut cache = Vec::with_capacity(self.stages.len());
        let mut h = x.clone();
        for stage in &self.stages {
            let (pre, _) = stage.forward(&h, mode, rng)?;
            let next = ops::relu(&pre);
            cache.push((h, pre));
            h = next;
        }
        Ok((h, cache))
    }

    fn backward(&self, cache: &Self::Cache, dy: &Tensor, grads: &mut [Tensor]) -> Result<Tensor> {
        Ok(self.backward_inner(cache, dy, grads, true)?.expect("input gradient requested"))
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(i, s)| prefixed(&format!("stage{i}"), s.named_params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.stages.iter_mut().flat_map(|s| s.params_mut()).collect()
    }

    fn hash_kinks(&self, cache: &Self::Cache, state: &mut std::collections::hash_map::DefaultHasher) {
        for (_, pre) in cache {
            hash_relu_gate(pre, state);
        }
    }
}

/// Where base feature maps come from.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureSource {
    Synthetic(SyntheticBackbone),
    /// Externally computed maps read from SITF files.
    Precomputed { shape: [usize; 3] },
}

impl FeatureSource {
    pub fn output_shape(&self) -> [usize; 3] {
        match self {
            FeatureSource::Synthetic(b) => b.output_shape(),
            FeatureSource::Precomputed { shape } => *shape,
        }
    }
}

pub const SITF_MAGIC: [u8; 4] = *b"SITF";
pub const SITF_VERSION: u8 = 1;
const SITF_HEADER: usize = 4 + 1 + 1 + 3 * 4;

/// Encodes a feature map as SITF: magic, version, ndim = 3, three `u32` LE
/// extents, then `f32` LE values in `(h, w, c)` row-major order.
pub fn encode_sitf(fm: &FeatureMap) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(SITF_HEADER + 4 * fm.data.len());
    out.extend_from_slice(&SITF_MAGIC);
    out.push(SITF_VERSION);
    out.push(3);
    for d in fm.shape() {
        let d = u32::try_from(d).map_err(|_| Error::MalformedFile(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in fm.data.data() {
        let narrowed = v as f32;
        if !narrowed.is_finite() {
            return Err(Error::NonFinite("encode_sitf"));
        }
        out.extend_from_slice(&narrowed.to_le_bytes());
    }
    Ok(out)
}

/// Decodes SITF bytes, optionally checking the extents against `expected`.
pub fn decode_sitf(bytes: &[u8], expected: Option<[usize; 3]>) -> Result<FeatureMap> {
    if bytes.len() >= 4 && bytes[..4] != SITF_MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(&bytes[..4]);
        return Err(Error::BadMagic { expected: SITF_MAGIC, found });
    }
    if bytes.len() < SITF_HEADER {
        return Err(Error::TruncatedPayload { expected: SITF_HEADER, found: bytes.len() });
    }
    if bytes[4] != SITF_VERSION {
        return Err(Error::UnsupportedVersion(bytes[4]));
    }
    if bytes[5] != 3 {
        return Err(Error::MalformedFile(format!("SITF ndim must be 3, found {}", bytes[5])));
    }
    let mut shape = [0usize; 3];
    for (i, d) in shape.iter_mut().enumerate() {
        let off = 6 + 4 * i;
        *d = u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as usize;
    }
    if shape.contains(&0) {
        return Err(Error::MalformedFile(format!("zero extent in {shape:?}")));
    }
    if let Some(exp) = expected {
        if exp != shape {
            return Err(Error::shape("load_feature_map", format!("file holds {shape:?}, configured {exp:?}")));
        }
    }
    let n: usize = shape.iter().product();
    let payload = &bytes[SITF_HEADER..];
    if payload.len() < 4 * n {
        return Err(Error::TruncatedPayload { expected: 4 * n, found: payload.len() });
    }
    if payload.len() > 4 * n {
        return Err(Error::MalformedFile(format!("{} trailing bytes", payload.len() - 4 * n)));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    FeatureMap::new(Tensor::new(shape.to_vec(), data)?, Provenance::Precomputed)
}

pub fn save_feature_map(fm: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_sitf(fm)?)?;
    Ok(())
}

pub fn load_feature_map(path: impl AsRef<Path>, expected: Option<[usize; 3]>) -> Result<FeatureMap> {
    decode_sitf(&fs::read(path)?, expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        let n = IMAGE_SIZE * IMAGE_SIZE * 3;
        assert!(normalize_image(&vec![0; n], 224, 224).unwrap().tensor().data().iter().all(|&v| v == 0.0));
        assert!(normalize_image(&vec![255; n], 224, 224).unwrap().tensor().data().iter().all(|&v| v == 1.0));
        assert!(normalize_image(&vec![51; n], 224, 224).unwrap().tensor().data().iter().all(|&v| v == 0.2));
        assert!(matches!(normalize_image(&vec![0; 10 * 10 * 3], 10, 10), Err(Error::BadDimensions { .. })));
        assert!(matches!(normalize_image(&[0; 5], 224, 224), Err(Error::BadDimensions { .. })));
    }

    #[test]
    fn normalize_is_monotone_with_exact_endpoints() {
        let vals: Vec<f64> = (0..=255u8).map(|b| f64::from(b) / 255.0).collect();
        assert!(vals.windows(2).all(|w| w[0] < w[1]));
        assert_eq!((vals[0], vals[255]), (0.0, 1.0));
    }

    #[test]
    fn synthetic_backbone_shape_and_determinism() {
        let bb = SyntheticBackbone::new(64, 11, true);
        let raw: Vec<u8> = (0..IMAGE_SIZE * IMAGE_SIZE * 3).map(|i| (i * 31 % 256) as u8).collect();
        let img = normalize_image(&raw, 224, 224).unwrap();
        let a = synthetic_backbone_forward(&img, &bb).unwrap();
        let b = synthetic_backbone_forward(&img, &SyntheticBackbone::new(64, 11, true)).unwrap();
        assert_eq!(a.shape(), [7, 7, 64]);
        assert_eq!(a.provenance, Provenance::Synthetic);
        assert!(a.data.data().iter().zip(b.data.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let bb = SyntheticBackbone::new(16, 3, false);
        let img = normalize_image(&vec![0; IMAGE_SIZE * IMAGE_SIZE * 3], 224, 224).unwrap();
        let fm = bb.extract(&img).unwrap();
        assert!(fm.data.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sitf_rejects_corruption() {
        let fm = FeatureMap::new(Tensor::full(&[7, 7, 4], 0.5), Provenance::Precomputed).unwrap();
        let bytes = encode_sitf(&fm).unwrap();
        assert_eq!(bytes.len() - SITF_HEADER, 4 * 7 * 7 * 4);

        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_sitf(&bad, None), Err(Error::BadMagic { .. })));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_sitf(&bad, None), Err(Error::UnsupportedVersion(2))));

        assert!(matches!(decode_sitf(&bytes[..bytes.len() - 1], None), Err(Error::TruncatedPayload { .. })));
        assert!(matches!(decode_sitf(&bytes[..10], None), Err(Error::TruncatedPayload { .. })));
        assert!(matches!(decode_sitf(&bytes, Some([7, 7, 8])), Err(Error::ShapeMismatch { .. })));
        assert_eq!(decode_sitf(&bytes, Some([7, 7, 4])).unwrap(), fm);
    }
}
