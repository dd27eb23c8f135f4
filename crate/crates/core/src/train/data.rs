//! In-memory datasets and the seeded synthetic regression task.

use crate::backbone::{FeatureMap, Provenance, FEATURE_SIZE};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Tensor,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let Some(first) = samples.first() else { return Err(Error::EmptyDataset) };
        let shape = first.features.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("Dataset", format!("features must be H×W×C, got {shape:?}")));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.features.shape() != shape.as_slice() {
                return Err(Error::shape("Dataset", format!("sample {i} has shape {:?}, expected {shape:?}", s.features.shape())));
            }
            if !s.score.is_finite() {
                return Err(Error::NonFinite("dataset score"));
            }
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channels(&self) -> Option<usize> {
        self.samples.first().map(|s| s.features.shape()[2])
    }

    pub fn scores(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.score).collect()
    }

    /// Seeded shuffle-split into (train, validation) index lists. With
    /// `val_fraction == 0`, or a single sample, validation reuses the
    /// training indices.
    pub fn split(&self, seed: u64, val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let n = self.len();
        let mut idx: Vec<usize> = (0..n).collect();
        RngStream::new(seed).derive_named("split").shuffle(&mut idx);
        let n_val = ((n as f64) * val_fraction).round() as usize;
        if val_fraction <= 0.0 || n < 2 {
            idx.sort_unstable();
            return (idx.clone(), idx);
        }
        let n_val = n_val.clamp(1, n - 1);
        let mut val = idx.split_off(n - n_val);
        val.sort_unstable();
        (idx, val)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Fixed oracle weights for the synthetic task: normal draws, centred, scaled
/// to Euclidean norm 3.
pub fn oracle_weights(channels: usize, seed: u64) -> Vec<f64> {
    let mut rng = RngStream::new(seed).derive_named("oracle");
    let mut w: Vec<f64> = (0..channels).map(|_| rng.normal()).collect();
    let mean = w.iter().sum::<f64>() / channels as f64;
    w.iter_mut().for_each(|v| *v -= mean);
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        w.iter_mut().for_each(|v| *v *= 3.0 / norm);
    }
    w
}

/// Score oracle `1 + 4·σ(⟨w, GAP(F)⟩)`.
pub fn oracle_score(features: &Tensor, w: &[f64]) -> Result<f64> {
    let gap = crate::ops::global_avg_pool_hw(features)?;
    if gap.len() != w.len() {
        return Err(Error::LengthMismatch { left: gap.len(), right: w.len() });
    }
    let z: f64 = gap.data().iter().zip(w).map(|(a, b)| a * b).sum();
    Ok(1.0 + 4.0 * sigmoid(z))
}

/// `n` seeded 7×7×`channels` feature maps with oracle scores. Each sample
/// scales a uniform field by a per-channel intensity, `F[h,w,c] = 2·m_c·u`,
/// and values are rounded to f32 so scores match what a SITF file stores.
pub fn synthesize(n: usize, seed: u64, channels: usize) -> Result<Vec<(FeatureMap, f64)>> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if channels == 0 {
        return Err(Error::InvalidConfig("channel count must be positive".into()));
    }
    let w = oracle_weights(channels, seed);
    let root = RngStream::new(seed).derive_named("synth");
    (0..n)
        .map(|i| {
            let mut rng = root.derive(i as u64);
            let m: Vec<f64> = (0..channels).map(|_| rng.next_f64()).collect();
            let mut data = Vec::with_capacity(FEATURE_SIZE * FEATURE_SIZE * channels);
            for _ in 0..FEATURE_SIZE * FEATURE_SIZE {
                for &mc in &m {
                    data.push(f64::from((2.0 * mc * rng.next_f64()) as f32));
                }
            }
            let t = Tensor::new(vec![FEATURE_SIZE, FEATURE_SIZE, channels], data)?;
            let score = oracle_score(&t, &w)?;
            Ok((FeatureMap::new(t, Provenance::Synthetic)?, score))
        })
        .collect()
}
