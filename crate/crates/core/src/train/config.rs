use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AblationVariant, ModelConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
}

/// Training hyperparameters. Every field has a default, so `{}` is a valid
/// JSON config; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub d_proj: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub seed: u64,
    /// Share of samples held out for validation. `0` validates on the
    /// training set itself.
    pub val_fraction: f64,
    /// Inferred from the data when absent.
    pub backbone_channels: Option<usize>,
    pub variant: AblationVariant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d_proj: 128,
            blocks: 2,
            heads: 4,
            ffn_dim: 512,
            dropout: 0.1,
            optimizer: OptimizerKind::Adam,
            lr: 1e-4,
            batch_size: 32,
            max_epochs: 300,
            early_stop_patience: 10,
            plateau_patience: 5,
            plateau_factor: 0.5,
            seed: 0,
            val_fraction: 0.2,
            backbone_channels: None,
            variant: AblationVariant::Full,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must lie in (0, 1)");
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return bad("patiences must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive and finite");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.d_proj == 0 || self.ffn_dim == 0 {
            return bad("d_proj and ffn_dim must be positive");
        }
        if self.blocks > 0 && (self.heads == 0 || !self.d_proj.is_multiple_of(self.heads)) {
            return bad("heads must divide d_proj");
        }
        if self.backbone_channels == Some(0) {
            return bad("backbone_channels must be positive");
        }
        Ok(())
    }

    /// Architecture for `backbone_channels` input channels.
    pub fn model_config(&self, backbone_channels: usize) -> ModelConfig {
        ModelConfig {
            backbone_channels,
            d_proj: self.d_proj,
            blocks: self.blocks,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            dropout: self.dropout,
            seed: self.seed,
            synthetic_backbone: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!((c.d_proj, c.blocks, c.heads, c.ffn_dim), (128, 2, 4, 512));
        assert_eq!((c.dropout, c.lr, c.batch_size, c.max_epochs), (0.1, 1e-4, 32, 300));
        assert_eq!((c.early_stop_patience, c.plateau_patience, c.plateau_factor), (10, 5, 0.5));
        assert_eq!(c.optimizer, OptimizerKind::Adam);
        assert_eq!(TrainConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn parse_errors() {
        assert!(TrainConfig::from_json("{\"lr\": 0.001, \"epochs\": 3}").is_err());
        assert!(TrainConfig::from_json("{not json").is_err());
        assert!(TrainConfig::from_json("{\"plateau_factor\": 1.0}").is_err());
        assert!(TrainConfig::from_json("{\"heads\": 3}").is_err());
        let c = TrainConfig::from_json("{\"variant\": \"no-gmp\", \"seed\": 9}").unwrap();
        assert_eq!((c.variant, c.seed), (AblationVariant::NoGmp, 9));
    }
}
