use serde::Serialize;
use sit_core::train::{compute_metrics, metrics::error_metrics, predict_indices, Dataset, History, TrainConfig};
use sit_core::{AblationVariant, Error, SitModel};

use crate::error::CliResult;

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Metrics where a degenerate correlation is reported instead of aborting.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsOutcome {
    pub mae: f64,
    pub rmse: f64,
    pub pearson: Option<f64>,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn evaluate(model: &SitModel, data: &Dataset, indices: &[usize]) -> CliResult<MetricsOutcome> {
    let pred = predict_indices(model, data, indices)?;
    let y: Vec<f64> = indices.iter().map(|&i| data.samples[i].score).collect();
    match compute_metrics(&y, &pred) {
        Ok(m) => Ok(MetricsOutcome { mae: m.mae, rmse: m.rmse, pearson: Some(m.pearson), n: m.n, error: None }),
        Err(e @ Error::DegenerateVariance) => {
            let (mae, rmse) = error_metrics(&y, &pred)?;
            Ok(MetricsOutcome { mae, rmse, pearson: None, n: y.len(), error: Some(e.to_string()) })
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub engine_version: &'static str,
    pub variant: AblationVariant,
    pub config: TrainConfig,
    pub n_train: usize,
    pub n_val: usize,
    pub history: History,
    pub validation: MetricsOutcome,
    pub wall_clock_seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub parameters: usize,
    pub pearson: Option<f64>,
    pub mae: f64,
    pub rmse: f64,
    pub mse: f64,
    pub n: usize,
    pub best_epoch: Option<usize>,
    pub stopped_epoch: Option<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub engine_version: &'static str,
    pub config: TrainConfig,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn table(&self) -> String {
        let mut out = format!("{:<16} {:>10} {:>8} {:>8} {:>8} {:>10}\n", "variant", "params", "PC", "MAE", "RMSE", "best_epoch");
        for r in &self.rows {
            let pc = r.pearson.map_or_else(|| "n/a".to_string(), |p| format!("{p:.4}"));
            let best = r.best_epoch.map_or_else(|| "-".to_string(), |e| e.to_string());
            out.push_str(&format!(
                "{:<16} {:>10} {:>8} {:>8.4} {:>8.4} {:>10}\n",
                r.variant.name(),
                r.parameters,
                pc,
                r.mae,
                r.rmse,
                best
            ));
        }
        out
    }
}
