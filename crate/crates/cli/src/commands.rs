use std::path::{Path, PathBuf};
use std::time::Instant;

use sit_core::backbone::encode_sitf;
use sit_core::gradcheck::{run_suite, SuiteRow};
use sit_core::layer::Layer;
use sit_core::train::checkpoint::{decode_model, encode_model};
use sit_core::train::data::synthesize;
use sit_core::train::{train_with_progress, Dataset, TrainConfig, TrainOutcome};
use sit_core::{build_variant, AblationVariant, Error};

use crate::dataset::{DatasetIndex, IndexRecord};
use crate::error::{CliError, CliResult, EXIT_CHECK};
use crate::fsutil::{to_json, write_atomic, write_json};
use crate::report::{evaluate, AblationReport, AblationRow, MetricsOutcome, RunReport, ENGINE_VERSION};

pub fn synth(n: usize, seed: u64, channels: usize, out: &Path) -> CliResult<DatasetIndex> {
    if n == 0 {
        return Err(CliError::usage("--n must be at least 1"));
    }
    if channels == 0 {
        return Err(CliError::usage("--cb must be at least 1"));
    }
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out.display(), e))?;
    let mut records = Vec::with_capacity(n);
    for (i, (fm, score)) in synthesize(n, seed, channels)?.into_iter().enumerate() {
        let name = format!("sample_{i:05}.sitf");
        write_atomic(&out.join(&name), &encode_sitf(&fm)?)?;
        records.push(IndexRecord { path: name, score });
    }
    let index = DatasetIndex { root: out.to_path_buf(), records };
    index.write(&out.join("index.csv"))?;
    Ok(index)
}

pub fn read_config(path: &Path) -> CliResult<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
    TrainConfig::from_json(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

/// The data's channel count, checked against an explicit config value.
fn resolve_channels(cfg: &mut TrainConfig, data: &Dataset) -> CliResult<usize> {
    let found = data.channels().ok_or(Error::EmptyDataset)?;
    match cfg.backbone_channels {
        Some(c) if c != found => Err(Error::ShapeMismatch {
            op: "train",
            detail: format!("config backbone_channels = {c}, data has {found} channels"),
        }
        .into()),
        _ => {
            cfg.backbone_channels = Some(found);
            Ok(found)
        }
    }
}

pub fn run_training(cfg: &TrainConfig, data: &Dataset, quiet: bool) -> CliResult<(TrainOutcome, MetricsOutcome)> {
    let mut cfg = cfg.clone();
    let channels = resolve_channels(&mut cfg, data)?;
    let model = build_variant(cfg.variant, &cfg.model_config(channels))?;
    let outcome = train_with_progress(model, data, &cfg, |r| {
        if !quiet {
            eprintln!(
                "[{}] epoch {:>3}  train {:.6}  val {:.6}  lr {:.3e}",
                cfg.variant, r.epoch, r.train_loss, r.val_loss, r.lr
            );
        }
    })?;
    let metrics = evaluate(&outcome.model, data, &outcome.val_indices)?;
    Ok((outcome, metrics))
}

pub struct TrainArgs<'a> {
    pub config: &'a Path,
    pub data: &'a Path,
    pub out: &'a Path,
    pub variant: Option<AblationVariant>,
    pub report: Option<PathBuf>,
    pub quiet: bool,
}

pub fn train(args: TrainArgs<'_>) -> CliResult<RunReport> {
    let start = Instant::now();
    let mut cfg = read_config(args.config)?;
    if let Some(v) = args.variant {
        cfg.variant = v;
    }
    let data = DatasetIndex::read(args.data)?.load()?;
    resolve_channels(&mut cfg, &data)?;
    let (outcome, validation) = run_training(&cfg, &data, args.quiet)?;
    write_atomic(args.out, &encode_model(&outcome.model))?;
    let report = RunReport {
        engine_version: ENGINE_VERSION,
        variant: cfg.variant,
        config: cfg,
        n_train: outcome.train_indices.len(),
        n_val: outcome.val_indices.len(),
        history: outcome.history,
        validation,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    let report_path = args.report.unwrap_or_else(|| sibling(args.out, "report.json"));
    write_json(&report_path, &report)?;
    Ok(report)
}

/// `model.sitm` → `model.sitm.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

pub fn eval(model_path: &Path, data_path: &Path, out: Option<PathBuf>) -> CliResult<MetricsOutcome> {
    let bytes = std::fs::read(model_path).map_err(|e| CliError::io(model_path.display(), e))?;
    let model = decode_model(&bytes).map_err(|e| {
        CliError::new(crate::error::code_for(&e), format!("{}: {e}", model_path.display()))
    })?;
    let data = DatasetIndex::read(data_path)?.load()?;
    let channels = data.channels().ok_or(Error::EmptyDataset)?;
    if channels != model.backbone_channels() {
        return Err(Error::ShapeMismatch {
            op: "eval",
            detail: format!("model expects {} channels, data has {channels}", model.backbone_channels()),
        }
        .into());
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let metrics = evaluate(&model, &data, &all)?;
    let out = out.unwrap_or_else(|| sibling(model_path, "eval.json"));
    write_json(&out, &metrics)?;
    Ok(metrics)
}

pub fn gradcheck(seed: u64, channels: usize, corrupt: Option<&str>) -> CliResult<Vec<SuiteRow>> {
    if channels == 0 {
        return Err(CliError::usage("--cb must be at least 1"));
    }
    Ok(run_suite(seed, channels, 1e-4, corrupt)?)
}

pub fn gradcheck_table(rows: &[SuiteRow]) -> String {
    let mut out = format!("{:<22} {:>8} {:>8} {:>12}  {}\n", "layer", "checked", "skipped", "max_rel_err", "status");
    for r in rows {
        let checked: usize = r.report.entries.iter().map(|e| e.checked).sum();
        let skipped: usize = r.report.entries.iter().map(|e| e.skipped).sum();
        out.push_str(&format!(
            "{:<22} {:>8} {:>8} {:>12.3e}  {}\n",
            r.layer,
            checked,
            skipped,
            r.max_rel_error,
            if r.passed { "pass" } else { "FAIL" }
        ));
    }
    out
}

pub fn ablate(config: &Path, data_path: &Path, out: &Path, quiet: bool) -> CliResult<AblationReport> {
    let mut cfg = read_config(config)?;
    let data = DatasetIndex::read(data_path)?.load()?;
    resolve_channels(&mut cfg, &data)?;
    let mut rows = Vec::with_capacity(AblationVariant::ALL.len());
    for variant in AblationVariant::ALL {
        let run_cfg = TrainConfig { variant, ..cfg.clone() };
        let (outcome, m) = run_training(&run_cfg, &data, quiet)?;
        rows.push(AblationRow {
            variant,
            parameters: outcome.model.named_params().iter().map(|(_, t)| t.len()).sum(),
            pearson: m.pearson,
            mae: m.mae,
            rmse: m.rmse,
            mse: m.rmse * m.rmse,
            n: m.n,
            best_epoch: outcome.history.best_epoch,
            stopped_epoch: outcome.history.stopped_epoch,
        });
    }
    let report = AblationReport { engine_version: ENGINE_VERSION, config: cfg, rows };
    write_json(out, &report)?;
    Ok(report)
}

pub fn print_json<T: serde::Serialize>(value: &T) {
    print!("{}", to_json(value));
}

pub fn check_metrics(m: &MetricsOutcome) -> CliResult<()> {
    match &m.error {
        Some(e) => Err(CliError::new(EXIT_CHECK, e.clone())),
        None => Ok(()),
    }
}
