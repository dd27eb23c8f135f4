//! `index.csv` handling: `path,score` rows referencing SITF feature maps.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sit_core::backbone::load_feature_map;
use sit_core::train::{Dataset, Sample};

use crate::error::{CliError, CliResult, EXIT_IO, EXIT_USAGE};

pub const SCORE_RANGE: (f64, f64) = (1.0, 5.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexRecord {
    pub path: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
    pub records: Vec<IndexRecord>,
}

impl DatasetIndex {
    pub fn read(path: &Path) -> CliResult<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "score"] {
            return Err(CliError::usage(format!("{}: header must be `path,score`", path.display())));
        }
        let records = reader
            .deserialize()
            .collect::<Result<Vec<IndexRecord>, _>>()
            .map_err(|e| csv_error(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, records })
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r).map_err(|e| csv_error(path, e))?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::io(path.display(), e))?;
        crate::fsutil::write_atomic(path, &bytes)
    }

    pub fn resolve(&self, record: &IndexRecord) -> PathBuf {
        let p = Path::new(&record.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Loads every referenced feature map, checking existence, format and a
    /// common shape before anything else runs. Out-of-range scores only warn.
    pub fn load(&self) -> CliResult<Dataset> {
        if self.records.is_empty() {
            return Err(CliError::usage("dataset index has no records"));
        }
        let mut expected = None;
        let mut samples = Vec::with_capacity(self.records.len());
        for (row, r) in self.records.iter().enumerate() {
            let path = self.resolve(r);
            if !path.is_file() {
                return Err(CliError::new(EXIT_IO, format!("row {}: {} does not exist", row + 1, path.display())));
            }
            let fm = load_feature_map(&path, expected)
                .map_err(|e| CliError::new(crate::error::code_for(&e), format!("{}: {e}", path.display())))?;
            expected = Some(fm.shape());
            if !r.score.is_finite() {
                return Err(CliError::usage(format!("row {}: score is not finite", row + 1)));
            }
            if r.score < SCORE_RANGE.0 || r.score > SCORE_RANGE.1 {
                eprintln!("warning: row {} score {} lies outside [1, 5]", row + 1, r.score);
            }
            samples.push(Sample { features: fm.data, score: r.score });
        }
        Ok(Dataset::new(samples)?)
    }
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    let code = if e.is_io_error() { EXIT_IO } else { EXIT_USAGE };
    CliError::new(code, format!("{}: {e}", path.display()))
}
