//! Tabular wafer test data: loading, preprocessing, splitting and synthesis.
//!
//! A [`DatasetTable`] holds one [`DeviceRecord`] per (lot, wafer, die). Missing
//! feature cells are represented as `NaN` until [`filter_missing`] removes them.

mod csvio;
mod numfmt;
mod preprocess;
mod synth;

use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use csvio::{load_table, write_table, TableFormat};
pub use numfmt::format_sig9;
pub use preprocess::{
    filter_missing, select_features, split_train_test, within_wafer_zscore,
    within_wafer_zscore_with_stats, GroupMoments, GroupStats, DEFAULT_R_NA, DEFAULT_SIGMA_FLOOR,
};
pub use synth::{dies_on_wafer, synth_wafers, SynthConfig};

/// Column names every dataset must carry.
pub const ID_COLUMNS: [&str; 5] = ["lot_key", "wf_key", "die_x", "die_y", "label"];

/// Separator between program name and feature name in a column header.
pub const PROGRAM_DELIMITER: &str = "__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn is_anomalous(self) -> bool {
        matches!(self, Label::Anomalous)
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s.trim().to_ascii_lowercase().as_str() {
            "0" | "normal" | "false" => Some(Label::Normal),
            "1" | "anomalous" | "anomaly" | "true" => Some(Label::Anomalous),
            _ => None,
        }
    }

    /// Numeric text written to CSV files.
    pub fn as_code(self) -> &'static str {
        match self {
            Label::Normal => "0",
            Label::Anomalous => "1",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Normal => "normal",
            Label::Anomalous => "anomalous",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceRecord {
    pub lot_key: String,
    pub wf_key: String,
    pub die_x: i64,
    pub die_y: i64,
    pub label: Label,
    /// Feature measurements; `NaN` marks a missing cell.
    pub features: Vec<f64>,
}

impl DeviceRecord {
    pub fn has_missing(&self) -> bool {
        self.features.iter().any(|v| v.is_nan())
    }

    pub fn die(&self) -> (i64, i64) {
        (self.die_x, self.die_y)
    }
}

/// A contiguous run of features produced by one test program.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgramBlock {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

impl ProgramBlock {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetTable {
    pub records: Vec<DeviceRecord>,
    pub feature_names: Vec<String>,
    pub program_blocks: Vec<ProgramBlock>,
}

impl DatasetTable {
    /// Builds a table, inferring program blocks from the feature names.
    pub fn new(records: Vec<DeviceRecord>, feature_names: Vec<String>) -> Result<Self> {
        let program_blocks = infer_program_blocks(&feature_names);
        let table = DatasetTable {
            records,
            feature_names,
            program_blocks,
        };
        table.validate()?;
        Ok(table)
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_anomalous(&self) -> usize {
        self.records.iter().filter(|r| r.label.is_anomalous()).count()
    }

    pub fn missing_count(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.features.iter().filter(|v| v.is_nan()).count())
            .sum()
    }

    /// Row-major `n_records × F` copy of the feature values.
    pub fn feature_matrix(&self) -> Array2<f64> {
        let f = self.n_features();
        let mut out = Array2::zeros((self.records.len(), f));
        for (mut row, rec) in out.rows_mut().into_iter().zip(&self.records) {
            row.assign(&ndarray::ArrayView1::from(&rec.features[..]));
        }
        out
    }

    pub fn dies(&self) -> Vec<(i64, i64)> {
        self.records.iter().map(DeviceRecord::die).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.n_features();
        if let Some((i, _)) = self
            .records
            .iter()
            .enumerate()
            .find(|(_, r)| r.features.len() != f)
        {
            return Err(Error::Schema(format!(
                "record {i} has {} features, table declares {f}",
                self.records[i].features.len()
            )));
        }
        validate_blocks(&self.program_blocks, f)
    }
}

/// Groups consecutive columns sharing the prefix before the first `__`.
/// Columns without the delimiter form a block named after the full column.
pub fn infer_program_blocks(feature_names: &[String]) -> Vec<ProgramBlock> {
    let mut blocks: Vec<ProgramBlock> = Vec::new();
    for (i, name) in feature_names.iter().enumerate() {
        let prefix = name
            .split_once(PROGRAM_DELIMITER)
            .map_or(name.as_str(), |(p, _)| p);
        match blocks.last_mut() {
            Some(b) if b.name == prefix && b.start + b.len == i => b.len += 1,
            _ => blocks.push(ProgramBlock {
                name: prefix.to_string(),
                start: i,
                len: 1,
            }),
        }
    }
    blocks
}

/// Checks that `blocks` partition `[0, n_features)` in order.
pub fn validate_blocks(blocks: &[ProgramBlock], n_features: usize) -> Result<()> {
    let mut next = 0;
    for b in blocks {
        if b.len == 0 {
            return Err(Error::Schema(format!("program block `{}` is empty", b.name)));
        }
        if b.start != next {
            return Err(Error::Schema(format!(
                "program block `{}` starts at {} but previous block ends at {next}",
                b.name, b.start
            )));
        }
        next = b.start + b.len;
    }
    if next != n_features {
        return Err(Error::Schema(format!(
            "program blocks cover {next} features, table has {n_features}"
        )));
    }
    Ok(())
}
