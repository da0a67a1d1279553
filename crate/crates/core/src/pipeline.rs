//! Preprocessing chain shared by training and evaluation entry points.

use crate::config::PreprocessConfig;
use crate::dataio::{filter_missing, select_features, split_train_test, within_wafer_zscore_with_stats, DatasetTable, GroupStats};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    /// Normal devices only.
    pub train: DatasetTable,
    /// Remaining normals plus every anomaly.
    pub test: DatasetTable,
    pub stats: GroupStats,
}

/// Feature selection, missingness filter and within-wafer z-score.
pub fn normalize(table: &DatasetTable, cfg: &PreprocessConfig) -> Result<(DatasetTable, GroupStats)> {
    cfg.validate()?;
    let selected = select_features(table, &cfg.feature_regex)?;
    let complete = filter_missing(&selected, cfg.r_na)?;
    within_wafer_zscore_with_stats(&complete, cfg.sigma_floor)
}

/// [`normalize`] followed by the seeded train/test split.
pub fn prepare(table: &DatasetTable, cfg: &PreprocessConfig, seed: u64) -> Result<Prepared> {
    let (normalized, stats) = normalize(table, cfg)?;
    let (train, test) = split_train_test(&normalized, cfg.normal_train_frac, seed)?;
    Ok(Prepared { train, test, stats })
}
