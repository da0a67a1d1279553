use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{DatasetTable, DeviceRecord};
use crate::error::{Error, Result};

pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-6;
pub const DEFAULT_R_NA: f64 = 0.3;

fn keep_columns(table: &DatasetTable, keep: &[usize]) -> Result<DatasetTable> {
    let feature_names = keep.iter().map(|&i| table.feature_names[i].clone()).collect();
    let records = table
        .records
        .iter()
        .map(|r| DeviceRecord {
            features: keep.iter().map(|&i| r.features[i]).collect(),
            ..r.clone()
        })
        .collect();
    DatasetTable::new(records, feature_names)
}

/// Keeps the feature columns whose name matches `pattern` anywhere.
pub fn select_features(table: &DatasetTable, pattern: &str) -> Result<DatasetTable> {
    let re = Regex::new(pattern)?;
    let keep: Vec<usize> = table
        .feature_names
        .iter()
        .enumerate()
        .filter(|(_, n)| re.is_match(n))
        .map(|(i, _)| i)
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptySelection(format!(
            "no feature column matches `{pattern}`"
        )));
    }
    keep_columns(table, &keep)
}

/// Drops columns whose missing fraction exceeds `r_na`, then drops every
/// record that still has a missing cell.
pub fn filter_missing(table: &DatasetTable, r_na: f64) -> Result<DatasetTable> {
    if !(0.0..=1.0).contains(&r_na) {
        return Err(Error::Config(format!("r_na must lie in [0, 1], got {r_na}")));
    }
    let n = table.len().max(1) as f64;
    let keep: Vec<usize> = (0..table.n_features())
        .filter(|&f| {
            let missing = table.records.iter().filter(|r| r.features[f].is_nan()).count();
            missing as f64 / n <= r_na
        })
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptySelection(format!(
            "every feature column exceeds the missing fraction {r_na}"
        )));
    }
    let mut out = keep_columns(table, &keep)?;
    out.records.retain(|r| !r.has_missing());
    Ok(out)
}

/// Per-(lot, wafer) feature means and population standard deviations.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupStats {
    pub groups: BTreeMap<(String, String), GroupMoments>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMoments {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GroupStats {
    pub fn get(&self, lot_key: &str, wf_key: &str) -> Option<&GroupMoments> {
        self.groups.get(&(lot_key.to_string(), wf_key.to_string()))
    }
}

pub fn within_wafer_zscore(table: &DatasetTable, sigma_floor: f64) -> Result<DatasetTable> {
    within_wafer_zscore_with_stats(table, sigma_floor).map(|(t, _)| t)
}

/// Standardizes every feature inside each (lot_key, wf_key) group with the
/// population standard deviation, flooring the denominator at `sigma_floor`.
/// Also returns the raw group statistics for de-normalizing residuals.
pub fn within_wafer_zscore_with_stats(
    table: &DatasetTable,
    sigma_floor: f64,
) -> Result<(DatasetTable, GroupStats)> {
    if !(sigma_floor > 0.0) {
        return Err(Error::Config(format!(
            "sigma_floor must be positive, got {sigma_floor}"
        )));
    }
    if table.missing_count() > 0 {
        return Err(Error::Schema(
            "within-wafer z-score requires a table without missing cells".into(),
        ));
    }
    let f = table.n_features();
    let mut members: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
    for (i, r) in table.records.iter().enumerate() {
        members
            .entry((r.lot_key.clone(), r.wf_key.clone()))
            .or_default()
            .push(i);
    }

    let mut out = table.clone();
    let mut stats = GroupStats::default();
    for (key, idx) in members {
        let n = idx.len() as f64;
        let mut mean = vec![0.0; f];
        for &i in &idx {
            for (m, v) in mean.iter_mut().zip(&table.records[i].features) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; f];
        for &i in &idx {
            for ((s, v), m) in var.iter_mut().zip(&table.records[i].features).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std: Vec<f64> = var.iter().map(|s| (s / n).sqrt()).collect();
        for &i in &idx {
            for (k, v) in out.records[i].features.iter_mut().enumerate() {
                *v = (*v - mean[k]) / std[k].max(sigma_floor);
            }
        }
        stats.groups.insert(key, GroupMoments { mean, std });
    }
    Ok((out, stats))
}

/// Shuffles the normal records with a seeded generator and sends
/// `normal_train_frac` of them to train; all anomalies go to test.
/// Both outputs preserve the input row order.
pub fn split_train_test(
    table: &DatasetTable,
    normal_train_frac: f64,
    seed: u64,
) -> Result<(DatasetTable, DatasetTable)> {
    if !(normal_train_frac > 0.0 && normal_train_frac < 1.0) {
        return Err(Error::Config(format!(
            "normal_train_frac must lie strictly between 0 and 1, got {normal_train_frac}"
        )));
    }
    let mut normals: Vec<usize> = table
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.label.is_anomalous())
        .map(|(i, _)| i)
        .collect();
    if normals.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 normal records to split, found {}",
            normals.len()
        )));
    }
    let n_train = ((normals.len() as f64 * normal_train_frac).round() as usize)
        .clamp(1, normals.len() - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    normals.shuffle(&mut rng);
    let mut in_train = vec![false; table.len()];
    for &i in &normals[..n_train] {
        in_train[i] = true;
    }

    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(table.len() - n_train);
    for (r, &t) in table.records.iter().zip(&in_train) {
        if t {
            train.push(r.clone());
        } else {
            test.push(r.clone());
        }
    }
    let part = |records| DatasetTable {
        records,
        feature_names: table.feature_names.clone(),
        program_blocks: table.program_blocks.clone(),
    };
    Ok((part(train), part(test)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Label;

    fn record(lot: &str, wf: &str, x: i64, label: Label, features: Vec<f64>) -> DeviceRecord {
        DeviceRecord {
            lot_key: lot.into(),
            wf_key: wf.into(),
            die_x: x,
            die_y: 0,
            label,
            features,
        }
    }

    fn three_feature_table() -> DatasetTable {
        let names = ["pA__f1", "pA__f2", "pB__f1"].map(String::from).to_vec();
        let recs = (0..4)
            .map(|i| record("L", "W", i, Label::Normal, vec![i as f64, 1.0, 2.0]))
            .collect();
        DatasetTable::new(recs, names).unwrap()
    }

    #[test]
    fn select_all_is_identity() {
        let t = three_feature_table();
        assert_eq!(select_features(&t, ".*").unwrap(), t);
    }

    #[test]
    fn select_one_program() {
        let t = select_features(&three_feature_table(), "pA__.*").unwrap();
        assert_eq!(t.n_features(), 2);
        assert_eq!(t.program_blocks.len(), 1);
        assert_eq!(t.records[3].features, vec![3.0, 1.0]);
        assert_eq!(t.records[3].die_x, 3);
    }

    #[test]
    fn select_nothing_is_error() {
        assert!(matches!(
            select_features(&three_feature_table(), "zzz"),
            Err(Error::EmptySelection(_))
        ));
        assert!(matches!(
            select_features(&three_feature_table(), "("),
            Err(Error::Regex(_))
        ));
    }

    fn table_with_missing(n_missing_col0: usize) -> DatasetTable {
        let names = vec!["a__x".to_string(), "a__y".to_string()];
        let recs = (0..10)
            .map(|i| {
                let x = if i < n_missing_col0 { f64::NAN } else { i as f64 };
                record("L", "W", i as i64, Label::Normal, vec![x, 1.0])
            })
            .collect();
        DatasetTable::new(recs, names).unwrap()
    }

    #[test]
    fn column_below_threshold_is_kept_rows_dropped() {
        let t = filter_missing(&table_with_missing(4), 0.5).unwrap();
        assert_eq!(t.n_features(), 2);
        assert_eq!(t.len(), 6);
        assert_eq!(t.missing_count(), 0);
    }

    #[test]
    fn column_above_threshold_is_dropped() {
        let t = filter_missing(&table_with_missing(6), 0.5).unwrap();
        assert_eq!(t.feature_names, vec!["a__y".to_string()]);
        assert_eq!(t.len(), 10);
    }

    #[test]
    fn complete_table_unchanged() {
        let t = table_with_missing(0);
        assert_eq!(filter_missing(&t, 0.3).unwrap(), t);
    }

    #[test]
    fn all_columns_dropped_is_error() {
        let names = vec!["a__x".to_string()];
        let recs = vec![record("L", "W", 0, Label::Normal, vec![f64::NAN])];
        let t = DatasetTable::new(recs, names).unwrap();
        assert!(matches!(filter_missing(&t, 0.5), Err(Error::EmptySelection(_))));
    }

    #[test]
    fn zscore_hand_values() {
        let names = vec!["a__x".to_string()];
        let recs = [1.0, 2.0, 3.0]
            .iter()
            .enumerate()
            .map(|(i, &v)| record("L", "W", i as i64, Label::Normal, vec![v]))
            .collect();
        let t = DatasetTable::new(recs, names).unwrap();
        let z = within_wafer_zscore(&t, 1e-6).unwrap();
        // population std of [1,2,3] is sqrt(2/3) = 0.81650
        let expected = [-1.224744871391589, 0.0, 1.224744871391589];
        for (r, e) in z.records.iter().zip(expected) {
            assert!((r.features[0] - e).abs() < 1e-12);
        }
        assert_eq!(z.records[2].die_x, 2);
    }

    #[test]
    fn zscore_constant_group_is_zero() {
        let names = vec!["a__x".to_string()];
        let recs = (0..3)
            .map(|i| record("L", "W", i, Label::Normal, vec![5.0]))
            .collect();
        let t = DatasetTable::new(recs, names).unwrap();
        let z = within_wafer_zscore(&t, 1e-6).unwrap();
        assert!(z.records.iter().all(|r| r.features[0] == 0.0));
    }

    #[test]
    fn zscore_groups_are_independent() {
        let names = vec!["a__x".to_string()];
        let recs = vec![
            record("L", "W1", 0, Label::Normal, vec![1.0]),
            record("L", "W1", 1, Label::Normal, vec![3.0]),
            record("L", "W2", 0, Label::Normal, vec![3.0]),
            record("L", "W2", 1, Label::Normal, vec![5.0]),
            record("L2", "W1", 0, Label::Normal, vec![3.0]),
        ];
        let t = DatasetTable::new(recs, names).unwrap();
        let (z, stats) = within_wafer_zscore_with_stats(&t, 1e-6).unwrap();
        assert_eq!(z.records[1].features[0], 1.0);
        assert_eq!(z.records[2].features[0], -1.0);
        // singleton group: zero numerator over the floor
        assert_eq!(z.records[4].features[0], 0.0);
        assert_eq!(stats.groups.len(), 3);
        assert_eq!(stats.get("L", "W2").unwrap().mean, vec![4.0]);
    }

    #[test]
    fn zscore_rejects_missing() {
        assert!(matches!(
            within_wafer_zscore(&table_with_missing(1), 1e-6),
            Err(Error::Schema(_))
        ));
    }

    fn labelled(n_normal: usize, n_anom: usize) -> DatasetTable {
        let names = vec!["a__x".to_string()];
        let recs = (0..n_normal + n_anom)
            .map(|i| {
                let label = if i < n_normal { Label::Normal } else { Label::Anomalous };
                record("L", "W", i as i64, label, vec![i as f64])
            })
            .collect();
        DatasetTable::new(recs, names).unwrap()
    }

    #[test]
    fn split_sizes_and_anomaly_routing() {
        let t = labelled(100, 2);
        let (train, test) = split_train_test(&t, 0.5, 42).unwrap();
        assert_eq!(train.len(), 50);
        assert_eq!(train.n_anomalous(), 0);
        assert_eq!(test.len(), 52);
        assert_eq!(test.n_anomalous(), 2);
    }

    #[test]
    fn split_is_seeded() {
        let t = labelled(100, 2);
        let a = split_train_test(&t, 0.5, 7).unwrap();
        let b = split_train_test(&t, 0.5, 7).unwrap();
        let c = split_train_test(&t, 0.5, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn split_rejects_degenerate_fraction() {
        let t = labelled(10, 1);
        assert!(split_train_test(&t, 1.0, 0).is_err());
        assert!(split_train_test(&t, 0.0, 0).is_err());
        assert!(split_train_test(&labelled(1, 3), 0.5, 0).is_err());
    }
}
