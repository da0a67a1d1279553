use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DatasetTable, DeviceRecord, Label};
use crate::error::{Error, Result};

/// Wafers per lot in generated data.
const WAFERS_PER_LOT: usize = 25;
/// Rank of the shared latent factor model.
const LATENT_RANK: usize = 8;
/// Idiosyncratic noise level relative to the factor loadings.
const NOISE_LEVEL: f64 = 0.5;
/// Std of the per-wafer additive offset removed by within-wafer normalization.
const WAFER_OFFSET_STD: f64 = 0.5;
const N_PROGRAMS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_wafers: usize,
    pub wafer_diameter_dies: usize,
    pub n_features: usize,
    pub anomaly_rate: f64,
    /// Additive shift, in within-wafer standard deviations.
    pub shift_magnitude: f64,
    pub n_shifted_features: usize,
    pub radial_trend_strength: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_wafers: 16,
            wafer_diameter_dies: 20,
            n_features: 256,
            anomaly_rate: 0.002,
            shift_magnitude: 5.0,
            n_shifted_features: 16,
            radial_trend_strength: 1.0,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn total_dies(&self) -> usize {
        self.n_wafers * dies_on_wafer(self.wafer_diameter_dies).len()
    }

    pub fn n_anomalies(&self) -> usize {
        (self.anomaly_rate * self.total_dies() as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_wafers == 0 || self.wafer_diameter_dies == 0 || self.n_features == 0 {
            return bad("n_wafers, wafer_diameter_dies and n_features must be positive".into());
        }
        if !(0.0..1.0).contains(&self.anomaly_rate) {
            return bad(format!("anomaly_rate must lie in [0, 1), got {}", self.anomaly_rate));
        }
        if self.anomaly_rate > 0.0 {
            if self.anomaly_rate * (self.total_dies() as f64) < 1.0 {
                return bad(format!(
                    "anomaly_rate {} yields no anomalous die among {}",
                    self.anomaly_rate,
                    self.total_dies()
                ));
            }
            if !(self.shift_magnitude > 0.0) {
                return bad("shift_magnitude must be positive".into());
            }
            if self.n_shifted_features == 0 || self.n_shifted_features > self.n_features {
                return bad(format!(
                    "n_shifted_features must lie in 1..={}, got {}",
                    self.n_features, self.n_shifted_features
                ));
            }
        }
        if !(self.radial_trend_strength >= 0.0) {
            return bad("radial_trend_strength must be non-negative".into());
        }
        Ok(())
    }
}

/// Grid cells whose centre lies inside the inscribed circle of a
/// `diameter × diameter` grid, in row-major order.
pub fn dies_on_wafer(diameter: usize) -> Vec<(i64, i64)> {
    let r = diameter as f64 / 2.0;
    let mut out = Vec::new();
    for y in 0..diameter {
        for x in 0..diameter {
            let (cx, cy) = (x as f64 + 0.5 - r, y as f64 + 0.5 - r);
            if cx * cx + cy * cy <= r * r {
                out.push((x as i64, y as i64));
            }
        }
    }
    out
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Generates a labelled wafer dataset with correlated normal features, a
/// radial wafer trend, per-wafer offsets and mean-shift anomalies.
pub fn synth_wafers(config: &SynthConfig) -> Result<DatasetTable> {
    config.validate()?;
    let f = config.n_features;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let rank = LATENT_RANK.min(f);
    let loadings: Vec<Vec<f64>> = (0..f)
        .map(|_| (0..rank).map(|_| normal(&mut rng)).collect())
        .collect();
    let scale: Vec<f64> = loadings
        .iter()
        .map(|row| 1.0 / (row.iter().map(|a| a * a).sum::<f64>() + NOISE_LEVEL.powi(2)).sqrt())
        .collect();
    let trend_dir: Vec<f64> = (0..f).map(|_| normal(&mut rng)).collect();

    let layout = dies_on_wafer(config.wafer_diameter_dies);
    let radius = config.wafer_diameter_dies as f64 / 2.0;
    let mut records = Vec::with_capacity(config.total_dies());
    let mut z = vec![0.0; rank];
    for w in 0..config.n_wafers {
        let lot_key = format!("LOT{:03}", w / WAFERS_PER_LOT);
        let wf_key = format!("W{:02}", w % WAFERS_PER_LOT + 1);
        let offset: Vec<f64> = (0..f).map(|_| WAFER_OFFSET_STD * normal(&mut rng)).collect();
        for &(x, y) in &layout {
            let (cx, cy) = (x as f64 + 0.5 - radius, y as f64 + 0.5 - radius);
            let trend = config.radial_trend_strength * (cx * cx + cy * cy).sqrt() / radius;
            z.iter_mut().for_each(|v| *v = normal(&mut rng));
            let features = (0..f)
                .map(|k| {
                    let common: f64 = loadings[k].iter().zip(&z).map(|(a, b)| a * b).sum();
                    let noise = NOISE_LEVEL * normal(&mut rng);
                    scale[k] * (common + noise) + offset[k] + trend * trend_dir[k]
                })
                .collect();
            records.push(DeviceRecord {
                lot_key: lot_key.clone(),
                wf_key: wf_key.clone(),
                die_x: x,
                die_y: y,
                label: Label::Normal,
                features,
            });
        }
    }

    let n_anom = config.n_anomalies();
    if n_anom > 0 {
        let per_wafer = layout.len();
        let chosen = index::sample(&mut rng, records.len(), n_anom).into_vec();
        for i in chosen {
            let wafer = i / per_wafer;
            let rows = wafer * per_wafer..(wafer + 1) * per_wafer;
            let feats = index::sample(&mut rng, f, config.n_shifted_features).into_vec();
            for k in feats {
                let std = population_std(records[rows.clone()].iter().map(|r| r.features[k]));
                records[i].features[k] += config.shift_magnitude * std;
            }
            records[i].label = Label::Anomalous;
        }
    }

    let names = program_feature_names(f);
    DatasetTable::new(records, names)
}

fn population_std(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    (values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// `P{p}__feat{k}` names splitting `f` features into four near-equal programs.
fn program_feature_names(f: usize) -> Vec<String> {
    let n_prog = N_PROGRAMS.min(f);
    let base = f / n_prog;
    let extra = f % n_prog;
    let mut names = Vec::with_capacity(f);
    for p in 0..n_prog {
        let len = base + usize::from(p < extra);
        for _ in 0..len {
            names.push(format!("P{p}__feat{:04}", names.len()));
        }
    }
    names
}
