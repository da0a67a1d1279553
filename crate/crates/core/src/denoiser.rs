use ndarray::{Array2, Array3, ArrayViewD, ArrayViewMutD, Axis};
use serde::{Deserialize, Serialize};

use crate::dit::Dit1dModel;
use crate::error::Result;
use crate::flat_mlp::FlatMlpDenoiser;
use crate::nn::Params;

/// Anything that maps a noisy token batch `B × C × L` and per-sample
/// timesteps to a predicted noise batch of the same shape.
pub trait NoisePredictor {
    fn predict_batch(&self, zt: &Array3<f64>, t: &[usize]) -> Result<Array3<f64>>;

    fn predict(&self, zt: &Array2<f64>, t: usize) -> Result<Array2<f64>> {
        let batch = zt.clone().insert_axis(Axis(0));
        Ok(self.predict_batch(&batch, &[t])?.index_axis_move(Axis(0), 0))
    }
}

impl<T: NoisePredictor + ?Sized> NoisePredictor for &T {
    fn predict_batch(&self, zt: &Array3<f64>, t: &[usize]) -> Result<Array3<f64>> {
        (**self).predict_batch(zt, t)
    }
}

/// A noise predictor with a hand-written backward pass.
pub trait TrainableDenoiser: NoisePredictor + Params + Clone {
    type Cache;

    fn forward_cached(&self, zt: &Array3<f64>, t: &[usize]) -> Result<(Array3<f64>, Self::Cache)>;

    /// Accumulates parameter gradients into `grad` and returns `dL/dZt`.
    fn backward(&self, cache: &Self::Cache, d_out: &Array3<f64>, grad: &mut Self) -> Array3<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DenoiserKind {
    #[default]
    Dit,
    FlatMlp,
}

impl std::str::FromStr for DenoiserKind {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dit" => Ok(DenoiserKind::Dit),
            "flat-mlp" => Ok(DenoiserKind::FlatMlp),
            other => Err(crate::error::Error::Config(format!(
                "unknown denoiser `{other}` (expected dit or flat-mlp)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DenoiserModel {
    Dit(Dit1dModel),
    FlatMlp(FlatMlpDenoiser),
}

impl DenoiserModel {
    pub fn kind(&self) -> DenoiserKind {
        match self {
            DenoiserModel::Dit(_) => DenoiserKind::Dit,
            DenoiserModel::FlatMlp(_) => DenoiserKind::FlatMlp,
        }
    }
}

impl NoisePredictor for DenoiserModel {
    fn predict_batch(&self, zt: &Array3<f64>, t: &[usize]) -> Result<Array3<f64>> {
        match self {
            DenoiserModel::Dit(m) => m.predict_batch(zt, t),
            DenoiserModel::FlatMlp(m) => m.predict_batch(zt, t),
        }
    }
}

impl Params for DenoiserModel {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>)) {
        match self {
            DenoiserModel::Dit(m) => m.visit_params(prefix, f),
            DenoiserModel::FlatMlp(m) => m.visit_params(prefix, f),
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>)) {
        match self {
            DenoiserModel::Dit(m) => m.visit_params_mut(prefix, f),
            DenoiserModel::FlatMlp(m) => m.visit_params_mut(prefix, f),
        }
    }
}
