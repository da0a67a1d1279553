//! Run configuration. Every section deserializes with defaults filled in, so
//! a config file only needs the keys it changes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::{SynthConfig, DEFAULT_R_NA, DEFAULT_SIGMA_FLOOR};
use crate::denoiser::DenoiserKind;
use crate::error::{Error, Result};
use crate::posenc::{DEFAULT_PE_HIDDEN, DEFAULT_SINCOS_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub feature_regex: String,
    pub r_na: f64,
    pub sigma_floor: f64,
    pub normal_train_frac: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            feature_regex: ".*".into(),
            r_na: DEFAULT_R_NA,
            sigma_floor: DEFAULT_SIGMA_FLOOR,
            normal_train_frac: 0.5,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.r_na) {
            return Err(Error::Config(format!("r_na must lie in [0, 1], got {}", self.r_na)));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::Config(format!("sigma_floor must be positive, got {}", self.sigma_floor)));
        }
        if !(self.normal_train_frac > 0.0 && self.normal_train_frac < 1.0) {
            return Err(Error::Config(format!(
                "normal_train_frac must lie strictly between 0 and 1, got {}",
                self.normal_train_frac
            )));
        }
        regex::Regex::new(&self.feature_regex)?;
        Ok(())
    }
}

/// Architecture of every learned component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub channels: usize,
    pub ae_hidden: usize,
    /// `false` replaces the learned encoder by feature standardization.
    pub autoencoder: bool,
    pub denoiser: DenoiserKind,
    pub patch: usize,
    pub hidden: usize,
    pub heads: usize,
    pub depth: usize,
    pub ffn_mult: usize,
    pub mlp_hidden: usize,
    pub mlp_depth: usize,
    pub pe_sincos_dim: usize,
    pub pe_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 128,
            channels: 4,
            ae_hidden: 128,
            autoencoder: true,
            denoiser: DenoiserKind::Dit,
            patch: 2,
            hidden: 256,
            heads: 4,
            depth: 3,
            ffn_mult: 4,
            mlp_hidden: 256,
            mlp_depth: 3,
            pe_sincos_dim: DEFAULT_SINCOS_DIM,
            pe_hidden: DEFAULT_PE_HIDDEN,
        }
    }
}

impl ModelConfig {
    pub fn seq_len(&self) -> usize {
        self.latent_dim.div_ceil(self.channels.max(1))
    }

    pub fn codec(&self, n_features: usize) -> crate::codec::CodecConfig {
        crate::codec::CodecConfig {
            n_features,
            hidden: self.ae_hidden,
            latent_dim: self.latent_dim,
            channels: self.channels,
        }
    }

    pub fn dit(&self) -> crate::dit::DitConfig {
        crate::dit::DitConfig {
            channels: self.channels,
            seq_len: self.seq_len(),
            patch: self.patch,
            hidden: self.hidden,
            heads: self.heads,
            depth: self.depth,
            ffn_mult: self.ffn_mult,
        }
    }

    pub fn flat_mlp(&self) -> crate::flat_mlp::FlatMlpConfig {
        crate::flat_mlp::FlatMlpConfig {
            channels: self.channels,
            seq_len: self.seq_len(),
            hidden: self.mlp_hidden,
            depth: self.mlp_depth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.codec(1).validate()?;
        match self.denoiser {
            DenoiserKind::Dit => self.dit().validate()?,
            DenoiserKind::FlatMlp => self.flat_mlp().validate()?,
        }
        if self.channels % 2 != 0 {
            return Err(Error::Config(format!(
                "channels must be even for the feature positional embedding, got {}",
                self.channels
            )));
        }
        if self.pe_sincos_dim == 0 || self.pe_sincos_dim % 4 != 0 || self.pe_hidden == 0 {
            return Err(Error::Config(format!(
                "die embedding needs a positive hidden size and a sinusoidal width divisible by 4, got {} / {}",
                self.pe_hidden, self.pe_sincos_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub ae_epochs: usize,
    pub dit_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Diffusion steps `T`.
    pub steps: usize,
    pub seed: u64,
    pub die_pe_enabled: bool,
    pub feature_pe_enabled: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            ae_epochs: 50,
            dit_epochs: 200,
            batch_size: 2048,
            lr: 1e-4,
            weight_decay: 5e-4,
            steps: 1000,
            seed: 42,
            die_pe_enabled: true,
            feature_pe_enabled: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Config("batch_size and steps must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "lr must be positive and weight_decay non-negative, got {} / {}",
                self.lr, self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Inclusive arithmetic grid of scoring timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalGrid {
    pub t_start: usize,
    pub t_end: usize,
    pub dt: usize,
}

impl Default for EvalGrid {
    fn default() -> Self {
        EvalGrid {
            t_start: 100,
            t_end: 550,
            dt: 50,
        }
    }
}

impl EvalGrid {
    pub fn timesteps(&self) -> Vec<usize> {
        if self.dt == 0 || self.t_start > self.t_end {
            return Vec::new();
        }
        (self.t_start..=self.t_end).step_by(self.dt).collect()
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.dt == 0 || self.t_start == 0 || self.t_start > self.t_end {
            return Err(Error::Range(format!(
                "evaluation grid {}..={} step {} is empty or starts at 0",
                self.t_start, self.t_end, self.dt
            )));
        }
        if self.t_end > steps {
            return Err(Error::Range(format!("evaluation grid ends at {} beyond T = {steps}", self.t_end)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub grid: EvalGrid,
    pub t_rec: usize,
    pub yield_frac: f64,
    pub top_k: usize,
    /// Remove positional offsets from reconstructed latents before decoding.
    pub subtract_pe: bool,
    pub chunk_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            grid: EvalGrid::default(),
            t_rec: 50,
            yield_frac: 0.95,
            top_k: 3,
            subtract_pe: true,
            chunk_size: 256,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.grid.validate(self.train.steps)?;
        if self.eval.t_rec == 0 || self.eval.t_rec > self.train.steps {
            return Err(Error::Range(format!("t_rec {} outside 1..={}", self.eval.t_rec, self.train.steps)));
        }
        if !(self.eval.yield_frac > 0.0 && self.eval.yield_frac < 1.0) {
            return Err(Error::Range(format!("yield_frac {} outside (0, 1)", self.eval.yield_frac)));
        }
        if self.eval.chunk_size == 0 {
            return Err(Error::Config("chunk_size must be positive".into()));
        }
        Ok(())
    }
}
