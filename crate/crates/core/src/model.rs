//! A trained pipeline: latent map, denoiser, positional embeddings and the
//! noise schedule, plus the feature layout they were trained on.

use ndarray::{Array2, Array3, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use crate::codec::{tokenize_batch, CodecWeights, LatentMap};
use crate::config::ModelConfig;
use crate::dataio::ProgramBlock;
use crate::denoiser::{DenoiserKind, DenoiserModel};
use crate::diffusion::{cosine_schedule, NoiseSchedule};
use crate::dit::Dit1dModel;
use crate::error::{Error, Result};
use crate::flat_mlp::FlatMlpDenoiser;
use crate::nn::{join, Params};
use crate::posenc::{feature_pe, DiePeWeights};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub latent: LatentMap,
    pub denoiser: DenoiserModel,
    pub die_pe: Option<DiePeWeights>,
    pub feature_pe_enabled: bool,
    pub schedule: NoiseSchedule,
    pub feature_names: Vec<String>,
    pub program_blocks: Vec<ProgramBlock>,
}

impl ModelBundle {
    /// Freshly initialized components. `latent` decides the encoder; the
    /// denoiser and die embedding are drawn from `rng` in that order.
    pub fn init<R: Rng + ?Sized>(
        config: &ModelConfig,
        latent: LatentMap,
        die_pe_enabled: bool,
        feature_pe_enabled: bool,
        steps: usize,
        feature_names: Vec<String>,
        program_blocks: Vec<ProgramBlock>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if latent.latent_dim() != config.latent_dim {
            return Err(Error::shape(format!(
                "latent map width {} differs from configured {}",
                latent.latent_dim(),
                config.latent_dim
            )));
        }
        let denoiser = init_denoiser(config, rng)?;
        let die_pe = if die_pe_enabled {
            Some(DiePeWeights::init(
                config.pe_sincos_dim,
                config.pe_hidden,
                config.channels,
                config.seq_len(),
                rng,
            )?)
        } else {
            None
        };
        Ok(ModelBundle {
            config: config.clone(),
            latent,
            denoiser,
            die_pe,
            feature_pe_enabled,
            schedule: cosine_schedule(steps)?,
            feature_names,
            program_blocks,
        })
    }

    pub fn channels(&self) -> usize {
        self.config.channels
    }

    pub fn seq_len(&self) -> usize {
        self.config.seq_len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    /// Clean latent tokens without positional offsets, `B × C × L`.
    pub fn latent_tokens(&self, x: &ArrayView2<f64>) -> Result<Array3<f64>> {
        if x.ncols() != self.n_features() {
            return Err(Error::shape(format!(
                "input has {} features, model expects {}",
                x.ncols(),
                self.n_features()
            )));
        }
        let h = self.latent.encode_batch(x)?;
        Ok(tokenize_batch(&h.view(), self.channels()))
    }

    /// Sum of the enabled positional offsets per device, `B × C × L`.
    pub fn position_offsets(&self, dies: &[(i64, i64)]) -> Result<Array3<f64>> {
        let (c, l) = (self.channels(), self.seq_len());
        let mut out = match &self.die_pe {
            Some(pe) => pe.forward_batch(dies)?.0,
            None => Array3::zeros((dies.len(), c, l)),
        };
        if self.feature_pe_enabled {
            let e = feature_pe(c, l)?;
            for mut sample in out.axis_iter_mut(Axis(0)) {
                sample += &e;
            }
        }
        Ok(out)
    }

    /// `Z_0` = tokens + feature embedding + die embedding.
    pub fn build_z0(&self, x: &ArrayView2<f64>, dies: &[(i64, i64)]) -> Result<Array3<f64>> {
        if dies.len() != x.nrows() {
            return Err(Error::shape(format!("{} rows but {} die coordinates", x.nrows(), dies.len())));
        }
        Ok(self.latent_tokens(x)? + self.position_offsets(dies)?)
    }

    /// Decodes PE-free latent tokens back to feature space, `B × F`.
    pub fn decode_tokens(&self, z: &Array3<f64>) -> Result<Array2<f64>> {
        let h = crate::codec::detokenize_batch(z, self.config.latent_dim);
        self.latent.decode_batch(&h.view())
    }

    pub fn denoiser_kind(&self) -> DenoiserKind {
        self.denoiser.kind()
    }
}

pub fn init_denoiser<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<DenoiserModel> {
    Ok(match config.denoiser {
        DenoiserKind::Dit => DenoiserModel::Dit(Dit1dModel::init(config.dit(), rng)?),
        DenoiserKind::FlatMlp => DenoiserModel::FlatMlp(FlatMlpDenoiser::init(config.flat_mlp(), rng)?),
    })
}

impl Params for LatentMap {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>)) {
        match self {
            LatentMap::Mlp(w) => w.visit_params(prefix, f),
            LatentMap::Standardize { mean, std, .. } => {
                f(join(prefix, "mean"), mean.view().into_dyn());
                f(join(prefix, "std"), std.view().into_dyn());
            }
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>)) {
        match self {
            LatentMap::Mlp(w) => w.visit_params_mut(prefix, f),
            LatentMap::Standardize { mean, std, .. } => {
                f(join(prefix, "mean"), mean.view_mut().into_dyn());
                f(join(prefix, "std"), std.view_mut().into_dyn());
            }
        }
    }
}

/// Prefix of the latent map tensors inside a bundle.
pub fn latent_prefix(latent: &LatentMap) -> &'static str {
    match latent {
        LatentMap::Mlp(_) => "codec",
        LatentMap::Standardize { .. } => "standardize",
    }
}

/// Prefix of the denoiser tensors inside a bundle.
pub fn denoiser_prefix(kind: DenoiserKind) -> &'static str {
    match kind {
        DenoiserKind::Dit => "dit",
        DenoiserKind::FlatMlp => "mlp",
    }
}

impl Params for ModelBundle {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>)) {
        self.latent.visit_params(&join(prefix, latent_prefix(&self.latent)), f);
        self.denoiser.visit_params(&join(prefix, denoiser_prefix(self.denoiser.kind())), f);
        if let Some(pe) = &self.die_pe {
            pe.visit_params(&join(prefix, "die_pe"), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>)) {
        let lp = latent_prefix(&self.latent);
        self.latent.visit_params_mut(&join(prefix, lp), f);
        let dp = denoiser_prefix(self.denoiser.kind());
        self.denoiser.visit_params_mut(&join(prefix, dp), f);
        if let Some(pe) = &mut self.die_pe {
            pe.visit_params_mut(&join(prefix, "die_pe"), f);
        }
    }
}

/// Codec sized for `n_features`, from `rng`.
pub fn init_codec<R: Rng + ?Sized>(config: &ModelConfig, n_features: usize, rng: &mut R) -> Result<CodecWeights> {
    CodecWeights::init(config.codec(n_features), rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::infer_program_blocks;
    use crate::rng;

    fn names(f: usize) -> Vec<String> {
        (0..f).map(|i| format!("P{}__f{i}", i % 2)).collect()
    }

    fn bundle(f: usize, die_pe: bool, feature_pe: bool) -> ModelBundle {
        let cfg = ModelConfig {
            latent_dim: 16,
            hidden: 16,
            heads: 2,
            depth: 1,
            ae_hidden: 8,
            pe_hidden: 8,
            pe_sincos_dim: 8,
            ..ModelConfig::default()
        };
        let mut r = rng::stream(0, 0);
        let codec = init_codec(&cfg, f, &mut r).unwrap();
        let n = names(f);
        let blocks = infer_program_blocks(&n);
        ModelBundle::init(&cfg, LatentMap::Mlp(codec), die_pe, feature_pe, 100, n, blocks, &mut r).unwrap()
    }

    #[test]
    fn z0_is_tokens_plus_offsets() {
        let b = bundle(6, true, true);
        let x: Array2<f64> = rng::standard_normal(&mut rng::stream(1, 0), (3, 6));
        let dies = [(0, 0), (3, -2), (7, 5)];
        let z0 = b.build_z0(&x.view(), &dies).unwrap();
        let expected = b.latent_tokens(&x.view()).unwrap() + b.position_offsets(&dies).unwrap();
        assert_eq!(z0, expected);
        assert_eq!(z0.dim(), (3, 4, 4));
    }

    #[test]
    fn disabled_offsets_are_zero() {
        let b = bundle(6, false, false);
        assert!(b.position_offsets(&[(1, 2)]).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn feature_width_is_checked() {
        let b = bundle(6, true, true);
        let x = Array2::zeros((1, 5));
        assert!(matches!(b.build_z0(&x.view(), &[(0, 0)]), Err(Error::Shape(_))));
    }

    #[test]
    fn parameter_names_are_prefixed() {
        let b = bundle(6, true, true);
        let mut names = Vec::new();
        b.visit_params("", &mut |n, _| names.push(n));
        assert!(names.contains(&"codec.encoder.fc1.weight".to_string()));
        assert!(names.contains(&"dit.block0.attn.qkv.weight".to_string()));
        assert!(names.contains(&"die_pe.gate".to_string()));
    }
}
