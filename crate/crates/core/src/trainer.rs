//! Two-phase training. Phase 1 fits the autoencoder on reconstruction loss;
//! phase 2 freezes it and fits the denoiser and die embedding jointly on the
//! noise-prediction objective, with positional offsets added to `Z_0` before
//! corruption.

use std::fmt;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{CodecWeights, LatentMap};
use crate::config::{ModelConfig, TrainConfig};
use crate::dataio::{format_sig9, DatasetTable};
use crate::denoiser::{DenoiserModel, TrainableDenoiser};
use crate::diffusion::{ddpm_loss_and_grad, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{init_codec, ModelBundle};
use crate::nn::{AdamW, AdamWConfig, Params};
use crate::posenc::{feature_pe, DiePeWeights};
use crate::rng::{self, streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Autoencoder,
    Denoiser,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Autoencoder => "autoencoder",
            Phase::Denoiser => "denoiser",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub phase: Phase,
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub fn push(&mut self, phase: Phase, epoch: usize, loss: f64) {
        log::info!("{phase} epoch {epoch}: loss {loss:.6}");
        self.entries.push(LogEntry { phase, epoch, loss });
    }

    pub fn losses(&self, phase: Phase) -> Vec<f64> {
        self.entries.iter().filter(|e| e.phase == phase).map(|e| e.loss).collect()
    }

    /// Tab-separated `phase epoch loss` lines with a header.
    pub fn to_text(&self) -> String {
        let mut s = String::from("phase\tepoch\tloss\n");
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\t{}\n", e.phase, e.epoch, format_sig9(e.loss)));
        }
        s
    }
}

fn optimizer(cfg: &TrainConfig) -> AdamW {
    AdamW::new(AdamWConfig::new(cfg.lr, cfg.weight_decay))
}

/// Shuffled index batches for one epoch; the last partial batch is kept.
fn epoch_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn non_finite(phase: Phase, epoch: usize, step: usize, loss: f64) -> Error {
    Error::NonFinite(format!("{phase} loss {loss} at epoch {epoch}, step {step}"))
}

/// Phase 1: fits `codec` to reconstruct the rows of `x`.
pub fn train_autoencoder(
    codec: &mut CodecWeights,
    x: &ArrayView2<f64>,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<()> {
    cfg.validate()?;
    if x.nrows() == 0 {
        return Err(Error::EmptySelection("no training devices".into()));
    }
    let mut shuffle = rng::stream(cfg.seed, streams::AE_SHUFFLE);
    let mut opt = optimizer(cfg);
    let mut grad = codec.zeros_like();
    for epoch in 1..=cfg.ae_epochs {
        let mut total = 0.0;
        for (step, idx) in epoch_batches(x.nrows(), cfg.batch_size, &mut shuffle).iter().enumerate() {
            let batch = x.select(Axis(0), idx);
            grad.zero_params();
            let loss = codec.loss_and_grad(&batch.view(), &mut grad)?;
            if !loss.is_finite() {
                return Err(non_finite(Phase::Autoencoder, epoch, step, loss));
            }
            opt.step(codec, &grad);
            total += loss * idx.len() as f64;
        }
        log.push(Phase::Autoencoder, epoch, total / x.nrows() as f64);
    }
    Ok(())
}

struct DenoiserData<'a> {
    tokens: &'a Array3<f64>,
    feature_pe: Option<Array2<f64>>,
    dies: &'a [(i64, i64)],
}

fn denoiser_epochs<D: TrainableDenoiser>(
    model: &mut D,
    die_pe: &mut Option<DiePeWeights>,
    data: &DenoiserData<'_>,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<()> {
    let n = data.tokens.shape()[0];
    let mut shuffle = rng::stream(cfg.seed, streams::DIT_SHUFFLE);
    let mut noise = rng::stream(cfg.seed, streams::DIT_NOISE);
    let mut opt = optimizer(cfg);
    let mut pe_opt = optimizer(cfg);
    let mut grad = model.zeros_like();
    let mut pe_grad = die_pe.as_ref().map(Params::zeros_like);

    for epoch in 1..=cfg.dit_epochs {
        let mut total = 0.0;
        for (step, idx) in epoch_batches(n, cfg.batch_size, &mut shuffle).iter().enumerate() {
            let mut z0 = data.tokens.select(Axis(0), idx);
            if let Some(e) = &data.feature_pe {
                for mut sample in z0.axis_iter_mut(Axis(0)) {
                    sample += e;
                }
            }
            let pe_cache = match die_pe {
                Some(pe) => {
                    let dies: Vec<(i64, i64)> = idx.iter().map(|&i| data.dies[i]).collect();
                    let (offset, cache) = pe.forward_batch(&dies)?;
                    z0 += &offset;
                    Some(cache)
                }
                None => None,
            };
            let t: Vec<usize> = (0..idx.len()).map(|_| noise.random_range(1..=sched.steps())).collect();
            let eps: Array3<f64> = rng::standard_normal(&mut noise, z0.raw_dim());

            grad.zero_params();
            let (loss, d_z0) = ddpm_loss_and_grad(model, &z0, &t, &eps, sched, &mut grad)?;
            if !loss.is_finite() {
                return Err(non_finite(Phase::Denoiser, epoch, step, loss));
            }
            opt.step(model, &grad);
            if let (Some(pe), Some(pg), Some(cache)) = (die_pe.as_mut(), pe_grad.as_mut(), pe_cache) {
                pg.zero_params();
                pe.backward(&cache, &d_z0, pg);
                pe_opt.step(pe, pg);
            }
            total += loss * idx.len() as f64;
        }
        log.push(Phase::Denoiser, epoch, total / n as f64);
    }
    Ok(())
}

/// Phase 2: fits the bundle's denoiser and die embedding on `x` with the
/// latent map frozen.
pub fn train_denoiser(
    bundle: &mut ModelBundle,
    x: &ArrayView2<f64>,
    dies: &[(i64, i64)],
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<()> {
    cfg.validate()?;
    if x.nrows() == 0 {
        return Err(Error::EmptySelection("no training devices".into()));
    }
    if dies.len() != x.nrows() {
        return Err(Error::shape(format!("{} rows but {} die coordinates", x.nrows(), dies.len())));
    }
    let tokens = bundle.latent_tokens(x)?;
    let data = DenoiserData {
        tokens: &tokens,
        feature_pe: if bundle.feature_pe_enabled {
            Some(feature_pe(bundle.channels(), bundle.seq_len())?)
        } else {
            None
        },
        dies,
    };
    let ModelBundle { denoiser, die_pe, schedule, .. } = bundle;
    match denoiser {
        DenoiserModel::Dit(m) => denoiser_epochs(m, die_pe, &data, schedule, cfg, log),
        DenoiserModel::FlatMlp(m) => denoiser_epochs(m, die_pe, &data, schedule, cfg, log),
    }
}

/// Both phases on a table of normal devices.
pub fn fit(train: &DatasetTable, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<(ModelBundle, TrainLog)> {
    model_cfg.validate()?;
    cfg.validate()?;
    if train.n_anomalous() > 0 {
        return Err(Error::Schema(format!(
            "training table holds {} anomalous devices; train on normals only",
            train.n_anomalous()
        )));
    }
    let x = train.feature_matrix();
    let mut log = TrainLog::default();
    let mut init = rng::stream(cfg.seed, streams::INIT);
    let latent = if model_cfg.autoencoder {
        let mut codec = init_codec(model_cfg, train.n_features(), &mut init)?;
        train_autoencoder(&mut codec, &x.view(), cfg, &mut log)?;
        LatentMap::Mlp(codec)
    } else {
        LatentMap::standardize_from(&x.view(), model_cfg.latent_dim)
    };
    let mut bundle = ModelBundle::init(
        model_cfg,
        latent,
        cfg.die_pe_enabled,
        cfg.feature_pe_enabled,
        cfg.steps,
        train.feature_names.clone(),
        train.program_blocks.clone(),
        &mut init,
    )?;
    train_denoiser(&mut bundle, &x.view(), &train.dies(), cfg, &mut log)?;
    Ok((bundle, log))
}
