//! Cosine noise schedule, closed-form forward corruption, the simplified
//! noise-prediction loss and the ancestral reverse chain.

use ndarray::{Array2, Array3, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{NoisePredictor, TrainableDenoiser};
use crate::error::{Error, Result};
use crate::rng;

pub const COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;

/// Per-step variances for `T` steps. Index conventions: `beta(t)` and
/// `beta_tilde(t)` take `t ∈ 1..=T`; `alpha_bar(t)` takes `t ∈ 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_tilde: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: String,
    pub steps: usize,
    pub offset: f64,
    pub max_beta: f64,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::Range(format!("timestep {t} outside 1..={}", self.steps)));
        }
        Ok(())
    }
}

/// `f(t) = cos²(((t/T + s)/(1 + s))·π/2)`
fn cosine_level(t: usize, steps: usize) -> f64 {
    let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
    (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
}

/// Cosine schedule with `β_t = 1 − f(t)/f(t−1)` clipped to [`MAX_BETA`];
/// `ᾱ` is the running product of `1 − β` so that it stays consistent with the
/// clipped betas.
pub fn cosine_schedule(steps: usize) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("diffusion needs at least one step".into()));
    }
    let f0 = cosine_level(0, steps);
    let mut beta = Vec::with_capacity(steps);
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    let mut prev_level = 1.0;
    for t in 1..=steps {
        let level = cosine_level(t, steps) / f0;
        let b = (1.0 - level / prev_level).min(MAX_BETA);
        prev_level = level;
        beta.push(b);
        let last = *alpha_bar.last().expect("seeded with 1");
        alpha_bar.push(last * (1.0 - b));
    }
    let beta_tilde = (1..=steps)
        .map(|t| beta[t - 1] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]))
        .collect();
    Ok(NoiseSchedule { steps, beta, alpha_bar, beta_tilde })
}

impl NoiseSchedule {
    pub fn spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            kind: "cosine".into(),
            steps: self.steps,
            offset: COSINE_OFFSET,
            max_beta: MAX_BETA,
        }
    }
}

/// `Z_t = √ᾱ_t·Z_0 + √(1−ᾱ_t)·ε`. `t = 0` is accepted and returns `Z_0`.
pub fn forward_sample(z0: &Array2<f64>, t: usize, eps: &Array2<f64>, sched: &NoiseSchedule) -> Result<Array2<f64>> {
    if t > sched.steps() {
        return Err(Error::Range(format!("timestep {t} outside 0..={}", sched.steps())));
    }
    if z0.dim() != eps.dim() {
        return Err(Error::shape("noise and latent shapes differ"));
    }
    let ab = sched.alpha_bar(t);
    Ok(z0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

/// Batched forward corruption with a timestep per sample.
pub fn forward_sample_batch(z0: &Array3<f64>, t: &[usize], eps: &Array3<f64>, sched: &NoiseSchedule) -> Result<Array3<f64>> {
    if z0.dim() != eps.dim() || z0.shape()[0] != t.len() {
        return Err(Error::shape("batch shapes of latent, noise and timesteps differ"));
    }
    let mut out = Array3::zeros(z0.raw_dim());
    for (i, &ti) in t.iter().enumerate() {
        sched.check_step(ti)?;
        let ab = sched.alpha_bar(ti);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Zip::from(out.index_axis_mut(Axis(0), i))
            .and(z0.index_axis(Axis(0), i))
            .and(eps.index_axis(Axis(0), i))
            .for_each(|o, &z, &e| *o = a * z + b * e);
    }
    Ok(out)
}

/// Mean over batch and entries of `(ε − ε_θ(Z_t, t))²`.
pub fn ddpm_loss(
    model: &dyn NoisePredictor,
    z0: &Array3<f64>,
    t: &[usize],
    eps: &Array3<f64>,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let zt = forward_sample_batch(z0, t, eps, sched)?;
    let pred = model.predict_batch(&zt, t)?;
    if pred.dim() != eps.dim() {
        return Err(Error::shape("prediction shape differs from noise shape"));
    }
    Ok((&pred - eps).mapv(|v| v * v).mean().unwrap_or(0.0))
}

/// Loss plus parameter gradients (accumulated into `grad`) and `dL/dZ_0`.
pub fn ddpm_loss_and_grad<D: TrainableDenoiser>(
    model: &D,
    z0: &Array3<f64>,
    t: &[usize],
    eps: &Array3<f64>,
    sched: &NoiseSchedule,
    grad: &mut D,
) -> Result<(f64, Array3<f64>)> {
    let zt = forward_sample_batch(z0, t, eps, sched)?;
    let (pred, cache) = model.forward_cached(&zt, t)?;
    if pred.dim() != eps.dim() {
        return Err(Error::shape("prediction shape differs from noise shape"));
    }
    let diff = &pred - eps;
    let n = diff.len() as f64;
    let loss = diff.mapv(|v| v * v).sum() / n;
    let d_pred = diff * (2.0 / n);
    let mut d_z0 = model.backward(&cache, &d_pred, grad);
    for (i, &ti) in t.iter().enumerate() {
        d_z0.index_axis_mut(Axis(0), i).mapv_inplace(|v| v * sched.alpha_bar(ti).sqrt());
    }
    Ok((loss, d_z0))
}

/// Posterior mean `μ_θ(Z_t, t)` given the predicted noise.
fn posterior_mean(zt: &Array2<f64>, eps_pred: &Array2<f64>, t: usize, sched: &NoiseSchedule) -> Array2<f64> {
    let beta = sched.beta(t);
    let coef = beta / (1.0 - sched.alpha_bar(t)).sqrt();
    (zt - &(eps_pred * coef)) / (1.0 - beta).sqrt()
}

/// One ancestral step `Z_{t−1} = μ_θ(Z_t, t) + √β̃_t·ξ`; the noise is dropped at `t = 1`.
pub fn reverse_step(
    zt: &Array2<f64>,
    t: usize,
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    xi: &Array2<f64>,
) -> Result<Array2<f64>> {
    sched.check_step(t)?;
    let eps_pred = model.predict(zt, t)?;
    let mean = posterior_mean(zt, &eps_pred, t, sched);
    if t == 1 {
        return Ok(mean);
    }
    Ok(mean + xi * sched.beta_tilde(t).sqrt())
}

/// Runs the reverse chain from `t = t_rec` down to 1 starting at the clean
/// latent itself (no forward corruption). Noise comes from `rng`.
pub fn reconstruct_with<R: Rng + ?Sized>(
    z0: &Array2<f64>,
    t_rec: usize,
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Array2<f64>> {
    sched.check_step(t_rec)?;
    let mut z = z0.clone();
    for t in (1..=t_rec).rev() {
        let xi = if t > 1 {
            rng::standard_normal(rng, z.raw_dim())
        } else {
            Array2::zeros(z.raw_dim())
        };
        z = reverse_step(&z, t, model, sched, &xi)?;
    }
    Ok(z)
}

pub fn reconstruct(
    z0: &Array2<f64>,
    t_rec: usize,
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Array2<f64>> {
    reconstruct_with(z0, t_rec, model, sched, &mut rng::stream(seed, rng::streams::RECONSTRUCT_BASE))
}

/// Batched reverse chain; sample `i` draws its noise from `rngs[i]`, so the
/// result matches running [`reconstruct_with`] per sample.
pub fn reconstruct_batch<R: Rng>(
    z0: &Array3<f64>,
    t_rec: usize,
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    rngs: &mut [R],
) -> Result<Array3<f64>> {
    sched.check_step(t_rec)?;
    let b = z0.shape()[0];
    if rngs.len() != b {
        return Err(Error::shape("one generator per sample required"));
    }
    let mut z = z0.clone();
    for t in (1..=t_rec).rev() {
        let eps_pred = model.predict_batch(&z, &vec![t; b])?;
        let sigma = sched.beta_tilde(t).sqrt();
        for (i, rng) in rngs.iter_mut().enumerate() {
            let zi = z.index_axis(Axis(0), i).to_owned();
            let mut next = posterior_mean(&zi, &eps_pred.index_axis(Axis(0), i).to_owned(), t, sched);
            if t > 1 {
                let xi: Array2<f64> = rng::standard_normal(rng, zi.raw_dim());
                next = next + xi * sigma;
            }
            z.index_axis_mut(Axis(0), i).assign(&next);
        }
    }
    Ok(z)
}
