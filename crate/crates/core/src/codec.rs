//! MLP autoencoder between feature space `R^F` and the latent `R^{D_r}`, and
//! the reshape between a latent vector and its `C × L` token grid.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    join, layer_norm_rows, layer_norm_rows_backward, silu_array, silu_backward, Linear, Params,
};

pub const LATENT_LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub n_features: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    pub channels: usize,
}

impl CodecConfig {
    pub fn new(n_features: usize) -> Self {
        CodecConfig {
            n_features,
            hidden: 128,
            latent_dim: 128,
            channels: 4,
        }
    }

    /// `⌈D_r / C⌉`
    pub fn seq_len(&self) -> usize {
        self.latent_dim.div_ceil(self.channels)
    }

    pub fn padded_slots(&self) -> usize {
        self.channels * self.seq_len() - self.latent_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_features == 0 || self.hidden == 0 || self.latent_dim == 0 || self.channels == 0 {
            return Err(Error::Config("codec dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder `x → LN(W2 SiLU(W1 x + b1) + b2)` and its mirror-image decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecWeights {
    pub config: CodecConfig,
    pub enc_in: Linear,
    pub enc_out: Linear,
    pub dec_in: Linear,
    pub dec_out: Linear,
}

pub struct AutoencoderCache {
    x: Array2<f64>,
    enc_pre: Array2<f64>,
    enc_act: Array2<f64>,
    latent: Array2<f64>,
    latent_rstd: Array1<f64>,
    dec_pre: Array2<f64>,
    dec_act: Array2<f64>,
}

impl CodecWeights {
    pub fn init<R: Rng + ?Sized>(config: CodecConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let CodecConfig { n_features: f, hidden: h, latent_dim: d, .. } = config;
        Ok(CodecWeights {
            config,
            enc_in: Linear::init(f, h, true, rng),
            enc_out: Linear::init(h, d, true, rng),
            dec_in: Linear::init(d, h, true, rng),
            dec_out: Linear::init(h, f, true, rng),
        })
    }

    fn expect_cols(x: &ArrayView2<f64>, n: usize, what: &str) -> Result<()> {
        if x.ncols() != n {
            return Err(Error::shape(format!("{what} has width {}, expected {n}", x.ncols())));
        }
        Ok(())
    }

    /// `B × F → B × D_r`
    pub fn encode_batch(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        Self::expect_cols(x, self.config.n_features, "encoder input")?;
        let a = silu_array(&self.enc_in.forward(x));
        let pre = self.enc_out.forward(&a.view());
        Ok(layer_norm_rows(&pre.view(), LATENT_LN_EPS).0)
    }

    /// `B × D_r → B × F`
    pub fn decode_batch(&self, h: &ArrayView2<f64>) -> Result<Array2<f64>> {
        Self::expect_cols(h, self.config.latent_dim, "decoder input")?;
        let a = silu_array(&self.dec_in.forward(h));
        Ok(self.dec_out.forward(&a.view()))
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, x.len()), x).expect("row");
        Ok(self.encode_batch(&x)?.into_raw_vec_and_offset().0)
    }

    pub fn decode(&self, h: &[f64]) -> Result<Vec<f64>> {
        let h = ArrayView2::from_shape((1, h.len()), h).expect("row");
        Ok(self.decode_batch(&h)?.into_raw_vec_and_offset().0)
    }

    /// Full autoencoder pass retaining activations.
    pub fn reconstruct_cached(&self, x: &ArrayView2<f64>) -> Result<(Array2<f64>, AutoencoderCache)> {
        Self::expect_cols(x, self.config.n_features, "autoencoder input")?;
        let enc_pre = self.enc_in.forward(x);
        let enc_act = silu_array(&enc_pre);
        let lat_pre = self.enc_out.forward(&enc_act.view());
        let (latent, latent_rstd) = layer_norm_rows(&lat_pre.view(), LATENT_LN_EPS);
        let dec_pre = self.dec_in.forward(&latent.view());
        let dec_act = silu_array(&dec_pre);
        let out = self.dec_out.forward(&dec_act.view());
        Ok((
            out,
            AutoencoderCache {
                x: x.to_owned(),
                enc_pre,
                enc_act,
                latent,
                latent_rstd,
                dec_pre,
                dec_act,
            },
        ))
    }

    /// Mean over the batch of `‖x − x̂‖² / F`.
    pub fn reconstruction_loss(x: &ArrayView2<f64>, x_hat: &Array2<f64>) -> f64 {
        let n = x.len().max(1) as f64;
        (x_hat - x).mapv(|v| v * v).sum() / n
    }

    /// Loss and accumulated gradients for one batch.
    pub fn loss_and_grad(&self, x: &ArrayView2<f64>, grad: &mut CodecWeights) -> Result<f64> {
        let (x_hat, cache) = self.reconstruct_cached(x)?;
        let loss = Self::reconstruction_loss(x, &x_hat);
        let d_out = (&x_hat - x) * (2.0 / x.len() as f64);
        self.backward(&cache, &d_out, grad);
        Ok(loss)
    }

    pub fn backward(&self, cache: &AutoencoderCache, d_out: &Array2<f64>, grad: &mut CodecWeights) {
        let d_dec_act = self.dec_out.backward(&cache.dec_act.view(), &d_out.view(), &mut grad.dec_out);
        let d_dec_pre = silu_backward(&cache.dec_pre, &d_dec_act);
        let d_latent = self.dec_in.backward(&cache.latent.view(), &d_dec_pre.view(), &mut grad.dec_in);
        let d_lat_pre = layer_norm_rows_backward(&cache.latent, &cache.latent_rstd, &d_latent.view());
        let d_enc_act = self
            .enc_out
            .backward(&cache.enc_act.view(), &d_lat_pre.view(), &mut grad.enc_out);
        let d_enc_pre = silu_backward(&cache.enc_pre, &d_enc_act);
        self.enc_in
            .backward_params(&cache.x.view(), &d_enc_pre.view(), &mut grad.enc_in);
    }
}

impl Params for CodecWeights {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>)) {
        self.enc_in.visit_params(&join(prefix, "encoder.fc1"), f);
        self.enc_out.visit_params(&join(prefix, "encoder.fc2"), f);
        self.dec_in.visit_params(&join(prefix, "decoder.fc1"), f);
        self.dec_out.visit_params(&join(prefix, "decoder.fc2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>)) {
        self.enc_in.visit_params_mut(&join(prefix, "encoder.fc1"), f);
        self.enc_out.visit_params_mut(&join(prefix, "encoder.fc2"), f);
        self.dec_in.visit_params_mut(&join(prefix, "decoder.fc1"), f);
        self.dec_out.visit_params_mut(&join(prefix, "decoder.fc2"), f);
    }
}

/// Row-major reshape of `h` into `C × ⌈len/C⌉`, zero-padding the tail.
pub fn tokenize(h: &[f64], channels: usize) -> Array2<f64> {
    let seq_len = h.len().div_ceil(channels);
    let mut z = Array2::zeros((channels, seq_len));
    for (slot, v) in z.iter_mut().zip(h) {
        *slot = *v;
    }
    z
}

/// Inverse of [`tokenize`]: the first `latent_dim` slots in row-major order.
pub fn detokenize(z: &ArrayView2<f64>, latent_dim: usize) -> Vec<f64> {
    z.iter().take(latent_dim).copied().collect()
}

/// `B × D_r → B × C × L`
pub fn tokenize_batch(h: &ArrayView2<f64>, channels: usize) -> Array3<f64> {
    let (b, d) = h.dim();
    let seq_len = d.div_ceil(channels);
    let mut z = Array2::zeros((b, channels * seq_len));
    z.slice_mut(s![.., ..d]).assign(h);
    z.into_shape_with_order((b, channels, seq_len)).expect("contiguous")
}

/// `B × C × L → B × D_r`
pub fn detokenize_batch(z: &Array3<f64>, latent_dim: usize) -> Array2<f64> {
    let b = z.shape()[0];
    let flat = z
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((b, z.shape()[1] * z.shape()[2]))
        .expect("contiguous");
    flat.slice(s![.., ..latent_dim]).to_owned()
}

/// Maps features to the latent space. `Standardize` replaces the learned
/// encoder by a per-feature affine standardization padded or truncated to
/// `D_r`, for the no-autoencoder ablation.
#[derive(Debug, Clone, PartialEq)]
pub enum LatentMap {
    Mlp(CodecWeights),
    Standardize {
        latent_dim: usize,
        mean: Array1<f64>,
        std: Array1<f64>,
    },
}

impl LatentMap {
    /// Standardization statistics estimated from the rows of `x`.
    pub fn standardize_from(x: &ArrayView2<f64>, latent_dim: usize) -> Self {
        let mean = x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()));
        let std = x.std_axis(Axis(0), 0.0).mapv(|s| s.max(1e-6));
        LatentMap::Standardize { latent_dim, mean, std }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            LatentMap::Mlp(w) => w.config.latent_dim,
            LatentMap::Standardize { latent_dim, .. } => *latent_dim,
        }
    }

    pub fn n_features(&self) -> usize {
        match self {
            LatentMap::Mlp(w) => w.config.n_features,
            LatentMap::Standardize { mean, .. } => mean.len(),
        }
    }

    pub fn encode_batch(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        match self {
            LatentMap::Mlp(w) => w.encode_batch(x),
            LatentMap::Standardize { latent_dim, mean, std } => {
                if x.ncols() != mean.len() {
                    return Err(Error::shape(format!(
                        "input has width {}, expected {}",
                        x.ncols(),
                        mean.len()
                    )));
                }
                let z = (x - mean) / std;
                let keep = (*latent_dim).min(z.ncols());
                let mut h = Array2::zeros((x.nrows(), *latent_dim));
                h.slice_mut(s![.., ..keep]).assign(&z.slice(s![.., ..keep]));
                Ok(h)
            }
        }
    }

    pub fn decode_batch(&self, h: &ArrayView2<f64>) -> Result<Array2<f64>> {
        match self {
            LatentMap::Mlp(w) => w.decode_batch(h),
            LatentMap::Standardize { latent_dim, mean, std } => {
                if h.ncols() != *latent_dim {
                    return Err(Error::shape(format!(
                        "latent has width {}, expected {latent_dim}",
                        h.ncols()
                    )));
                }
                let f = mean.len();
                let keep = (*latent_dim).min(f);
                let mut z = Array2::zeros((h.nrows(), f));
                z.slice_mut(s![.., ..keep]).assign(&h.slice(s![.., ..keep]));
                Ok(z * std + mean)
            }
        }
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, x.len()), x).expect("row");
        Ok(self.encode_batch(&x)?.into_raw_vec_and_offset().0)
    }

    pub fn decode(&self, h: &ArrayView1<f64>) -> Result<Vec<f64>> {
        let h = h.to_owned().insert_axis(Axis(0));
        Ok(self.decode_batch(&h.view())?.into_raw_vec_and_offset().0)
    }
}
