//! Ablation denoiser: a residual MLP over the flattened `C·L` latent,
//! conditioned on the timestep by addition. No attention, no patches.

use ndarray::{Array2, Array3, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{NoisePredictor, TrainableDenoiser};
use crate::dit::TimestepEmbedder;
use crate::error::{Error, Result};
use crate::nn::{join, silu_array, silu_backward, Linear, Params};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlatMlpConfig {
    pub channels: usize,
    pub seq_len: usize,
    pub hidden: usize,
    pub depth: usize,
}

impl FlatMlpConfig {
    pub fn new(channels: usize, seq_len: usize) -> Self {
        FlatMlpConfig {
            channels,
            seq_len,
            hidden: 256,
            depth: 3,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.channels * self.seq_len
    }

    pub fn validate(&self) -> Result<()> {
        if [self.channels, self.seq_len, self.hidden, self.depth].contains(&0) {
            return Err(Error::Config("flat MLP dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatMlpDenoiser {
    pub config: FlatMlpConfig,
    pub in_proj: Linear,
    pub t_embedder: TimestepEmbedder,
    pub blocks: Vec<ResBlock>,
    pub out_proj: Linear,
}

struct ResCache {
    h_in: Array2<f64>,
    a0: Array2<f64>,
    pre: Array2<f64>,
    a1: Array2<f64>,
}

pub struct FlatMlpCache {
    x: Array2<f64>,
    t_cache: crate::dit::TimestepCache,
    blocks: Vec<ResCache>,
    h_last: Array2<f64>,
    act_last: Array2<f64>,
}

impl FlatMlpDenoiser {
    pub fn init<R: Rng + ?Sized>(config: FlatMlpConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        Ok(FlatMlpDenoiser {
            config,
            in_proj: Linear::xavier(config.input_dim(), h, rng),
            t_embedder: TimestepEmbedder::init(h, rng),
            blocks: (0..config.depth)
                .map(|_| ResBlock {
                    fc1: Linear::xavier(h, h, rng),
                    fc2: Linear::xavier(h, h, rng),
                })
                .collect(),
            out_proj: Linear::zeros(h, config.input_dim(), true),
        })
    }

    pub fn forward_cached(&self, zt: &Array3<f64>, t: &[usize]) -> Result<(Array3<f64>, FlatMlpCache)> {
        let (b, c, l) = zt.dim();
        if c != self.config.channels || l != self.config.seq_len {
            return Err(Error::shape(format!(
                "flat MLP expects {}×{} tokens, got {c}×{l}",
                self.config.channels, self.config.seq_len
            )));
        }
        if t.len() != b {
            return Err(Error::shape(format!("{b} samples but {} timesteps", t.len())));
        }
        let x = zt.to_shape((b, c * l)).expect("contiguous").to_owned();
        let (temb, t_cache) = self.t_embedder.forward(t);
        let mut h = self.in_proj.forward(&x.view()) + &temb;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let h_in = h;
            let a0 = silu_array(&h_in);
            let pre = block.fc1.forward(&a0.view());
            let a1 = silu_array(&pre);
            h = &h_in + &block.fc2.forward(&a1.view());
            caches.push(ResCache { h_in, a0, pre, a1 });
        }
        let act_last = silu_array(&h);
        let out = self.out_proj.forward(&act_last.view());
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("activation in flat MLP denoiser".into()));
        }
        let out = out.into_shape_with_order((b, c, l)).expect("shape");
        Ok((
            out,
            FlatMlpCache {
                x,
                t_cache,
                blocks: caches,
                h_last: h,
                act_last,
            },
        ))
    }

    pub fn backward(&self, cache: &FlatMlpCache, d_out: &Array3<f64>, grad: &mut Self) -> Array3<f64> {
        let (b, c, l) = d_out.dim();
        let d_rows = d_out.to_shape((b, c * l)).expect("contiguous").to_owned();
        let d_act = self.out_proj.backward(&cache.act_last.view(), &d_rows.view(), &mut grad.out_proj);
        let mut d_h = silu_backward(&cache.h_last, &d_act);
        for (i, block) in self.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[i];
            let d_a1 = block.fc2.backward(&bc.a1.view(), &d_h.view(), &mut grad.blocks[i].fc2);
            let d_pre = silu_backward(&bc.pre, &d_a1);
            let d_a0 = block.fc1.backward(&bc.a0.view(), &d_pre.view(), &mut grad.blocks[i].fc1);
            d_h = d_h + silu_backward(&bc.h_in, &d_a0);
        }
        self.t_embedder.backward(&cache.t_cache, &d_h, &mut grad.t_embedder);
        let d_x = self.in_proj.backward(&cache.x.view(), &d_h.view(), &mut grad.in_proj);
        d_x.into_shape_with_order((b, c, l)).expect("shape")
    }
}

impl NoisePredictor for FlatMlpDenoiser {
    fn predict_batch(&self, zt: &Array3<f64>, t: &[usize]) -> Result<Array3<f64>> {
        Ok(self.forward_cached(zt, t)?.0)
    }
}

impl TrainableDenoiser for FlatMlpDenoiser {
    type Cache = FlatMlpCache;

    fn forward_cached(&self, zt: &Array3<f64>, t: &[usize]) -> Result<(Array3<f64>, FlatMlpCache)> {
        FlatMlpDenoiser::forward_cached(self, zt, t)
    }

    fn backward(&self, cache: &FlatMlpCache, d_out: &Array3<f64>, grad: &mut Self) -> Array3<f64> {
        FlatMlpDenoiser::backward(self, cache, d_out, grad)
    }
}

impl Params for FlatMlpDenoiser {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>)) {
        self.in_proj.visit_params(&join(prefix, "in_proj"), f);
        self.t_embedder.visit_params(&join(prefix, "t_embedder"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.fc1.visit_params(&join(prefix, &format!("block{i}.fc1")), f);
            b.fc2.visit_params(&join(prefix, &format!("block{i}.fc2")), f);
        }
        self.out_proj.visit_params(&join(prefix, "out_proj"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>)) {
        self.in_proj.visit_params_mut(&join(prefix, "in_proj"), f);
        self.t_embedder.visit_params_mut(&join(prefix, "t_embedder"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.fc1.visit_params_mut(&join(prefix, &format!("block{i}.fc1")), f);
            b.fc2.visit_params_mut(&join(prefix, &format!("block{i}.fc2")), f);
        }
        self.out_proj.visit_params_mut(&join(prefix, "out_proj"), f);
    }
}
