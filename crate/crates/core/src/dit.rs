//! One-dimensional diffusion transformer `ε_θ(Z_t, t)`.
//!
//! Layout of a forward pass on a batch of `B` samples:
//!
//! ```text
//! Z_t (B×C×L) ─patchify→ (B·N_p)×(C·p) ─proj→ + E_patch ─┐
//!                                                          ├→ depth × block(h, c) → final(h, c) → unpatchify → B×C×L
//! t ─sincos(256)→ MLP → c (B×d) ───────────────────────────┘
//! ```
//!
//! Blocks use adaLN-Zero: shift/scale/gate vectors come from a linear map of
//! `SiLU(c)` whose weights start at zero, so every block starts as the
//! identity and the whole network starts as the zero function. Modulated
//! normalization is `(1 + γ)·norm(h) + β`.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{NoisePredictor, TrainableDenoiser};
use crate::error::{Error, Result};
use crate::nn::{
    join, layer_norm_rows, layer_norm_rows_backward, silu_array, silu_backward, softmax_rows, Linear, Params,
};
use crate::posenc::sincos_embedding;

/// Width of the sinusoidal timestep features fed to the conditioning MLP.
pub const TIMESTEP_FREQ_DIM: usize = 256;
const BLOCK_LN_EPS: f64 = 1e-6;
const TIMESTEP_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DitConfig {
    pub channels: usize,
    pub seq_len: usize,
    pub patch: usize,
    pub hidden: usize,
    pub heads: usize,
    pub depth: usize,
    pub ffn_mult: usize,
}

impl DitConfig {
    pub fn new(channels: usize, seq_len: usize) -> Self {
        DitConfig {
            channels,
            seq_len,
            patch: 2,
            hidden: 256,
            heads: 4,
            depth: 3,
            ffn_mult: 4,
        }
    }

    /// `⌈L / p⌉`
    pub fn n_patches(&self) -> usize {
        self.seq_len.div_ceil(self.patch)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if [self.channels, self.seq_len, self.patch, self.hidden, self.heads, self.depth, self.ffn_mult]
            .contains(&0)
        {
            return bad("DiT dimensions must be positive".into());
        }
        if self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by {} heads", self.hidden, self.heads));
        }
        if self.hidden % 2 != 0 {
            return bad(format!("hidden {} must be even for the patch embedding", self.hidden));
        }
        if self.patch > self.seq_len {
            return bad(format!("patch {} longer than sequence {}", self.patch, self.seq_len));
        }
        Ok(())
    }
}

/// Sinusoidal features of `t` followed by `Linear → SiLU → Linear`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepEmbedder {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct TimestepCache {
    freq: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl TimestepEmbedder {
    pub fn init<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Self {
        let bound = TIMESTEP_INIT_STD * 3f64.sqrt();
        let mut fc1 = Linear::uniform(TIMESTEP_FREQ_DIM, hidden, true, bound, rng);
        let mut fc2 = Linear::uniform(hidden, hidden, true, bound, rng);
        fc1.bias.as_mut().expect("bias").fill(0.0);
        fc2.bias.as_mut().expect("bias").fill(0.0);
        TimestepEmbedder { fc1, fc2 }
    }

    pub fn frequencies(t: &[usize]) -> Array2<f64> {
        let mut freq = Array2::zeros((t.len(), TIMESTEP_FREQ_DIM));
        for (mut row, &ti) in freq.rows_mut().into_iter().zip(t) {
            let e = sincos_embedding(ti as f64, TIMESTEP_FREQ_DIM).expect("even width");
            row.assign(&Array1::from(e));
        }
        freq
    }

    pub fn forward(&self, t: &[usize]) -> (Array2<f64>, TimestepCache) {
        let freq = Self::frequencies(t);
        let pre = self.fc1.forward(&freq.view());
        let act = silu_array(&pre);
        let c = self.fc2.forward(&act.view());
        (c, TimestepCache { freq, pre, act })
    }

    pub fn backward(&self, cache: &TimestepCache, dc: &Array2<f64>, grad: &mut TimestepEmbedder) {
        let d_act = self.fc2.backward(&cache.act.view(), &dc.view(), &mut grad.fc2);
        let d_pre = silu_backward(&cache.pre, &d_act);
        self.fc1.backward_params(&cache.freq.view(), &d_pre.view(), &mut grad.fc1);
    }
}

impl Params for TimestepEmbedder {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>)) {
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>)) {
        self.fc1.visit_params_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_params_mut(&join(prefix, "fc2"), f);
    }
}

/// `out_rows(b) = n_rows(b) ⊙ (1 + γ_b) + β_b`
fn modulate(n: &Array2<f64>, gamma: &ArrayView2<f64>, beta: &ArrayView2<f64>, tokens: usize) -> Array2<f64> {
    let mut out = n.clone();
    for b in 0..gamma.nrows() {
        let mut rows = out.slice_mut(s![b * tokens..(b + 1) * tokens, ..]);
        let scale = gamma.row(b).mapv(|g| 1.0 + g);
        rows *= &scale;
        rows += &beta.row(b);
    }
    out
}

/// Backward of [`modulate`]: writes `dγ`, `dβ` rows and returns `dn`.
fn modulate_backward(
    n: &Array2<f64>,
    gamma: &ArrayView2<f64>,
    d_out: &Array2<f64>,
    tokens: usize,
    d_gamma: &mut ndarray::ArrayViewMut2<f64>,
    d_beta: &mut ndarray::ArrayViewMut2<f64>,
) -> Array2<f64> {
    let mut dn = d_out.clone();
    for b in 0..gamma.nrows() {
        let r = b * tokens..(b + 1) * tokens;
        let d_rows = d_out.slice(s![r.clone(), ..]);
        d_gamma.row_mut(b).assign(&(&d_rows * &n.slice(s![r.clone(), ..])).sum_axis(Axis(0)));
        d_beta.row_mut(b).assign(&d_rows.sum_axis(Axis(0)));
        let scale = gamma.row(b).mapv(|g| 1.0 + g);
        let mut dn_rows = dn.slice_mut(s![r, ..]);
        dn_rows *= &scale;
    }
    dn
}

/// `h + α_b ⊙ y` per sample.
fn gated_add(h: &Array2<f64>, alpha: &ArrayView2<f64>, y: &Array2<f64>, tokens: usize) -> Array2<f64> {
    let mut out = h.clone();
    for b in 0..alpha.nrows() {
        let r = b * tokens..(b + 1) * tokens;
        let mut rows = out.slice_mut(s![r.clone(), ..]);
        rows += &(&y.slice(s![r, ..]) * &alpha.row(b));
    }
    out
}

/// Backward of [`gated_add`] for the branch: writes `dα` rows, returns `dy`.
fn gated_add_backward(
    alpha: &ArrayView2<f64>,
    y: &Array2<f64>,
    d_out: &Array2<f64>,
    tokens: usize,
    d_alpha: &mut ndarray::ArrayViewMut2<f64>,
) -> Array2<f64> {
    let mut dy = d_out.clone();
    for b in 0..alpha.nrows() {
        let r = b * tokens..(b + 1) * tokens;
        let d_rows = d_out.slice(s![r.clone(), ..]);
        d_alpha.row_mut(b).assign(&(&d_rows * &y.slice(s![r.clone(), ..])).sum_axis(Axis(0)));
        let mut dy_rows = dy.slice_mut(s![r, ..]);
        dy_rows *= &alpha.row(b);
    }
    dy
}

#[derive(Debug, Clone, PartialEq)]
pub struct DitBlock {
    pub qkv: Linear,
    pub attn_out: Linear,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    /// `d → 6d`: (α1, γ1, β1, α2, γ2, β2)
    pub modulation: Linear,
}

pub struct BlockCache {
    modulation: Array2<f64>,
    n1: Array2<f64>,
    rstd1: Array1<f64>,
    m1: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    attn_proj: Array2<f64>,
    n2: Array2<f64>,
    rstd2: Array1<f64>,
    m2: Array2<f64>,
    ffn_pre: Array2<f64>,
    ffn_act: Array2<f64>,
    ffn_proj: Array2<f64>,
}

impl DitBlock {
    pub fn init<R: Rng + ?Sized>(hidden: usize, ffn_mult: usize, rng: &mut R) -> Self {
        DitBlock {
            qkv: Linear::xavier(hidden, 3 * hidden, rng),
            attn_out: Linear::xavier(hidden, hidden, rng),
            ffn_in: Linear::xavier(hidden, ffn_mult * hidden, rng),
            ffn_out: Linear::xavier(ffn_mult * hidden, hidden, rng),
            modulation: Linear::zeros(hidden, 6 * hidden, true),
        }
    }

    fn hidden(&self) -> usize {
        self.attn_out.out_dim()
    }

    /// Multi-head softmax attention over the `tokens` rows of each sample.
    /// Returns the concatenated head outputs and per-(sample, head) probabilities.
    fn attention(&self, qkv: &Array2<f64>, tokens: usize, heads: usize) -> (Array2<f64>, Vec<Array2<f64>>) {
        let d = self.hidden();
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let batch = qkv.nrows() / tokens;
        let mut out = Array2::zeros((qkv.nrows(), d));
        let mut probs = Vec::with_capacity(batch * heads);
        for b in 0..batch {
            let r = b * tokens..(b + 1) * tokens;
            for h in 0..heads {
                let q = qkv.slice(s![r.clone(), h * hd..(h + 1) * hd]);
                let k = qkv.slice(s![r.clone(), d + h * hd..d + (h + 1) * hd]);
                let v = qkv.slice(s![r.clone(), 2 * d + h * hd..2 * d + (h + 1) * hd]);
                let mut a = q.dot(&k.t()) * scale;
                softmax_rows(&mut a);
                out.slice_mut(s![r.clone(), h * hd..(h + 1) * hd]).assign(&a.dot(&v));
                probs.push(a);
            }
        }
        (out, probs)
    }

    fn attention_backward(
        &self,
        qkv: &Array2<f64>,
        probs: &[Array2<f64>],
        d_attn: &Array2<f64>,
        tokens: usize,
        heads: usize,
    ) -> Array2<f64> {
        let d = self.hidden();
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut d_qkv = Array2::zeros(qkv.raw_dim());
        for (idx, a) in probs.iter().enumerate() {
            let (b, h) = (idx / heads, idx % heads);
            let r = b * tokens..(b + 1) * tokens;
            let q = qkv.slice(s![r.clone(), h * hd..(h + 1) * hd]);
            let k = qkv.slice(s![r.clone(), d + h * hd..d + (h + 1) * hd]);
            let v = qkv.slice(s![r.clone(), 2 * d + h * hd..2 * d + (h + 1) * hd]);
            let d_o = d_attn.slice(s![r.clone(), h * hd..(h + 1) * hd]);
            let d_a = d_o.dot(&v.t());
            let d_v = a.t().dot(&d_o);
            let mut d_s = d_a.clone();
            for ((mut ds_row, a_row), da_row) in d_s.rows_mut().into_iter().zip(a.rows()).zip(d_a.rows()) {
                let dot: f64 = a_row.iter().zip(da_row).map(|(x, y)| x * y).sum();
                ds_row.assign(&(&a_row * &da_row.mapv(|g| g - dot)));
            }
            d_s *= scale;
            d_qkv.slice_mut(s![r.clone(), h * hd..(h + 1) * hd]).assign(&d_s.dot(&k));
            d_qkv
                .slice_mut(s![r.clone(), d + h * hd..d + (h + 1) * hd])
                .assign(&d_s.t().dot(&q));
            d_qkv.slice_mut(s![r, 2 * d + h * hd..2 * d + (h + 1) * hd]).assign(&d_v);
        }
        d_qkv
    }

    pub fn forward(&self, h: &Array2<f64>, cond: &Array2<f64>, tokens: usize, heads: usize) -> (Array2<f64>, BlockCache) {
        let d = self.hidden();
        let modulation = self.modulation.forward(&cond.view());
        let chunk = |i: usize| modulation.slice(s![.., i * d..(i + 1) * d]);
        let (alpha1, gamma1, beta1, alpha2, gamma2, beta2) = (chunk(0), chunk(1), chunk(2), chunk(3), chunk(4), chunk(5));

        let (n1, rstd1) = layer_norm_rows(&h.view(), BLOCK_LN_EPS);
        let m1 = modulate(&n1, &gamma1, &beta1, tokens);
        let qkv = self.qkv.forward(&m1.view());
        let (attn, probs) = self.attention(&qkv, tokens, heads);
        let attn_proj = self.attn_out.forward(&attn.view());
        let h1 = gated_add(h, &alpha1, &attn_proj, tokens);

        let (n2, rstd2) = layer_norm_rows(&h1.view(), BLOCK_LN_EPS);
        let m2 = modulate(&n2, &gamma2, &beta2, tokens);
        let ffn_pre = self.ffn_in.forward(&m2.view());
        let ffn_act = silu_array(&ffn_pre);
        let ffn_proj = self.ffn_out.forward(&ffn_act.view());
        let h2 = gated_add(&h1, &alpha2, &ffn_proj, tokens);

        let cache = BlockCache {
            modulation: modulation.clone(),
            n1,
            rstd1,
            m1,
            qkv,
            probs,
            attn,
            attn_proj,
            n2,
            rstd2,
            m2,
            ffn_pre,
            ffn_act,
            ffn_proj,
        };
        (h2, cache)
    }

    /// Returns `(dL/dh_in, dL/dcond)`.
    pub fn backward(
        &self,
        cache: &BlockCache,
        cond: &Array2<f64>,
        d_out: &Array2<f64>,
        tokens: usize,
        heads: usize,
        grad: &mut DitBlock,
    ) -> (Array2<f64>, Array2<f64>) {
        let d = self.hidden();
        let m = &cache.modulation;
        let chunk = |i: usize| m.slice(s![.., i * d..(i + 1) * d]);
        let mut d_mod = Array2::zeros(m.raw_dim());

        // FFN branch
        let d_ffn_proj = {
            let mut d_alpha2 = d_mod.slice_mut(s![.., 3 * d..4 * d]);
            gated_add_backward(&chunk(3), &cache.ffn_proj, d_out, tokens, &mut d_alpha2)
        };
        let d_ffn_act = self.ffn_out.backward(&cache.ffn_act.view(), &d_ffn_proj.view(), &mut grad.ffn_out);
        let d_ffn_pre = silu_backward(&cache.ffn_pre, &d_ffn_act);
        let d_m2 = self.ffn_in.backward(&cache.m2.view(), &d_ffn_pre.view(), &mut grad.ffn_in);
        let d_n2 = {
            let (mut left, mut right) = d_mod.multi_slice_mut((s![.., 4 * d..5 * d], s![.., 5 * d..6 * d]));
            modulate_backward(&cache.n2, &chunk(4), &d_m2, tokens, &mut left, &mut right)
        };
        let d_h1 = d_out + &layer_norm_rows_backward(&cache.n2, &cache.rstd2, &d_n2.view());

        // attention branch
        let d_attn_proj = {
            let mut d_alpha1 = d_mod.slice_mut(s![.., 0..d]);
            gated_add_backward(&chunk(0), &cache.attn_proj, &d_h1, tokens, &mut d_alpha1)
        };
        let d_attn = self.attn_out.backward(&cache.attn.view(), &d_attn_proj.view(), &mut grad.attn_out);
        let d_qkv = self.attention_backward(&cache.qkv, &cache.probs, &d_attn, tokens, heads);
        let d_m1 = self.qkv.backward(&cache.m1.view(), &d_qkv.view(), &mut grad.qkv);
        let d_n1 = {
            let (mut left, mut right) = d_mod.multi_slice_mut((s![.., d..2 * d], s![.., 2 * d..3 * d]));
            modulate_backward(&cache.n1, &chunk(1), &d_m1, tokens, &mut left, &mut right)
        };
        let d_h = &d_h1 + &layer_norm_rows_backward(&cache.n1, &cache.rstd1, &d_n1.view());

        let d_cond = self.modulation.backward(&cond.view(), &d_mod.view(), &mut grad.modulation);
        (d_h, d_cond)
    }
}

impl Params for DitBlock {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>)) {
        self.qkv.visit_params(&join(prefix, "attn.qkv"), f);
        self.attn_out.visit_params(&join(prefix, "attn.out"), f);
        self.ffn_in.visit_params(&join(prefix, "ffn.fc1"), f);
        self.ffn_out.visit_params(&join(prefix, "ffn.fc2"), f);
        self.modulation.visit_params(&join(prefix, "modulation"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>)) {
        self.qkv.visit_params_mut(&join(prefix, "attn.qkv"), f);
        self.attn_out.visit_params_mut(&join(prefix, "attn.out"), f);
        self.ffn_in.visit_params_mut(&join(prefix, "ffn.fc1"), f);
        self.ffn_out.visit_params_mut(&join(prefix, "ffn.fc2"), f);
        self.modulation.visit_params_mut(&join(prefix, "modulation"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalLayer {
    /// `d → 2d`: (γ, β)
    pub modulation: Linear,
    /// `d → p·C`
    pub linear: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dit1dModel {
    pub config: DitConfig,
    /// Strided convolution with kernel = stride = p, flattened to `(C·p) → d`
    /// with input index `c·p + k`.
    pub patch_proj: Linear,
    pub t_embedder: TimestepEmbedder,
    pub blocks: Vec<DitBlock>,
    pub final_layer: FinalLayer,
    pos_embed: Array2<f64>,
}

pub struct DitCache {
    patches: Array2<f64>,
    t_cache: TimestepCache,
    cond_pre: Array2<f64>,
    cond: Array2<f64>,
    blocks: Vec<BlockCache>,
    final_n: Array2<f64>,
    final_rstd: Array1<f64>,
    final_mod: Array2<f64>,
    final_m: Array2<f64>,
}

/// Fixed sinusoidal table over patch positions, `N_p × d`.
pub fn patch_pos_embed(n_patches: usize, hidden: usize) -> Array2<f64> {
    let mut e = Array2::zeros((n_patches, hidden));
    for (j, mut row) in e.rows_mut().into_iter().enumerate() {
        row.assign(&Array1::from(sincos_embedding(j as f64, hidden).expect("even hidden")));
    }
    e
}

impl Dit1dModel {
    pub fn init<R: Rng + ?Sized>(config: DitConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let patch_proj = Linear::xavier(config.channels * config.patch, d, rng);
        let t_embedder = TimestepEmbedder::init(d, rng);
        let blocks = (0..config.depth).map(|_| DitBlock::init(d, config.ffn_mult, rng)).collect();
        let final_layer = FinalLayer {
            modulation: Linear::zeros(d, 2 * d, true),
            linear: Linear::zeros(d, config.patch * config.channels, true),
        };
        Ok(Dit1dModel {
            config,
            patch_proj,
            t_embedder,
            blocks,
            final_layer,
            pos_embed: patch_pos_embed(config.n_patches(), d),
        })
    }

    /// Rebuilds the fixed tables after parameters were filled in externally.
    pub fn empty(config: DitConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        Ok(Dit1dModel {
            config,
            patch_proj: Linear::zeros(config.channels * config.patch, d, true),
            t_embedder: TimestepEmbedder {
                fc1: Linear::zeros(TIMESTEP_FREQ_DIM, d, true),
                fc2: Linear::zeros(d, d, true),
            },
            blocks: (0..config.depth)
                .map(|_| DitBlock {
                    qkv: Linear::zeros(d, 3 * d, true),
                    attn_out: Linear::zeros(d, d, true),
                    ffn_in: Linear::zeros(d, config.ffn_mult * d, true),
                    ffn_out: Linear::zeros(config.ffn_mult * d, d, true),
                    modulation: Linear::zeros(d, 6 * d, true),
                })
                .collect(),
            final_layer: FinalLayer {
                modulation: Linear::zeros(d, 2 * d, true),
                linear: Linear::zeros(d, config.patch * config.channels, true),
            },
            pos_embed: patch_pos_embed(config.n_patches(), d),
        })
    }

    pub fn pos_embed(&self) -> &Array2<f64> {
        &self.pos_embed
    }

    fn check_input(&self, zt: &Array3<f64>, t: &[usize]) -> Result<()> {
        let (b, c, l) = zt.dim();
        if c != self.config.channels || l != self.config.seq_len {
            return Err(Error::shape(format!(
                "DiT expects {}×{} tokens, got {c}×{l}",
                self.config.channels, self.config.seq_len
            )));
        }
        if t.len() != b {
            return Err(Error::shape(format!("{b} samples but {} timesteps", t.len())));
        }
        Ok(())
    }

    /// `B×C×L → (B·N_p)×(C·p)`, zero-padding the sequence to `N_p·p`.
    pub fn patchify(&self, zt: &Array3<f64>) -> Array2<f64> {
        let DitConfig { channels, seq_len, patch, .. } = self.config;
        let np = self.config.n_patches();
        let b = zt.shape()[0];
        let mut out = Array2::zeros((b * np, channels * patch));
        for bi in 0..b {
            for j in 0..np {
                for c in 0..channels {
                    for k in 0..patch {
                        let pos = j * patch + k;
                        if pos < seq_len {
                            out[[bi * np + j, c * patch + k]] = zt[[bi, c, pos]];
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`Self::patchify`], dropping padded positions.
    fn unpatchify_input_grad(&self, d_patches: &Array2<f64>, batch: usize) -> Array3<f64> {
        let DitConfig { channels, seq_len, patch, .. } = self.config;
        let np = self.config.n_patches();
        let mut out = Array3::zeros((batch, channels, seq_len));
        for bi in 0..batch {
            for j in 0..np {
                for c in 0..channels {
                    for k in 0..patch {
                        let pos = j * patch + k;
                        if pos < seq_len {
                            out[[bi, c, pos]] = d_patches[[bi * np + j, c * patch + k]];
                        }
                    }
                }
            }
        }
        out
    }

    /// Final-layer rows `(B·N_p)×(p·C)` with output index `k·C + c` back to
    /// `B×C×L`, truncating padding.
    pub fn unpatchify(&self, rows: &Array2<f64>, batch: usize) -> Array3<f64> {
        let DitConfig { channels, seq_len, patch, .. } = self.config;
        let np = self.config.n_patches();
        let mut out = Array3::zeros((batch, channels, seq_len));
        for bi in 0..batch {
            for j in 0..np {
                for k in 0..patch {
                    let pos = j * patch + k;
                    if pos >= seq_len {
                        continue;
                    }
                    for c in 0..channels {
                        out[[bi, c, pos]] = rows[[bi * np + j, k * channels + c]];
                    }
                }
            }
        }
        out
    }

    /// Inverse layout of [`Self::unpatchify`]; padded slots become zero.
    pub fn patch_layout(&self, x: &Array3<f64>) -> Array2<f64> {
        let DitConfig { channels, seq_len, patch, .. } = self.config;
        let np = self.config.n_patches();
        let b = x.shape()[0];
        let mut rows = Array2::zeros((b * np, patch * channels));
        for bi in 0..b {
            for j in 0..np {
                for k in 0..patch {
                    let pos = j * patch + k;
                    if pos >= seq_len {
                        continue;
                    }
                    for c in 0..channels {
                        rows[[bi * np + j, k * channels + c]] = x[[bi, c, pos]];
                    }
                }
            }
        }
        rows
    }

    /// `U = PatchEmbed(Z_t) + E_patch`, `(B·N_p) × d`.
    pub fn patch_embed(&self, zt: &Array3<f64>) -> Array2<f64> {
        let patches = self.patchify(zt);
        self.embed_patches(&patches)
    }

    fn embed_patches(&self, patches: &Array2<f64>) -> Array2<f64> {
        let np = self.config.n_patches();
        let mut u = self.patch_proj.forward(&patches.view());
        for mut sample in u.exact_chunks_mut((np, self.config.hidden)) {
            sample += &self.pos_embed;
        }
        u
    }

    pub fn timestep_embedding(&self, t: &[usize]) -> Array2<f64> {
        self.t_embedder.forward(t).0
    }

    pub fn forward_cached(&self, zt: &Array3<f64>, t: &[usize]) -> Result<(Array3<f64>, DitCache)> {
        self.check_input(zt, t)?;
        let b = zt.shape()[0];
        let np = self.config.n_patches();
        let heads = self.config.heads;
        let d = self.config.hidden;

        let patches = self.patchify(zt);
        let mut h = self.embed_patches(&patches);
        let (cond_pre, t_cache) = self.t_embedder.forward(t);
        let cond = silu_array(&cond_pre);

        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let (next, cache) = block.forward(&h, &cond, np, heads);
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("activation in DiT block {i}")));
            }
            h = next;
            block_caches.push(cache);
        }

        let final_mod = self.final_layer.modulation.forward(&cond.view());
        let (final_n, final_rstd) = layer_norm_rows(&h.view(), BLOCK_LN_EPS);
        let final_m = modulate(
            &final_n,
            &final_mod.slice(s![.., 0..d]),
            &final_mod.slice(s![.., d..2 * d]),
            np,
        );
        let rows = self.final_layer.linear.forward(&final_m.view());
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("activation in DiT final layer".into()));
        }
        let out = self.unpatchify(&rows, b);
        Ok((
            out,
            DitCache {
                patches,
                t_cache,
                cond_pre,
                cond,
                blocks: block_caches,
                final_n,
                final_rstd,
                final_mod,
                final_m,
            },
        ))
    }

    pub fn backward(&self, cache: &DitCache, d_out: &Array3<f64>, grad: &mut Dit1dModel) -> Array3<f64> {
        let b = d_out.shape()[0];
        let np = self.config.n_patches();
        let heads = self.config.heads;
        let d = self.config.hidden;

        let d_rows = self.patch_layout(d_out);
        let d_final_m = self
            .final_layer
            .linear
            .backward(&cache.final_m.view(), &d_rows.view(), &mut grad.final_layer.linear);
        let mut d_final_mod = Array2::zeros(cache.final_mod.raw_dim());
        let d_final_n = {
            let (mut left, mut right) = d_final_mod.multi_slice_mut((s![.., 0..d], s![.., d..2 * d]));
            modulate_backward(
                &cache.final_n,
                &cache.final_mod.slice(s![.., 0..d]),
                &d_final_m,
                np,
                &mut left,
                &mut right,
            )
        };
        let mut d_h = layer_norm_rows_backward(&cache.final_n, &cache.final_rstd, &d_final_n.view());
        let mut d_cond = self.final_layer.modulation.backward(
            &cache.cond.view(),
            &d_final_mod.view(),
            &mut grad.final_layer.modulation,
        );

        for (i, block) in self.blocks.iter().enumerate().rev() {
            let (dh, dc) = block.backward(&cache.blocks[i], &cache.cond, &d_h, np, heads, &mut grad.blocks[i]);
            d_h = dh;
            d_cond += &dc;
        }

        let d_cond_pre = silu_backward(&cache.cond_pre, &d_cond);
        self.t_embedder.backward(&cache.t_cache, &d_cond_pre, &mut grad.t_embedder);
        let d_patches = self.patch_proj.backward(&cache.patches.view(), &d_h.view(), &mut grad.patch_proj);
        self.unpatchify_input_grad(&d_patches, b)
    }
}

impl NoisePredictor for Dit1dModel {
    fn predict_batch(&self, zt: &Array3<f64>, t: &[usize]) -> Result<Array3<f64>> {
        Ok(self.forward_cached(zt, t)?.0)
    }
}

impl TrainableDenoiser for Dit1dModel {
    type Cache = DitCache;

    fn forward_cached(&self, zt: &Array3<f64>, t: &[usize]) -> Result<(Array3<f64>, DitCache)> {
        Dit1dModel::forward_cached(self, zt, t)
    }

    fn backward(&self, cache: &DitCache, d_out: &Array3<f64>, grad: &mut Self) -> Array3<f64> {
        Dit1dModel::backward(self, cache, d_out, grad)
    }
}

impl Params for Dit1dModel {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>)) {
        self.patch_proj.visit_params(&join(prefix, "patch_proj"), f);
        self.t_embedder.visit_params(&join(prefix, "t_embedder"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("block{i}")), f);
        }
        self.final_layer.modulation.visit_params(&join(prefix, "final.modulation"), f);
        self.final_layer.linear.visit_params(&join(prefix, "final.linear"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>)) {
        self.patch_proj.visit_params_mut(&join(prefix, "patch_proj"), f);
        self.t_embedder.visit_params_mut(&join(prefix, "t_embedder"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.final_layer.modulation.visit_params_mut(&join(prefix, "final.modulation"), f);
        self.final_layer.linear.visit_params_mut(&join(prefix, "final.linear"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn tiny() -> DitConfig {
        DitConfig {
            channels: 2,
            seq_len: 8,
            patch: 2,
            hidden: 8,
            heads: 2,
            depth: 1,
            ffn_mult: 4,
        }
    }

    /// Random weights everywhere, including the zero-initialized layers.
    fn randomized(cfg: DitConfig, seed: u64) -> Dit1dModel {
        let mut r = rng::stream(seed, 0);
        let mut m = Dit1dModel::init(cfg, &mut r).unwrap();
        m.visit_params_mut("", &mut |_, mut t| {
            t.mapv_inplace(|_| r.random_range(-0.5..0.5));
        });
        m
    }

    #[test]
    fn default_shapes() {
        let cfg = DitConfig::new(4, 32);
        assert_eq!(cfg.n_patches(), 16);
        let m = Dit1dModel::init(cfg, &mut rng::stream(0, 0)).unwrap();
        let z = Array3::zeros((2, 4, 32));
        assert_eq!(m.patch_embed(&z).dim(), (32, 256));
        assert_eq!(m.timestep_embedding(&[1, 2]).dim(), (2, 256));
        assert_eq!(m.predict_batch(&z, &[5, 6]).unwrap().dim(), (2, 4, 32));
    }

    #[test]
    fn config_validation() {
        assert!(DitConfig { heads: 3, ..tiny() }.validate().is_err());
        assert!(DitConfig { patch: 9, ..tiny() }.validate().is_err());
        assert!(tiny().validate().is_ok());
    }

    #[test]
    fn whole_sequence_patch_is_one_token() {
        let cfg = DitConfig { patch: 8, ..tiny() };
        let m = Dit1dModel::init(cfg, &mut rng::stream(0, 0)).unwrap();
        assert_eq!(m.patch_embed(&Array3::zeros((1, 2, 8))).nrows(), 1);
    }

    #[test]
    fn zero_input_embeds_to_position_table() {
        let m = Dit1dModel::init(tiny(), &mut rng::stream(0, 0)).unwrap();
        let u = m.patch_embed(&Array3::zeros((1, 2, 8)));
        assert_eq!(u, *m.pos_embed());
    }

    #[test]
    fn layout_round_trip_with_padding() {
        for cfg in [tiny(), DitConfig { seq_len: 7, ..tiny() }] {
            let m = Dit1dModel::init(cfg, &mut rng::stream(0, 0)).unwrap();
            let x: Array3<f64> = rng::standard_normal(&mut rng::stream(1, 1), (3, 2, cfg.seq_len));
            assert_eq!(m.unpatchify(&m.patch_layout(&x), 3), x);
            assert_eq!(m.unpatchify_input_grad(&m.patchify(&x), 3), x);
        }
    }

    #[test]
    fn fresh_model_is_zero_function_and_blocks_are_identity() {
        let cfg = DitConfig::new(4, 32);
        let m = Dit1dModel::init(cfg, &mut rng::stream(3, 0)).unwrap();
        let z: Array3<f64> = rng::standard_normal(&mut rng::stream(4, 0), (5, 4, 32));
        let out = m.predict_batch(&z, &[1, 100, 500, 900, 1000]).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));

        let h: Array2<f64> = rng::standard_normal(&mut rng::stream(5, 0), (2 * 16, 256));
        let cond = m.timestep_embedding(&[10, 700]).mapv(crate::nn::silu);
        for block in &m.blocks {
            let (y, _) = block.forward(&h, &cond, 16, 4);
            assert_eq!(y, h);
        }
    }

    #[test]
    fn distinct_timesteps_give_distinct_conditioning() {
        let m = randomized(DitConfig::new(4, 32), 2);
        let t: Vec<usize> = (1..=1000).collect();
        let c = m.timestep_embedding(&t);
        let mut rows: Vec<Vec<u64>> = c.rows().into_iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        rows.sort();
        rows.dedup();
        assert_eq!(rows.len(), 1000);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let m = randomized(tiny(), 4);
        let z: Array3<f64> = rng::standard_normal(&mut rng::stream(6, 0), (3, 2, 8));
        let (_, cache) = m.forward_cached(&z, &[3, 30, 300]).unwrap();
        for a in &cache.blocks[0].probs {
            for row in a.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_is_permutation_equivariant() {
        let m = randomized(DitConfig { depth: 1, ..DitConfig::new(4, 32) }, 7);
        let block = &m.blocks[0];
        let tokens = 16;
        let h: Array2<f64> = rng::standard_normal(&mut rng::stream(8, 0), (tokens, 256));
        let cond = m.timestep_embedding(&[42]).mapv(crate::nn::silu);
        let perm: Vec<usize> = (0..tokens).map(|i| (i * 5 + 3) % tokens).collect();
        let permuted = h.select(Axis(0), &perm);
        let (y, _) = block.forward(&h, &cond, tokens, 4);
        let (yp, _) = block.forward(&permuted, &cond, tokens, 4);
        let expected = y.select(Axis(0), &perm);
        for (a, b) in yp.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn single_token_block_matches_hand_rolled() {
        let cfg = DitConfig { seq_len: 2, patch: 2, ..tiny() };
        let m = randomized(cfg, 9);
        let block = &m.blocks[0];
        let h: Array2<f64> = rng::standard_normal(&mut rng::stream(10, 0), (1, 8));
        let cond = m.timestep_embedding(&[77]).mapv(crate::nn::silu);
        let (y, _) = block.forward(&h, &cond, 1, 2);

        // one token: softmax over a single key is 1, attention returns v.
        let dot = |l: &Linear, x: &[f64]| -> Vec<f64> {
            (0..l.out_dim())
                .map(|i| l.bias.as_ref().unwrap()[i] + (0..x.len()).map(|j| l.weight[[i, j]] * x[j]).sum::<f64>())
                .collect()
        };
        let norm = |x: &[f64]| -> Vec<f64> {
            let n = x.len() as f64;
            let mu = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            x.iter().map(|v| (v - mu) / (var + 1e-6).sqrt()).collect()
        };
        let md = dot(&block.modulation, cond.row(0).as_slice().unwrap());
        let part = |i: usize| &md[i * 8..(i + 1) * 8];
        let x: Vec<f64> = h.row(0).to_vec();
        let m1: Vec<f64> = norm(&x).iter().enumerate().map(|(i, v)| v * (1.0 + part(1)[i]) + part(2)[i]).collect();
        let qkv = dot(&block.qkv, &m1);
        let attn = dot(&block.attn_out, &qkv[16..24]);
        let h1: Vec<f64> = (0..8).map(|i| x[i] + part(0)[i] * attn[i]).collect();
        let m2: Vec<f64> = norm(&h1).iter().enumerate().map(|(i, v)| v * (1.0 + part(4)[i]) + part(5)[i]).collect();
        let f: Vec<f64> = dot(&block.ffn_in, &m2).into_iter().map(crate::nn::silu).collect();
        let f = dot(&block.ffn_out, &f);
        for i in 0..8 {
            let expected = h1[i] + part(3)[i] * f[i];
            assert!((y[[0, i]] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_equals_per_sample() {
        let m = randomized(DitConfig { hidden: 16, ..tiny() }, 11);
        let z: Array3<f64> = rng::standard_normal(&mut rng::stream(12, 0), (4, 2, 8));
        let t = [1, 250, 600, 1000];
        let batch = m.predict_batch(&z, &t).unwrap();
        for i in 0..4 {
            let single = m.predict(&z.index_axis(Axis(0), i).to_owned(), t[i]).unwrap();
            for (a, b) in single.iter().zip(batch.index_axis(Axis(0), i).iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let m = Dit1dModel::init(tiny(), &mut rng::stream(0, 0)).unwrap();
        assert!(matches!(m.predict_batch(&Array3::zeros((1, 3, 8)), &[1]), Err(Error::Shape(_))));
        assert!(matches!(m.predict_batch(&Array3::zeros((2, 2, 8)), &[1]), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_input_reports_block() {
        let m = randomized(tiny(), 13);
        let mut z = Array3::zeros((1, 2, 8));
        z[[0, 0, 0]] = f64::NAN;
        match m.predict_batch(&z, &[5]) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("block 0"), "{msg}"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        let m = randomized(tiny(), 21);
        let z: Array3<f64> = rng::standard_normal(&mut rng::stream(22, 0), (2, 2, 8));
        let w: Array3<f64> = rng::standard_normal(&mut rng::stream(23, 0), (2, 2, 8));
        let t = [17, 640];
        let loss = |m: &Dit1dModel, z: &Array3<f64>| (m.predict_batch(z, &t).unwrap() * &w).sum();
        let (_, cache) = m.forward_cached(&z, &t).unwrap();
        let mut grad = m.zeros_like();
        let dz = m.backward(&cache, &w, &mut grad);
        let h = 1e-5;
        let close = |fd: f64, an: f64| (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()) + 1e-7;

        for idx in [(0, 0, 0), (0, 1, 5), (1, 0, 7), (1, 1, 2)] {
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp[idx] += h;
            zm[idx] -= h;
            let fd = (loss(&m, &zp) - loss(&m, &zm)) / (2.0 * h);
            assert!(close(fd, dz[idx]), "input {idx:?}: {fd} vs {}", dz[idx]);
        }

        let mut analytic = Vec::new();
        grad.visit_params("", &mut |name, g| analytic.push((name, g.iter().copied().collect::<Vec<_>>())));
        for (tensor, (name, g)) in analytic.iter().enumerate() {
            let n = g.len();
            for k in [0, n / 2, n - 1] {
                let shifted = |delta: f64| {
                    let mut mm = m.clone();
                    let mut i = 0;
                    mm.visit_params_mut("", &mut |_, mut p| {
                        if i == tensor {
                            let v = p.iter_mut().nth(k).unwrap();
                            *v += delta;
                        }
                        i += 1;
                    });
                    loss(&mm, &z)
                };
                let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
                assert!(close(fd, g[k]), "{name}[{k}]: {fd} vs {}", g[k]);
            }
        }
    }
}
