//! Positional information added to the latent token grid: a fixed sinusoidal
//! table over sequence positions, and a learned per-die offset computed from
//! wafer coordinates by a gated MLP.

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, silu, silu_array, silu_backward, silu_grad, Linear, Params, Scalar};

pub const DEFAULT_SINCOS_DIM: usize = 64;
pub const DEFAULT_PE_HIDDEN: usize = 256;

/// Interleaved sinusoidal embedding: `[sin(p·ω₀), cos(p·ω₀), sin(p·ω₁), …]`
/// with `ωᵢ = 10000^(-2i/dim)`.
pub fn sincos_embedding(position: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::shape(format!("sinusoidal dimension must be even and positive, got {dim}")));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(-((2 * i) as f64) / dim as f64);
        let (s, c) = (position * freq).sin_cos();
        out.push(s);
        out.push(c);
    }
    Ok(out)
}

/// Fixed `C × L` table whose column `ℓ` is `sincos_embedding(ℓ, C)`.
pub fn feature_pe(channels: usize, seq_len: usize) -> Result<Array2<f64>> {
    let mut e = Array2::zeros((channels, seq_len));
    for l in 0..seq_len {
        let col = sincos_embedding(l as f64, channels)?;
        e.column_mut(l).assign(&Array1::from(col));
    }
    Ok(e)
}

/// `[d_x, d_y, sincos(d_x, D_s/2), sincos(d_y, D_s/2)]`
pub fn die_feature_vector(die_x: i64, die_y: i64, sincos_dim: usize) -> Result<Vec<f64>> {
    if sincos_dim % 4 != 0 {
        return Err(Error::shape(format!(
            "die sinusoidal dimension must split into two even halves, got {sincos_dim}"
        )));
    }
    let half = sincos_dim / 2;
    let mut v = Vec::with_capacity(2 + sincos_dim);
    v.push(die_x as f64);
    v.push(die_y as f64);
    v.extend(sincos_embedding(die_x as f64, half)?);
    v.extend(sincos_embedding(die_y as f64, half)?);
    Ok(v)
}

/// Gated MLP mapping die coordinates to a `C × L` additive offset:
/// `W_out (f_base(v) + SiLU(g) · f_res(v))`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiePeWeights {
    pub sincos_dim: usize,
    pub channels: usize,
    pub seq_len: usize,
    pub base: Linear,
    pub res_in: Linear,
    pub res_out: Linear,
    pub gate: Scalar,
    pub out: Linear,
}

pub struct DiePeCache {
    v: Array2<f64>,
    res_pre: Array2<f64>,
    res_act: Array2<f64>,
    res: Array2<f64>,
    mixed: Array2<f64>,
}

impl DiePeWeights {
    pub fn init<R: Rng + ?Sized>(
        sincos_dim: usize,
        hidden: usize,
        channels: usize,
        seq_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if sincos_dim % 4 != 0 {
            return Err(Error::shape(format!("die sinusoidal dimension {sincos_dim} is not a multiple of 4")));
        }
        let input = 2 + sincos_dim;
        Ok(DiePeWeights {
            sincos_dim,
            channels,
            seq_len,
            base: Linear::init(input, hidden, true, rng),
            res_in: Linear::init(input, hidden, true, rng),
            res_out: Linear::init(hidden, hidden, true, rng),
            gate: Scalar::new(0.0),
            out: Linear::init(hidden, channels * seq_len, false, rng),
        })
    }

    pub fn hidden(&self) -> usize {
        self.base.out_dim()
    }

    fn features(&self, dies: &[(i64, i64)]) -> Result<Array2<f64>> {
        let width = 2 + self.sincos_dim;
        let mut v = Array2::zeros((dies.len(), width));
        for (mut row, &(x, y)) in v.rows_mut().into_iter().zip(dies) {
            row.assign(&Array1::from(die_feature_vector(x, y, self.sincos_dim)?));
        }
        Ok(v)
    }

    fn check(&self) -> Result<()> {
        let input = 2 + self.sincos_dim;
        let h = self.hidden();
        let ok = self.base.in_dim() == input
            && self.res_in.in_dim() == input
            && self.res_in.out_dim() == h
            && self.res_out.in_dim() == h
            && self.res_out.out_dim() == h
            && self.out.in_dim() == h
            && self.out.out_dim() == self.channels * self.seq_len;
        if ok {
            Ok(())
        } else {
            Err(Error::shape("inconsistent die positional-embedding weight shapes"))
        }
    }

    /// Batched offsets, `B × C × L`, plus the activations for backprop.
    pub fn forward_batch(&self, dies: &[(i64, i64)]) -> Result<(Array3<f64>, DiePeCache)> {
        self.check()?;
        let v = self.features(dies)?;
        let base = self.base.forward(&v.view());
        let res_pre = self.res_in.forward(&v.view());
        let res_act = silu_array(&res_pre);
        let res = self.res_out.forward(&res_act.view());
        let mixed = &base + &(&res * silu(self.gate.get()));
        let flat = self.out.forward(&mixed.view());
        let e = flat
            .into_shape_with_order((dies.len(), self.channels, self.seq_len))
            .expect("contiguous output");
        Ok((e, DiePeCache { v, res_pre, res_act, res, mixed }))
    }

    /// Single-die offset as a `C × L` matrix.
    pub fn embed(&self, die_x: i64, die_y: i64) -> Result<Array2<f64>> {
        let (e, _) = self.forward_batch(&[(die_x, die_y)])?;
        Ok(e.index_axis_move(Axis(0), 0))
    }

    /// Accumulates gradients for `d_embed` (`B × C × L`) into `grad`.
    pub fn backward(&self, cache: &DiePeCache, d_embed: &Array3<f64>, grad: &mut DiePeWeights) {
        let b = d_embed.shape()[0];
        let d_flat = d_embed
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((b, self.channels * self.seq_len))
            .expect("contiguous gradient");
        let d_mixed = self.out.backward(&cache.mixed.view(), &d_flat.view(), &mut grad.out);
        self.base
            .backward_params(&cache.v.view(), &d_mixed.view(), &mut grad.base);
        let g = self.gate.get();
        let d_gate: f64 = (&d_mixed * &cache.res).sum() * silu_grad(g);
        grad.gate.set(grad.gate.get() + d_gate);
        let d_res = &d_mixed * silu(g);
        let d_act = self
            .res_out
            .backward(&cache.res_act.view(), &d_res.view(), &mut grad.res_out);
        let d_pre = silu_backward(&cache.res_pre, &d_act);
        self.res_in
            .backward_params(&cache.v.view(), &d_pre.view(), &mut grad.res_in);
    }
}

impl Params for DiePeWeights {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>)) {
        self.base.visit_params(&join(prefix, "base"), f);
        self.res_in.visit_params(&join(prefix, "res_in"), f);
        self.res_out.visit_params(&join(prefix, "res_out"), f);
        self.gate.visit_params(&join(prefix, "gate"), f);
        self.out.visit_params(&join(prefix, "out"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>)) {
        self.base.visit_params_mut(&join(prefix, "base"), f);
        self.res_in.visit_params_mut(&join(prefix, "res_in"), f);
        self.res_out.visit_params_mut(&join(prefix, "res_out"), f);
        self.gate.visit_params_mut(&join(prefix, "gate"), f);
        self.out.visit_params_mut(&join(prefix, "out"), f);
    }
}

/// Linear-branch-only value `W_out f_base(v)`, used to check the zero gate.
pub fn die_embedding_linear_branch(w: &DiePeWeights, die_x: i64, die_y: i64) -> Result<Array2<f64>> {
    let v = Array2::from_shape_vec((1, 2 + w.sincos_dim), die_feature_vector(die_x, die_y, w.sincos_dim)?)
        .expect("row vector");
    let flat = w.out.forward(&w.base.forward(&v.view()).view());
    Ok(flat
        .into_shape_with_order((w.channels, w.seq_len))
        .expect("contiguous"))
}

/// Adds `pe` (`C × L`) to every sample of a `B × C × L` batch.
pub fn add_to_batch(batch: &mut Array3<f64>, pe: &ArrayView2<f64>) {
    for mut z in batch.outer_iter_mut() {
        z += pe;
    }
}
