//! Dense-layer building blocks with hand-written backward passes.
//!
//! Every layer works on row-major batches (`rows × features`). Gradients are
//! accumulated into a structurally identical value (`grad: &mut Self`), which
//! keeps optimizer bookkeeping a matter of walking two parameter sets in the
//! same order.

use ndarray::{Array0, Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::Rng;

/// Walks named parameter tensors in a fixed order.
pub trait Params {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, t| n += t.len());
        n
    }

    fn zero_params(&mut self) {
        self.visit_params_mut("", &mut |_, mut t| t.fill(0.0));
    }

    /// A copy with every tensor set to zero, used as a gradient buffer.
    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        z.zero_params();
        z
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit_params("", &mut |_, t| ok &= t.iter().all(|v| v.is_finite()));
        ok
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out × in`
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

impl Linear {
    /// Uniform fan-in initialization, bound `1/sqrt(in)` for weight and bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self::uniform(input, output, bias, bound, rng)
    }

    pub fn uniform<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        bias: bool,
        bound: f64,
        rng: &mut R,
    ) -> Self {
        let weight = Array2::from_shape_simple_fn((output, input), || rng.random_range(-bound..=bound));
        let bias = bias.then(|| Array1::from_shape_simple_fn(output, || rng.random_range(-bound..=bound)));
        Linear { weight, bias }
    }

    /// Xavier-uniform weight with zero bias.
    pub fn xavier<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let mut l = Self::uniform(input, output, true, bound, rng);
        l.bias = Some(Array1::zeros(output));
        l
    }

    pub fn zeros(input: usize, output: usize, bias: bool) -> Self {
        Linear {
            weight: Array2::zeros((output, input)),
            bias: bias.then(|| Array1::zeros(output)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, x: &ArrayView2<f64>, dy: &ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        self.backward_params(x, dy, grad);
        dy.dot(&self.weight)
    }

    /// Parameter gradients only, for layers whose input needs no gradient.
    pub fn backward_params(&self, x: &ArrayView2<f64>, dy: &ArrayView2<f64>, grad: &mut Linear) {
        ndarray::linalg::general_mat_mul(1.0, &dy.t(), x, 1.0, &mut grad.weight);
        if let Some(gb) = &mut grad.bias {
            *gb += &dy.sum_axis(Axis(0));
        }
    }
}

impl Params for Linear {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>)) {
        f(join(prefix, "weight"), self.weight.view().into_dyn());
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b.view().into_dyn());
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>)) {
        f(join(prefix, "weight"), self.weight.view_mut().into_dyn());
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b.view_mut().into_dyn());
        }
    }
}

/// A learned scalar, stored as a 0-d tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Scalar(pub Array0<f64>);

impl Scalar {
    pub fn new(v: f64) -> Self {
        Scalar(Array0::from_elem((), v))
    }

    pub fn get(&self) -> f64 {
        self.0[()]
    }

    pub fn set(&mut self, v: f64) {
        self.0[()] = v;
    }
}

impl Params for Scalar {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>)) {
        f(prefix.to_string(), self.0.view().into_dyn());
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>)) {
        f(prefix.to_string(), self.0.view_mut().into_dyn());
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn silu_array(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(silu)
}

/// `dy ⊙ silu'(x)`
pub fn silu_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut out = dy.clone();
    Zip::from(&mut out).and(x).for_each(|d, &v| *d *= silu_grad(v));
    out
}

/// Parameter-free layer norm over each row. Returns the normalized rows and
/// the per-row reciprocal standard deviation needed by the backward pass.
pub fn layer_norm_rows(x: &ArrayView2<f64>, eps: f64) -> (Array2<f64>, Array1<f64>) {
    let n = x.ncols() as f64;
    let mut y = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in y.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / n;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / n;
        *r = 1.0 / (var + eps).sqrt();
        row *= *r;
    }
    (y, rstd)
}

/// Backward of [`layer_norm_rows`] given its output `y`.
pub fn layer_norm_rows_backward(y: &Array2<f64>, rstd: &Array1<f64>, dy: &ArrayView2<f64>) -> Array2<f64> {
    let n = y.ncols() as f64;
    let mut dx = dy.to_owned();
    for ((mut dxr, yr), &r) in dx.rows_mut().into_iter().zip(y.rows()).zip(rstd) {
        let mean_dy = dxr.sum() / n;
        let mean_dyy = dxr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
        Zip::from(&mut dxr)
            .and(&yr)
            .for_each(|d, &yv| *d = r * (*d - mean_dy - yv * mean_dyy));
    }
    dx
}

/// Row-wise softmax in place.
pub fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamWConfig {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: i32,
    m: Vec<ndarray::ArrayD<f64>>,
    v: Vec<ndarray::ArrayD<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step<P: Params>(&mut self, params: &mut P, grads: &P) {
        let mut g: Vec<ArrayViewD<'_, f64>> = Vec::new();
        grads.visit_params("", &mut |_, t| g.push(t));
        if self.m.is_empty() {
            self.m = g.iter().map(|t| ndarray::ArrayD::zeros(t.raw_dim())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let AdamWConfig { lr, weight_decay, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step);
        let bc2 = 1.0 - beta2.powi(self.step);
        let mut i = 0;
        let (m, v) = (&mut self.m, &mut self.v);
        params.visit_params_mut("", &mut |_, mut p| {
            Zip::from(&mut p)
                .and(&g[i])
                .and(&mut m[i])
                .and(&mut v[i])
                .for_each(|p, &g, m, v| {
                    *p -= lr * weight_decay * *p;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                });
            i += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn silu_values() {
        assert_eq!(silu(0.0), 0.0);
        assert!((silu(1.0) - 0.7310585786300049).abs() < 1e-15);
        let h = 1e-6;
        for &x in &[-3.0, -0.5, 0.0, 0.7, 4.0] {
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_zero_row_stays_zero() {
        let x = Array2::<f64>::zeros((1, 5));
        let (y, _) = layer_norm_rows(&x.view(), 1e-5);
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn layer_norm_backward_matches_finite_difference() {
        let x = array![[0.3, -1.2, 2.0, 0.5], [1.0, 1.5, -0.5, 0.0]];
        let w = array![[0.7, -0.2, 0.1, 1.3], [-0.4, 0.9, 0.5, -1.0]];
        let loss = |x: &Array2<f64>| (layer_norm_rows(&x.view(), 1e-5).0 * &w).sum();
        let (y, rstd) = layer_norm_rows(&x.view(), 1e-5);
        let dx = layer_norm_rows_backward(&y, &rstd, &w.view());
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..4 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
                assert!((fd - dx[[i, j]]).abs() < 1e-7, "{fd} vs {}", dx[[i, j]]);
            }
        }
    }

    #[test]
    fn linear_backward_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::init(3, 2, true, &mut rng);
        let x = array![[0.5, -1.0, 2.0], [1.5, 0.2, -0.3]];
        let dy = array![[1.0, -2.0], [0.5, 0.25]];
        let mut grad = lin.zeros_like();
        let dx = lin.backward(&x.view(), &dy.view(), &mut grad);
        let loss = |l: &Linear, x: &Array2<f64>| (l.forward(&x.view()) * &dy).sum();
        let h = 1e-6;
        let mut lp = lin.clone();
        lp.weight[[1, 2]] += h;
        let mut lm = lin.clone();
        lm.weight[[1, 2]] -= h;
        let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h);
        assert!((fd - grad.weight[[1, 2]]).abs() < 1e-8);
        let mut xp = x.clone();
        xp[[0, 1]] += h;
        let mut xm = x.clone();
        xm[[0, 1]] -= h;
        let fd = (loss(&lin, &xp) - loss(&lin, &xm)) / (2.0 * h);
        assert!((fd - dx[[0, 1]]).abs() < 1e-8);
        assert_eq!(grad.bias.unwrap(), array![1.5, -1.75]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut x = array![[1.0, 2.0, 3.0], [1000.0, 1000.0, -1000.0]];
        softmax_rows(&mut x);
        for row in x.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-15);
        }
        assert!((x[[1, 0]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut p = Scalar::new(3.0);
        let mut opt = AdamW::new(AdamWConfig::new(0.1, 0.0));
        for _ in 0..500 {
            let g = Scalar::new(2.0 * (p.get() - 1.0));
            opt.step(&mut p, &g);
        }
        assert!((p.get() - 1.0).abs() < 1e-2, "{}", p.get());
        assert_eq!(opt.steps_taken(), 500);
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        // zero gradient: only the decay term moves the parameter
        let mut p = Scalar::new(2.0);
        let mut opt = AdamW::new(AdamWConfig::new(0.1, 0.5));
        opt.step(&mut p, &Scalar::new(0.0));
        assert!((p.get() - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }
}
