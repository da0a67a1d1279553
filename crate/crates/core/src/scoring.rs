//! Anomaly scores from noise-prediction error on a fixed timestep grid, and
//! reconstruction residuals for root-cause attribution.
//!
//! Device `i` of a table draws all of its noise from its own stream, so a
//! score does not depend on which other devices share its batch.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{validate_blocks, DatasetTable, ProgramBlock};
use crate::denoiser::NoisePredictor;
use crate::diffusion::{forward_sample_batch, reconstruct_batch};
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::rng::{self, streams};

pub const DEFAULT_CHUNK: usize = 256;

fn device_stream(seed: u64, device: usize) -> ChaCha8Rng {
    rng::stream(seed, streams::DEVICE_BASE + device as u64)
}

fn reconstruct_stream(seed: u64, device: usize) -> ChaCha8Rng {
    rng::stream(seed, streams::RECONSTRUCT_BASE + device as u64)
}

fn check_rows(x: &ArrayView2<f64>, dies: &[(i64, i64)], ids: &[usize]) -> Result<()> {
    if dies.len() != x.nrows() || ids.len() != x.nrows() {
        return Err(Error::shape(format!(
            "{} rows, {} die coordinates, {} device ids",
            x.nrows(),
            dies.len(),
            ids.len()
        )));
    }
    Ok(())
}

/// Scores with an explicit predictor, one `predict_batch` call per grid step
/// and chunk of at most `chunk` devices. `ids` name each row's noise stream.
#[allow(clippy::too_many_arguments)]
pub fn anomaly_scores_with(
    predictor: &dyn NoisePredictor,
    bundle: &ModelBundle,
    x: &ArrayView2<f64>,
    dies: &[(i64, i64)],
    ids: &[usize],
    grid: &[usize],
    seed: u64,
    chunk: usize,
) -> Result<Vec<f64>> {
    check_rows(x, dies, ids)?;
    if grid.is_empty() {
        return Err(Error::Range("empty timestep grid".into()));
    }
    for &t in grid {
        bundle.schedule.check_step(t)?;
    }
    let mut scores = Vec::with_capacity(x.nrows());
    for start in (0..x.nrows()).step_by(chunk.max(1)) {
        let end = (start + chunk.max(1)).min(x.nrows());
        let z0 = bundle.build_z0(&x.slice(s![start..end, ..]), &dies[start..end])?;
        let b = end - start;
        let mut streams: Vec<ChaCha8Rng> = ids[start..end].iter().map(|&i| device_stream(seed, i)).collect();
        let mut total = vec![0.0; b];
        let shape = (z0.shape()[1], z0.shape()[2]);
        for &t in grid {
            let mut eps = Array3::zeros(z0.raw_dim());
            for (mut e, r) in eps.axis_iter_mut(Axis(0)).zip(streams.iter_mut()) {
                e.assign(&rng::standard_normal::<_, _, ndarray::Ix2>(r, shape));
            }
            let ts = vec![t; b];
            let zt = forward_sample_batch(&z0, &ts, &eps, &bundle.schedule)?;
            let pred = predictor.predict_batch(&zt, &ts)?;
            for (i, acc) in total.iter_mut().enumerate() {
                let d = &pred.index_axis(Axis(0), i) - &eps.index_axis(Axis(0), i);
                *acc += d.iter().map(|v| v * v).sum::<f64>();
            }
        }
        scores.extend(total.into_iter().map(|v| v / grid.len() as f64));
    }
    Ok(scores)
}

/// Scores every device of `table`; row `i` uses noise stream `i`.
pub fn anomaly_scores(bundle: &ModelBundle, table: &DatasetTable, grid: &[usize], seed: u64, chunk: usize) -> Result<Vec<f64>> {
    let x = table.feature_matrix();
    let ids: Vec<usize> = (0..table.len()).collect();
    anomaly_scores_with(&bundle.denoiser, bundle, &x.view(), &table.dies(), &ids, grid, seed, chunk)
}

/// Score of a single device that occupies row `device` of its table.
pub fn anomaly_score(
    bundle: &ModelBundle,
    x: &[f64],
    die: (i64, i64),
    grid: &[usize],
    seed: u64,
    device: usize,
) -> Result<f64> {
    let row = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::shape(e.to_string()))?;
    Ok(anomaly_scores_with(&bundle.denoiser, bundle, &row, &[die], &[device], grid, seed, 1)?[0])
}

/// Runs the reverse chain from each device's clean `Z_0` and decodes, `B × F`.
/// With `subtract_pe` the positional offsets are removed before decoding,
/// since the decoder never saw them during training.
#[allow(clippy::too_many_arguments)]
pub fn reconstruct_devices(
    bundle: &ModelBundle,
    x: &ArrayView2<f64>,
    dies: &[(i64, i64)],
    ids: &[usize],
    t_rec: usize,
    seed: u64,
    subtract_pe: bool,
    chunk: usize,
) -> Result<Array2<f64>> {
    check_rows(x, dies, ids)?;
    bundle.schedule.check_step(t_rec)?;
    let mut out = Array2::zeros((x.nrows(), bundle.n_features()));
    for start in (0..x.nrows()).step_by(chunk.max(1)) {
        let end = (start + chunk.max(1)).min(x.nrows());
        let rows = x.slice(s![start..end, ..]);
        let tokens = bundle.latent_tokens(&rows)?;
        let offsets = bundle.position_offsets(&dies[start..end])?;
        let z0 = &tokens + &offsets;
        let mut rngs: Vec<ChaCha8Rng> = ids[start..end].iter().map(|&i| reconstruct_stream(seed, i)).collect();
        let mut z_hat = reconstruct_batch(&z0, t_rec, &bundle.denoiser, &bundle.schedule, &mut rngs)?;
        if subtract_pe {
            z_hat -= &offsets;
        }
        out.slice_mut(s![start..end, ..]).assign(&bundle.decode_tokens(&z_hat)?);
    }
    Ok(out)
}

pub fn reconstruct_device(
    bundle: &ModelBundle,
    x: &[f64],
    die: (i64, i64),
    t_rec: usize,
    seed: u64,
    device: usize,
) -> Result<Vec<f64>> {
    let row = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::shape(e.to_string()))?;
    let out = reconstruct_devices(bundle, &row, &[die], &[device], t_rec, seed, true, 1)?;
    Ok(out.row(0).to_vec())
}

/// `r_f = (x_f − x̂_f)²`
pub fn per_feature_residual(x: &[f64], x_hat: &[f64]) -> Result<Vec<f64>> {
    if x.len() != x_hat.len() {
        return Err(Error::shape(format!("{} features vs {} reconstructed", x.len(), x_hat.len())));
    }
    Ok(x.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).collect())
}

/// Mean residual within each program block.
pub fn per_program_score(r: &[f64], blocks: &[ProgramBlock]) -> Result<Vec<f64>> {
    validate_blocks(blocks, r.len())?;
    Ok(blocks
        .iter()
        .map(|b| r[b.range()].iter().sum::<f64>() / b.len as f64)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    pub residuals: Vec<f64>,
    pub program_scores: Vec<f64>,
}

impl Explanation {
    /// Program indices by decreasing score, ties broken by index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.program_scores.len()).collect();
        idx.sort_by(|&a, &b| self.program_scores[b].total_cmp(&self.program_scores[a]).then(a.cmp(&b)));
        idx
    }
}

/// Residuals and per-program scores for every device of `table`.
pub fn explain(
    bundle: &ModelBundle,
    table: &DatasetTable,
    t_rec: usize,
    seed: u64,
    subtract_pe: bool,
    chunk: usize,
) -> Result<Vec<Explanation>> {
    let x = table.feature_matrix();
    let ids: Vec<usize> = (0..table.len()).collect();
    let x_hat = reconstruct_devices(bundle, &x.view(), &table.dies(), &ids, t_rec, seed, subtract_pe, chunk)?;
    x.rows()
        .into_iter()
        .zip(x_hat.rows())
        .map(|(a, b)| {
            let residuals = per_feature_residual(&a.to_vec(), &b.to_vec())?;
            let program_scores = per_program_score(&residuals, &bundle.program_blocks)?;
            Ok(Explanation { residuals, program_scores })
        })
        .collect()
}
