//! Forward process, velocity targets and training objectives.

use crate::lora::LoraAdapter;
use crate::net::{Cond, DenoiserParams, GradRequest, Model, NetError};
use crate::samplers::{NoiseLevel, SnrSampler};
use crate::schedule::{self, ScheduleError};
use ndarray::{Array, Array2, ArrayView, ArrayView1, ArrayView2, Dimension, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Net(#[from] NetError),
}

pub type Result<T> = std::result::Result<T, DiffusionError>;

fn same_shape<D: Dimension>(a: &ArrayView<f64, D>, b: &ArrayView<f64, D>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(DiffusionError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()))
    }
}

/// `x_t = (1 - t) x0 + t eps`.
pub fn forward_diffuse<D: Dimension>(
    x0: ArrayView<f64, D>,
    eps: ArrayView<f64, D>,
    t: f64,
) -> Result<Array<f64, D>> {
    same_shape(&x0, &eps)?;
    let (alpha, sigma) = schedule::coefficients(t)?;
    let mut out = x0.to_owned();
    Zip::from(&mut out).and(&eps).for_each(|x, &e| *x = alpha * *x + sigma * e);
    Ok(out)
}

/// `eps - x0`.
pub fn velocity_target<D: Dimension>(
    x0: ArrayView<f64, D>,
    eps: ArrayView<f64, D>,
) -> Result<Array<f64, D>> {
    same_shape(&x0, &eps)?;
    Ok(&eps - &x0)
}

/// Constant per-(sample, channel) noise offset.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffsetNoiseConfig {
    pub scale: f64,
}

impl OffsetNoiseConfig {
    pub fn new(scale: f64) -> Result<Self> {
        if scale >= 0.0 && scale.is_finite() {
            Ok(Self { scale })
        } else {
            Err(DiffusionError::InvalidParameter(format!(
                "offset scale must be >= 0, got {scale}"
            )))
        }
    }
}

/// Gaussian noise for `batch` images of `channels x pixels` values, laid
/// out channel-major per row. With a positive offset scale, one extra
/// standard normal per channel is drawn after the pixel noise of each row
/// and added, scaled, to every pixel of that channel. With scale 0 no
/// extra draws happen.
pub fn sample_noise<R: Rng + ?Sized>(
    rng: &mut R,
    batch: usize,
    channels: usize,
    pixels: usize,
    offset: OffsetNoiseConfig,
) -> Array2<f64> {
    let mut out = Array2::zeros((batch, channels * pixels));
    for mut row in out.rows_mut() {
        for v in row.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        if offset.scale > 0.0 {
            for c in 0..channels {
                let shift: f64 = rng.sample(StandardNormal);
                let shift = offset.scale * shift;
                for v in row.iter_mut().skip(c * pixels).take(pixels) {
                    *v += shift;
                }
            }
        }
    }
    out
}

/// A batch of noised training items.
#[derive(Debug, Clone)]
pub struct NoisyBatch {
    pub x0: Array2<f64>,
    pub eps: Array2<f64>,
    pub x_t: Array2<f64>,
    pub t: Vec<f64>,
    pub lambda: Vec<f64>,
    pub target_v: Array2<f64>,
}

impl NoisyBatch {
    /// Builds `x_t` and `eps - x0` row by row.
    pub fn new(x0: Array2<f64>, eps: Array2<f64>, levels: &[NoiseLevel]) -> Result<Self> {
        same_shape(&x0.view(), &eps.view())?;
        if x0.nrows() == 0 {
            return Err(DiffusionError::EmptyBatch);
        }
        if levels.len() != x0.nrows() {
            return Err(DiffusionError::ShapeMismatch(
                vec![x0.nrows()],
                vec![levels.len()],
            ));
        }
        let mut x_t = Array2::zeros(x0.dim());
        for (i, lvl) in levels.iter().enumerate() {
            let row = forward_diffuse(x0.row(i), eps.row(i), lvl.t)?;
            x_t.row_mut(i).assign(&row);
        }
        let target_v = velocity_target(x0.view(), eps.view())?;
        Ok(Self {
            x0,
            eps,
            x_t,
            t: levels.iter().map(|l| l.t).collect(),
            lambda: levels.iter().map(|l| l.lambda).collect(),
            target_v,
        })
    }

    pub fn len(&self) -> usize {
        self.x0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Loss value, per-item terms and gradients.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub per_item: Vec<f64>,
    pub base_grads: Option<DenoiserParams>,
    pub adapter_grads: Option<LoraAdapter>,
}

/// Mean squared error of each row.
fn row_mse(pred: &ArrayView2<f64>, target: &ArrayView2<f64>) -> Vec<f64> {
    let d = pred.ncols() as f64;
    pred.rows()
        .into_iter()
        .zip(target.rows())
        .map(|(p, t)| {
            p.iter()
                .zip(t.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / d
        })
        .collect()
}

fn finite(loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(DiffusionError::NonFiniteLoss(loss))
    }
}

/// Velocity-prediction loss: batch mean of per-item mean squared error.
pub fn dm_loss(
    model: Model<'_>,
    batch: &NoisyBatch,
    cond: &[Cond],
    want: GradRequest,
) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(DiffusionError::EmptyBatch);
    }
    let fwd = model.forward(batch.x_t.view(), &batch.t, cond)?;
    let per_item = row_mse(&fwd.output.view(), &batch.target_v.view());
    let n = per_item.len() as f64;
    let loss = finite(per_item.iter().sum::<f64>() / n)?;
    let mut grads = (None, None);
    if want.base || want.adapter {
        let scale = 2.0 / (n * batch.x0.ncols() as f64);
        let g_out = (&fwd.output - &batch.target_v) * scale;
        let g = model.backward(&fwd.cache, g_out.view(), want)?;
        grads = (g.base, g.adapter);
    }
    Ok(LossOutput {
        loss,
        per_item,
        base_grads: grads.0,
        adapter_grads: grads.1,
    })
}

/// DCO objective settings. The time weighting is fixed to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DcoConfig {
    pub beta_t: f64,
}

impl Default for DcoConfig {
    fn default() -> Self {
        Self { beta_t: 1.0 }
    }
}

/// `softplus(x) = ln(1 + e^x) = -ln sigmoid(-x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Batch mean of `-ln sigmoid(-beta_T (se_theta - se_phi))`, with gradients
/// for `theta` only. `phi` is evaluated but never differentiated.
pub fn dco_loss(
    theta: Model<'_>,
    phi: Model<'_>,
    batch: &NoisyBatch,
    cond: &[Cond],
    cfg: DcoConfig,
    want: GradRequest,
) -> Result<LossOutput> {
    if !(cfg.beta_t > 0.0) {
        return Err(DiffusionError::InvalidParameter(format!(
            "beta_T must be > 0, got {}",
            cfg.beta_t
        )));
    }
    if batch.is_empty() {
        return Err(DiffusionError::EmptyBatch);
    }
    let fwd = theta.forward(batch.x_t.view(), &batch.t, cond)?;
    let ref_out = phi.predict(batch.x_t.view(), &batch.t, cond)?;
    let se_theta = row_mse(&fwd.output.view(), &batch.target_v.view());
    let se_phi = row_mse(&ref_out.view(), &batch.target_v.view());
    let beta = cfg.beta_t;
    let n = se_theta.len() as f64;
    let per_item: Vec<f64> = se_theta
        .iter()
        .zip(&se_phi)
        .map(|(a, b)| softplus(beta * (a - b)))
        .collect();
    let loss = finite(per_item.iter().sum::<f64>() / n)?;
    let mut grads = (None, None);
    if want.base || want.adapter {
        let d = batch.x0.ncols() as f64;
        let mut g_out = &fwd.output - &batch.target_v;
        for (i, mut row) in g_out.rows_mut().into_iter().enumerate() {
            // d softplus(beta * diff) / d se_theta = beta * sigmoid(beta * diff)
            let w = beta * schedule::sigmoid(beta * (se_theta[i] - se_phi[i]));
            row *= w * 2.0 / (n * d);
        }
        let g = theta.backward(&fwd.cache, g_out.view(), want)?;
        grads = (g.base, g.adapter);
    }
    Ok(LossOutput {
        loss,
        per_item,
        base_grads: grads.0,
        adapter_grads: grads.1,
    })
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub sem: f64,
    pub n: usize,
}

impl Estimate {
    fn from_values(v: &[f64]) -> Self {
        let (mean, sem) = crate::stats::mean_and_sem(v);
        Self {
            mean,
            sem,
            n: v.len(),
        }
    }

    /// `|a - b| / sqrt(sem_a^2 + sem_b^2)`.
    pub fn z_score(&self, other: &Estimate) -> f64 {
        (self.mean - other.mean).abs() / (self.sem.powi(2) + other.sem.powi(2)).sqrt()
    }
}

const CHUNK: usize = 1024;

/// Per-item squared errors for `x0` noised at each of `lambdas`.
fn squared_errors<R: Rng + ?Sized>(
    model: Model<'_>,
    x0: ArrayView1<f64>,
    cond: Cond,
    lambdas: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    let d = x0.len();
    let mut out = Vec::with_capacity(lambdas.len());
    for chunk in lambdas.chunks(CHUNK) {
        let b = chunk.len();
        let x0s = Array2::from_shape_fn((b, d), |(_, j)| x0[j]);
        let eps = Array2::from_shape_simple_fn((b, d), || rng.sample(StandardNormal));
        let levels = chunk
            .iter()
            .map(|&lambda| Ok(NoiseLevel { lambda, t: schedule::time_of_log_snr(lambda)? }))
            .collect::<Result<Vec<_>>>()?;
        let batch = NoisyBatch::new(x0s, eps, &levels)?;
        let pred = model.predict(batch.x_t.view(), &batch.t, &vec![cond; b])?;
        out.extend(row_mse(&pred.view(), &batch.target_v.view()));
    }
    Ok(out)
}

/// The loss written as an integral over a truncated log-SNR range and
/// estimated with uniform draws: `E_{lambda ~ U}[(hi - lo) p(lambda) se(lambda)]`.
#[allow(clippy::too_many_arguments)]
pub fn importance_weighted_loss<R: Rng + ?Sized>(
    model: Model<'_>,
    x0: ArrayView1<f64>,
    cond: Cond,
    sampler: &SnrSampler,
    rng: &mut R,
    n: usize,
    lambda_min: f64,
    lambda_max: f64,
) -> Result<Estimate> {
    if !(lambda_min < lambda_max) || n == 0 {
        return Err(DiffusionError::InvalidParameter(format!(
            "need lambda_min < lambda_max and n >= 1 (got {lambda_min}, {lambda_max}, {n})"
        )));
    }
    let width = lambda_max - lambda_min;
    let lambdas: Vec<f64> = (0..n)
        .map(|_| lambda_min + width * rng.gen::<f64>())
        .collect();
    let se = squared_errors(model, x0, cond, &lambdas, rng)?;
    let values: Vec<f64> = lambdas
        .iter()
        .zip(&se)
        .map(|(&l, &e)| width * sampler.density_lambda(l) * e)
        .collect();
    Ok(Estimate::from_values(&values))
}

/// Direct estimate `E_{lambda ~ p}[se(lambda) 1{lo <= lambda <= hi}]`.
#[allow(clippy::too_many_arguments)]
pub fn direct_loss<R: Rng + ?Sized>(
    model: Model<'_>,
    x0: ArrayView1<f64>,
    cond: Cond,
    sampler: &SnrSampler,
    rng: &mut R,
    n: usize,
    lambda_min: f64,
    lambda_max: f64,
) -> Result<Estimate> {
    if n == 0 {
        return Err(DiffusionError::InvalidParameter("n must be >= 1".into()));
    }
    let lambdas: Vec<f64> = sampler.sample(rng, n).iter().map(|l| l.lambda).collect();
    let se = squared_errors(model, x0, cond, &lambdas, rng)?;
    let values: Vec<f64> = lambdas
        .iter()
        .zip(&se)
        .map(|(&l, &e)| if (lambda_min..=lambda_max).contains(&l) { e } else { 0.0 })
        .collect();
    Ok(Estimate::from_values(&values))
}
