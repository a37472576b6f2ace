//! Pre-training and LoRA fine-tuning loops.

use crate::diffusion::{
    self, dco_loss, dm_loss, sample_noise, DcoConfig, DiffusionError, LossOutput, NoisyBatch,
    OffsetNoiseConfig,
};
use crate::lora::{LoraAdapter, LoraError, TargetSet, DEFAULT_RANK};
use crate::net::{drop_condition, drop_style, Architecture, Cond, DenoiserParams, GradRequest, Model, NetError};
use crate::params::{AdamState, OptimError, ParamSet};
use crate::samplers::SnrSampler;
use crate::styledata::DataPoint;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty training set")]
    EmptyData,
    #[error("fine-tuning needs a LoRA configuration")]
    MissingLora,
    #[error("loss diverged at step {step} after {} finite steps", trace.len())]
    Diverged { step: usize, trace: Vec<f64> },
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error(transparent)]
    Net(#[from] NetError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    #[default]
    Dm,
    Dco,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    #[serde(default)]
    pub targets: TargetSet,
    #[serde(default = "default_rank")]
    pub rank: usize,
    /// Defaults to the rank, giving a scale of 1.
    #[serde(default)]
    pub alpha: Option<f64>,
}

fn default_rank() -> usize {
    DEFAULT_RANK
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            targets: TargetSet::All,
            rank: DEFAULT_RANK,
            alpha: None,
        }
    }
}

impl LoraConfig {
    pub fn with_rank(rank: usize) -> Self {
        Self {
            rank,
            ..Default::default()
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub objective: Objective,
    #[serde(default = "SnrSampler::sd3_default")]
    pub sampler: SnrSampler,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_accum")]
    pub grad_accum: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Probability of replacing the whole condition with the null token.
    #[serde(default = "default_p_drop")]
    pub p_drop: f64,
    /// Probability of replacing only the style id, applied after `p_drop`.
    #[serde(default)]
    pub p_drop_style: f64,
    #[serde(default)]
    pub offset: OffsetNoiseConfig,
    #[serde(default)]
    pub lora: Option<LoraConfig>,
    #[serde(default)]
    pub dco: DcoConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_steps() -> usize {
    300
}
fn default_lr() -> f64 {
    1e-4
}
fn default_accum() -> usize {
    4
}
fn default_batch() -> usize {
    1
}
fn default_p_drop() -> f64 {
    0.1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Dm,
            sampler: SnrSampler::sd3_default(),
            steps: default_steps(),
            lr: default_lr(),
            grad_accum: default_accum(),
            batch_size: default_batch(),
            p_drop: default_p_drop(),
            p_drop_style: 0.0,
            offset: OffsetNoiseConfig::default(),
            lora: None,
            dco: DcoConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Default fine-tuning setup: rank-32 LoRA on every weight matrix.
    pub fn finetune(sampler: SnrSampler) -> Self {
        Self {
            sampler,
            lora: Some(LoraConfig::default()),
            ..Default::default()
        }
    }

    /// Checks everything except the step count, which may be 0 for library
    /// calls.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.grad_accum == 0 {
            return bad("grad_accum must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        for (name, p) in [("p_drop", self.p_drop), ("p_drop_style", self.p_drop_style)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        OffsetNoiseConfig::new(self.offset.scale)?;
        if !(self.dco.beta_t.is_finite() && self.dco.beta_t > 0.0) {
            return bad(format!("dco.beta_t must be > 0, got {}", self.dco.beta_t));
        }
        if let Some(l) = &self.lora {
            if l.rank == 0 {
                return Err(LoraError::ZeroRank.into());
            }
            if !(l.alpha().is_finite() && l.alpha() > 0.0) {
                return Err(LoraError::InvalidAlpha(l.alpha()).into());
            }
        }
        Ok(())
    }
}

/// Parameters plus one recorded loss per optimizer step.
#[derive(Debug, Clone)]
pub struct Trained<P> {
    pub params: P,
    pub trace: Vec<f64>,
}

/// Applies the mean of `micro_grads`, summed in slice order, as one Adam
/// update.
pub fn accumulate_step<P: ParamSet>(
    state: &mut AdamState<P>,
    params: &mut P,
    micro_grads: &[P],
    lr: f64,
) -> Result<()> {
    let Some(first) = micro_grads.first() else {
        return Err(TrainError::InvalidConfig("no micro-batch gradients".into()));
    };
    let mut total = first.clone();
    for g in &micro_grads[1..] {
        total.add_scaled(g, 1.0);
    }
    if micro_grads.len() > 1 {
        total.scale(1.0 / micro_grads.len() as f64);
    }
    state.step(params, &total, lr)?;
    Ok(())
}

/// One micro-batch drawn from `data`: item indices, then noise levels,
/// then Gaussian noise, then condition dropout, all from `rng` in that
/// order.
fn draw_batch<R: Rng + ?Sized>(
    data: &[DataPoint],
    arch: &Architecture,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(NoisyBatch, Vec<Cond>)> {
    let b = cfg.batch_size;
    let idx: Vec<usize> = (0..b).map(|_| rng.gen_range(0..data.len())).collect();
    let levels = cfg.sampler.sample(rng, b);
    let eps = sample_noise(rng, b, arch.channels, arch.height * arch.width, cfg.offset);
    let dim = arch.input_dim();
    let mut x0 = Array2::zeros((b, dim));
    let mut cond = Vec::with_capacity(b);
    for (row, &i) in idx.iter().enumerate() {
        let d = &data[i];
        if d.x0.len() != dim {
            return Err(TrainError::InvalidConfig(format!(
                "image has {} values, architecture expects {dim}",
                d.x0.len()
            )));
        }
        x0.row_mut(row).assign(&d.x0);
        let c = drop_condition(Cond { content: Some(d.content_id), style: d.style_id }, rng, cfg.p_drop);
        cond.push(drop_style(c, rng, cfg.p_drop_style));
    }
    Ok((NoisyBatch::new(x0, eps, &levels)?, cond))
}

fn diverged(step: usize, trace: Vec<f64>) -> TrainError {
    TrainError::Diverged { step, trace }
}

/// Trains every parameter of `init` with the velocity loss.
pub fn pretrain_from(init: DenoiserParams, data: &[DataPoint], cfg: &TrainConfig) -> Result<Trained<DenoiserParams>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let mut params = init;
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut grads = Vec::with_capacity(cfg.grad_accum);
        let mut loss = 0.0;
        for _ in 0..cfg.grad_accum {
            let (batch, cond) = draw_batch(data, &params.arch, cfg, &mut rng)?;
            let out = match dm_loss(Model::base(&params), &batch, &cond, GradRequest::BASE) {
                Ok(o) => o,
                Err(DiffusionError::NonFiniteLoss(_)) => return Err(diverged(step, trace)),
                Err(e) => return Err(e.into()),
            };
            loss += out.loss;
            grads.push(out.base_grads.expect("requested"));
        }
        match accumulate_step(&mut adam, &mut params, &grads, cfg.lr) {
            Err(TrainError::Optim(OptimError::NonFiniteGradient(_))) => return Err(diverged(step, trace)),
            r => r?,
        }
        trace.push(loss / cfg.grad_accum as f64);
    }
    Ok(Trained { params, trace })
}

/// Initializes a network from `cfg.seed` and trains it on `data`.
pub fn pretrain(data: &[DataPoint], arch: &Architecture, cfg: &TrainConfig) -> Result<Trained<DenoiserParams>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = DenoiserParams::init(arch, &mut rng)?;
    pretrain_from(init, data, cfg)
}

/// Trains a fresh adapter on `reference` while `base` stays frozen. The DCO
/// objective uses `base` itself as the reference model.
pub fn finetune(base: &DenoiserParams, reference: &[DataPoint], cfg: &TrainConfig) -> Result<Trained<LoraAdapter>> {
    cfg.validate()?;
    let lora = cfg.lora.as_ref().ok_or(TrainError::MissingLora)?;
    if reference.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let targets = lora.targets.resolve(base);
    let mut adapter = LoraAdapter::attach(base, &targets, lora.rank, lora.alpha(), &mut rng)?;
    rng.set_stream(1);
    let mut adam = AdamState::new(&adapter);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut grads = Vec::with_capacity(cfg.grad_accum);
        let mut loss = 0.0;
        for _ in 0..cfg.grad_accum {
            let (batch, cond) = draw_batch(reference, &base.arch, cfg, &mut rng)?;
            let theta = Model::adapted(base, &adapter);
            let out: diffusion::Result<LossOutput> = match cfg.objective {
                Objective::Dm => dm_loss(theta, &batch, &cond, GradRequest::ADAPTER),
                Objective::Dco => dco_loss(theta, Model::base(base), &batch, &cond, cfg.dco, GradRequest::ADAPTER),
            };
            let out = match out {
                Ok(o) => o,
                Err(DiffusionError::NonFiniteLoss(_)) => return Err(diverged(step, trace)),
                Err(e) => return Err(e.into()),
            };
            loss += out.loss;
            grads.push(out.adapter_grads.expect("requested"));
        }
        match accumulate_step(&mut adam, &mut adapter, &grads, cfg.lr) {
            Err(TrainError::Optim(OptimError::NonFiniteGradient(_))) => return Err(diverged(step, trace)),
            r => r?,
        }
        trace.push(loss / cfg.grad_accum as f64);
    }
    Ok(Trained {
        params: adapter,
        trace,
    })
}
