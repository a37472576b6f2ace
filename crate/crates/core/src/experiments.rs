//! Toy-scale experiment recipes shared by the command line and the tests.
//!
//! The base model is pretrained on the five labeled default styles plus a
//! large pool of unlabeled images in random styles. The unlabeled pool
//! forces the network to read global colour from `x_t` instead of
//! memorizing one colour per style token, which is what makes a held-out
//! style learnable from a handful of references.

use crate::diffusion::OffsetNoiseConfig;
use crate::generate::{self, GenerateError, GenerationConfig, SwitchPlan};
use crate::lora::{LoraAdapter, TargetSet};
use crate::net::{Architecture, Cond, DenoiserParams, Model};
use crate::params::ParamSet;
use crate::samplers::SnrSampler;
use crate::styledata::{
    default_contents, default_styles, Canvas, ContentClassifier, DataPoint, StyleCorpus, StyleDataError, StyleMetric,
    StyleReference, HELD_OUT_STYLE,
};
use crate::train::{self, LoraConfig, TrainConfig, TrainError, Trained};
use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("unknown style {0}")]
    UnknownStyle(usize),
    #[error(transparent)]
    Data(#[from] StyleDataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Generate(#[from] GenerateError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// Which images the base model sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusRecipe {
    /// Renders per (content, labeled style) pair. The held-out style is
    /// never included.
    pub labeled_per_pair: usize,
    pub labeled_seed: u64,
    /// Random styles in the unlabeled pool, one render per content each.
    pub unlabeled_styles: usize,
    pub unlabeled_style_seed: u64,
    pub unlabeled_seed: u64,
}

impl Default for CorpusRecipe {
    fn default() -> Self {
        Self {
            labeled_per_pair: 16,
            labeled_seed: 7,
            unlabeled_styles: 2000,
            unlabeled_style_seed: 1234,
            unlabeled_seed: 8,
        }
    }
}

impl CorpusRecipe {
    /// Labeled images first, then the unlabeled pool.
    pub fn build(&self) -> Result<Vec<DataPoint>> {
        let mut images = StyleCorpus::pretraining(self.labeled_per_pair, self.labeled_seed)?.images;
        if self.unlabeled_styles > 0 {
            images.extend(StyleCorpus::unlabeled(self.unlabeled_styles, self.unlabeled_style_seed, self.unlabeled_seed)?.images);
        }
        Ok(images)
    }
}

/// Default contents and one token per default style.
pub fn toy_architecture() -> Architecture {
    Architecture::toy(default_contents().len(), default_styles().len())
}

/// Pretraining settings for the toy base.
pub fn pretrain_config() -> TrainConfig {
    TrainConfig {
        steps: 5000,
        lr: 1e-3,
        batch_size: 32,
        grad_accum: 1,
        p_drop: 0.1,
        p_drop_style: 0.1,
        seed: 1,
        ..Default::default()
    }
}

/// Pretrains the toy base and rounds it to checkpoint precision, so that a
/// base used in memory and one reloaded from disk behave identically.
pub fn pretrain_base(recipe: &CorpusRecipe, cfg: &TrainConfig) -> Result<Trained<DenoiserParams>> {
    let data = recipe.build()?;
    let mut out = train::pretrain(&data, &toy_architecture(), cfg)?;
    out.params.quantize_f32();
    Ok(out)
}

/// Fine-tuning references for one style.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceSet {
    pub style: usize,
    pub per_content: usize,
    pub seed: u64,
}

impl Default for ReferenceSet {
    fn default() -> Self {
        Self {
            style: HELD_OUT_STYLE,
            per_content: 2,
            seed: 11,
        }
    }
}

impl ReferenceSet {
    pub fn images(&self) -> Result<Vec<DataPoint>> {
        if self.style >= default_styles().len() {
            return Err(ExperimentError::UnknownStyle(self.style));
        }
        Ok(StyleCorpus::reference(self.style, self.per_content, self.seed)?.images)
    }
}

/// Toy fine-tuning: the default step count, batch and accumulation, with a
/// larger learning rate and adapters on the image path only.
pub fn finetune_config(sampler: SnrSampler, rank: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        seed,
        lora: Some(LoraConfig {
            targets: TargetSet::ImageOnly,
            ..LoraConfig::with_rank(rank)
        }),
        ..TrainConfig::finetune(sampler)
    }
}

pub fn with_offset(mut cfg: TrainConfig, scale: f64) -> TrainConfig {
    cfg.offset = OffsetNoiseConfig { scale };
    cfg
}

/// How generated images are scored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Samples per evaluation, cycling through the contents.
    pub samples: usize,
    pub generation: GenerationConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 64,
            generation: GenerationConfig {
                guidance_scale: 1.0,
                seed: 100,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub style_score: f64,
    pub content_score: f64,
}

/// `n` conditions cycling through the default contents, all in `style`.
pub fn style_conditions(style: Option<usize>, n: usize) -> Vec<Cond> {
    let k = default_contents().len();
    (0..n)
        .map(|i| Cond {
            content: Some(i % k),
            style,
        })
        .collect()
}

/// Style score against `style` and the fraction of samples whose shape
/// matches their content condition.
pub fn score_samples(samples: &Array2<f64>, cond: &[Cond], style: usize) -> Result<Scores> {
    let styles = default_styles();
    let spec = styles.get(style).ok_or(ExperimentError::UnknownStyle(style))?;
    let canvas = Canvas::default();
    let views: Vec<ArrayView1<f64>> = samples.rows().into_iter().collect();
    let style_score = StyleReference::new(spec, canvas, StyleMetric::default()).score(&views)?;
    let contents = default_contents();
    let classifier = ContentClassifier::default_bank(canvas);
    let hits = views
        .iter()
        .zip(cond)
        .filter(|(v, c)| c.content.is_some_and(|id| classifier.classify(**v) == Some(contents[id].shape)))
        .count();
    Ok(Scores {
        style_score,
        content_score: hits as f64 / views.len().max(1) as f64,
    })
}

fn model<'a>(base: &'a DenoiserParams, adapter: Option<&'a LoraAdapter>) -> Model<'a> {
    match adapter {
        Some(a) => Model::adapted(base, a),
        None => Model::base(base),
    }
}

/// Samples `eval.samples` images in `style` and scores them.
pub fn evaluate(
    base: &DenoiserParams,
    adapter: Option<&LoraAdapter>,
    style: usize,
    eval: &EvalConfig,
) -> Result<(Scores, Array2<f64>)> {
    let cond = style_conditions(Some(style), eval.samples);
    let mut rng = ChaCha8Rng::seed_from_u64(eval.generation.seed);
    let x = generate::euler_sample(model(base, adapter), &cond, &eval.generation, &mut rng)?;
    Ok((score_samples(&x, &cond, style)?, x))
}

/// One fine-tune plus evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub scores: Scores,
    pub final_loss: f64,
    pub seconds: f64,
}

/// Mean of the last `n` entries (or fewer) of a loss trace.
pub fn tail_mean(trace: &[f64], n: usize) -> f64 {
    let tail = &trace[trace.len().saturating_sub(n)..];
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}

/// Fine-tunes on `refs` with `cfg` and evaluates in `style`. The generation
/// seed is offset by the training seed so repeated runs use fresh noise.
pub fn finetune_and_score(
    base: &DenoiserParams,
    refs: &[DataPoint],
    style: usize,
    cfg: &TrainConfig,
    eval: &EvalConfig,
) -> Result<(RunResult, LoraAdapter)> {
    let start = Instant::now();
    let out = train::finetune(base, refs, cfg)?;
    let mut eval = *eval;
    eval.generation.seed = eval.generation.seed.wrapping_add(cfg.seed);
    let (scores, _) = evaluate(base, Some(&out.params), style, &eval)?;
    Ok((
        RunResult {
            seed: cfg.seed,
            scores,
            final_loss: tail_mean(&out.trace, 10),
            seconds: start.elapsed().as_secs_f64(),
        },
        out.params,
    ))
}

/// Switched generation where the style token is withheld for the first
/// fraction `f` of the steps. `f = 0` is fully styled, `f = 1` style-free.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwitchConfig {
    pub style: usize,
    pub fractions: Vec<f64>,
    pub samples: usize,
    pub generation: GenerationConfig,
}

impl Default for SwitchConfig {
    fn default() -> Self {
        Self {
            style: 1,
            fractions: vec![0.0, 0.1, 1.0],
            samples: 64,
            generation: GenerationConfig {
                guidance_scale: 3.0,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchRow {
    pub fraction: f64,
    pub early_steps: usize,
    pub seed: u64,
    pub scores: Scores,
}

/// Runs every fraction from the same initial noise.
pub fn switch_grid(
    base: &DenoiserParams,
    adapter: Option<&LoraAdapter>,
    cfg: &SwitchConfig,
) -> Result<Vec<(SwitchRow, Array2<f64>)>> {
    let late = style_conditions(Some(cfg.style), cfg.samples);
    let early: Vec<Cond> = late.iter().map(|c| c.without_style()).collect();
    cfg.fractions
        .iter()
        .map(|&f| {
            let plan = SwitchPlan {
                cond_early: early.clone(),
                cond_late: late.clone(),
                switch_fraction: f,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.generation.seed);
            let x = generate::switched_sample(model(base, adapter), &plan, &cfg.generation, &mut rng)?;
            let row = SwitchRow {
                fraction: f,
                early_steps: plan.early_steps(cfg.generation.steps),
                seed: cfg.generation.seed,
                scores: score_samples(&x, &late, cfg.style)?,
            };
            Ok((row, x))
        })
        .collect()
}

/// Grid over the style-friendly sampler's mean and spread and the adapter
/// rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationGrid {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub ranks: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            means: vec![0.0, -2.0, -4.0, -6.0, -8.0],
            stds: vec![1.0, 2.0, 3.0],
            ranks: vec![4, 32],
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mean: f64,
    pub std: f64,
    pub rank: usize,
    pub run: RunResult,
}

impl AblationGrid {
    pub fn cells(&self) -> Vec<(f64, f64, usize, u64)> {
        let mut v = Vec::new();
        for &m in &self.means {
            for &s in &self.stds {
                for &r in &self.ranks {
                    for &seed in &self.seeds {
                        v.push((m, s, r, seed));
                    }
                }
            }
        }
        v
    }
}

/// Runs one ablation cell. Depends only on its own coordinates, so any
/// subset of the grid reproduces the same rows.
pub fn ablation_cell(
    base: &DenoiserParams,
    refs: &ReferenceSet,
    template: &TrainConfig,
    eval: &EvalConfig,
    (mean, std, rank, seed): (f64, f64, usize, u64),
) -> Result<AblationRow> {
    let sampler = SnrSampler::style_friendly(mean, std)
        .map_err(|e| TrainError::InvalidConfig(e.to_string()))?
        .with_shift(template.sampler.shift());
    let mut cfg = template.clone();
    cfg.sampler = sampler;
    cfg.seed = seed;
    let lora = cfg.lora.get_or_insert_with(LoraConfig::default);
    lora.rank = rank;
    let (run, _) = finetune_and_score(base, &refs.images()?, refs.style, &cfg, eval)?;
    Ok(AblationRow { mean, std, rank, run })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_recipe_layout() {
        let r = CorpusRecipe {
            labeled_per_pair: 2,
            unlabeled_styles: 3,
            ..Default::default()
        };
        let data = r.build().unwrap();
        assert_eq!(data.len(), 4 * 5 * 2 + 4 * 3);
        assert!(data[..40].iter().all(|d| d.style_id.is_some_and(|s| s != HELD_OUT_STYLE)));
        assert!(data[40..].iter().all(|d| d.style_id.is_none()));
        assert_eq!(data, r.build().unwrap());
    }

    #[test]
    fn ablation_grid_spans_zero_to_minus_eight() {
        let g = AblationGrid::default();
        assert_eq!(g.cells().len(), 30);
        assert_eq!(g.means.first(), Some(&0.0));
        assert_eq!(g.means.last(), Some(&-8.0));
    }

    #[test]
    fn perfect_samples_score_well() {
        let refs = ReferenceSet::default().images().unwrap();
        let cond: Vec<Cond> = refs.iter().map(|d| Cond::new(d.content_id, HELD_OUT_STYLE)).collect();
        let mut x = Array2::zeros((refs.len(), refs[0].x0.len()));
        for (i, d) in refs.iter().enumerate() {
            x.row_mut(i).assign(&d.x0);
        }
        let s = score_samples(&x, &cond, HELD_OUT_STYLE).unwrap();
        assert!(s.style_score > 0.95, "{s:?}");
        assert_eq!(s.content_score, 1.0);
        assert!(score_samples(&x, &cond, 99).is_err());
    }

    #[test]
    fn tail_mean_handles_short_traces() {
        assert_eq!(tail_mean(&[1.0, 2.0, 3.0], 2), 2.5);
        assert_eq!(tail_mean(&[4.0], 10), 4.0);
        assert_eq!(tail_mean(&[], 10), 0.0);
    }
}
