//! Low-rank adapters attached to named weight matrices.
//!
//! An adapted layer computes `W h + (alpha / r) B (A h)` with `A: r x fan_in`
//! and `B: fan_out x r`. `B` starts at zero, so attaching an adapter never
//! changes the model's output until it has been trained.

use crate::net::{Architecture, DenoiserParams, COND_PROJ};
use crate::params::{ParamSet, TensorView};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_RANK: usize = 32;
pub const A_INIT_STD: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LoraError {
    #[error("unknown target layer `{0}`")]
    UnknownTarget(String),
    #[error("duplicate target layer `{0}`")]
    DuplicateTarget(String),
    #[error("rank must be >= 1")]
    ZeroRank,
    #[error("alpha must be finite and > 0, got {0}")]
    InvalidAlpha(f64),
    #[error("no target layers")]
    NoTargets,
    #[error("adapter layer `{layer}` has shape {got:?}, base expects {expected:?}")]
    ShapeMismatch {
        layer: String,
        got: (usize, usize),
        expected: (usize, usize),
    },
}

/// Which weight matrices to adapt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetSet {
    /// Every weight matrix, condition projection included.
    #[default]
    All,
    /// Everything except the condition projection.
    ImageOnly,
    /// Condition projection only.
    ConditionOnly,
    /// Explicit layer names.
    Named(Vec<String>),
}

impl TargetSet {
    pub fn resolve(&self, params: &DenoiserParams) -> Vec<String> {
        let all: Vec<String> = params
            .arch
            .weight_layers()
            .into_iter()
            .map(|(n, _, _)| n)
            .collect();
        match self {
            TargetSet::All => all,
            TargetSet::ImageOnly => all.into_iter().filter(|n| n != COND_PROJ).collect(),
            TargetSet::ConditionOnly => vec![COND_PROJ.to_string()],
            TargetSet::Named(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    pub target: String,
    /// `rank x fan_in`
    pub a: Array2<f64>,
    /// `fan_out x rank`
    pub b: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f64,
    pub layers: Vec<LoraLayer>,
}

impl LoraAdapter {
    /// Creates an adapter for `targets` with `A ~ N(0, 0.02^2)` and `B = 0`.
    pub fn attach<R: Rng + ?Sized>(
        params: &DenoiserParams,
        targets: &[String],
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Self, LoraError> {
        if rank == 0 {
            return Err(LoraError::ZeroRank);
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(LoraError::InvalidAlpha(alpha));
        }
        if targets.is_empty() {
            return Err(LoraError::NoTargets);
        }
        let dist = Normal::new(0.0, A_INIT_STD).unwrap();
        let mut layers: Vec<LoraLayer> = Vec::with_capacity(targets.len());
        for name in targets {
            if layers.iter().any(|l| &l.target == name) {
                return Err(LoraError::DuplicateTarget(name.clone()));
            }
            let w = params
                .weight(name)
                .ok_or_else(|| LoraError::UnknownTarget(name.clone()))?;
            let (fan_out, fan_in) = w.dim();
            layers.push(LoraLayer {
                target: name.clone(),
                a: Array2::from_shape_simple_fn((rank, fan_in), || dist.sample(rng)),
                b: Array2::zeros((fan_out, rank)),
            });
        }
        Ok(Self {
            rank,
            alpha,
            layers,
        })
    }

    /// All-zero adapter for `targets` of a network with architecture `arch`.
    pub fn zeros(arch: &Architecture, targets: &[String], rank: usize, alpha: f64) -> Result<Self, LoraError> {
        if rank == 0 {
            return Err(LoraError::ZeroRank);
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(LoraError::InvalidAlpha(alpha));
        }
        let shapes = arch.weight_layers();
        let mut layers: Vec<LoraLayer> = Vec::with_capacity(targets.len());
        for name in targets {
            if layers.iter().any(|l| &l.target == name) {
                return Err(LoraError::DuplicateTarget(name.clone()));
            }
            let (_, fan_out, fan_in) = shapes
                .iter()
                .find(|(n, _, _)| n == name)
                .ok_or_else(|| LoraError::UnknownTarget(name.clone()))?;
            layers.push(LoraLayer {
                target: name.clone(),
                a: Array2::zeros((rank, *fan_in)),
                b: Array2::zeros((*fan_out, rank)),
            });
        }
        Ok(Self {
            rank,
            alpha,
            layers,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn layer(&self, name: &str) -> Option<&LoraLayer> {
        self.layers.iter().find(|l| l.target == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut LoraLayer> {
        self.layers.iter_mut().find(|l| l.target == name)
    }

    pub fn targets(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.target.as_str()).collect()
    }

    /// Checks that every adapted layer fits the base parameters.
    pub fn check_compatible(&self, params: &DenoiserParams) -> Result<(), LoraError> {
        for l in &self.layers {
            let w = params
                .weight(&l.target)
                .ok_or_else(|| LoraError::UnknownTarget(l.target.clone()))?;
            let expected = w.dim();
            let got = (l.b.nrows(), l.a.ncols());
            if got != expected || l.a.nrows() != self.rank || l.b.ncols() != self.rank {
                return Err(LoraError::ShapeMismatch {
                    layer: l.target.clone(),
                    got,
                    expected,
                });
            }
        }
        Ok(())
    }

    /// Folds the adapter into a copy of the base: `W <- W + (alpha / r) B A`.
    ///
    /// Not idempotent; merging twice adds the update twice.
    pub fn merge(&self, params: &DenoiserParams) -> Result<DenoiserParams, LoraError> {
        self.check_compatible(params)?;
        let mut merged = params.clone();
        let s = self.scale();
        for l in &self.layers {
            let w = merged.weight_mut(&l.target).expect("checked above");
            w.scaled_add(s, &l.b.dot(&l.a));
        }
        Ok(merged)
    }

    /// Number of trainable adapter values, `sum r (fan_in + fan_out)`.
    pub fn trainable_count(&self) -> usize {
        self.num_parameters()
    }
}

impl ParamSet for LoraAdapter {
    /// Exactly the `A` and `B` matrices, named `<layer>.lora_a` / `<layer>.lora_b`.
    fn tensors(&self) -> Vec<TensorView<'_>> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    TensorView {
                        name: format!("{}.lora_a", l.target),
                        shape: l.a.shape().to_vec(),
                        data: l.a.as_slice().unwrap(),
                    },
                    TensorView {
                        name: format!("{}.lora_b", l.target),
                        shape: l.b.shape().to_vec(),
                        data: l.b.as_slice().unwrap(),
                    },
                ]
            })
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.a.as_slice_mut().unwrap(), l.b.as_slice_mut().unwrap()])
            .collect()
    }
}
