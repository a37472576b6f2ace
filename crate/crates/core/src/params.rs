//! Named parameter containers and the Adam optimizer.

use thiserror::Error;

/// A read-only view of one named tensor.
#[derive(Debug, Clone)]
pub struct TensorView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

/// A collection of named, contiguous `f64` tensors in a stable order.
///
/// The order of [`ParamSet::tensors`] and [`ParamSet::tensors_mut`] must
/// agree; optimizers and serializers zip them positionally.
pub trait ParamSet: Clone {
    fn tensors(&self) -> Vec<TensorView<'_>>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// `self += scale * other`, tensor by tensor in declaration order.
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        let src: Vec<Vec<f64>> = other.tensors().iter().map(|t| t.data.to_vec()).collect();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Rounds every value to the nearest `f32`, the checkpoint precision.
    fn quantize_f32(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),
    #[error("gradient layout does not match parameters")]
    ShapeMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for a parameter set `P`.
#[derive(Debug, Clone)]
pub struct AdamState<P: ParamSet> {
    pub m: P,
    pub v: P,
    pub step: u64,
    pub config: AdamConfig,
}

impl<P: ParamSet> AdamState<P> {
    pub fn new(params: &P) -> Self {
        Self::with_config(params, AdamConfig::default())
    }

    pub fn with_config(params: &P, config: AdamConfig) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            config,
        }
    }

    /// One bias-corrected Adam update. Rejects non-finite gradients before
    /// touching any state.
    pub fn step(&mut self, params: &mut P, grads: &P, lr: f64) -> Result<(), OptimError> {
        let g = grads.tensors();
        for t in &g {
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(OptimError::NonFiniteGradient(t.name.clone()));
            }
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let p = params.tensors_mut();
        let m = self.m.tensors_mut();
        let v = self.v.tensors_mut();
        if p.len() != g.len() || m.len() != g.len() {
            return Err(OptimError::ShapeMismatch);
        }
        for (((p, g), m), v) in p.into_iter().zip(&g).zip(m).zip(v) {
            if p.len() != g.data.len() {
                return Err(OptimError::ShapeMismatch);
            }
            for i in 0..p.len() {
                let gi = g.data[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
