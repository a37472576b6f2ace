//! Reverse-process sampling with Euler steps and classifier-free guidance.

use crate::net::{Cond, Model, NetError};
use crate::schedule::{self, ScheduleError, ShiftFactor};
use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error("non-finite state after step {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

pub type Result<T> = std::result::Result<T, GenerateError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_guidance")]
    pub guidance_scale: f64,
    #[serde(default)]
    pub shift: ShiftFactor,
    #[serde(default)]
    pub seed: u64,
}

fn default_steps() -> usize {
    28
}
fn default_guidance() -> f64 {
    7.0
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            guidance_scale: default_guidance(),
            shift: ShiftFactor::IDENTITY,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(GenerateError::InvalidConfig("steps must be >= 1".into()));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(GenerateError::InvalidConfig(format!(
                "guidance scale must be >= 0, got {}",
                self.guidance_scale
            )));
        }
        Ok(())
    }
}

/// Which condition drives each step: `cond_early` for the first
/// `ceil(switch_fraction * steps)` steps, `cond_late` afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchPlan {
    pub cond_early: Vec<Cond>,
    pub cond_late: Vec<Cond>,
    pub switch_fraction: f64,
}

impl SwitchPlan {
    pub fn early_steps(&self, steps: usize) -> usize {
        // guard against 0.3 * 10 = 3.0000000000000004
        let raw = self.switch_fraction * steps as f64;
        ((raw - 1e-9).ceil().max(0.0) as usize).min(steps)
    }
}

/// Decreasing time grid `t_0 = 1 > t_1 > ... > t_steps = 0`, uniform before
/// the shift warp.
pub fn time_grid(steps: usize, shift: ShiftFactor) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(GenerateError::InvalidConfig("steps must be >= 1".into()));
    }
    (0..=steps)
        .map(|i| {
            let u = if i == steps {
                0.0
            } else {
                1.0 - i as f64 / steps as f64
            };
            Ok(schedule::shift_time(u, shift)?)
        })
        .collect()
}

/// `v_u + s (v_c - v_u)`. Scale 1 returns the conditional prediction and
/// scale 0 the unconditional one, each from a single evaluation.
pub fn guided_velocity(
    model: Model<'_>,
    x_t: ArrayView2<f64>,
    t: f64,
    cond: &[Cond],
    scale: f64,
) -> Result<Array2<f64>> {
    let b = x_t.nrows();
    let times = vec![t; b];
    if scale == 1.0 {
        return Ok(model.predict(x_t, &times, cond)?);
    }
    let null = vec![Cond::NULL; b];
    if scale == 0.0 {
        return Ok(model.predict(x_t, &times, &null)?);
    }
    let xx = concatenate(Axis(0), &[x_t, x_t]).expect("same width");
    let tt = vec![t; 2 * b];
    let cc: Vec<Cond> = cond.iter().chain(null.iter()).copied().collect();
    let out = model.predict(xx.view(), &tt, &cc)?;
    let v_c = out.slice(s![..b, ..]);
    let v_u = out.slice(s![b.., ..]);
    Ok(&v_u + &((&v_c - &v_u) * scale))
}

/// Standard normal starting points, one row per sample.
pub fn initial_noise<R: Rng + ?Sized>(rng: &mut R, batch: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((batch, dim), || rng.sample(StandardNormal))
}

/// Integrates from pure noise at `t = 1` to `t = 0` with Euler steps,
/// using `cond_at(step)` as the condition of each step.
pub fn integrate(
    model: Model<'_>,
    mut x: Array2<f64>,
    cfg: &GenerationConfig,
    cond_at: impl Fn(usize) -> Vec<Cond>,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    let grid = time_grid(cfg.steps, cfg.shift)?;
    for i in 0..cfg.steps {
        let (t, t_next) = (grid[i], grid[i + 1]);
        let v = guided_velocity(model, x.view(), t, &cond_at(i), cfg.guidance_scale)?;
        x.scaled_add(-(t - t_next), &v);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(GenerateError::NonFinite(i));
        }
    }
    Ok(x)
}

/// Draws one sample per condition.
pub fn euler_sample<R: Rng + ?Sized>(
    model: Model<'_>,
    cond: &[Cond],
    cfg: &GenerationConfig,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let x = initial_noise(rng, cond.len(), model.arch().input_dim());
    integrate(model, x, cfg, |_| cond.to_vec())
}

/// Like [`euler_sample`], but switches from `plan.cond_early` to
/// `plan.cond_late` after the first `ceil(f * steps)` steps.
pub fn switched_sample<R: Rng + ?Sized>(
    model: Model<'_>,
    plan: &SwitchPlan,
    cfg: &GenerationConfig,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&plan.switch_fraction) {
        return Err(GenerateError::InvalidConfig(format!(
            "switch fraction must lie in [0, 1], got {}",
            plan.switch_fraction
        )));
    }
    if plan.cond_early.len() != plan.cond_late.len() {
        return Err(GenerateError::InvalidConfig(
            "early and late condition lists differ in length".into(),
        ));
    }
    let early = plan.early_steps(cfg.steps);
    let x = initial_noise(rng, plan.cond_late.len(), model.arch().input_dim());
    integrate(model, x, cfg, |i| {
        if i < early {
            plan.cond_early.clone()
        } else {
            plan.cond_late.clone()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Architecture, DenoiserParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> DenoiserParams {
        let arch = Architecture {
            channels: 1,
            height: 2,
            width: 2,
            hidden_widths: vec![8],
            time_embed_dim: 4,
            n_content: 2,
            n_style: 2,
            cond_embed_dim: 3,
        };
        DenoiserParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn grid_endpoints_and_uniformity() {
        let g = time_grid(28, ShiftFactor::IDENTITY).unwrap();
        assert_eq!(g.len(), 29);
        assert_eq!(g[0], 1.0);
        assert_eq!(*g.last().unwrap(), 0.0);
        for w in g.windows(2) {
            assert!(w[0] > w[1]);
            assert!((w[0] - w[1] - 1.0 / 28.0).abs() < 1e-12);
        }
        let shifted = time_grid(10, ShiftFactor::new(3.0).unwrap()).unwrap();
        assert_eq!(shifted[0], 1.0);
        assert_eq!(shifted[10], 0.0);
        assert!(shifted.windows(2).all(|w| w[0] > w[1]));
        assert!(time_grid(0, ShiftFactor::IDENTITY).is_err());
    }

    #[test]
    fn early_step_counts() {
        let plan = |f| SwitchPlan {
            cond_early: vec![],
            cond_late: vec![],
            switch_fraction: f,
        };
        assert_eq!(plan(0.1).early_steps(28), 3);
        assert_eq!(plan(0.3).early_steps(10), 3);
        assert_eq!(plan(0.0).early_steps(28), 0);
        assert_eq!(plan(1.0).early_steps(28), 28);
    }

    #[test]
    fn guidance_scale_identities() {
        let p = tiny();
        let m = Model::base(&p);
        let x = initial_noise(&mut ChaCha8Rng::seed_from_u64(2), 3, 4);
        let c = vec![Cond::new(0, 1), Cond::new(1, 0), Cond::new(1, 1)];
        let v_c = m.predict(x.view(), &[0.4; 3], &c).unwrap();
        let v_u = m.predict(x.view(), &[0.4; 3], &[Cond::NULL; 3]).unwrap();
        assert_eq!(guided_velocity(m, x.view(), 0.4, &c, 1.0).unwrap(), v_c);
        assert_eq!(guided_velocity(m, x.view(), 0.4, &c, 0.0).unwrap(), v_u);
        let two = guided_velocity(m, x.view(), 0.4, &c, 2.0).unwrap();
        let want = &v_u + &((&v_c - &v_u) * 2.0);
        for (a, b) in two.iter().zip(want.iter()) {
            assert!((a - b).abs() <= 4.0 * f64::EPSILON * b.abs().max(1.0));
        }
    }

    #[test]
    fn single_step_is_one_euler_update() {
        let p = tiny();
        let m = Model::base(&p);
        let cfg = GenerationConfig {
            steps: 1,
            guidance_scale: 1.0,
            ..Default::default()
        };
        let c = vec![Cond::new(0, 0); 2];
        let out = euler_sample(m, &c, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let x1 = initial_noise(&mut ChaCha8Rng::seed_from_u64(5), 2, 4);
        let v = m.predict(x1.view(), &[1.0, 1.0], &c).unwrap();
        assert_eq!(out, &x1 - &v);
    }

    #[test]
    fn switching_degenerates_at_endpoints() {
        let p = tiny();
        let m = Model::base(&p);
        let cfg = GenerationConfig {
            steps: 7,
            guidance_scale: 3.0,
            ..Default::default()
        };
        let early = vec![Cond::new(0, 0).without_style(); 4];
        let late = vec![Cond::new(1, 1); 4];
        let run = |f: f64| {
            let plan = SwitchPlan {
                cond_early: early.clone(),
                cond_late: late.clone(),
                switch_fraction: f,
            };
            switched_sample(m, &plan, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()
        };
        let plain_late = euler_sample(m, &late, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let plain_early = euler_sample(m, &early, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(run(0.0), plain_late);
        assert_eq!(run(1.0), plain_early);
        assert_ne!(run(0.5), plain_late);
    }

    #[test]
    fn rejects_bad_configs() {
        let p = tiny();
        let m = Model::base(&p);
        let bad = GenerationConfig {
            steps: 0,
            ..Default::default()
        };
        assert!(euler_sample(m, &[Cond::NULL], &bad, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let plan = SwitchPlan {
            cond_early: vec![Cond::NULL],
            cond_late: vec![Cond::NULL],
            switch_fraction: 1.5,
        };
        assert!(switched_sample(m, &plan, &GenerationConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
