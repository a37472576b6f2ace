//! Training-time distributions over noise levels ("SNR samplers").
//!
//! Every sampler is described by its law over the log-SNR `lambda`. The
//! three Gaussian members differ only in how their parameters map into
//! lambda-space:
//!
//! | variant            | parameters      | lambda law                      |
//! |--------------------|-----------------|---------------------------------|
//! | `StyleFriendly`    | `mean`, `std`   | `N(mean, std^2)`                |
//! | `LogitNormal`      | `mean`, `std`   | `N(-2 mean, (2 std)^2)`         |
//! | `EdmLogNormal`     | `p_mean`, `p_std` | `N(-2 p_mean, (2 p_std)^2)`   |
//!
//! `UniformTime` draws `t ~ U(0, 1)`, which induces the logistic density
//! `t (1 - t) / 2` in lambda. A shift factor `k` translates any of these
//! laws by `-2 ln k`.

use crate::schedule::{self, ShiftFactor};
use crate::stats::{normal_cdf, normal_pdf};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("{name} must be > 0, got {value}")]
    NonPositiveScale { name: &'static str, value: f64 },
    #[error("{name} must be finite, got {value}")]
    NonFinite { name: &'static str, value: f64 },
    #[error(transparent)]
    Schedule(#[from] schedule::ScheduleError),
    #[error("density grid needs at least 2 points, got {0}")]
    GridTooSmall(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SamplerKind {
    UniformTime,
    /// Normal law on `logit(t)`.
    LogitNormal { mean: f64, std: f64 },
    /// Normal law directly on the log-SNR.
    StyleFriendly { mean: f64, std: f64 },
    /// Log-normal law on the noise standard deviation.
    EdmLogNormal { p_mean: f64, p_std: f64 },
}

/// A noise level as both log-SNR and time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevel {
    pub lambda: f64,
    pub t: f64,
}

/// An immutable, validated sampler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SamplerSpec", into = "SamplerSpec")]
pub struct SnrSampler {
    kind: SamplerKind,
    shift: ShiftFactor,
}

/// Serialized form of [`SnrSampler`]: the kind tag, its parameters and an
/// optional `shift` (default 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SamplerSpec {
    UniformTime {
        #[serde(default = "one")]
        shift: f64,
    },
    LogitNormal {
        mean: f64,
        std: f64,
        #[serde(default = "one")]
        shift: f64,
    },
    StyleFriendly {
        mean: f64,
        std: f64,
        #[serde(default = "one")]
        shift: f64,
    },
    EdmLogNormal {
        p_mean: f64,
        p_std: f64,
        #[serde(default = "one")]
        shift: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl TryFrom<SamplerSpec> for SnrSampler {
    type Error = SamplerError;
    fn try_from(spec: SamplerSpec) -> Result<Self, SamplerError> {
        let (kind, shift) = match spec {
            SamplerSpec::UniformTime { shift } => (SamplerKind::UniformTime, shift),
            SamplerSpec::LogitNormal { mean, std, shift } => (SamplerKind::LogitNormal { mean, std }, shift),
            SamplerSpec::StyleFriendly { mean, std, shift } => (SamplerKind::StyleFriendly { mean, std }, shift),
            SamplerSpec::EdmLogNormal { p_mean, p_std, shift } => (SamplerKind::EdmLogNormal { p_mean, p_std }, shift),
        };
        SnrSampler::new(kind, ShiftFactor::new(shift)?)
    }
}

impl From<SnrSampler> for SamplerSpec {
    fn from(s: SnrSampler) -> Self {
        let shift = s.shift.get();
        match s.kind {
            SamplerKind::UniformTime => SamplerSpec::UniformTime { shift },
            SamplerKind::LogitNormal { mean, std } => SamplerSpec::LogitNormal { mean, std, shift },
            SamplerKind::StyleFriendly { mean, std } => SamplerSpec::StyleFriendly { mean, std, shift },
            SamplerKind::EdmLogNormal { p_mean, p_std } => SamplerSpec::EdmLogNormal { p_mean, p_std, shift },
        }
    }
}

fn check_loc(name: &'static str, value: f64) -> Result<(), SamplerError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(SamplerError::NonFinite { name, value })
    }
}

fn check_scale(name: &'static str, value: f64) -> Result<(), SamplerError> {
    check_loc(name, value)?;
    if value > 0.0 {
        Ok(())
    } else {
        Err(SamplerError::NonPositiveScale { name, value })
    }
}

impl SnrSampler {
    pub fn new(kind: SamplerKind, shift: ShiftFactor) -> Result<Self, SamplerError> {
        match kind {
            SamplerKind::UniformTime => {}
            SamplerKind::LogitNormal { mean, std } | SamplerKind::StyleFriendly { mean, std } => {
                check_loc("mean", mean)?;
                check_scale("std", std)?;
            }
            SamplerKind::EdmLogNormal { p_mean, p_std } => {
                check_loc("p_mean", p_mean)?;
                check_scale("p_std", p_std)?;
            }
        }
        Ok(Self { kind, shift })
    }

    pub fn uniform_time() -> Self {
        Self::new(SamplerKind::UniformTime, ShiftFactor::IDENTITY).unwrap()
    }

    pub fn logit_normal(mean: f64, std: f64) -> Result<Self, SamplerError> {
        Self::new(SamplerKind::LogitNormal { mean, std }, ShiftFactor::IDENTITY)
    }

    pub fn style_friendly(mean: f64, std: f64) -> Result<Self, SamplerError> {
        Self::new(SamplerKind::StyleFriendly { mean, std }, ShiftFactor::IDENTITY)
    }

    pub fn edm_log_normal(p_mean: f64, p_std: f64) -> Result<Self, SamplerError> {
        Self::new(SamplerKind::EdmLogNormal { p_mean, p_std }, ShiftFactor::IDENTITY)
    }

    /// The default fine-tuning sampler, `lambda ~ N(-6, 2^2)`.
    pub fn style_friendly_default() -> Self {
        Self::style_friendly(-6.0, 2.0).unwrap()
    }

    /// Logit-normal pre-training sampler `LogitNormal(0, 1)`.
    pub fn sd3_default() -> Self {
        Self::logit_normal(0.0, 1.0).unwrap()
    }

    pub fn with_shift(self, shift: ShiftFactor) -> Self {
        Self { shift, ..self }
    }

    pub fn kind(&self) -> SamplerKind {
        self.kind
    }

    pub fn shift(&self) -> ShiftFactor {
        self.shift
    }

    /// Mean and std of lambda before shifting, for the Gaussian family.
    pub fn gaussian_params(&self) -> Option<(f64, f64)> {
        match self.kind {
            SamplerKind::UniformTime => None,
            SamplerKind::StyleFriendly { mean, std } => Some((mean, std)),
            SamplerKind::LogitNormal { mean, std } => Some((-2.0 * mean, 2.0 * std)),
            SamplerKind::EdmLogNormal { p_mean, p_std } => Some((-2.0 * p_mean, 2.0 * p_std)),
        }
    }

    fn draw_unshifted<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.kind {
            SamplerKind::UniformTime => loop {
                let t: f64 = rng.gen();
                if t > 0.0 {
                    break schedule::log_snr(t).expect("t in (0,1)");
                }
            },
            SamplerKind::StyleFriendly { mean, std } => {
                let z: f64 = rng.sample(StandardNormal);
                mean + std * z
            }
            SamplerKind::LogitNormal { mean, std } => {
                let z: f64 = rng.sample(StandardNormal);
                // logit(t) = -lambda / 2
                -2.0 * (mean + std * z)
            }
            SamplerKind::EdmLogNormal { p_mean, p_std } => {
                let z: f64 = rng.sample(StandardNormal);
                let ln_noise_std = p_mean + p_std * z;
                -2.0 * ln_noise_std
            }
        }
    }

    /// Draws one noise level.
    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> NoiseLevel {
        let lambda = schedule::shift_log_snr(self.draw_unshifted(rng), self.shift);
        let t = schedule::time_of_log_snr(lambda).expect("finite lambda");
        NoiseLevel { lambda, t }
    }

    /// Draws `n` independent noise levels.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<NoiseLevel> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }

    /// Density of lambda.
    pub fn density_lambda(&self, lambda: f64) -> f64 {
        let base = lambda - self.shift.log_snr_offset();
        match self.gaussian_params() {
            Some((m, s)) => normal_pdf(base, m, s),
            None => {
                let t = schedule::sigmoid(-0.5 * base);
                0.5 * t * (1.0 - t)
            }
        }
    }

    /// Cumulative distribution of lambda.
    pub fn cdf_lambda(&self, lambda: f64) -> f64 {
        let base = lambda - self.shift.log_snr_offset();
        match self.gaussian_params() {
            Some((m, s)) => normal_cdf(base, m, s),
            // P(lambda <= l) = P(t >= t(l)) = 1 - t(l)
            None => schedule::sigmoid(0.5 * base),
        }
    }

    /// Density of t on `(0, 1)`, by change of variables.
    pub fn density_time(&self, t: f64) -> Result<f64, SamplerError> {
        let lambda = schedule::log_snr(t)?;
        Ok(self.density_lambda(lambda) * schedule::log_snr_jacobian(t))
    }

    /// Probability that the sampled time lands in `[lo, hi]`.
    pub fn time_mass(&self, lo: f64, hi: f64) -> f64 {
        // t increasing <=> lambda decreasing
        let upper = if lo <= 0.0 {
            1.0
        } else {
            self.cdf_lambda(schedule::log_snr(lo).unwrap())
        };
        let lower = if hi >= 1.0 {
            0.0
        } else {
            self.cdf_lambda(schedule::log_snr(hi).unwrap())
        };
        upper - lower
    }

    /// Tabulated densities over the default lambda range `[-15, 10]`.
    pub fn density_table(&self, grid: usize) -> Result<DensityTable, SamplerError> {
        self.density_table_in(grid, DEFAULT_LAMBDA_RANGE)
    }

    /// Tabulated densities on `grid` evenly spaced lambda values spanning
    /// `range` (both ends included) and `grid` cell midpoints in `(0, 1)`.
    pub fn density_table_in(
        &self,
        grid: usize,
        range: (f64, f64),
    ) -> Result<DensityTable, SamplerError> {
        if grid < 2 {
            return Err(SamplerError::GridTooSmall(grid));
        }
        let (lo, hi) = range;
        let dl = (hi - lo) / (grid - 1) as f64;
        let lambda = (0..grid)
            .map(|i| {
                let x = if i + 1 == grid { hi } else { lo + i as f64 * dl };
                (x, self.density_lambda(x))
            })
            .collect();
        let dt = 1.0 / grid as f64;
        let time = (0..grid)
            .map(|i| {
                let t = (i as f64 + 0.5) * dt;
                (t, self.density_time(t).expect("midpoints lie in (0,1)"))
            })
            .collect();
        Ok(DensityTable { lambda, time })
    }
}

pub const DEFAULT_LAMBDA_RANGE: (f64, f64) = (-15.0, 10.0);

/// Rows `(x, p)` of the lambda and time densities.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityTable {
    pub lambda: Vec<(f64, f64)>,
    pub time: Vec<(f64, f64)>,
}

impl DensityTable {
    /// Trapezoid integral of the lambda rows.
    pub fn lambda_integral(&self) -> f64 {
        trapezoid(&self.lambda)
    }

    /// Midpoint-rule integral of the time rows.
    pub fn time_integral(&self) -> f64 {
        let dt = 1.0 / self.time.len() as f64;
        self.time.iter().map(|&(_, p)| p).sum::<f64>() * dt
    }

    /// Grid point with the highest lambda density.
    pub fn lambda_mode(&self) -> f64 {
        self.lambda
            .iter()
            .copied()
            .fold((f64::NAN, f64::NEG_INFINITY), |best, row| {
                if row.1 > best.1 {
                    row
                } else {
                    best
                }
            })
            .0
    }
}

fn trapezoid(rows: &[(f64, f64)]) -> f64 {
    rows.windows(2)
        .map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1))
        .sum()
}
