//! Rectified-flow noise schedule algebra.
//!
//! The forward process interpolates `x_t = (1 - t) x_0 + t eps`, so the
//! coefficients are `alpha_t = 1 - t` and `sigma_t = t`, and the log
//! signal-to-noise ratio is `lambda_t = 2 ln((1 - t) / t)`.
//!
//! Conversions between `t` and `lambda` never clamp. Callers that can hit
//! the endpoints `t = 0` or `t = 1` get a [`ScheduleError`] instead of an
//! infinity.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("log-SNR is infinite at t = {0}; need 0 < t < 1")]
    InfiniteLogSnr(f64),
    #[error("shift factor must be > 0, got {0}")]
    InvalidShift(f64),
    #[error("log-SNR must be finite, got {0}")]
    NonFiniteLogSnr(f64),
}

pub type Result<T> = std::result::Result<T, ScheduleError>;

/// Timestep shift factor `k`; `k = 1` is the identity.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct ShiftFactor(f64);

impl ShiftFactor {
    pub const IDENTITY: ShiftFactor = ShiftFactor(1.0);

    pub fn new(k: f64) -> Result<Self> {
        if k > 0.0 && k.is_finite() {
            Ok(Self(k))
        } else {
            Err(ScheduleError::InvalidShift(k))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    /// Translation applied to log-SNR, `-2 ln k`.
    pub fn log_snr_offset(self) -> f64 {
        -2.0 * self.0.ln()
    }
}

impl Default for ShiftFactor {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl TryFrom<f64> for ShiftFactor {
    type Error = ScheduleError;
    fn try_from(k: f64) -> Result<Self> {
        Self::new(k)
    }
}

impl From<ShiftFactor> for f64 {
    fn from(k: ShiftFactor) -> f64 {
        k.0
    }
}

fn check_closed(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(ScheduleError::TimeOutOfRange(t))
    }
}

/// `(alpha_t, sigma_t) = (1 - t, t)`.
pub fn coefficients(t: f64) -> Result<(f64, f64)> {
    check_closed(t)?;
    Ok((1.0 - t, t))
}

/// `lambda_t = 2 ln((1 - t) / t)`, strictly decreasing on `(0, 1)`.
pub fn log_snr(t: f64) -> Result<f64> {
    check_closed(t)?;
    if t == 0.0 || t == 1.0 {
        return Err(ScheduleError::InfiniteLogSnr(t));
    }
    // ln(1-t) via ln_1p keeps the round trip tight near t = 0.
    Ok(2.0 * ((-t).ln_1p() - t.ln()))
}

/// Inverse of [`log_snr`]: `t = sigmoid(-lambda / 2) = 1 / (1 + exp(lambda / 2))`.
pub fn time_of_log_snr(lambda: f64) -> Result<f64> {
    if !lambda.is_finite() {
        return Err(ScheduleError::NonFiniteLogSnr(lambda));
    }
    Ok(sigmoid(-0.5 * lambda))
}

/// `t_new = k t / (1 + (k - 1) t)`.
pub fn shift_time(t: f64, k: ShiftFactor) -> Result<f64> {
    check_closed(t)?;
    let k = k.get();
    // exact at both endpoints
    Ok(k * t / (k * t + (1.0 - t)))
}

/// `lambda - 2 ln k`, the log-SNR image of [`shift_time`].
pub fn shift_log_snr(lambda: f64, k: ShiftFactor) -> f64 {
    lambda + k.log_snr_offset()
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `|d lambda / d t| = 2 / (t (1 - t))`.
pub fn log_snr_jacobian(t: f64) -> f64 {
    2.0 / (t * (1.0 - t))
}

/// Rectified-flow schedule with an optional construction-time shift.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseSchedule {
    pub shift: ShiftFactor,
}

impl NoiseSchedule {
    pub fn rectified_flow() -> Self {
        Self::default()
    }

    pub fn with_shift(shift: ShiftFactor) -> Self {
        Self { shift }
    }

    /// Coefficients at the shifted time.
    pub fn coefficients(&self, t: f64) -> Result<(f64, f64)> {
        coefficients(shift_time(t, self.shift)?)
    }

    pub fn log_snr(&self, t: f64) -> Result<f64> {
        log_snr(shift_time(t, self.shift)?)
    }
}
