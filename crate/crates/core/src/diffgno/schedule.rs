use serde::{Deserialize, Serialize};

use super::{DiffGnoError, SpectralCoeffs};
use crate::linalg::Rng;

/// Variance-exploding schedule `σ(t) = σ_min (σ_max/σ_min)^t` on `t ∈ [0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VeSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for VeSchedule {
    fn default() -> Self {
        Self {
            sigma_min: 0.01,
            sigma_max: 50.0,
        }
    }
}

impl VeSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64) -> Result<Self, DiffGnoError> {
        let s = Self { sigma_min, sigma_max };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), DiffGnoError> {
        if !(self.sigma_min > 0.0 && self.sigma_max > self.sigma_min && self.sigma_max.is_finite()) {
            return Err(DiffGnoError::InvalidSchedule(format!(
                "need 0 < sigma_min < sigma_max, got ({}, {})",
                self.sigma_min, self.sigma_max
            )));
        }
        Ok(())
    }

    fn check_t(t: f64) -> Result<(), DiffGnoError> {
        if (0.0..=1.0).contains(&t) {
            Ok(())
        } else {
            Err(DiffGnoError::TimeOutOfRange(t))
        }
    }

    /// `ln(σ_max/σ_min)`
    pub fn log_ratio(&self) -> f64 {
        (self.sigma_max / self.sigma_min).ln()
    }

    pub fn sigma(&self, t: f64) -> Result<f64, DiffGnoError> {
        Self::check_t(t)?;
        Ok(self.sigma_unchecked(t))
    }

    pub(crate) fn sigma_unchecked(&self, t: f64) -> f64 {
        if t == 0.0 {
            return self.sigma_min;
        }
        if t == 1.0 {
            return self.sigma_max;
        }
        self.sigma_min * (self.sigma_max / self.sigma_min).powf(t)
    }

    /// `g(t) = σ(t) sqrt(2 ln(σ_max/σ_min))`, so that `g² = d σ²/dt`.
    pub fn g(&self, t: f64) -> Result<f64, DiffGnoError> {
        Self::check_t(t)?;
        Ok(self.g_unchecked(t))
    }

    pub(crate) fn g_unchecked(&self, t: f64) -> f64 {
        self.sigma_unchecked(t) * (2.0 * self.log_ratio()).sqrt()
    }
}

pub fn sigma_of_t(sched: &VeSchedule, t: f64) -> Result<f64, DiffGnoError> {
    sched.sigma(t)
}

pub fn g_of_t(sched: &VeSchedule, t: f64) -> Result<f64, DiffGnoError> {
    sched.g(t)
}

/// Samples the forward marginal `Θ_t = Θ₀ + σ(t)ε`; returns `(Θ_t, ε)`.
pub fn forward_noise(
    sched: &VeSchedule,
    theta0: &SpectralCoeffs,
    t: f64,
    rng: &mut Rng,
) -> Result<(SpectralCoeffs, Vec<f64>), DiffGnoError> {
    let sigma = sched.sigma(t)?;
    let eps: Vec<f64> = (0..theta0.theta.len()).map(|_| rng.normal()).collect();
    let theta = theta0.theta.iter().zip(&eps).map(|(x, e)| x + sigma * e).collect();
    Ok((
        SpectralCoeffs {
            theta,
            rank: theta0.rank,
        },
        eps,
    ))
}
