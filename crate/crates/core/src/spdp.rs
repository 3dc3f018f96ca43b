//! Subspace-projected Gaussian mechanism for kernel updates.
//!
//! The update is clipped in `ℓ₂`, then noise with scale `σ_sig` is added in
//! the column space spanned by the top-`r` left singular vectors of the
//! public global kernel and `κ·σ_sig` in its orthogonal complement. `σ_sig`
//! is calibrated by the classical Gaussian mechanism bound.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix, Rng};

#[derive(Debug, Error)]
pub enum SpdpError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("invalid privacy budget: {0}")]
    InvalidBudget(String),
    #[error("rank {rank} outside 1..={dim}")]
    RankOutOfRange { rank: usize, dim: usize },
    #[error("direction must be unit norm (got norm {0})")]
    NotUnit(f64),
    #[error("direction has length {got}, projectors are {dim}x{dim}")]
    DirectionLength { got: usize, dim: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
    pub clip_bound: f64,
    /// `σ_null / σ_sig`
    pub kappa: f64,
}

impl Default for PrivacyBudget {
    fn default() -> Self {
        Self {
            epsilon: 2.0,
            delta: 1e-5,
            clip_bound: 1.0,
            kappa: 4.0,
        }
    }
}

impl PrivacyBudget {
    /// Checks the budget. `allow_weak_null` admits `κ < 1`, which voids the
    /// DP guarantee and is only meant for the noise-allocation sweep.
    pub fn validate(&self, allow_weak_null: bool) -> Result<(), SpdpError> {
        if !(self.epsilon > 0.0) {
            return Err(SpdpError::InvalidBudget(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(SpdpError::InvalidBudget(format!(
                "delta must be in (0, 1), got {}",
                self.delta
            )));
        }
        if !(self.clip_bound > 0.0 && self.clip_bound.is_finite()) {
            return Err(SpdpError::InvalidBudget(format!(
                "clip_bound must be > 0, got {}",
                self.clip_bound
            )));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(SpdpError::InvalidBudget(format!(
                "kappa must be > 0, got {}",
                self.kappa
            )));
        }
        if self.kappa < 1.0 && !allow_weak_null {
            return Err(SpdpError::InvalidBudget(format!(
                "kappa >= 1 required (null-space noise must dominate signal noise), got {}",
                self.kappa
            )));
        }
        Ok(())
    }

    pub fn sigma_signal(&self) -> f64 {
        calibrate_sigma(self)
    }

    pub fn sigma_null(&self) -> f64 {
        self.kappa * calibrate_sigma(self)
    }
}

/// `σ_sig = C·sqrt(2 ln(1.25/δ)) / ε`
pub fn calibrate_sigma(budget: &PrivacyBudget) -> f64 {
    budget.clip_bound * (2.0 * (1.25 / budget.delta).ln()).sqrt() / budget.epsilon
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceProjectors {
    pub p_signal: Matrix,
    pub p_null: Matrix,
    pub rank: usize,
}

impl SubspaceProjectors {
    pub fn dim(&self) -> usize {
        self.p_signal.rows()
    }
}

/// `P_S = U_{1:r}U_{1:r}ᵀ`, `P_⊥ = I − P_S`.
pub fn build_projectors(u_g: &Matrix, rank: usize) -> Result<SubspaceProjectors, SpdpError> {
    let d = u_g.rows();
    if rank == 0 || rank > d || rank > u_g.cols() {
        return Err(SpdpError::RankOutOfRange { rank, dim: d });
    }
    let top = u_g.leading_cols(rank);
    let p = top.matmul_t(&top)?;
    // symmetrize away rounding so P_S is exactly symmetric
    let p_signal = Matrix::from_fn(d, d, |i, j| 0.5 * (p[(i, j)] + p[(j, i)]));
    let p_null = Matrix::identity(d).sub(&p_signal)?;
    Ok(SubspaceProjectors { p_signal, p_null, rank })
}

/// The noise matrix `P_S·Z_sig + P_⊥·Z_null` on its own.
pub fn sample_noise(proj: &SubspaceProjectors, sigma_sig: f64, sigma_null: f64, rng: &mut Rng) -> Matrix {
    let d = proj.dim();
    let z_sig = linalg::random_gaussian_matrix(rng, d, d, sigma_sig);
    let z_null = linalg::random_gaussian_matrix(rng, d, d, sigma_null);
    let mut noise = proj.p_signal.matmul(&z_sig).expect("square");
    noise
        .axpy(1.0, &proj.p_null.matmul(&z_null).expect("square"))
        .expect("square");
    noise
}

/// Clip, then add subspace-shaped Gaussian noise.
///
/// The noise draw never looks at `delta_m`, so two calls with the same RNG
/// state differ only in their clipped term.
pub fn privatize(
    delta_m: &Matrix,
    proj: &SubspaceProjectors,
    budget: &PrivacyBudget,
    rng: &mut Rng,
) -> Result<Matrix, SpdpError> {
    if delta_m.shape() != (proj.dim(), proj.dim()) {
        return Err(LinalgError::ShapeMismatch {
            op: "privatize",
            left: delta_m.shape(),
            right: proj.p_signal.shape(),
        }
        .into());
    }
    let (rows, cols) = delta_m.shape();
    let clipped = linalg::unvec(&linalg::clip_l2(&linalg::vec(delta_m), budget.clip_bound), rows, cols)?;
    let sigma_sig = calibrate_sigma(budget);
    if sigma_sig == 0.0 {
        return Ok(clipped);
    }
    let noise = sample_noise(proj, sigma_sig, budget.kappa * sigma_sig, rng);
    Ok(clipped.add(&noise)?)
}

/// Clipping only; the `no_spdp` ablation with clipping kept.
pub fn clip_only(delta_m: &Matrix, clip_bound: f64) -> Matrix {
    let (rows, cols) = delta_m.shape();
    linalg::unvec(&linalg::clip_l2(&linalg::vec(delta_m), clip_bound), rows, cols).expect("shape preserved")
}

/// Isotropic Gaussian mechanism at the same `σ_sig` (DP-FedAvg baseline).
pub fn privatize_isotropic(delta_m: &Matrix, budget: &PrivacyBudget, rng: &mut Rng) -> Matrix {
    let clipped = clip_only(delta_m, budget.clip_bound);
    let (rows, cols) = delta_m.shape();
    let noise = linalg::random_gaussian_matrix(rng, rows, cols, calibrate_sigma(budget));
    clipped.add(&noise).expect("same shape")
}

/// Analytic noise variance along a unit column-space direction:
/// `vᵀ(σ_sig² P_S + σ_null² P_⊥)v`.
pub fn noise_variance_along(
    proj: &SubspaceProjectors,
    budget: &PrivacyBudget,
    direction: &[f64],
) -> Result<f64, SpdpError> {
    if direction.len() != proj.dim() {
        return Err(SpdpError::DirectionLength {
            got: direction.len(),
            dim: proj.dim(),
        });
    }
    let n = linalg::norm2(direction);
    if (n - 1.0).abs() > 1e-10 {
        return Err(SpdpError::NotUnit(n));
    }
    let s2 = calibrate_sigma(budget).powi(2);
    let n2 = (budget.kappa * calibrate_sigma(budget)).powi(2);
    // vᵀP_⊥v = ‖P_⊥v‖² for a symmetric idempotent P_⊥; written this way the
    // null share is never negative, so κ ≥ 1 gives variance ≥ σ_sig² exactly.
    let null_share = linalg::norm2(&proj.p_null.matvec(direction)?).powi(2);
    Ok(s2 + (n2 - s2) * null_share)
}
