//! Diffusion-based aggregation of kernel updates in a shared spectral basis.
//!
//! Client updates are projected onto the top-`r` left/right singular vectors
//! of the global kernel, giving `r × r` coefficient matrices. A small score
//! network is fitted to those coefficients by denoising score matching under
//! a variance-exploding SDE, and one reverse-time sample is mapped back to a
//! `d × d` consensus update.

mod sampler;
mod schedule;
mod score;

pub use sampler::{reverse_sample, reverse_sample_with};
pub use schedule::{forward_noise, g_of_t, sigma_of_t, VeSchedule};
pub use score::{
    dsm_loss, dsm_loss_weighted, score, score_forward, time_embedding, DsmWeight, ScoreGrads, ScoreNet, ScoreParam,
    T_FLOOR,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix, Rng};
use crate::optim::{AdamConfig, AdamW};

#[derive(Debug, Error)]
pub enum DiffGnoError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("diffusion time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("empty training batch")]
    EmptyBatch,
    #[error("no client updates to aggregate")]
    NoUpdates,
    #[error("reverse sampler needs at least one step")]
    NoSteps,
    #[error("expected dimension {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("rank {rank} exceeds basis size {dim}")]
    RankTooLarge { rank: usize, dim: usize },
    #[error("score network shape: {0}")]
    NetShape(String),
}

/// `vec(Σ)` for an `r × r` coefficient matrix (column-major).
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralCoeffs {
    pub theta: Vec<f64>,
    pub rank: usize,
}

impl SpectralCoeffs {
    pub fn zeros(rank: usize) -> Self {
        Self {
            theta: vec![0.0; rank * rank],
            rank,
        }
    }

    pub fn from_vec(theta: Vec<f64>, rank: usize) -> Result<Self, DiffGnoError> {
        if theta.len() != rank * rank {
            return Err(DiffGnoError::DimMismatch {
                expected: rank * rank,
                got: theta.len(),
            });
        }
        Ok(Self { theta, rank })
    }
}

/// `vec(U_{:,1:r}ᵀ · ΔM · W_{:,1:r})`
pub fn spectral_project(
    delta_m: &Matrix,
    u_g: &Matrix,
    w_g: &Matrix,
    rank: usize,
) -> Result<SpectralCoeffs, DiffGnoError> {
    if rank > u_g.cols() || rank > w_g.cols() {
        return Err(DiffGnoError::RankTooLarge {
            rank,
            dim: u_g.cols().min(w_g.cols()),
        });
    }
    let u = u_g.leading_cols(rank);
    let w = w_g.leading_cols(rank);
    let sigma = u.t_matmul(&delta_m.matmul(&w)?)?;
    Ok(SpectralCoeffs {
        theta: linalg::vec(&sigma),
        rank,
    })
}

/// `U_{:,1:r} · unvec(Θ) · W_{:,1:r}ᵀ`
pub fn spectral_reconstruct(theta: &SpectralCoeffs, u_g: &Matrix, w_g: &Matrix) -> Result<Matrix, DiffGnoError> {
    let r = theta.rank;
    if r > u_g.cols() || r > w_g.cols() {
        return Err(DiffGnoError::RankTooLarge {
            rank: r,
            dim: u_g.cols().min(w_g.cols()),
        });
    }
    let sigma = linalg::unvec(&theta.theta, r, r)?;
    let u = u_g.leading_cols(r);
    let w = w_g.leading_cols(r);
    Ok(u.matmul(&sigma)?.matmul_t(&w)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffGnoConfig {
    pub sched: VeSchedule,
    pub param: ScoreParam,
    pub weight: DsmWeight,
    /// reverse Euler–Maruyama steps
    pub n_rev: usize,
    /// DSM gradient steps per aggregation call
    pub dsm_steps: usize,
    pub dsm_lr: f64,
    /// noise draws per client coefficient vector in each DSM step
    pub dsm_repeats: usize,
    pub t_floor: f64,
    /// reverse samples averaged into the consensus
    pub consensus_samples: usize,
}

impl Default for DiffGnoConfig {
    fn default() -> Self {
        Self {
            sched: VeSchedule::default(),
            param: ScoreParam::Preconditioned,
            weight: DsmWeight::SigmaSquared,
            n_rev: 50,
            dsm_steps: 200,
            dsm_lr: 1e-3,
            dsm_repeats: 4,
            t_floor: T_FLOOR,
            consensus_samples: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Aggregate {
    pub delta: Matrix,
    pub consensus: SpectralCoeffs,
    /// DSM loss before the first and after the last training step
    pub dsm_loss: (f64, f64),
    pub warnings: Vec<String>,
}

/// Per-round shift/scale applied to projected updates before DSM.
#[derive(Clone, Debug, PartialEq)]
struct Standardizer {
    mean: Vec<f64>,
    scale: f64,
}

impl Standardizer {
    /// Expects `points` in canonical order so that float sums are order-free.
    fn fit(points: &[Vec<f64>]) -> Self {
        let dim = points[0].len();
        let n = points.len() as f64;
        let mut mean = vec![0.0; dim];
        for p in points {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let rms = |f: &dyn Fn(&[f64]) -> f64| (points.iter().map(|p| f(p)).sum::<f64>() / (n * dim as f64)).sqrt();
        let spread = rms(&|p| p.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum());
        let magnitude = rms(&|p| p.iter().map(|a| a * a).sum());
        if spread > 1e-9 * magnitude {
            Self { mean, scale: spread }
        } else {
            // coincident points: keep them away from the origin so the
            // network still sees a unit-scale target
            Self {
                mean: vec![0.0; dim],
                scale: magnitude,
            }
        }
    }

    fn forward(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.mean).map(|(v, m)| (v - m) / self.scale).collect()
    }

    fn inverse(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.mean).map(|(v, m)| m + self.scale * v).collect()
    }
}

/// Projects `updates`, refreshes the score network on them and samples one
/// consensus update in the broadcast subspace.
///
/// The result does not depend on the order of `updates`: coefficient vectors
/// are sorted before any randomness is consumed.
#[allow(clippy::too_many_arguments)]
pub fn aggregate(
    updates: &[Matrix],
    u_g: &Matrix,
    w_g: &Matrix,
    rank: usize,
    net: &mut ScoreNet,
    cfg: &DiffGnoConfig,
    rng: &mut Rng,
) -> Result<Aggregate, DiffGnoError> {
    if updates.is_empty() {
        return Err(DiffGnoError::NoUpdates);
    }
    if net.dim() != rank * rank {
        return Err(DiffGnoError::DimMismatch {
            expected: rank * rank,
            got: net.dim(),
        });
    }
    let mut warnings = Vec::new();
    if updates.len() == 1 {
        warnings.push("score model trained on a single client update".to_string());
    }
    let mut points: Vec<Vec<f64>> = updates
        .iter()
        .map(|m| spectral_project(m, u_g, w_g, rank).map(|c| c.theta))
        .collect::<Result<_, _>>()?;
    points.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let std = Standardizer::fit(&points);
    if std.scale == 0.0 {
        // every projected update is exactly zero
        let consensus = SpectralCoeffs::zeros(rank);
        let delta = spectral_reconstruct(&consensus, u_g, w_g)?;
        warnings.push("all projected updates are zero; consensus is zero".to_string());
        return Ok(Aggregate {
            delta,
            consensus,
            dsm_loss: (0.0, 0.0),
            warnings,
        });
    }
    let standardized: Vec<SpectralCoeffs> = points
        .iter()
        .map(|p| SpectralCoeffs {
            theta: std.forward(p),
            rank,
        })
        .collect();
    let batch: Vec<SpectralCoeffs> = standardized
        .iter()
        .flat_map(|c| std::iter::repeat_n(c.clone(), cfg.dsm_repeats.max(1)))
        .collect();

    let mut opt = AdamW::new(AdamConfig::adam(cfg.dsm_lr));
    let mut first_loss = f64::NAN;
    let mut last_loss = f64::NAN;
    for step in 0..cfg.dsm_steps {
        let (loss, grads) = dsm_loss_weighted(net, &cfg.sched, cfg.param, cfg.weight, &batch, cfg.t_floor, rng)?;
        if step == 0 {
            first_loss = loss;
        }
        last_loss = loss;
        let [g1, g2, g3, g4] = grads.blocks();
        let [p1, p2, p3, p4] = net.blocks_mut();
        opt.step(&mut [p1, p2, p3, p4], &[g1, g2, g3, g4]);
    }
    if !net.is_finite() {
        return Err(DiffGnoError::NetShape(
            "score network diverged to non-finite weights".into(),
        ));
    }

    let k = cfg.consensus_samples.max(1);
    let mut mean_sample = vec![0.0; rank * rank];
    for _ in 0..k {
        let s = reverse_sample(net, &cfg.sched, cfg.param, cfg.n_rev, rng, None)?;
        for (m, v) in mean_sample.iter_mut().zip(&s.theta) {
            *m += v / k as f64;
        }
    }
    let consensus = SpectralCoeffs {
        theta: std.inverse(&mean_sample),
        rank,
    };
    let delta = spectral_reconstruct(&consensus, u_g, w_g)?;
    Ok(Aggregate {
        delta,
        consensus,
        dsm_loss: (first_loss, last_loss),
        warnings,
    })
}
