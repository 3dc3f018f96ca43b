//! Two-layer score network with sinusoidal time embedding, plus the
//! denoising score-matching loss with hand-written backprop.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{DiffGnoError, SpectralCoeffs, VeSchedule};
use crate::linalg::{self, Matrix, Rng};

/// `x · sigmoid(x)`
#[inline]
fn silu(x: f64) -> f64 {
    x * crate::sglt::sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = crate::sglt::sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `[sin(t·2ʲπ), cos(t·2ʲπ)]` for `j = 0..dim/2`.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    for j in 0..dim / 2 {
        let w = t * (1u64 << j) as f64 * PI;
        out.push(w.sin());
        out.push(w.cos());
    }
    out
}

/// How the raw network output is turned into a score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreParam {
    /// `s(x, t) = net(x, t)`
    Direct,
    /// Unit-variance preconditioning:
    /// `s(x, t) = −x/(σ²+1) + net(x/√(σ²+1), t) / (σ√(σ²+1))`.
    /// A zero network is then the exact score of `N(0, I)` data.
    Preconditioned,
}

impl ScoreParam {
    fn input_scale(self, sigma: f64) -> f64 {
        match self {
            ScoreParam::Direct => 1.0,
            ScoreParam::Preconditioned => 1.0 / (sigma * sigma + 1.0).sqrt(),
        }
    }

    fn output_scale(self, sigma: f64) -> f64 {
        match self {
            ScoreParam::Direct => 1.0,
            ScoreParam::Preconditioned => 1.0 / (sigma * (sigma * sigma + 1.0).sqrt()),
        }
    }

    fn skip(self, sigma: f64) -> f64 {
        match self {
            ScoreParam::Direct => 0.0,
            ScoreParam::Preconditioned => -1.0 / (sigma * sigma + 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreNet {
    /// `hidden × (dim + t_embed_dim)`
    pub w1: Matrix,
    /// `1 × hidden`
    pub b1: Matrix,
    /// `dim × hidden`
    pub w2: Matrix,
    /// `1 × dim`
    pub b2: Matrix,
    t_embed_dim: usize,
}

/// Gradients with the same layout as [`ScoreNet`].
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreGrads {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl ScoreGrads {
    fn zeros_like(net: &ScoreNet) -> Self {
        Self {
            w1: Matrix::zeros(net.w1.rows(), net.w1.cols()),
            b1: Matrix::zeros(1, net.b1.cols()),
            w2: Matrix::zeros(net.w2.rows(), net.w2.cols()),
            b2: Matrix::zeros(1, net.b2.cols()),
        }
    }

    pub fn blocks(&self) -> [&Matrix; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }
}

struct Activations {
    input: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
}

impl ScoreNet {
    /// Glorot-style init; the output layer starts at zero so an untrained
    /// network contributes nothing on top of the parametrization's skip term.
    pub fn new(dim: usize, hidden: usize, t_embed_dim: usize, rng: &mut Rng) -> Self {
        assert!(t_embed_dim % 2 == 0, "time embedding dimension must be even");
        let fan_in = dim + t_embed_dim;
        let scale = (2.0 / (fan_in + hidden) as f64).sqrt();
        Self {
            w1: linalg::random_gaussian_matrix(rng, hidden, fan_in, scale),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::zeros(dim, hidden),
            b2: Matrix::zeros(1, dim),
            t_embed_dim,
        }
    }

    pub fn zeros(dim: usize, hidden: usize, t_embed_dim: usize) -> Self {
        Self {
            w1: Matrix::zeros(hidden, dim + t_embed_dim),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::zeros(dim, hidden),
            b2: Matrix::zeros(1, dim),
            t_embed_dim,
        }
    }

    /// Rebuilds a network from its four parameter blocks.
    pub fn from_parts(w1: Matrix, b1: Matrix, w2: Matrix, b2: Matrix) -> Result<Self, DiffGnoError> {
        let hidden = w1.rows();
        let dim = w2.rows();
        let ok = w1.cols() > dim
            && (w1.cols() - dim) % 2 == 0
            && b1.shape() == (1, hidden)
            && w2.cols() == hidden
            && b2.shape() == (1, dim);
        if !ok {
            return Err(DiffGnoError::NetShape(format!(
                "w1 {:?}, b1 {:?}, w2 {:?}, b2 {:?}",
                w1.shape(),
                b1.shape(),
                w2.shape(),
                b2.shape()
            )));
        }
        let t_embed_dim = w1.cols() - dim;
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            t_embed_dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.w2.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn t_embed_dim(&self) -> usize {
        self.t_embed_dim
    }

    pub fn blocks(&self) -> [&Matrix; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn blocks_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.is_finite())
    }

    fn activations(&self, x: &[f64], t: f64) -> Activations {
        let mut input = Vec::with_capacity(self.w1.cols());
        input.extend_from_slice(x);
        input.extend(time_embedding(t, self.t_embed_dim));
        let pre: Vec<f64> = (0..self.hidden())
            .map(|h| linalg::dot(self.w1.row(h), &input) + self.b1[(0, h)])
            .collect();
        let hidden = pre.iter().map(|&z| silu(z)).collect();
        Activations { input, pre, hidden }
    }

    fn output(&self, act: &Activations) -> Vec<f64> {
        (0..self.dim())
            .map(|o| linalg::dot(self.w2.row(o), &act.hidden) + self.b2[(0, o)])
            .collect()
    }

    /// The raw network `net(x, t)`.
    pub fn forward(&self, x: &[f64], t: f64) -> Vec<f64> {
        assert_eq!(x.len(), self.dim(), "score input length");
        self.output(&self.activations(x, t))
    }

    /// Accumulates `∂/∂params` of `d_out · net(x, t)` into `grads`.
    fn backward(&self, act: &Activations, d_out: &[f64], grads: &mut ScoreGrads) {
        let hidden = self.hidden();
        let mut d_hidden = vec![0.0; hidden];
        for (o, &g) in d_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads.b2[(0, o)] += g;
            let w_row = self.w2.row(o);
            let gw_row = grads.w2.row_mut(o);
            for h in 0..hidden {
                gw_row[h] += g * act.hidden[h];
                d_hidden[h] += g * w_row[h];
            }
        }
        for h in 0..hidden {
            let dz = d_hidden[h] * silu_grad(act.pre[h]);
            if dz == 0.0 {
                continue;
            }
            grads.b1[(0, h)] += dz;
            for (gw, &inp) in grads.w1.row_mut(h).iter_mut().zip(&act.input) {
                *gw += dz * inp;
            }
        }
    }
}

/// `s_ψ(Θ_t, t)` under a parametrization.
pub fn score(net: &ScoreNet, sched: &VeSchedule, param: ScoreParam, x: &[f64], t: f64) -> Vec<f64> {
    let sigma = sched.sigma_unchecked(t);
    let cin = param.input_scale(sigma);
    let cout = param.output_scale(sigma);
    let skip = param.skip(sigma);
    let xin: Vec<f64> = x.iter().map(|v| v * cin).collect();
    net.forward(&xin, t)
        .into_iter()
        .zip(x)
        .map(|(f, &xv)| skip * xv + cout * f)
        .collect()
}

/// The raw network output for a coefficient vector.
pub fn score_forward(net: &ScoreNet, theta_t: &SpectralCoeffs, t: f64) -> Vec<f64> {
    net.forward(&theta_t.theta, t)
}

/// Default lower bound on sampled diffusion times during training.
pub const T_FLOOR: f64 = 1e-3;

/// Denoising score-matching loss `mean_i ‖s(Θ_t, t) + ε/σ(t)‖²` and its exact
/// gradient.
///
/// Draw protocol, per batch element in order: one uniform `u` giving
/// `t = t_floor + (1 − t_floor)u`, then `dim` standard normals for `ε`.
pub fn dsm_loss(
    net: &ScoreNet,
    sched: &VeSchedule,
    param: ScoreParam,
    batch: &[SpectralCoeffs],
    t_floor: f64,
    rng: &mut Rng,
) -> Result<(f64, ScoreGrads), DiffGnoError> {
    dsm_loss_weighted(net, sched, param, DsmWeight::Uniform, batch, t_floor, rng)
}

/// Per-sample weight `λ(t)` on the squared DSM residual.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DsmWeight {
    /// `λ = 1`
    Uniform,
    /// `λ = σ(t)²`, which keeps every noise level at unit target scale
    SigmaSquared,
}

/// [`dsm_loss`] with a noise-level weighting. Same draw protocol.
#[allow(clippy::too_many_arguments)]
pub fn dsm_loss_weighted(
    net: &ScoreNet,
    sched: &VeSchedule,
    param: ScoreParam,
    weight: DsmWeight,
    batch: &[SpectralCoeffs],
    t_floor: f64,
    rng: &mut Rng,
) -> Result<(f64, ScoreGrads), DiffGnoError> {
    if batch.is_empty() {
        return Err(DiffGnoError::EmptyBatch);
    }
    let dim = net.dim();
    let n = batch.len() as f64;
    let mut grads = ScoreGrads::zeros_like(net);
    let mut loss = 0.0;
    for item in batch {
        if item.theta.len() != dim {
            return Err(DiffGnoError::DimMismatch {
                expected: dim,
                got: item.theta.len(),
            });
        }
        let t = t_floor + (1.0 - t_floor) * rng.uniform();
        let eps: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let sigma = sched.sigma_unchecked(t);
        let cin = param.input_scale(sigma);
        let cout = param.output_scale(sigma);
        let skip = param.skip(sigma);
        let x_t: Vec<f64> = item.theta.iter().zip(&eps).map(|(x, e)| x + sigma * e).collect();
        let xin: Vec<f64> = x_t.iter().map(|v| v * cin).collect();
        let act = net.activations(&xin, t);
        let raw = net.output(&act);
        let lambda = match weight {
            DsmWeight::Uniform => 1.0,
            DsmWeight::SigmaSquared => sigma * sigma,
        };
        let mut d_out = Vec::with_capacity(dim);
        for i in 0..dim {
            let resid = skip * x_t[i] + cout * raw[i] + eps[i] / sigma;
            loss += lambda * resid * resid;
            d_out.push(2.0 * lambda * resid * cout / n);
        }
        net.backward(&act, &d_out, &mut grads);
    }
    Ok((loss / n, grads))
}
