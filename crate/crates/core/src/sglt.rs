//! Spectral-gated linear attention.
//!
//! Tokens are lifted with positive random features, the `m × d` kernel
//! `φ(K)ᵀV` (plus a learned bias kernel `θ_M`) is filtered on its singular
//! spectrum, and the result is applied with the usual linear-attention
//! normalization `φ(Q)M̂ / (φ(Q)φ(K)ᵀ1 + eps)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix, Rng, SvdResult};

pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SgltError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("row count mismatch: keys have {keys} rows, values have {values}")]
    RowMismatch { keys: usize, values: usize },
    #[error("input has {got} columns, feature map expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("semantic kernel path needs num_features == dim, got m={m}, d={d}")]
    NonSquareKernel { m: usize, d: usize },
    #[error("invalid gate: {0}")]
    InvalidGate(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    FavorPositive,
}

/// Positive random features for the softmax kernel:
/// `φ(x) = exp(Wx − ‖x‖²/2) / √m` with i.i.d. standard Gaussian rows in `W`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    projection: Matrix,
    kind: FeatureKind,
}

impl FeatureMap {
    pub fn new(num_features: usize, dim: usize, rng: &mut Rng) -> Self {
        Self {
            projection: linalg::random_gaussian_matrix(rng, num_features, dim, 1.0),
            kind: FeatureKind::FavorPositive,
        }
    }

    pub fn from_projection(projection: Matrix) -> Self {
        Self {
            projection,
            kind: FeatureKind::FavorPositive,
        }
    }

    pub fn num_features(&self) -> usize {
        self.projection.rows()
    }

    pub fn dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn projection(&self) -> &Matrix {
        &self.projection
    }

    /// Maps `L × d` tokens to `L × m` strictly positive features.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix, SgltError> {
        if x.cols() != self.dim() {
            return Err(SgltError::DimMismatch {
                expected: self.dim(),
                got: x.cols(),
            });
        }
        let scale = 1.0 / (self.num_features() as f64).sqrt();
        let mut proj = x.matmul_t(&self.projection)?;
        for r in 0..x.rows() {
            let half_sq = 0.5 * linalg::dot(x.row(r), x.row(r));
            for v in proj.row_mut(r) {
                *v = (*v - half_sq).exp() * scale;
            }
        }
        Ok(proj)
    }

    /// Pulls `dΦ` back to the inputs: `dxᵢ = Wᵀ(dΦᵢ ⊙ Φᵢ) − (dΦᵢ·Φᵢ) xᵢ`.
    fn backward(&self, x: &Matrix, phi: &Matrix, d_phi: &Matrix) -> Matrix {
        let weighted = Matrix::from_fn(phi.rows(), phi.cols(), |r, c| phi[(r, c)] * d_phi[(r, c)]);
        let mut dx = weighted.matmul(&self.projection).expect("shapes fixed by forward");
        for r in 0..x.rows() {
            let s: f64 = weighted.row(r).iter().sum();
            for (d, &xv) in dx.row_mut(r).iter_mut().zip(x.row(r)) {
                *d -= s * xv;
            }
        }
        dx
    }
}

pub fn feature_map(fm: &FeatureMap, x: &Matrix) -> Result<Matrix, SgltError> {
    fm.apply(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// `g(σ) = sigmoid((σ − τ)/β)`
    Soft,
    /// `g(σ) = 1[σ > τ]`
    Hard,
    /// `g ≡ 1` (gating ablated)
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub mode: GateMode,
    pub tau: f64,
    pub beta: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self::soft(0.05, 0.01)
    }
}

impl GateConfig {
    pub fn soft(tau: f64, beta: f64) -> Self {
        Self {
            mode: GateMode::Soft,
            tau,
            beta,
        }
    }

    pub fn hard(tau: f64) -> Self {
        Self {
            mode: GateMode::Hard,
            tau,
            beta: 1.0,
        }
    }

    pub fn off() -> Self {
        Self {
            mode: GateMode::Off,
            tau: 0.0,
            beta: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), SgltError> {
        if self.mode == GateMode::Soft && !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(SgltError::InvalidGate(format!(
                "soft gate needs beta > 0, got {}",
                self.beta
            )));
        }
        if self.tau.is_nan() {
            return Err(SgltError::InvalidGate("tau is NaN".into()));
        }
        Ok(())
    }

    pub fn gain(&self, sigma: f64) -> f64 {
        match self.mode {
            GateMode::Soft => sigmoid((sigma - self.tau) / self.beta),
            GateMode::Hard => {
                if sigma > self.tau {
                    1.0
                } else {
                    0.0
                }
            }
            GateMode::Off => 1.0,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// The learned bias kernel `θ_M` (square, `d × d`).
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticKernel {
    pub theta_m: Matrix,
}

impl SemanticKernel {
    pub fn new(theta_m: Matrix) -> Result<Self, SgltError> {
        if !theta_m.is_square() {
            return Err(LinalgError::NotSquare(theta_m.shape()).into());
        }
        Ok(Self { theta_m })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            theta_m: Matrix::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.theta_m.rows()
    }
}

/// `φ(K)ᵀV`, shape `m × d` whatever the sequence length.
pub fn semantic_kernel(fm: &FeatureMap, k: &Matrix, v: &Matrix) -> Result<Matrix, SgltError> {
    if k.rows() != v.rows() {
        return Err(SgltError::RowMismatch {
            keys: k.rows(),
            values: v.rows(),
        });
    }
    Ok(fm.apply(k)?.t_matmul(v)?)
}

#[derive(Clone, Debug)]
pub struct GatedKernel {
    pub m_hat: Matrix,
    /// `F = U diag(g(σ)) Uᵀ`, so that `m_hat = F · m`.
    pub filter: Matrix,
    pub gains: Vec<f64>,
    pub svd: SvdResult,
}

pub fn spectral_gate(m: &Matrix, gate: &GateConfig) -> Result<GatedKernel, SgltError> {
    gate.validate()?;
    let svd = linalg::svd(m)?;
    let gains: Vec<f64> = svd.sigma.iter().map(|&s| gate.gain(s)).collect();
    let filtered: Vec<f64> = gains.iter().zip(&svd.sigma).map(|(g, s)| g * s).collect();
    let m_hat = svd.reconstruct_with(&filtered);
    let filter = svd.u.scale_cols(&gains).matmul_t(&svd.u)?;
    Ok(GatedKernel {
        m_hat,
        filter,
        gains,
        svd,
    })
}

/// `‖M − M̂‖₂ = maxᵢ (1 − g(σᵢ))σᵢ`.
pub fn soft_gate_error(m: &Matrix, gate: &GateConfig) -> Result<f64, SgltError> {
    gate.validate()?;
    let svd = linalg::svd(m)?;
    Ok(svd.sigma.iter().map(|&s| (1.0 - gate.gain(s)) * s).fold(0.0, f64::max))
}

#[derive(Clone, Debug)]
pub struct SgltOutput {
    pub h_prime: Matrix,
    pub filtered_kernel: Matrix,
    pub filter: Matrix,
}

/// Where the spectral filter comes from on a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum FilterSource<'a> {
    /// Gate the SVD of the current total kernel.
    Gate(&'a GateConfig),
    /// Reuse a previously recorded filter `F`.
    Frozen(&'a Matrix),
}

/// Intermediates kept for the backward pass.
#[derive(Clone, Debug)]
pub struct SgltTrace {
    phi_q: Matrix,
    phi_k: Matrix,
    key_sum: Vec<f64>,
    numer: Matrix,
    denom: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SgltGrads {
    pub d_theta_m: Matrix,
    pub d_q: Matrix,
    pub d_k: Matrix,
    pub d_v: Matrix,
}

pub fn sglt_forward(
    fm: &FeatureMap,
    kernel: &SemanticKernel,
    gate: &GateConfig,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    eps: f64,
) -> Result<SgltOutput, SgltError> {
    sglt_forward_traced(fm, kernel, FilterSource::Gate(gate), q, k, v, eps).map(|(out, _)| out)
}

/// Forward pass that also returns the trace needed by [`sglt_backward`].
pub fn sglt_forward_traced(
    fm: &FeatureMap,
    kernel: &SemanticKernel,
    filter: FilterSource<'_>,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    eps: f64,
) -> Result<(SgltOutput, SgltTrace), SgltError> {
    assert!(eps > 0.0, "eps must be positive");
    let d = kernel.dim();
    if fm.num_features() != d || fm.dim() != d {
        return Err(SgltError::NonSquareKernel {
            m: fm.num_features(),
            d: fm.dim(),
        });
    }
    if v.cols() != d {
        return Err(SgltError::DimMismatch {
            expected: d,
            got: v.cols(),
        });
    }
    let phi_q = fm.apply(q)?;
    let phi_k = fm.apply(k)?;
    if k.rows() != v.rows() {
        return Err(SgltError::RowMismatch {
            keys: k.rows(),
            values: v.rows(),
        });
    }
    let total = kernel.theta_m.add(&phi_k.t_matmul(v)?)?;
    let (m_hat, filter) = match filter {
        FilterSource::Gate(gate) => {
            let g = spectral_gate(&total, gate)?;
            (g.m_hat, g.filter)
        }
        FilterSource::Frozen(f) => (f.matmul(&total)?, f.clone()),
    };
    let numer = phi_q.matmul(&m_hat)?;
    let key_sum: Vec<f64> = (0..phi_k.cols())
        .map(|c| (0..phi_k.rows()).map(|r| phi_k[(r, c)]).sum())
        .collect();
    let denom: Vec<f64> = (0..phi_q.rows())
        .map(|r| linalg::dot(phi_q.row(r), &key_sum) + eps)
        .collect();
    let h_prime = Matrix::from_fn(numer.rows(), numer.cols(), |r, c| numer[(r, c)] / denom[r]);
    Ok((
        SgltOutput {
            h_prime,
            filtered_kernel: m_hat,
            filter,
        },
        SgltTrace {
            phi_q,
            phi_k,
            key_sum,
            numer,
            denom,
        },
    ))
}

/// Exact gradients of a scalar loss through one forward pass with the
/// filter `F` held fixed (no derivative through the SVD).
pub fn sglt_backward(
    fm: &FeatureMap,
    out: &SgltOutput,
    trace: &SgltTrace,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    d_h: &Matrix,
) -> SgltGrads {
    let (l_q, d) = d_h.shape();
    let mut d_numer = Matrix::zeros(l_q, d);
    let mut d_denom = vec![0.0; l_q];
    for r in 0..l_q {
        let den = trace.denom[r];
        let mut acc = 0.0;
        for c in 0..d {
            let g = d_h[(r, c)];
            d_numer[(r, c)] = g / den;
            acc += g * trace.numer[(r, c)];
        }
        d_denom[r] = -acc / (den * den);
    }

    // numer = Φq M̂ ; denom = Φq s + eps
    let mut d_phi_q = d_numer.matmul_t(&out.filtered_kernel).expect("shapes");
    for r in 0..l_q {
        for (x, &s) in d_phi_q.row_mut(r).iter_mut().zip(&trace.key_sum) {
            *x += d_denom[r] * s;
        }
    }
    let d_m_hat = trace.phi_q.t_matmul(&d_numer).expect("shapes");
    let d_total = out.filter.t_matmul(&d_m_hat).expect("shapes");

    // total = θ + Φkᵀ V ; s = Φkᵀ 1
    let d_key_sum: Vec<f64> = (0..trace.phi_q.cols())
        .map(|c| (0..l_q).map(|r| trace.phi_q[(r, c)] * d_denom[r]).sum())
        .collect();
    let mut d_phi_k = v.matmul_t(&d_total).expect("shapes");
    for r in 0..d_phi_k.rows() {
        for (x, &s) in d_phi_k.row_mut(r).iter_mut().zip(&d_key_sum) {
            *x += s;
        }
    }
    let d_v = trace.phi_k.matmul(&d_total).expect("shapes");

    SgltGrads {
        d_q: fm.backward(q, &trace.phi_q, &d_phi_q),
        d_k: fm.backward(k, &trace.phi_k, &d_phi_k),
        d_v,
        d_theta_m: d_total,
    }
}
