//! Dense linear algebra, SVD and seeded randomness shared by every other module.

mod io;
mod matrix;
mod rng;
mod svd;

pub use io::{read_matrix, write_matrix, MATRIX_FORMAT_VERSION, MATRIX_MAGIC};
pub use matrix::{dot, norm2, Matrix};
pub use rng::{derive_seed, Rng};
pub use svd::{spectral_norm, svd, SvdResult, MAX_SWEEPS, ORTHO_TOL};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("expected {expected} elements, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("matrix must be square, got {0:?}")]
    NotSquare((usize, usize)),
    #[error("input contains NaN or infinite entries")]
    NonFinite,
    #[error("jacobi svd did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
    #[error("bad matrix file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Column-major vectorization.
pub fn vec(m: &Matrix) -> Vec<f64> {
    let (rows, cols) = m.shape();
    let mut out = Vec::with_capacity(rows * cols);
    for c in 0..cols {
        for r in 0..rows {
            out.push(m[(r, c)]);
        }
    }
    out
}

/// Inverse of [`vec`].
pub fn unvec(v: &[f64], rows: usize, cols: usize) -> Result<Matrix, LinalgError> {
    if v.len() != rows * cols {
        return Err(LinalgError::LengthMismatch {
            expected: rows * cols,
            actual: v.len(),
        });
    }
    Ok(Matrix::from_fn(rows, cols, |r, c| v[c * rows + r]))
}

/// `v · min(1, bound / ‖v‖₂)`. Vectors already inside the ball are returned unchanged.
pub fn clip_l2(v: &[f64], bound: f64) -> Vec<f64> {
    assert!(bound > 0.0, "clip bound must be positive");
    let n = norm2(v);
    if n <= bound {
        return v.to_vec();
    }
    let mut s = bound / n;
    loop {
        let out: Vec<f64> = v.iter().map(|x| x * s).collect();
        // rounding can leave the result an ulp outside the ball; shrink until
        // it is inside so that clipping twice is a no-op
        if norm2(&out) <= bound {
            return out;
        }
        s *= 1.0 - f64::EPSILON;
    }
}

/// `n` i.i.d. draws from `N(0, sigma²)`.
pub fn gaussian(rng: &mut Rng, n: usize, sigma: f64) -> Vec<f64> {
    assert!(sigma >= 0.0, "sigma must be non-negative");
    if sigma == 0.0 {
        return vec![0.0; n];
    }
    (0..n).map(|_| sigma * rng.normal()).collect()
}

pub fn random_gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize, sigma: f64) -> Matrix {
    Matrix::from_vec(rows, cols, gaussian(rng, rows * cols, sigma)).expect("length matches")
}

/// A `n × k` matrix with orthonormal columns (Gram–Schmidt on Gaussian draws).
pub fn random_orthonormal(rng: &mut Rng, n: usize, k: usize) -> Matrix {
    assert!(k <= n);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut v = gaussian(rng, n, 1.0);
        for _ in 0..2 {
            for c in &cols {
                let p = dot(&v, c);
                v.iter_mut().zip(c).for_each(|(x, y)| *x -= p * y);
            }
        }
        let nrm = norm2(&v);
        if nrm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= nrm);
            cols.push(v);
        }
    }
    Matrix::from_fn(n, k, |r, c| cols[c][r])
}

/// Number of singular values above `tol · σ₁` (absolute `tol` when σ₁ ≤ 1).
pub fn numerical_rank(m: &Matrix, tol: f64) -> Result<usize, LinalgError> {
    let s = svd(m)?;
    let cut = tol * s.sigma[0].max(1.0);
    Ok(s.sigma.iter().filter(|&&x| x > cut).count())
}
