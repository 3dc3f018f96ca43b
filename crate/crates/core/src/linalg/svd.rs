//! One-sided (Hestenes) Jacobi SVD for square matrices.

use super::matrix::{dot, norm2, Matrix};
use super::LinalgError;

/// Sweep cap for the Jacobi iteration.
pub const MAX_SWEEPS: usize = 100;
/// A column pair is considered orthogonal once `|a_p·a_q| <= TOL·‖a_p‖‖a_q‖`.
pub const ORTHO_TOL: f64 = 1e-12;

/// `m = u · diag(sigma) · wᵀ` with `sigma` non-increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub w: Matrix,
}

impl SvdResult {
    /// `u · diag(weights) · wᵀ`
    pub fn reconstruct_with(&self, weights: &[f64]) -> Matrix {
        assert_eq!(weights.len(), self.sigma.len());
        self.u
            .scale_cols(weights)
            .matmul_t(&self.w)
            .expect("svd factors are conformable")
    }

    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_with(&self.sigma)
    }
}

/// Singular value decomposition of a square matrix.
///
/// Singular vectors follow a fixed gauge: the first entry of each `u` column
/// whose magnitude exceeds `1e-12` is non-negative, and the matching `w`
/// column is flipped with it. Zero singular values get left vectors completed
/// by Gram–Schmidt against the standard basis, so `svd(0) = (I, 0, I)`.
pub fn svd(m: &Matrix) -> Result<SvdResult, LinalgError> {
    if !m.is_square() {
        return Err(LinalgError::NotSquare(m.shape()));
    }
    if !m.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let n = m.rows();
    // Work column-wise: cols[j] is column j of A·V.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| m.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = n < 2;
    let mut sweeps = 0;
    while !converged {
        if sweeps == MAX_SWEEPS {
            return Err(LinalgError::NoConvergence { sweeps });
        }
        sweeps += 1;
        let mut rotated = false;
        // squared column norms, refreshed every sweep and updated in closed
        // form after each rotation
        let mut sq: Vec<f64> = cols.iter().map(|c| dot(c, c)).collect();
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = sq[p];
                let beta = sq[q];
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= ORTHO_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
                sq[p] = alpha - t * gamma;
                sq[q] = beta + t * gamma;
            }
        }
        converged = !rotated;
    }

    let norms: Vec<f64> = cols.iter().map(|c| norm2(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let sigma_max = norms.iter().copied().fold(0.0, f64::max);
    let zero_cut = sigma_max * (n as f64) * f64::EPSILON;

    let mut sigma = Vec::with_capacity(n);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut w_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for &j in &order {
        let s = norms[j];
        if s > zero_cut && s > 0.0 {
            sigma.push(s);
            u_cols.push(cols[j].iter().map(|x| x / s).collect());
        } else {
            sigma.push(0.0);
            u_cols.push(Vec::new());
            deficient.push(u_cols.len() - 1);
        }
        w_cols.push(v[j].clone());
    }
    complete_basis(&mut u_cols, &deficient, n);

    for (uc, wc) in u_cols.iter_mut().zip(w_cols.iter_mut()) {
        if let Some(first) = uc.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                uc.iter_mut().for_each(|x| *x = -*x);
                wc.iter_mut().for_each(|x| *x = -*x);
            }
        }
    }

    Ok(SvdResult {
        u: Matrix::from_fn(n, n, |r, c| u_cols[c][r]),
        sigma,
        w: Matrix::from_fn(n, n, |r, c| w_cols[c][r]),
    })
}

#[inline]
fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let cp = &mut lo[p];
    let cq = &mut hi[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let a = *x;
        let b = *y;
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills the empty slots listed in `missing` with unit vectors orthogonal to
/// every other column, trying standard basis vectors in order.
fn complete_basis(cols: &mut [Vec<f64>], missing: &[usize], n: usize) {
    let mut candidate = 0;
    for &slot in missing {
        loop {
            assert!(candidate < n, "basis completion ran out of candidates");
            let mut e = vec![0.0; n];
            e[candidate] = 1.0;
            candidate += 1;
            // two passes of modified Gram–Schmidt
            for _ in 0..2 {
                for (k, c) in cols.iter().enumerate() {
                    if k == slot || c.is_empty() {
                        continue;
                    }
                    let proj = dot(&e, c);
                    e.iter_mut().zip(c).for_each(|(x, y)| *x -= proj * y);
                }
            }
            let nrm = norm2(&e);
            if nrm > 1e-6 {
                e.iter_mut().for_each(|x| *x /= nrm);
                cols[slot] = e;
                break;
            }
        }
    }
}

/// Largest singular value.
pub fn spectral_norm(m: &Matrix) -> Result<f64, LinalgError> {
    if m.rows() == 0 || m.cols() == 0 {
        return Ok(0.0);
    }
    if m.is_square() {
        return Ok(svd(m)?.sigma[0]);
    }
    // σ₁(A) = sqrt(λ_max(AᵀA)); AᵀA is square and symmetric.
    let gram = m.t_matmul(m)?;
    Ok(svd(&gram)?.sigma[0].sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{random_gaussian_matrix, Rng};

    fn ortho_err(q: &Matrix) -> f64 {
        q.t_matmul(q).unwrap().max_abs_diff(&Matrix::identity(q.cols()))
    }

    #[test]
    fn diagonal_input() {
        let m = Matrix::from_diag(&[3.0, 2.0, 1.0]);
        let s = svd(&m).unwrap();
        assert_eq!(s.sigma, vec![3.0, 2.0, 1.0]);
        assert_eq!(s.u, Matrix::identity(3));
        assert_eq!(s.w, Matrix::identity(3));
    }

    #[test]
    fn unsorted_diagonal_gets_sorted() {
        let m = Matrix::from_diag(&[1.0, -5.0, 2.0]);
        let s = svd(&m).unwrap();
        assert_eq!(s.sigma, vec![5.0, 2.0, 1.0]);
        assert!(s.reconstruct().max_abs_diff(&m) < 1e-14);
    }

    #[test]
    fn zero_matrix() {
        let s = svd(&Matrix::zeros(4, 4)).unwrap();
        assert_eq!(s.sigma, vec![0.0; 4]);
        assert_eq!(s.u, Matrix::identity(4));
        assert_eq!(s.w, Matrix::identity(4));
    }

    #[test]
    fn random_reconstruction() {
        let mut rng = Rng::new(2024);
        let m = random_gaussian_matrix(&mut rng, 8, 8, 1.0);
        let s = svd(&m).unwrap();
        let rel = s.reconstruct().sub(&m).unwrap().frobenius_norm() / m.frobenius_norm();
        assert!(rel <= 1e-8, "{rel}");
        assert!(ortho_err(&s.u) < 1e-10);
        assert!(ortho_err(&s.w) < 1e-10);
        assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn rank_deficient_completes_basis() {
        let mut rng = Rng::new(9);
        let a = random_gaussian_matrix(&mut rng, 6, 2, 1.0);
        let b = random_gaussian_matrix(&mut rng, 2, 6, 1.0);
        let m = a.matmul(&b).unwrap();
        let s = svd(&m).unwrap();
        assert!(ortho_err(&s.u) < 1e-10);
        assert!(s.sigma[2] < 1e-12 * s.sigma[0]);
        assert!(s.reconstruct().max_abs_diff(&m) < 1e-12);
    }

    #[test]
    fn sign_convention_holds() {
        let mut rng = Rng::new(77);
        let m = random_gaussian_matrix(&mut rng, 7, 7, 1.0);
        let s = svd(&m).unwrap();
        for c in 0..7 {
            let col = s.u.col(c);
            let first = col.iter().find(|x| x.abs() > 1e-12).unwrap();
            assert!(*first > 0.0);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let mut m = Matrix::identity(3);
        m[(1, 1)] = f64::NAN;
        assert!(matches!(svd(&m), Err(LinalgError::NonFinite)));
        assert!(matches!(svd(&Matrix::zeros(2, 3)), Err(LinalgError::NotSquare(_))));
    }

    #[test]
    fn spectral_norm_examples() {
        assert_eq!(spectral_norm(&Matrix::from_diag(&[3.0, 2.0, 1.0])).unwrap(), 3.0);
        assert_eq!(spectral_norm(&Matrix::zeros(5, 5)).unwrap(), 0.0);
        let mut rng = Rng::new(31);
        let m = random_gaussian_matrix(&mut rng, 8, 8, 1.0);
        let s = svd(&m).unwrap();
        // independent route: power iteration on MᵀM
        let gram = m.t_matmul(&m).unwrap();
        let mut x = vec![1.0; 8];
        for _ in 0..5000 {
            let y = gram.matvec(&x).unwrap();
            let n = norm2(&y);
            x = y.iter().map(|v| v / n).collect();
        }
        let lambda = dot(&x, &gram.matvec(&x).unwrap());
        assert!((lambda.sqrt() - s.sigma[0]).abs() / s.sigma[0] < 1e-8);
        assert!((spectral_norm(&m).unwrap() - s.sigma[0]).abs() <= 1e-8 * s.sigma[0]);
    }
}
