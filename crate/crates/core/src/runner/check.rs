//! Quick self-test of the library's core properties, for the `check`
//! command. Each property runs on a small seeded corpus.

use crate::diffgno::{self, SpectralCoeffs, VeSchedule};
use crate::federation::{self, fedavg_matrix};
use crate::linalg::{self, Matrix, Rng};
use crate::sglt::{self, FeatureMap, GateConfig};
use crate::spdp::{self, PrivacyBudget};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Property = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn corpus(n: usize, d: usize) -> Vec<Matrix> {
    (0..n as u64)
        .map(|s| linalg::random_gaussian_matrix(&mut Rng::derive(11, &[s]), d, d, 1.0))
        .collect()
}

fn hard_gate_truncation() -> Result<String, String> {
    let mut worst: f64 = 0.0;
    for (i, m) in corpus(30, 12).iter().enumerate() {
        let s = linalg::svd(m).map_err(|e| e.to_string())?.sigma;
        let r = 1 + i % 10;
        let tau = 0.5 * (s[r - 1] + s[r]);
        let g = sglt::spectral_gate(m, &GateConfig::hard(tau)).map_err(|e| e.to_string())?;
        let err = linalg::spectral_norm(&m.sub(&g.m_hat).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        worst = worst.max((err - s[r]).abs());
    }
    ensure(worst <= 1e-8, || format!("max |err - sigma_(r+1)| = {worst:e}"))?;
    Ok(format!("max deviation {worst:.1e}"))
}

fn soft_gate_identity() -> Result<String, String> {
    let gate = GateConfig::soft(1.5, 0.3);
    let mut worst: f64 = 0.0;
    for m in corpus(30, 12) {
        let g = sglt::spectral_gate(&m, &gate).map_err(|e| e.to_string())?;
        let err = linalg::spectral_norm(&m.sub(&g.m_hat).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let bound = sglt::soft_gate_error(&m, &gate).map_err(|e| e.to_string())?;
        worst = worst.max((err - bound).abs());
    }
    ensure(worst <= 1e-8, || format!("max deviation {worst:e}"))?;
    Ok(format!("max deviation {worst:.1e}"))
}

fn kernel_size_free() -> Result<String, String> {
    let mut rng = Rng::new(3);
    let fm = FeatureMap::new(16, 8, &mut rng);
    let k = linalg::random_gaussian_matrix(&mut rng, 8, 8, 0.3);
    let v = linalg::random_gaussian_matrix(&mut rng, 8, 8, 1.0);
    let one = sglt::semantic_kernel(&fm, &k, &v).map_err(|e| e.to_string())?;
    let stack = |m: &Matrix| Matrix::from_fn(2 * m.rows(), m.cols(), |i, j| m[(i % m.rows(), j)]);
    let two = sglt::semantic_kernel(&fm, &stack(&k), &stack(&v)).map_err(|e| e.to_string())?;
    let diff = two.max_abs_diff(&one.scale(2.0));
    ensure(one.shape() == (16, 8) && two.shape() == (16, 8), || {
        "shape depends on L".into()
    })?;
    ensure(diff <= 1e-12, || format!("duplicated kernel off by {diff:e}"))?;
    Ok(format!("shape {:?}, duplication error {diff:.1e}", one.shape()))
}

fn dp_calibration() -> Result<String, String> {
    let s = spdp::calibrate_sigma(&PrivacyBudget::default());
    ensure((s - 2.42238).abs() <= 1e-3, || format!("sigma_sig = {s}"))?;
    for eps in [0.5, 1.0, 4.0, 8.0] {
        let b = PrivacyBudget {
            epsilon: eps,
            ..PrivacyBudget::default()
        };
        let ratio = spdp::calibrate_sigma(&b) * eps / (s * 2.0);
        ensure((ratio - 1.0).abs() <= 1e-12, || {
            format!("1/eps scaling off at eps = {eps}")
        })?;
    }
    Ok(format!("sigma_sig = {s:.5}"))
}

fn covariance_dominance() -> Result<String, String> {
    let mut rng = Rng::new(5);
    let u = linalg::random_orthonormal(&mut rng, 8, 8);
    let proj = spdp::build_projectors(&u, 3).map_err(|e| e.to_string())?;
    let budget = PrivacyBudget::default();
    let s2 = spdp::calibrate_sigma(&budget).powi(2);
    for _ in 0..200 {
        let v = linalg::gaussian(&mut rng, 8, 1.0);
        let n = linalg::norm2(&v);
        let dir: Vec<f64> = v.iter().map(|x| x / n).collect();
        let var = spdp::noise_variance_along(&proj, &budget, &dir).map_err(|e| e.to_string())?;
        ensure(var >= s2, || format!("variance {var} below sigma_sig^2 {s2}"))?;
    }
    Ok("200 directions".into())
}

fn ve_schedule() -> Result<String, String> {
    let s = VeSchedule::default();
    let lo = s.sigma(0.0).map_err(|e| e.to_string())?;
    let hi = s.sigma(1.0).map_err(|e| e.to_string())?;
    ensure(lo == 0.01 && hi == 50.0, || format!("sigma(0) = {lo}, sigma(1) = {hi}"))?;
    let mut worst: f64 = 0.0;
    for i in 1..100 {
        let t = i as f64 / 100.0;
        let h = 1e-6;
        let ds2 = (s.sigma(t + h).unwrap().powi(2) - s.sigma(t - h).unwrap().powi(2)) / (2.0 * h);
        let g2 = s.g(t).map_err(|e| e.to_string())?.powi(2);
        worst = worst.max((g2 - ds2).abs() / ds2);
    }
    ensure(worst <= 1e-4, || format!("g^2 vs d sigma^2/dt: {worst:e}"))?;
    Ok(format!("max relative error {worst:.1e}"))
}

fn spectral_roundtrip() -> Result<String, String> {
    let mut rng = Rng::new(7);
    let (u, w, _) =
        federation::global_basis(&linalg::random_gaussian_matrix(&mut rng, 10, 10, 1.0)).map_err(|e| e.to_string())?;
    let theta = SpectralCoeffs::from_vec(linalg::gaussian(&mut rng, 16, 1.0), 4).map_err(|e| e.to_string())?;
    let m = diffgno::spectral_reconstruct(&theta, &u, &w).map_err(|e| e.to_string())?;
    let back = diffgno::spectral_project(&m, &u, &w, 4).map_err(|e| e.to_string())?;
    let err = theta
        .theta
        .iter()
        .zip(&back.theta)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let rank = linalg::numerical_rank(&m, 1e-9).map_err(|e| e.to_string())?;
    ensure(err <= 1e-8, || format!("roundtrip error {err:e}"))?;
    ensure(rank <= 4, || format!("reconstruction has rank {rank}"))?;
    Ok(format!("error {err:.1e}, rank {rank}"))
}

fn fedavg_weights() -> Result<String, String> {
    let a = Matrix::from_rows(&[vec![1.0, 2.0]]).map_err(|e| e.to_string())?;
    let b = Matrix::from_rows(&[vec![3.0, 6.0]]).map_err(|e| e.to_string())?;
    let avg = fedavg_matrix(&[&a, &b], &[1.0, 3.0]).map_err(|e| e.to_string())?;
    ensure(avg.as_slice() == [2.5, 5.0], || format!("got {:?}", avg.as_slice()))?;
    let same = fedavg_matrix(&[&a, &a, &a], &[1.0, 5.0, 2.0]).map_err(|e| e.to_string())?;
    ensure(same == a, || "identical deltas did not average to themselves".into())?;
    Ok("weighted mean exact".into())
}

fn gating_benefit() -> Result<String, String> {
    for seed in 0..30 {
        let mut rng = Rng::derive(13, &[seed]);
        let d = 10;
        let q = linalg::random_orthonormal(&mut rng, d, d);
        let p = linalg::random_orthonormal(&mut rng, d, d);
        let diag: Vec<f64> = (0..d).map(|i| if i < 3 { 5.0 + i as f64 } else { 0.0 }).collect();
        let signal = q.scale_cols(&diag).matmul_t(&p).map_err(|e| e.to_string())?;
        let noise_diag: Vec<f64> = (0..d).map(|i| if i < 3 { 0.0 } else { 0.3 }).collect();
        let noise = q.scale_cols(&noise_diag).matmul_t(&p).map_err(|e| e.to_string())?;
        let m = signal.add(&noise).map_err(|e| e.to_string())?;
        let g = sglt::spectral_gate(&m, &GateConfig::hard(1.0)).map_err(|e| e.to_string())?;
        let before = m.sub(&signal).map_err(|e| e.to_string())?.frobenius_norm();
        let after = g.m_hat.sub(&signal).map_err(|e| e.to_string())?.frobenius_norm();
        ensure(after < before, || format!("seed {seed}: {after} >= {before}"))?;
    }
    Ok("30/30 trials".into())
}

fn mmd_null() -> Result<String, String> {
    let mut rng = Rng::new(17);
    let cloud = |rng: &mut Rng, shift: f64| -> Vec<Vec<f64>> {
        (0..30)
            .map(|_| linalg::gaussian(rng, 2, 1.0).into_iter().map(|v| v + shift).collect())
            .collect()
    };
    let x = cloud(&mut rng, 0.0);
    let y = cloud(&mut rng, 3.0);
    let bw = federation::median_bandwidth(&x, &y);
    let (obs, null) = federation::permutation_null(&x, &y, bw, 100, &mut rng).map_err(|e| e.to_string())?;
    let q99 = federation::quantile(&null, 0.99);
    ensure(obs > q99, || format!("separated sets: {obs} <= q99 {q99}"))?;
    Ok(format!("MMD^2 {obs:.3} > q99 {q99:.3}"))
}

const PROPERTIES: &[(&str, Property)] = &[
    ("hard gate equals rank-r truncation", hard_gate_truncation),
    ("soft gate spectral error identity", soft_gate_identity),
    ("kernel is sequence-length free", kernel_size_free),
    ("Gaussian mechanism calibration", dp_calibration),
    ("subspace noise dominates isotropic", covariance_dominance),
    ("VE schedule endpoints and diffusion", ve_schedule),
    ("spectral project/reconstruct", spectral_roundtrip),
    ("weighted FedAvg", fedavg_weights),
    ("hard gating removes planted noise", gating_benefit),
    ("MMD separates shifted clouds", mmd_null),
];

pub fn run_checks() -> Vec<CheckOutcome> {
    PROPERTIES
        .iter()
        .map(|&(name, f)| {
            let (passed, detail) = match f() {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckOutcome { name, passed, detail }
        })
        .collect()
}
