use super::FederationError;
use crate::linalg::Rng;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn check(x: &[Vec<f64>], y: &[Vec<f64>], bandwidth: f64) -> Result<(), FederationError> {
    if x.len() < 2 || y.len() < 2 {
        return Err(FederationError::Mmd(format!(
            "unbiased estimate needs at least 2 points per set, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let dim = x[0].len();
    if x.iter().chain(y).any(|v| v.len() != dim) {
        return Err(FederationError::Mmd("vectors differ in dimension".into()));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(FederationError::Mmd(format!(
            "bandwidth must be positive, got {bandwidth}"
        )));
    }
    Ok(())
}

/// Unbiased MMD² with the Gaussian kernel `exp(−‖a−b‖²/(2h²))`.
pub fn mmd(x: &[Vec<f64>], y: &[Vec<f64>], bandwidth: f64) -> Result<f64, FederationError> {
    check(x, y, bandwidth)?;
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let k = |a: &[f64], b: &[f64]| (-gamma * sq_dist(a, b)).exp();
    let within = |s: &[Vec<f64>]| {
        let n = s.len();
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    acc += k(&s[i], &s[j]);
                }
            }
        }
        acc / (n * (n - 1)) as f64
    };
    let mut cross = 0.0;
    for a in x {
        for b in y {
            cross += k(a, b);
        }
    }
    cross /= (x.len() * y.len()) as f64;
    Ok(within(x) + within(y) - 2.0 * cross)
}

/// Median pairwise distance over the pooled sample.
pub fn median_bandwidth(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let pooled: Vec<&Vec<f64>> = x.iter().chain(y).collect();
    let mut d = Vec::with_capacity(pooled.len() * pooled.len() / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d[d.len() / 2];
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// MMD² of `(x, y)` and its null distribution from `permutations` random
/// relabellings of the pooled sample.
pub fn permutation_null(
    x: &[Vec<f64>],
    y: &[Vec<f64>],
    bandwidth: f64,
    permutations: usize,
    rng: &mut Rng,
) -> Result<(f64, Vec<f64>), FederationError> {
    let observed = mmd(x, y, bandwidth)?;
    let mut pooled: Vec<Vec<f64>> = x.iter().chain(y).cloned().collect();
    let mut null = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        rng.shuffle(&mut pooled);
        let (a, b) = pooled.split_at(x.len());
        null.push(mmd(a, b, bandwidth)?);
    }
    null.sort_by(f64::total_cmp);
    Ok((observed, null))
}

/// Empirical `q`-quantile of an ascending sample (nearest rank).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}
