use super::score::{score, ScoreNet, ScoreParam};
use super::{DiffGnoError, SpectralCoeffs, VeSchedule};
use crate::linalg::Rng;

/// Euler–Maruyama on the reverse-time VE SDE with an arbitrary score.
///
/// Steps run on the uniform grid `t_i = 1 − i/n`, `i = 0..n`:
/// `Θ ← Θ + g(t)² s(Θ, t) Δt + g(t) √Δt ξ`, with no noise on the last step.
/// Starts from `init` or from `N(0, σ_max² I)`.
pub fn reverse_sample_with<F>(
    score_fn: F,
    sched: &VeSchedule,
    dim: usize,
    n_steps: usize,
    rng: &mut Rng,
    init: Option<&[f64]>,
) -> Result<Vec<f64>, DiffGnoError>
where
    F: Fn(&[f64], f64) -> Vec<f64>,
{
    if n_steps == 0 {
        return Err(DiffGnoError::NoSteps);
    }
    let mut x: Vec<f64> = match init {
        Some(v) => {
            if v.len() != dim {
                return Err(DiffGnoError::DimMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
            v.to_vec()
        }
        None => (0..dim).map(|_| sched.sigma_max * rng.normal()).collect(),
    };
    let dt = 1.0 / n_steps as f64;
    for i in 0..n_steps {
        let t = 1.0 - i as f64 * dt;
        let g = sched.g_unchecked(t);
        let s = score_fn(&x, t);
        let drift = g * g * dt;
        for (xv, sv) in x.iter_mut().zip(&s) {
            *xv += drift * sv;
        }
        if i + 1 < n_steps {
            let diff = g * dt.sqrt();
            for xv in x.iter_mut() {
                *xv += diff * rng.normal();
            }
        }
    }
    Ok(x)
}

pub fn reverse_sample(
    net: &ScoreNet,
    sched: &VeSchedule,
    param: ScoreParam,
    n_steps: usize,
    rng: &mut Rng,
    init: Option<&SpectralCoeffs>,
) -> Result<SpectralCoeffs, DiffGnoError> {
    let dim = net.dim();
    let rank = (dim as f64).sqrt().round() as usize;
    let theta = reverse_sample_with(
        |x, t| score(net, sched, param, x, t),
        sched,
        dim,
        n_steps,
        rng,
        init.map(|c| c.theta.as_slice()),
    )?;
    Ok(SpectralCoeffs { theta, rank })
}
