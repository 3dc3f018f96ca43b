//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! Run alone with `cargo test -p specfed-core --test acceptance`.

use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use specfed::diffgno::{self, DiffGnoConfig, ScoreNet, ScoreParam, SpectralCoeffs, VeSchedule};
use specfed::federation::{self, Ablations, ClientUpdate, Federation, GlobalModel};
use specfed::linalg::{self, Matrix, Rng};
use specfed::runner::{self, Experiment, Preset, RunConfig};
use specfed::sglt::{self, FeatureMap, GateConfig};
use specfed::spdp::{self, PrivacyBudget};
use specfed::tasks::Blocks;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)])
}

/// Singular values, descending, from nalgebra.
fn oracle_sigma(m: &Matrix) -> Vec<f64> {
    let mut s: Vec<f64> = na(m).singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

fn oracle_spectral_norm(m: &Matrix) -> f64 {
    oracle_sigma(m)[0]
}

fn corpus() -> Vec<Matrix> {
    (0..100u64)
        .map(|s| linalg::random_gaussian_matrix(&mut Rng::derive(2024, &[s]), 16, 16, 1.0))
        .collect()
}

fn c1_eckart_young() -> Outcome {
    let mut worst: f64 = 0.0;
    for (i, m) in corpus().iter().enumerate() {
        let s = oracle_sigma(m);
        let r = 1 + i % 15;
        let tau = 0.5 * (s[r - 1] + s[r]);
        let g = sglt::spectral_gate(m, &GateConfig::hard(tau)).map_err(|e| e.to_string())?;
        let err = oracle_spectral_norm(&m.sub(&g.m_hat).unwrap());
        worst = worst.max((err - s[r]).abs());
    }
    ensure(worst <= 1e-8, || format!("max |‖M−M̂‖₂ − σ_(r+1)| = {worst:.2e}"))?;
    Ok(format!("100 matrices, max deviation {worst:.1e}"))
}

fn c2_soft_gate_error() -> Outcome {
    let mut worst: f64 = 0.0;
    for (i, m) in corpus().iter().enumerate() {
        let s = oracle_sigma(m);
        let tau = s[4 + i % 8];
        let beta = 0.05 + 0.1 * (i % 5) as f64;
        let g = sglt::spectral_gate(m, &GateConfig::soft(tau, beta)).map_err(|e| e.to_string())?;
        let err = oracle_spectral_norm(&m.sub(&g.m_hat).unwrap());
        let bound = s
            .iter()
            .map(|&x| (1.0 - 1.0 / (1.0 + (-(x - tau) / beta).exp())) * x)
            .fold(0.0, f64::max);
        worst = worst.max((err - bound).abs());
    }
    ensure(worst <= 1e-8, || format!("max deviation {worst:.2e}"))?;
    Ok(format!("100 matrices, max deviation {worst:.1e}"))
}

fn c3_size_free() -> Outcome {
    let mut rng = Rng::new(31);
    let d = 8;
    let fm = FeatureMap::new(32, d, &mut rng);
    let mut shapes = Vec::new();
    let mut worst: f64 = 0.0;
    for len in [8, 512] {
        let k = linalg::random_gaussian_matrix(&mut rng, len, d, 0.3);
        let v = linalg::random_gaussian_matrix(&mut rng, len, d, 1.0);
        let m = sglt::semantic_kernel(&fm, &k, &v).map_err(|e| e.to_string())?;
        shapes.push(m.shape());
        let twice = |x: &Matrix| Matrix::from_fn(2 * len, d, |i, j| x[(i % len, j)]);
        let m2 = sglt::semantic_kernel(&fm, &twice(&k), &twice(&v)).map_err(|e| e.to_string())?;
        let scale = m.as_slice().iter().fold(1.0f64, |a, x| a.max(x.abs()));
        worst = worst.max(m2.max_abs_diff(&m.scale(2.0)) / scale);
    }
    ensure(shapes[0] == shapes[1], || format!("shapes {shapes:?}"))?;
    ensure(worst <= 1e-12, || format!("duplication error {worst:.2e}"))?;
    Ok(format!(
        "shape {:?} for L=8 and 512, duplication error {worst:.1e}",
        shapes[0]
    ))
}

fn c4_favor() -> Outcome {
    let d = 8;
    let mut total = 0.0;
    for s in 0..100u64 {
        let mut rng = Rng::derive(404, &[s]);
        let unit = |rng: &mut Rng| {
            let v = linalg::gaussian(rng, d, 1.0);
            let r = rng.uniform();
            let n = linalg::norm2(&v);
            v.into_iter().map(|x| x * r / n).collect::<Vec<f64>>()
        };
        let x = unit(&mut rng);
        let y = unit(&mut rng);
        let fm = FeatureMap::new(4096, d, &mut rng);
        let phi = fm
            .apply(&Matrix::from_rows(&[x.clone(), y.clone()]).unwrap())
            .map_err(|e| e.to_string())?;
        let approx = linalg::dot(phi.row(0), phi.row(1));
        let exact = linalg::dot(&x, &y).exp();
        total += (approx - exact).abs() / exact;
    }
    let mean = total / 100.0;
    ensure(mean <= 0.05, || format!("mean relative error {mean:.4}"))?;
    Ok(format!("mean relative error {:.2}%", 100.0 * mean))
}

fn c5_calibration() -> Outcome {
    let base = PrivacyBudget {
        epsilon: 2.0,
        delta: 1e-5,
        clip_bound: 1.0,
        kappa: 4.0,
    };
    let s = spdp::calibrate_sigma(&base);
    ensure((s - 2.42238).abs() <= 1e-3, || format!("σ_sig = {s}"))?;
    let oracle = |eps: f64| (2.0 * (1.25e5f64).ln()).sqrt() / eps;
    for eps in [0.5, 1.0, 2.0, 4.0, 8.0] {
        let got = spdp::calibrate_sigma(&PrivacyBudget { epsilon: eps, ..base });
        ensure(
            (got * eps - s * 2.0).abs() <= 1e-12 && (got - oracle(eps)).abs() <= 1e-12,
            || format!("ε = {eps}: σ = {got}"),
        )?;
    }
    Ok(format!("σ_sig = {s:.5}, 1/ε scaling exact on {{0.5,1,2,4,8}}"))
}

/// Empirical variance of `vᵀN` over noise draws, pooled over the columns of `N`.
fn empirical_variance(draws: &[Matrix], v: &[f64]) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for m in draws {
        for c in 0..m.cols() {
            let proj: f64 = (0..m.rows()).map(|r| v[r] * m[(r, c)]).sum();
            acc += proj * proj;
            n += 1;
        }
    }
    acc / n as f64
}

fn unit_dirs(rng: &mut Rng, d: usize, n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v = linalg::gaussian(rng, d, 1.0);
            let s = linalg::norm2(&v);
            v.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

fn c6_covariance() -> Outcome {
    let d = 8;
    let r = 3;
    let mut rng = Rng::new(66);
    let u = linalg::random_orthonormal(&mut rng, d, d);
    let proj = spdp::build_projectors(&u, r).map_err(|e| e.to_string())?;
    let budget = PrivacyBudget::default();
    let s2 = spdp::calibrate_sigma(&budget).powi(2);
    for v in unit_dirs(&mut rng, d, 1000) {
        let var = spdp::noise_variance_along(&proj, &budget, &v).map_err(|e| e.to_string())?;
        ensure(var >= s2, || format!("analytic variance {var} < σ_sig² {s2}"))?;
    }
    let zero = Matrix::zeros(d, d);
    let draws: Vec<Matrix> = (0..100_000)
        .map(|_| spdp::privatize(&zero, &proj, &budget, &mut rng).unwrap())
        .collect();
    let mut tested: Vec<Vec<f64>> = (0..d).map(|j| u.col(j)).collect();
    tested.extend(unit_dirs(&mut rng, d, 4));
    let mut worst: f64 = 0.0;
    for v in &tested {
        let signal_share: f64 = (0..r).map(|j| linalg::dot(&u.col(j), v).powi(2)).sum();
        let expected = s2 * signal_share + budget.kappa.powi(2) * s2 * (1.0 - signal_share);
        let got = empirical_variance(&draws, v);
        worst = worst.max((got / expected - 1.0).abs());
    }
    ensure(worst <= 0.03, || format!("worst relative variance error {worst:.4}"))?;
    Ok(format!(
        "1000 directions dominate; {} tested directions within {:.2}%",
        tested.len(),
        100.0 * worst
    ))
}

fn c7_isotropic() -> Outcome {
    let d = 6;
    let mut rng = Rng::new(77);
    let u = linalg::random_orthonormal(&mut rng, d, d);
    let proj = spdp::build_projectors(&u, d).map_err(|e| e.to_string())?;
    let budget = PrivacyBudget {
        kappa: 1.0,
        ..PrivacyBudget::default()
    };
    let s2 = spdp::calibrate_sigma(&budget).powi(2);
    let zero = Matrix::zeros(d, d);
    let draws: Vec<Matrix> = (0..50_000)
        .map(|_| spdp::privatize(&zero, &proj, &budget, &mut rng).unwrap())
        .collect();
    let iso: Vec<Matrix> = (0..50_000)
        .map(|_| spdp::privatize_isotropic(&zero, &budget, &mut rng))
        .collect();
    let mut dirs: Vec<Vec<f64>> = (0..d)
        .map(|j| (0..d).map(|i| f64::from(u8::from(i == j))).collect())
        .collect();
    dirs.extend(unit_dirs(&mut rng, d, 6));
    let mut worst: f64 = 0.0;
    for v in &dirs {
        worst = worst.max((empirical_variance(&draws, v) / s2 - 1.0).abs());
        worst = worst.max((empirical_variance(&iso, v) / s2 - 1.0).abs());
    }
    ensure(worst <= 0.03, || format!("worst relative variance error {worst:.4}"))?;
    Ok(format!(
        "{} directions within {:.2}% of σ_sig²",
        dirs.len(),
        100.0 * worst
    ))
}

fn c8_schedule() -> Outcome {
    let s = VeSchedule::default();
    let (lo, hi) = (s.sigma(0.0).unwrap(), s.sigma(1.0).unwrap());
    ensure(lo == 0.01 && hi == 50.0, || format!("σ(0) = {lo}, σ(1) = {hi}"))?;
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let t = 0.005 + 0.99 * i as f64 / 99.0;
        let h = 1e-6;
        let ds2 = (s.sigma(t + h).unwrap().powi(2) - s.sigma(t - h).unwrap().powi(2)) / (2.0 * h);
        let g2 = s.g(t).unwrap().powi(2);
        worst = worst.max((g2 / ds2 - 1.0).abs());
    }
    ensure(worst <= 1e-4, || format!("g² vs dσ²/dt: {worst:.2e}"))?;
    let mut rng = Rng::new(88);
    let dim = 4;
    let theta0 = SpectralCoeffs::from_vec(vec![0.5, -1.0, 2.0, 0.0], 2).unwrap();
    let mut std_worst: f64 = 0.0;
    for t in [0.1, 0.5, 0.9] {
        let sigma = s.sigma(t).unwrap();
        let mut sq = vec![0.0; dim];
        let n = 100_000;
        for _ in 0..n {
            let (x, _) = diffgno::forward_noise(&s, &theta0, t, &mut rng).unwrap();
            for k in 0..dim {
                sq[k] += (x.theta[k] - theta0.theta[k]).powi(2);
            }
        }
        for v in sq {
            std_worst = std_worst.max(((v / n as f64).sqrt() / sigma - 1.0).abs());
        }
    }
    ensure(std_worst <= 0.02, || format!("forward-noise std off by {std_worst:.4}"))?;
    Ok(format!("g² rel err {worst:.1e}, std rel err {:.2}%", 100.0 * std_worst))
}

fn c9_dsm_gradients() -> Outcome {
    let sched = VeSchedule::default();
    let mut worst: f64 = 0.0;
    for seed in 0..3u64 {
        let mut rng = Rng::derive(99, &[seed]);
        let mut net = ScoreNet::new(4, 10, 4, &mut rng);
        net.w2 = linalg::random_gaussian_matrix(&mut rng, 4, 10, 0.3);
        net.b1 = linalg::random_gaussian_matrix(&mut rng, 1, 10, 0.1);
        let batch: Vec<SpectralCoeffs> = (0..5)
            .map(|_| SpectralCoeffs::from_vec(linalg::gaussian(&mut rng, 4, 1.0), 2).unwrap())
            .collect();
        for param in [ScoreParam::Preconditioned, ScoreParam::Direct] {
            let loss =
                |n: &ScoreNet| diffgno::dsm_loss(n, &sched, param, &batch, 0.05, &mut Rng::derive(7, &[seed])).unwrap();
            // oracle: central differences on the loss value alone
            let mut fd = Vec::new();
            for b in 0..4 {
                let len = net.blocks()[b].as_slice().len();
                for k in 0..len {
                    let h = 1e-5;
                    let mut plus = net.clone();
                    plus.blocks_mut()[b].as_mut_slice()[k] += h;
                    let mut minus = net.clone();
                    minus.blocks_mut()[b].as_mut_slice()[k] -= h;
                    fd.push((loss(&plus).0 - loss(&minus).0) / (2.0 * h));
                }
            }
            let (_, grads) = loss(&net);
            let analytic: Vec<f64> = grads.blocks().iter().flat_map(|m| m.as_slice().to_vec()).collect();
            let diff: f64 = analytic
                .iter()
                .zip(&fd)
                .map(|(a, f)| (a - f).powi(2))
                .sum::<f64>()
                .sqrt();
            worst = worst.max(diff / linalg::norm2(&fd));
        }
    }
    ensure(worst <= 1e-4, || format!("relative gradient error {worst:.2e}"))?;
    Ok(format!("3 batches × 2 parametrizations, relative error {worst:.1e}"))
}

fn c10_reverse_sampler() -> Outcome {
    let sched = VeSchedule::default();
    let mu = [1.5, -2.0, 0.25];
    let s = 0.5;
    let score = |x: &[f64], t: f64| {
        let var = s * s + sched.sigma(t).unwrap().powi(2);
        x.iter().zip(&mu).map(|(xv, m)| -(xv - m) / var).collect::<Vec<f64>>()
    };
    let mut rng = Rng::new(1010);
    let n = 2000;
    let samples: Vec<Vec<f64>> = (0..n)
        .map(|_| diffgno::reverse_sample_with(score, &sched, 3, 50, &mut rng, None).unwrap())
        .collect();
    let mut detail = Vec::new();
    for k in 0..3 {
        let mean = samples.iter().map(|x| x[k]).sum::<f64>() / n as f64;
        let sd = (samples.iter().map(|x| (x[k] - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        ensure((mean - mu[k]).abs() <= 0.1 * s, || {
            format!("coord {k}: mean {mean} vs {}", mu[k])
        })?;
        ensure((sd / s - 1.0).abs() <= 0.2, || format!("coord {k}: std {sd} vs {s}"))?;
        detail.push(format!("{mean:.3}±{sd:.3}"));
    }
    Ok(format!("target {mu:?}±{s}, got [{}]", detail.join(", ")))
}

fn oracle_rank(m: &Matrix) -> usize {
    let s = oracle_sigma(m);
    s.iter().filter(|&&x| x > 1e-9 * s[0].max(1e-300)).count()
}

fn c11_spectral_roundtrip() -> Outcome {
    let d = 12;
    let r = 4;
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = Rng::derive(1111, &[seed]);
        let (u, w, _) = federation::global_basis(&linalg::random_gaussian_matrix(&mut rng, d, d, 1.0)).unwrap();
        let core = linalg::random_gaussian_matrix(&mut rng, r, r, 1.0);
        let m = u
            .leading_cols(r)
            .matmul(&core)
            .unwrap()
            .matmul_t(&w.leading_cols(r))
            .unwrap();
        let theta = diffgno::spectral_project(&m, &u, &w, r).map_err(|e| e.to_string())?;
        let back = diffgno::spectral_reconstruct(&theta, &u, &w).map_err(|e| e.to_string())?;
        worst = worst.max(back.max_abs_diff(&m));
    }
    ensure(worst <= 1e-8, || format!("roundtrip error {worst:.2e}"))?;
    let mut max_rank = 0;
    for seed in 0..5u64 {
        let mut rng = Rng::derive(1112, &[seed]);
        let (u, w, _) = federation::global_basis(&linalg::random_gaussian_matrix(&mut rng, d, d, 1.0)).unwrap();
        let updates: Vec<Matrix> = (0..4)
            .map(|_| linalg::random_gaussian_matrix(&mut rng, d, d, 1.0))
            .collect();
        let mut net = ScoreNet::new(r * r, 16, 4, &mut rng);
        let cfg = DiffGnoConfig {
            dsm_steps: 20,
            ..DiffGnoConfig::default()
        };
        let agg = diffgno::aggregate(&updates, &u, &w, r, &mut net, &cfg, &mut rng).map_err(|e| e.to_string())?;
        max_rank = max_rank.max(oracle_rank(&agg.delta));
    }
    ensure(max_rank <= r, || format!("consensus rank {max_rank} > {r}"))?;
    Ok(format!(
        "roundtrip error {worst:.1e}; consensus rank ≤ {max_rank} (r = {r})"
    ))
}

fn desk(id: &str, out: &Path) -> RunConfig {
    let mut cfg = RunConfig::preset(Preset::Desk);
    cfg.run.id = id.into();
    cfg.run.out_dir = out.display().to_string();
    cfg
}

/// Sample-weighted mean in client order, then `θ + η·mean`, one scalar at a time.
fn reference_fedavg_step(base: &Matrix, deltas: &[&Matrix], weights: &[f64], eta: f64) -> Matrix {
    let total: f64 = weights.iter().sum();
    let inv = 1.0 / total;
    let mut out = base.clone();
    for k in 0..base.as_slice().len() {
        let mut acc = 0.0;
        for (d, &w) in deltas.iter().zip(weights) {
            acc += w * d.as_slice()[k];
        }
        out.as_mut_slice()[k] += eta * (acc * inv);
    }
    out
}

fn c12_fedavg_degeneracy(out: &Path) -> Outcome {
    let mut cfg = desk("fedavg", out);
    cfg.ablation = Ablations {
        no_diffgno: true,
        no_spdp: true,
        ..Ablations::default()
    };
    let cfg = runner::finalize(cfg).map_err(|e| e.to_string())?;
    let exp = Experiment::new(cfg.clone()).map_err(|e| e.to_string())?;
    let fed: &Federation = &exp.federation;
    let model: &GlobalModel = &exp.model;
    let ids = federation::sample_clients(&fed.config, model.round);
    let updates: Vec<ClientUpdate> = ids.iter().map(|&id| fed.client_update(model, id).unwrap()).collect();
    let weights: Vec<f64> = updates.iter().map(|u| u.num_samples as f64).collect();
    let eta = fed.config.server_step;
    let kernel: Vec<&Matrix> = updates.iter().map(|u| &u.kernel_delta).collect();
    let want_theta = reference_fedavg_step(&model.theta_m, &kernel, &weights, eta);
    let mut want_rest = Blocks::new();
    for (name, block) in &model.rest {
        let ds: Vec<&Matrix> = updates.iter().map(|u| &u.rest_deltas[name]).collect();
        want_rest.insert(name.clone(), reference_fedavg_step(block, &ds, &weights, eta));
    }
    let mut net = exp.net.clone();
    let (next, _) = fed.run_round(model, &mut net).map_err(|e| e.to_string())?;
    let bits = |m: &Matrix| m.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<u64>>();
    ensure(bits(&next.theta_m) == bits(&want_theta), || {
        format!("θ_M differs by {:.2e}", next.theta_m.max_abs_diff(&want_theta))
    })?;
    for (name, m) in &want_rest {
        ensure(bits(&next.rest[name]) == bits(m), || format!("block {name} differs"))?;
    }
    Ok(format!(
        "{} clients, θ_M and {} blocks bitwise equal",
        ids.len(),
        want_rest.len()
    ))
}

struct DeskRuns {
    first_loss: f64,
    final_loss: f64,
}

fn c13_determinism(out: &Path) -> (Outcome, Option<DeskRuns>) {
    let run = || -> Result<(runner::RunSummary, Vec<u8>, Duration), String> {
        let start = Instant::now();
        let s = runner::run_experiment(&desk("det", out)).map_err(|e| e.to_string())?;
        let bytes = std::fs::read(&s.records_path).map_err(|e| e.to_string())?;
        Ok((s, bytes, start.elapsed()))
    };
    let body = || -> Result<(String, DeskRuns), String> {
        let (a, csv_a, t_a) = run()?;
        let (_, csv_b, t_b) = run()?;
        ensure(csv_a == csv_b, || "CSV bytes differ between identical runs".into())?;
        ensure(a.rounds_run == 50, || format!("ran {} rounds", a.rounds_run))?;
        let slowest = t_a.max(t_b);
        ensure(slowest < Duration::from_secs(300), || {
            format!("desk run took {slowest:?}")
        })?;

        let t = 20;
        let mut cfg = desk("resume", out);
        cfg.federation.rounds = t + 1;
        let mut live = Experiment::new(cfg.clone()).map_err(|e| e.to_string())?;
        for _ in 0..t {
            live.step().map_err(|e| e.to_string())?;
        }
        let ckpt = out.join("resume.bin");
        runner::save_checkpoint(&live.model, &live.net, &ckpt).map_err(|e| e.to_string())?;
        let rec_live = runner::csv_row(live.step().map_err(|e| e.to_string())?, false);
        let mut resumed = Experiment::resume(cfg, &ckpt).map_err(|e| e.to_string())?;
        let rec_resumed = runner::csv_row(resumed.step().map_err(|e| e.to_string())?, false);
        ensure(resumed.model == live.model, || "resumed model differs".into())?;
        ensure(resumed.net == live.net, || "resumed score network differs".into())?;
        ensure(rec_live == rec_resumed, || "resumed round record differs".into())?;
        let expected_row = String::from_utf8_lossy(&csv_a)
            .lines()
            .nth(t + 1)
            .map(str::to_string)
            .unwrap_or_default();
        ensure(rec_live == expected_row, || {
            "round t+1 differs from the full run".into()
        })?;
        Ok((
            format!(
                "identical CSVs ({} bytes); resume at round {t} bitwise equal; desk run {:.0?}",
                csv_a.len(),
                slowest
            ),
            DeskRuns {
                first_loss: a.first_train_loss,
                final_loss: a.final_train_loss,
            },
        ))
    };
    match body() {
        Ok((msg, runs)) => (Ok(msg), Some(runs)),
        Err(e) => (Err(e), None),
    }
}

fn c14_gating_benefit() -> Outcome {
    let d = 16;
    let r = 4;
    let mut wins = 0;
    for seed in 0..100u64 {
        let mut rng = Rng::derive(1414, &[seed]);
        let q = linalg::random_orthonormal(&mut rng, d, d);
        let p = linalg::random_orthonormal(&mut rng, d, d);
        let sig: Vec<f64> = (0..d)
            .map(|i| if i < r { 2.0 + 3.0 * rng.uniform() } else { 0.0 })
            .collect();
        let noise: Vec<f64> = (0..d).map(|i| if i < r { 0.0 } else { 0.5 * rng.uniform() }).collect();
        let signal = q.scale_cols(&sig).matmul_t(&p).unwrap();
        let m = signal.add(&q.scale_cols(&noise).matmul_t(&p).unwrap()).unwrap();
        let gated = sglt::spectral_gate(&m, &GateConfig::hard(1.0)).map_err(|e| e.to_string())?;
        let before = m.sub(&signal).unwrap().frobenius_norm();
        let after = gated.m_hat.sub(&signal).unwrap().frobenius_norm();
        wins += usize::from(after < before);
    }
    ensure(wins == 100, || format!("{wins}/100 trials improved"))?;
    Ok("100/100 trials strictly closer to the planted signal".into())
}

fn c15_learning(out: &Path, runs: Option<&DeskRuns>) -> Outcome {
    let runs = runs.ok_or("desk runs from criterion 13 unavailable")?;
    let ratio = runs.final_loss / runs.first_loss;
    ensure(ratio <= 0.8, || format!("final/round-1 loss = {ratio:.3}"))?;
    let mut cfg = desk("dropout", out);
    cfg.federation.missing_rate = 0.3;
    let s = runner::run_experiment(&cfg).map_err(|e| e.to_string())?;
    let m = s.final_metrics;
    ensure(
        s.rounds_run == 50 && m.rmse.is_finite() && m.top1.is_finite() && m.pose_err.is_finite(),
        || format!("dropout run: {} rounds, metrics {m:?}", s.rounds_run),
    )?;
    Ok(format!(
        "loss {:.3} -> {:.3} (ratio {ratio:.2}); dropout 0.3 run rmse {:.3}, top1 {:.2}",
        runs.first_loss, runs.final_loss, m.rmse, m.top1
    ))
}

fn naive_mmd(x: &[Vec<f64>], y: &[Vec<f64>], h: f64) -> f64 {
    let k = |a: &Vec<f64>, b: &Vec<f64>| {
        (-a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / (2.0 * h * h)).exp()
    };
    let mean_offdiag = |s: &[Vec<f64>]| {
        let n = s.len();
        let mut t = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    t += k(&s[i], &s[j]);
                }
            }
        }
        t / (n * (n - 1)) as f64
    };
    let cross: f64 = x
        .iter()
        .flat_map(|a| y.iter().map(move |b| (a, b)))
        .map(|(a, b)| k(a, b))
        .sum::<f64>()
        / (x.len() * y.len()) as f64;
    mean_offdiag(x) + mean_offdiag(y) - 2.0 * cross
}

fn c16_mmd() -> Outcome {
    let mut rng = Rng::new(1616);
    let cloud = |rng: &mut Rng, shift: f64| -> Vec<Vec<f64>> {
        (0..60)
            .map(|_| linalg::gaussian(rng, 3, 1.0).into_iter().map(|v| v + shift).collect())
            .collect()
    };
    let a = cloud(&mut rng, 0.0);
    let b = cloud(&mut rng, 0.0);
    let h = federation::median_bandwidth(&a, &b);
    let (same, null) = federation::permutation_null(&a, &b, h, 200, &mut rng).map_err(|e| e.to_string())?;
    ensure((same - naive_mmd(&a, &b, h)).abs() <= 1e-12, || {
        "MMD² disagrees with the direct sum".into()
    })?;
    let q95 = federation::quantile(&null, 0.95);
    ensure(same < q95, || format!("identical: {same:.4} ≥ q95 {q95:.4}"))?;
    let c = cloud(&mut rng, 1.5);
    let h = federation::median_bandwidth(&a, &c);
    let (sep, null) = federation::permutation_null(&a, &c, h, 200, &mut rng).map_err(|e| e.to_string())?;
    let q99 = federation::quantile(&null, 0.99);
    ensure(sep > q99, || format!("separated: {sep:.4} ≤ q99 {q99:.4}"))?;
    Ok(format!(
        "identical {same:.4} < q95 {q95:.4}; separated {sep:.4} > q99 {q99:.4}"
    ))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let out = tmp.path();
    let mut failures = 0;
    let mut report = |id: usize, title: &str, budget: Duration, run: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let result = run();
        let took = start.elapsed();
        let result = match result {
            Ok(msg) if took > budget => Err(format!("{msg}; took {took:.1?} > {budget:?}")),
            other => other,
        };
        let (tag, msg) = match &result {
            Ok(m) => ("PASS", m),
            Err(m) => {
                failures += 1;
                ("FAIL", m)
            }
        };
        println!("[{tag}] {id:>2} {title}: {msg} ({took:.2?})");
    };
    let s = Duration::from_secs;
    report(1, "Eckart-Young equality", s(1), &mut c1_eckart_young);
    report(2, "soft-gate error identity", s(1), &mut c2_soft_gate_error);
    report(3, "discretization invariance", s(1), &mut c3_size_free);
    report(4, "FAVOR+ kernel fidelity", s(5), &mut c4_favor);
    report(5, "DP calibration", s(1), &mut c5_calibration);
    report(6, "covariance dominance", s(30), &mut c6_covariance);
    report(7, "isotropic degeneracy", s(10), &mut c7_isotropic);
    report(8, "VE schedule", s(10), &mut c8_schedule);
    report(9, "DSM gradient oracle", s(10), &mut c9_dsm_gradients);
    report(10, "reverse-sampler oracle", s(30), &mut c10_reverse_sampler);
    report(11, "spectral roundtrip", s(1), &mut c11_spectral_roundtrip);
    report(12, "FedAvg degeneracy", s(5), &mut || c12_fedavg_degeneracy(out));
    let mut desk_runs = None;
    report(13, "determinism and resume", s(600), &mut || {
        let (o, r) = c13_determinism(out);
        desk_runs = r;
        o
    });
    report(14, "gating-benefit oracle", s(5), &mut c14_gating_benefit);
    report(15, "end-to-end learning smoke", s(300), &mut || {
        c15_learning(out, desk_runs.as_ref())
    });
    report(16, "MMD proxy", s(30), &mut c16_mmd);
    println!("{} of 16 criteria passed", 16 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
