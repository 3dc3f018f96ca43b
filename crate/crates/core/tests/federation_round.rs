use nalgebra::DMatrix;
use specfed::federation::{self, Ablations};
use specfed::linalg::Matrix;
use specfed::runner::{Experiment, Preset, RunConfig};

fn small() -> RunConfig {
    let mut cfg = RunConfig::preset(Preset::Desk);
    cfg.federation.clients = 6;
    cfg.federation.samples_per_client = 20;
    cfg.federation.sample_rate = 0.5;
    cfg.federation.local_steps = 2;
    cfg.federation.batch = 4;
    cfg.federation.dsm_steps = 20;
    cfg.model.d = 8;
    cfg.federation.rank = 3;
    cfg.run.eval_per_type = 6;
    cfg
}

fn rank(m: &Matrix) -> usize {
    let s = DMatrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)]).singular_values();
    let top = s.max();
    s.iter().filter(|&&x| x > 1e-9 * top.max(1e-300)).count()
}

#[test]
fn kernel_step_has_rank_at_most_r() {
    let mut exp = Experiment::new(small()).unwrap();
    for _ in 0..3 {
        let before = exp.model.theta_m.clone();
        exp.step().unwrap();
        let step = exp.model.theta_m.sub(&before).unwrap();
        assert!(rank(&step) <= 3, "rank {}", rank(&step));
    }
}

#[test]
fn client_parallelism_does_not_change_results() {
    let exp = Experiment::new(small()).unwrap();
    let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let wide = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let run = |pool: &rayon::ThreadPool| {
        let mut net = exp.net.clone();
        let (m, r) = pool.install(|| exp.federation.run_round(&exp.model, &mut net)).unwrap();
        (m, r.participating, r.train_loss_mean, net)
    };
    assert_eq!(run(&serial), run(&wide));
}

#[test]
fn rounds_are_deterministic() {
    let records = || {
        let mut exp = Experiment::new(small()).unwrap();
        for _ in 0..2 {
            exp.step().unwrap();
        }
        let mut rs = exp.records;
        for r in rs.iter_mut() {
            r.wallclock_ms = 0;
        }
        (rs, exp.model)
    };
    assert_eq!(records(), records());
}

#[test]
fn dropped_clients_do_not_contribute() {
    let mut cfg = small();
    cfg.ablation = Ablations {
        no_diffgno: true,
        no_spdp: true,
        ..Ablations::default()
    };
    let mut exp = Experiment::new(cfg).unwrap();
    let ids = federation::sample_clients(&exp.federation.config, 0);
    let victim = ids[0];
    exp.federation.clients[victim].latents.clear();

    let survivors: Vec<_> = ids[1..]
        .iter()
        .map(|&id| exp.federation.client_update(&exp.model, id).unwrap())
        .collect();
    let weights: Vec<f64> = survivors.iter().map(|u| u.num_samples as f64).collect();
    let deltas: Vec<&Matrix> = survivors.iter().map(|u| &u.kernel_delta).collect();
    let mut want = exp.model.theta_m.clone();
    want.axpy(1.0, &federation::fedavg_matrix(&deltas, &weights).unwrap())
        .unwrap();

    let rec = exp.step().unwrap().clone();
    assert_eq!(rec.dropped, vec![victim]);
    assert!(!rec.participating.contains(&victim));
    assert_eq!(rec.participating, ids[1..].to_vec());
    assert!(rec.warnings.iter().any(|w| w.contains(&format!("client {victim}"))));
    assert_eq!(exp.model.theta_m, want);
}

#[test]
fn zero_local_steps_leave_parameters_untouched() {
    let mut cfg = small();
    cfg.federation.local_steps = 0;
    let mut exp = Experiment::new(cfg).unwrap();
    let before = exp.model.clone();
    exp.step().unwrap();
    assert_eq!(exp.model.theta_m, before.theta_m);
    assert_eq!(exp.model.rest, before.rest);
    assert_eq!(exp.model.round, 1);
}
