use std::path::Path;

use specfed::runner::{self, Preset, RunConfig, CSV_HEADER};

fn small(out: &Path, id: &str) -> RunConfig {
    let mut cfg = RunConfig::preset(Preset::Desk);
    cfg.run.out_dir = out.display().to_string();
    cfg.run.id = id.into();
    cfg.federation.rounds = 4;
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

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn outputs_are_byte_identical_across_runs_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let a = runner::run_experiment(&small(dir.path(), "a")).unwrap();
    let mut cfg = small(dir.path(), "b");
    cfg.run.parallel_clients = 3;
    let b = runner::run_experiment(&cfg).unwrap();
    assert_eq!(read(&a.records_path), read(&b.records_path));
    assert_eq!(a.config_hash, b.config_hash);
    assert_eq!(
        std::fs::read(&a.checkpoint_path).unwrap(),
        std::fs::read(&b.checkpoint_path).unwrap()
    );
    let csv = read(&a.records_path);
    assert_eq!(csv.lines().next(), Some(CSV_HEADER));
    assert_eq!(csv.lines().count(), 5);
    let summary: serde_json::Value =
        serde_json::from_str(&read(&dir.path().join("a").join(runner::SUMMARY_FILE))).unwrap();
    assert_eq!(summary["rounds_run"], 4);
    assert_eq!(summary["config_hash"], a.config_hash.as_str());
}

#[test]
fn resumed_run_reproduces_the_uninterrupted_csv() {
    let dir = tempfile::tempdir().unwrap();
    let full = runner::run_experiment(&small(dir.path(), "full")).unwrap();

    let mut half = small(dir.path(), "part");
    half.federation.rounds = 2;
    let first = runner::run_experiment(&half).unwrap();
    let resumed = runner::run_experiment_from(&small(dir.path(), "part"), Some(&first.checkpoint_path)).unwrap();
    assert_eq!(resumed.rounds_run, 2);
    assert_eq!(read(&resumed.records_path), read(&full.records_path));
    assert_eq!(
        std::fs::read(&resumed.checkpoint_path).unwrap(),
        std::fs::read(&full.checkpoint_path).unwrap()
    );
}

#[test]
fn resume_rejects_a_checkpoint_of_another_shape() {
    let dir = tempfile::tempdir().unwrap();
    let done = runner::run_experiment(&small(dir.path(), "a")).unwrap();
    let mut other = small(dir.path(), "b");
    other.model.d = 10;
    let e = runner::run_experiment_from(&other, Some(&done.checkpoint_path)).unwrap_err();
    let msg = e.to_string();
    assert!(msg.contains("(8, 8)") && msg.contains("(10, 10)"), "{msg}");
}

#[test]
fn early_stop_records_rounds_to_target() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path(), "t");
    cfg.federation.target_rmse = Some(10.0);
    let s = runner::run_experiment(&cfg).unwrap();
    assert_eq!(s.rounds_to_target, Some(1));
    assert_eq!(s.rounds_run, 1);
    cfg.federation.target_rmse = Some(1e-9);
    cfg.run.id = "never".into();
    let s = runner::run_experiment(&cfg).unwrap();
    assert_eq!((s.rounds_to_target, s.rounds_run), (None, 4));
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let mut base = small(dir.path(), "sw");
    base.federation.rounds = 1;
    let values = [0.5, 1.0, 2.0, 4.0, 8.0];
    let out = runner::run_sweep(&base, "epsilon", &values).unwrap();
    assert_eq!(out.len(), 5);
    let hashes: std::collections::BTreeSet<_> = out.iter().map(|s| s.config_hash.clone()).collect();
    assert_eq!(hashes.len(), 5);
    let table = read(&runner::sweep_csv_path(&base, "epsilon").unwrap());
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], runner::SWEEP_CSV_HEADER);
    assert_eq!(lines.len(), 6);
    assert!(lines[1].starts_with("privacy.epsilon,0.5,sw-epsilon-0.5,"));

    let e = runner::run_sweep(&base, "kappa", &[0.5, 1.0, 2.0, 4.0, 8.0]).unwrap_err();
    assert!(e.is_validation());
    base.run.research = true;
    base.federation.rounds = 1;
    let k = runner::run_sweep(&base, "kappa", &[0.5, 1.0, 2.0, 4.0, 8.0]).unwrap();
    assert_eq!(k.len(), 5);
}
