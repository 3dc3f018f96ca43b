//! End-to-end experiment driver: config parsing, seeded runs with per-round
//! CSV output, checkpoint/resume and parameter sweeps.

mod check;
mod checkpoint;
mod config;
mod sweep;

pub use check::{run_checks, CheckOutcome};
pub use checkpoint::{check_shapes, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{
    finalize, parse_config, parse_config_str, DiffusionSection, ModelSection, Preset, RunConfig, RunSection,
    SweepSection, ENV_PREFIX,
};
pub use sweep::{resolve_axis, run_sweep, sweep_csv_path, SWEEPABLE_AXES, SWEEP_CSV_HEADER};

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffgno::ScoreNet;
use crate::federation::{Federation, FederationError, GlobalModel, RoundRecord};
use crate::linalg::Rng;
use crate::tasks::{self, Metrics};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("unknown config key {0}")]
    UnknownKey(String),
    #[error("{message} [{field}]")]
    Invalid { field: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("round {round} ({phase}): {source}")]
    Round {
        round: usize,
        phase: &'static str,
        #[source]
        source: FederationError,
    },
    #[error("setup ({phase}): {message}")]
    Setup { phase: &'static str, message: String },
    #[error("sweep: {0}")]
    Sweep(String),
}

impl RunError {
    /// Configuration problems, as opposed to failures while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            RunError::Syntax(_) | RunError::UnknownKey(_) | RunError::Invalid { .. } | RunError::Sweep(_)
        )
    }
}

pub const CSV_HEADER: &str = "round,participating_count,train_loss,rmse,top1,pose_err,mmd,sigma_sig,wallclock_ms";

pub const ROUNDS_FILE: &str = "rounds.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub config_hash: String,
    pub rounds_run: usize,
    pub first_train_loss: f64,
    pub final_train_loss: f64,
    pub final_metrics: Metrics,
    pub final_mmd: f64,
    pub rounds_to_target: Option<usize>,
    pub records_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

pub fn csv_row(r: &RoundRecord, record_wallclock: bool) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        r.round,
        r.participating.len(),
        r.train_loss_mean,
        r.metrics.rmse,
        r.metrics.top1,
        r.metrics.pose_err,
        r.mmd,
        r.sigma_sig,
        if record_wallclock { r.wallclock_ms } else { 0 }
    )
}

fn phase_of(e: &FederationError) -> &'static str {
    match e {
        FederationError::Task(_) => "local training",
        FederationError::Spdp(_) => "privatization",
        FederationError::DiffGno(_) => "aggregation",
        FederationError::Mmd(_) => "evaluation",
        FederationError::NoSurvivors { .. } => "client phase",
        _ => "server update",
    }
}

/// Seed tag for the score network initialization.
const NET_TAG: u64 = 0x006e_6574;

/// Live state of one run.
pub struct Experiment {
    pub config: RunConfig,
    pub federation: Federation,
    pub model: GlobalModel,
    pub net: ScoreNet,
    pub records: Vec<RoundRecord>,
}

impl Experiment {
    pub fn new(config: RunConfig) -> Result<Self, RunError> {
        let config = finalize(config)?;
        let setup = |phase: &'static str| {
            move |e: FederationError| RunError::Setup {
                phase,
                message: e.to_string(),
            }
        };
        let world = tasks::generate_world(&config.world).map_err(|e| RunError::Setup {
            phase: "world",
            message: e.to_string(),
        })?;
        let federation = Federation::build(
            config.federation.clone(),
            config.ablation,
            config.gate,
            world,
            config.run.eval_per_type,
        )
        .map_err(setup("partition"))?;
        let model = GlobalModel::init(&config.model_config(), config.federation.seed).map_err(setup("model"))?;
        let rank = config.federation.rank;
        let net = ScoreNet::new(
            rank * rank,
            config.diffusion.hidden,
            config.diffusion.t_embed_dim,
            &mut Rng::derive(config.federation.seed, &[NET_TAG]),
        );
        Ok(Self {
            config,
            federation,
            model,
            net,
            records: Vec::new(),
        })
    }

    /// Builds the run, then replaces the model and score network with the
    /// checkpointed state.
    pub fn resume(config: RunConfig, path: &Path) -> Result<Self, RunError> {
        let mut exp = Self::new(config)?;
        let (model, net) = load_checkpoint(path)?;
        check_shapes(&model, &net, &exp.model, &exp.net)?;
        exp.model = model;
        exp.net = net;
        Ok(exp)
    }

    pub fn round(&self) -> usize {
        self.model.round
    }

    pub fn finished(&self) -> bool {
        self.model.round >= self.config.federation.rounds
    }

    pub fn step(&mut self) -> Result<&RoundRecord, RunError> {
        let round = self.model.round + 1;
        let (next, record) = self
            .federation
            .run_round(&self.model, &mut self.net)
            .map_err(|source| RunError::Round {
                round,
                phase: phase_of(&source),
                source,
            })?;
        self.model = next;
        self.records.push(record);
        Ok(self.records.last().expect("just pushed"))
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> RunError + '_ {
    move |e| RunError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

pub fn run_dir(config: &RunConfig) -> PathBuf {
    Path::new(&config.run.out_dir).join(&config.run.id)
}

/// Keeps the header and the rows of rounds `1..=round` of an existing CSV.
fn truncated_csv(path: &Path, round: usize) -> Result<String, RunError> {
    let mut out = format!("{CSV_HEADER}\n");
    if let Ok(f) = File::open(path) {
        for line in BufReader::new(f).lines().skip(1) {
            let line = line.map_err(io_err(path))?;
            let r: usize = line
                .split(',')
                .next()
                .and_then(|s| s.parse().ok())
                .unwrap_or(usize::MAX);
            if r <= round {
                out.push_str(&line);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

/// Runs `config` to completion (or to the RMSE target) and writes
/// `config.toml`, `rounds.csv`, `checkpoint.bin` and `summary.json` under
/// `out_dir/id`.
pub fn run_experiment(config: &RunConfig) -> Result<RunSummary, RunError> {
    run_experiment_from(config, None)
}

/// As [`run_experiment`], continuing from a checkpoint when given. Rows of
/// later rounds in an existing CSV are discarded.
pub fn run_experiment_from(config: &RunConfig, resume: Option<&Path>) -> Result<RunSummary, RunError> {
    let mut exp = match resume {
        Some(p) => Experiment::resume(config.clone(), p)?,
        None => Experiment::new(config.clone())?,
    };
    let dir = run_dir(&exp.config);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let cfg_path = dir.join(CONFIG_FILE);
    std::fs::write(&cfg_path, exp.config.to_toml()).map_err(io_err(&cfg_path))?;
    let csv_path = dir.join(ROUNDS_FILE);
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let prefix = if resume.is_some() {
        truncated_csv(&csv_path, exp.round())?
    } else {
        format!("{CSV_HEADER}\n")
    };
    let mut csv = File::create(&csv_path).map_err(io_err(&csv_path))?;
    csv.write_all(prefix.as_bytes()).map_err(io_err(&csv_path))?;

    let threads = exp.config.run.parallel_clients;
    let pool = (threads > 0)
        .then(|| rayon::ThreadPoolBuilder::new().num_threads(threads).build())
        .transpose()
        .map_err(|e| RunError::Setup {
            phase: "thread pool",
            message: e.to_string(),
        })?;

    let wallclock = exp.config.run.record_wallclock;
    let every = exp.config.run.checkpoint_every;
    let target = exp.config.federation.target_rmse;
    let mut rounds_to_target = None;
    while !exp.finished() {
        let record = match &pool {
            Some(p) => p.install(|| exp.step())?,
            None => exp.step()?,
        };
        let line = csv_row(record, wallclock);
        let (round, rmse) = (record.round, record.metrics.rmse);
        writeln!(csv, "{line}").map_err(io_err(&csv_path))?;
        if every > 0 && round % every == 0 {
            save_checkpoint(&exp.model, &exp.net, &ckpt_path)?;
        }
        if target.is_some_and(|t| rmse <= t) {
            rounds_to_target = Some(round);
            break;
        }
    }
    csv.flush().map_err(io_err(&csv_path))?;
    save_checkpoint(&exp.model, &exp.net, &ckpt_path)?;

    let (first, last) = match (exp.records.first(), exp.records.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => {
            return Err(RunError::Setup {
                phase: "run",
                message: format!("no rounds left to run (at round {})", exp.round()),
            })
        }
    };
    let summary = RunSummary {
        run_id: exp.config.run.id.clone(),
        config_hash: exp.config.hash(),
        rounds_run: exp.records.len(),
        first_train_loss: first.train_loss_mean,
        final_train_loss: last.train_loss_mean,
        final_metrics: last.metrics,
        final_mmd: last.mmd,
        rounds_to_target,
        records_path: csv_path,
        checkpoint_path: ckpt_path,
    };
    let summary_path = dir.join(SUMMARY_FILE);
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(&summary_path, json + "\n").map_err(io_err(&summary_path))?;
    Ok(summary)
}
