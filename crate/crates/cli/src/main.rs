use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use specfed::runner::{self, Preset, RunConfig, RunError};

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(name = "specfed", version, about = "Spectral-gated federated learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write rounds.csv, summary.json and a checkpoint
    Run {
        #[command(flatten)]
        common: CommonArgs,
        /// Continue from a checkpoint written by an earlier run
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Run the same experiment once per value of one config field
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Field to vary, e.g. kappa, privacy.epsilon, rank, gate.tau
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated values
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
    },
    /// Run the built-in property checks and print one line per property
    Check,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML config; omitted keys take the preset's values
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Minutes-scale preset (default: full protocol scale)
    #[arg(long, conflicts_with = "paper")]
    desk: bool,
    #[arg(long)]
    paper: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Ablation switches, space or comma separated
    #[arg(long, value_enum, value_delimiter = ',', num_args = 1..)]
    ablation: Vec<Ablation>,
    /// Threads for the client phase (results do not depend on it)
    #[arg(long, value_name = "N")]
    parallel_clients: Option<usize>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Run id (subdirectory of the output directory)
    #[arg(long)]
    id: Option<String>,
    /// Override the number of rounds
    #[arg(long)]
    rounds: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Ablation {
    NoDiffgno,
    NoSpdp,
    NoClip,
    IsotropicDp,
    NoSgltGate,
    HardGate,
}

fn load(common: &CommonArgs) -> Result<RunConfig, RunError> {
    let preset = if common.desk { Preset::Desk } else { Preset::Paper };
    let mut cfg = match &common.config {
        Some(path) => runner::parse_config(path, preset, std::env::vars())?,
        None => runner::parse_config_str("", preset, std::env::vars())?,
    };
    if let Some(seed) = common.seed {
        cfg.federation.seed = seed;
    }
    for a in &common.ablation {
        let ab = &mut cfg.ablation;
        match a {
            Ablation::NoDiffgno => ab.no_diffgno = true,
            Ablation::NoSpdp => ab.no_spdp = true,
            Ablation::NoClip => ab.no_clip = true,
            Ablation::IsotropicDp => ab.isotropic_dp = true,
            Ablation::NoSgltGate => ab.no_sglt_gate = true,
            Ablation::HardGate => ab.hard_gate = true,
        }
    }
    if let Some(n) = common.parallel_clients {
        cfg.run.parallel_clients = n;
    }
    if let Some(out) = &common.out {
        cfg.run.out_dir = out.display().to_string();
    }
    if let Some(id) = &common.id {
        cfg.run.id = id.clone();
    }
    if let Some(r) = common.rounds {
        cfg.federation.rounds = r;
    }
    runner::finalize(cfg)
}

fn print_summary(s: &runner::RunSummary) {
    let m = &s.final_metrics;
    println!(
        "{}  rounds={}  loss {:.4} -> {:.4}  rmse={:.4}  top1={:.3}  pose_err={:.4}  mmd={:.4}{}",
        s.run_id,
        s.rounds_run,
        s.first_train_loss,
        s.final_train_loss,
        m.rmse,
        m.top1,
        m.pose_err,
        s.final_mmd,
        s.rounds_to_target.map_or(String::new(), |r| format!("  target@{r}"))
    );
    println!("  hash {}", s.config_hash);
    println!("  records {}", s.records_path.display());
}

fn execute(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Run { common, resume } => {
            let cfg = load(&common)?;
            let summary = runner::run_experiment_from(&cfg, resume.as_deref())?;
            print_summary(&summary);
        }
        Command::Sweep { common, axis, values } => {
            let cfg = load(&common)?;
            let axis = axis
                .or_else(|| cfg.sweep.axis.clone())
                .ok_or_else(|| RunError::Sweep("no axis given (--axis or sweep.axis)".into()))?;
            let values = if values.is_empty() {
                cfg.sweep.values.clone()
            } else {
                values
            };
            let summaries = runner::run_sweep(&cfg, &axis, &values)?;
            for s in &summaries {
                print_summary(s);
            }
            println!("sweep table {}", runner::sweep_csv_path(&cfg, &axis)?.display());
        }
        Command::Check => {
            let outcomes = runner::run_checks();
            for c in &outcomes {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            let failed = outcomes.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(RunError::Setup {
                    phase: "check",
                    message: format!("{failed} properties failed"),
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            })
        }
    }
}
