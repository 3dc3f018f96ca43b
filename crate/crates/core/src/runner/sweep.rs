use std::io::Write;
use std::path::PathBuf;

use toml::Value;

use super::{finalize, run_experiment, RunConfig, RunError, RunSummary};

/// `(section, key)` pairs a sweep may vary. Short aliases resolve to these.
pub const SWEEPABLE_AXES: &[(&str, &str)] = &[
    ("privacy", "epsilon"),
    ("privacy", "delta"),
    ("privacy", "kappa"),
    ("privacy", "clip_bound"),
    ("federation", "sample_rate"),
    ("federation", "rank"),
    ("federation", "local_steps"),
    ("federation", "server_step"),
    ("federation", "dirichlet_alpha"),
    ("federation", "missing_rate"),
    ("federation", "seed"),
    ("gate", "tau"),
    ("gate", "beta"),
];

const ALIASES: &[(&str, &str)] = &[
    ("eps", "epsilon"),
    ("clip", "clip_bound"),
    ("q", "sample_rate"),
    ("r", "rank"),
];

pub const SWEEP_CSV_HEADER: &str =
    "axis,value,run_id,config_hash,rounds_run,final_train_loss,rmse,top1,pose_err,mmd,rounds_to_target";

/// Accepts `section.key`, a bare key or an alias.
pub fn resolve_axis(name: &str) -> Result<(&'static str, &'static str), RunError> {
    let name = name.trim();
    let found = match name.split_once('.') {
        Some((s, k)) => SWEEPABLE_AXES.iter().find(|&&(a, b)| a == s && b == k),
        None => {
            let key = ALIASES.iter().find(|(a, _)| *a == name).map_or(name, |(_, k)| k);
            SWEEPABLE_AXES.iter().find(|&&(_, b)| b == key)
        }
    };
    found.copied().ok_or_else(|| {
        let list: Vec<String> = SWEEPABLE_AXES.iter().map(|(s, k)| format!("{s}.{k}")).collect();
        RunError::Sweep(format!("{name:?} is not sweepable (sweepable: {})", list.join(", ")))
    })
}

fn with_value(base: &RunConfig, section: &str, key: &str, value: f64) -> Result<RunConfig, RunError> {
    let mut table = Value::try_from(base).expect("config serializes");
    let slot = table
        .get_mut(section)
        .and_then(|s| s.get_mut(key))
        .expect("sweepable axes exist in every config");
    *slot = match slot {
        Value::Integer(_) => {
            if value.fract() != 0.0 || value < 0.0 {
                return Err(RunError::Sweep(format!(
                    "{section}.{key} takes non-negative integers, got {value}"
                )));
            }
            Value::Integer(value as i64)
        }
        _ => Value::Float(value),
    };
    let mut cfg: RunConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| RunError::Sweep(e.to_string()))?;
    cfg.run.id = format!("{}-{key}-{value}", base.run.id);
    finalize(cfg)
}

pub fn sweep_csv_path(base: &RunConfig, axis: &str) -> Result<PathBuf, RunError> {
    let (_, key) = resolve_axis(axis)?;
    Ok(super::run_dir(base).with_file_name(format!("{}-sweep-{key}.csv", base.run.id)))
}

/// One run per value from the same base seed. Every value is validated
/// before anything runs; summaries go to a combined CSV next to the runs.
pub fn run_sweep(base: &RunConfig, axis: &str, values: &[f64]) -> Result<Vec<RunSummary>, RunError> {
    let (section, key) = resolve_axis(axis)?;
    base.validate()?;
    if values.is_empty() {
        return Err(RunError::Sweep(format!("no values given for {section}.{key}")));
    }
    let configs = values
        .iter()
        .map(|&v| with_value(base, section, key, v))
        .collect::<Result<Vec<_>, _>>()?;
    let path = sweep_csv_path(base, axis)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| RunError::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
    }
    let io = |e| RunError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut csv = std::fs::File::create(&path).map_err(io)?;
    writeln!(csv, "{SWEEP_CSV_HEADER}").map_err(io)?;
    let mut out = Vec::with_capacity(configs.len());
    for (cfg, v) in configs.iter().zip(values) {
        let s = run_experiment(cfg)?;
        writeln!(
            csv,
            "{section}.{key},{v},{},{},{},{},{},{},{},{},{}",
            s.run_id,
            s.config_hash,
            s.rounds_run,
            s.final_train_loss,
            s.final_metrics.rmse,
            s.final_metrics.top1,
            s.final_metrics.pose_err,
            s.final_mmd,
            s.rounds_to_target.map_or(String::new(), |r| r.to_string())
        )
        .map_err(io)?;
        out.push(s);
    }
    Ok(out)
}
