//! Sectioned TOML run configuration with presets, strict key checking,
//! environment overrides and a canonical hash.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use super::RunError;
use crate::diffgno::VeSchedule;
use crate::federation::{Ablations, FederationConfig};
use crate::sglt::GateConfig;
use crate::spdp::PrivacyBudget;
use crate::tasks::{ModelConfig, WorldConfig};

/// Prefix of environment overrides: `SPECFED_<SECTION>__<KEY>=<toml value>`.
pub const ENV_PREFIX: &str = "SPECFED_";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Paper,
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub id: String,
    pub out_dir: String,
    /// write measured wall-clock times; off keeps the CSV byte-reproducible
    pub record_wallclock: bool,
    /// admits κ < 1
    pub research: bool,
    pub eval_per_type: usize,
    /// client-phase threads, 0 for the default pool
    pub parallel_clients: usize,
    /// rounds between checkpoints, 0 for final only
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSection {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub hidden: usize,
    pub t_embed_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d: usize,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: Option<String>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub federation: FederationConfig,
    pub privacy: PrivacyBudget,
    pub diffusion: DiffusionSection,
    pub model: ModelSection,
    pub gate: GateConfig,
    pub world: WorldConfig,
    pub ablation: Ablations,
    pub sweep: SweepSection,
}

/// Keys that may be absent from a serialized config.
const OPTIONAL_KEYS: &[(&str, &str)] = &[("federation", "target_rmse"), ("sweep", "axis")];

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let federation = match preset {
            Preset::Paper => FederationConfig::paper(),
            Preset::Desk => FederationConfig::desk(),
        };
        let (id, d, hidden, t_embed_dim, eval_per_type) = match preset {
            Preset::Paper => ("paper", 256, 512, 32, 128),
            Preset::Desk => ("desk", 32, 64, 16, 32),
        };
        let sched = VeSchedule::default();
        let mut cfg = Self {
            run: RunSection {
                id: id.into(),
                out_dir: "runs".into(),
                record_wallclock: false,
                research: false,
                eval_per_type,
                parallel_clients: 0,
                checkpoint_every: 0,
            },
            federation,
            privacy: PrivacyBudget::default(),
            diffusion: DiffusionSection {
                sigma_min: sched.sigma_min,
                sigma_max: sched.sigma_max,
                hidden,
                t_embed_dim,
            },
            model: ModelSection { d },
            gate: GateConfig::default(),
            world: WorldConfig::default(),
            ablation: Ablations::default(),
            sweep: SweepSection::default(),
        };
        cfg.sync();
        cfg
    }

    /// Copies the privacy and diffusion sections into the federation config.
    fn sync(&mut self) {
        self.federation.budget = self.privacy;
        self.federation.sched = VeSchedule {
            sigma_min: self.diffusion.sigma_min,
            sigma_max: self.diffusion.sigma_max,
        };
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d: self.model.d,
            modality_dims: self.world.modality_dims.clone(),
            target_dim: self.world.target_dim,
            num_classes: self.world.num_classes,
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let invalid = |field: &str, msg: String| {
            Err(RunError::Invalid {
                field: field.into(),
                message: msg,
            })
        };
        if self.run.id.is_empty() || self.run.id.contains(['/', '\\']) {
            return invalid(
                "run.id",
                format!("run.id = {:?} violates non-empty file name", self.run.id),
            );
        }
        if self.run.eval_per_type < 2 {
            return invalid(
                "run.eval_per_type",
                format!(
                    "run.eval_per_type = {} violates run.eval_per_type >= 2",
                    self.run.eval_per_type
                ),
            );
        }
        if self.model.d == 0 {
            return invalid("model.d", "model.d = 0 violates model.d >= 1".into());
        }
        if self.federation.rank > self.model.d {
            return invalid(
                "federation.rank",
                format!(
                    "rank = {} violates rank <= model.d ({})",
                    self.federation.rank, self.model.d
                ),
            );
        }
        if self.diffusion.hidden == 0 {
            return invalid("diffusion.hidden", "diffusion.hidden = 0 violates hidden >= 1".into());
        }
        if self.diffusion.t_embed_dim == 0 || self.diffusion.t_embed_dim % 2 != 0 {
            return invalid(
                "diffusion.t_embed_dim",
                format!(
                    "diffusion.t_embed_dim = {} violates positive and even",
                    self.diffusion.t_embed_dim
                ),
            );
        }
        let mut fed = self.federation.clone();
        fed.budget = self.privacy;
        fed.sched = VeSchedule {
            sigma_min: self.diffusion.sigma_min,
            sigma_max: self.diffusion.sigma_max,
        };
        fed.validate(self.run.research).map_err(|e| {
            let msg = e.to_string();
            let field = match &e {
                crate::federation::FederationError::Spdp(_) => "privacy",
                crate::federation::FederationError::DiffGno(_) => "diffusion",
                _ => "federation",
            };
            RunError::Invalid {
                field: field.into(),
                message: msg,
            }
        })?;
        self.gate.validate().map_err(|e| RunError::Invalid {
            field: "gate".into(),
            message: e.to_string(),
        })?;
        self.world.validate().map_err(|e| RunError::Invalid {
            field: "world".into(),
            message: e.to_string(),
        })?;
        if let Some(axis) = &self.sweep.axis {
            super::sweep::resolve_axis(axis)?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of every semantic field. Output
    /// location, run id, thread count, checkpoint cadence, wall-clock
    /// recording and the sweep driver section are excluded.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("object");
        obj.remove("sweep");
        if let Some(run) = obj.get_mut("run").and_then(|r| r.as_object_mut()) {
            for k in [
                "id",
                "out_dir",
                "parallel_clients",
                "checkpoint_every",
                "record_wallclock",
            ] {
                run.remove(k);
            }
        }
        let canonical = serde_json::to_string(&v).expect("json");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to toml")
    }
}

fn base_table(preset: Preset) -> Table {
    match Value::try_from(RunConfig::preset(preset)).expect("preset serializes") {
        Value::Table(t) => t,
        _ => unreachable!("struct serializes to a table"),
    }
}

fn key_allowed(base: &Table, section: &str, key: &str) -> bool {
    base.get(section)
        .and_then(Value::as_table)
        .is_some_and(|t| t.contains_key(key))
        || OPTIONAL_KEYS.contains(&(section, key))
}

fn overlay(base: &mut Table, section: &str, key: &str, value: Value, source: &str) -> Result<(), RunError> {
    if !base.contains_key(section) {
        return Err(RunError::UnknownKey(format!("{section} ({source})")));
    }
    if !key_allowed(base, section, key) {
        return Err(RunError::UnknownKey(format!("{section}.{key} ({source})")));
    }
    base.get_mut(section)
        .and_then(Value::as_table_mut)
        .expect("preset has every section")
        .insert(key.to_string(), value);
    Ok(())
}

fn parse_env_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Builds a config from a preset, the text of a TOML file and environment
/// overrides, in that order of precedence (later wins).
pub fn parse_config_str<I, K, V>(text: &str, preset: Preset, env: I) -> Result<RunConfig, RunError>
where
    I: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let user: Table = text
        .parse()
        .map_err(|e: toml::de::Error| RunError::Syntax(e.to_string()))?;
    let mut table = base_table(preset);
    for (section, body) in user {
        let Value::Table(body) = body else {
            return Err(RunError::UnknownKey(format!(
                "{section} (top-level keys must sit inside a section)"
            )));
        };
        for (key, value) in body {
            overlay(&mut table, &section, &key, value, "config file")?;
        }
    }
    let mut env: Vec<(String, String)> = env
        .into_iter()
        .filter_map(|(k, v)| {
            k.as_ref()
                .strip_prefix(ENV_PREFIX)
                .map(|rest| (rest.to_string(), v.as_ref().to_string()))
        })
        .collect();
    env.sort();
    for (name, raw) in env {
        let Some((section, key)) = name.split_once("__") else {
            return Err(RunError::UnknownKey(format!(
                "{ENV_PREFIX}{name} (expected SECTION__KEY)"
            )));
        };
        overlay(
            &mut table,
            &section.to_lowercase(),
            &key.to_lowercase(),
            parse_env_value(&raw),
            "environment",
        )?;
    }
    let mut cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| RunError::Syntax(e.to_string()))?;
    cfg.sync();
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `path` (a missing path is an error; an empty file gives the preset).
pub fn parse_config<I, K, V>(path: &std::path::Path, preset: Preset, env: I) -> Result<RunConfig, RunError>
where
    I: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let text = std::fs::read_to_string(path).map_err(|e| RunError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_config_str(&text, preset, env)
}

/// Revalidates after programmatic edits and refreshes derived fields.
pub fn finalize(mut cfg: RunConfig) -> Result<RunConfig, RunError> {
    cfg.sync();
    cfg.validate()?;
    Ok(cfg)
}
