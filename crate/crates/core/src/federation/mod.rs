//! Server-side round loop: broadcast the spectral basis, train sampled
//! clients, privatize kernel updates, aggregate the kernel with Diff-GNO and
//! everything else with FedAvg.

mod mmd;
mod partition;

pub use mmd::{median_bandwidth, mmd, permutation_null, quantile};
pub use partition::{assign_client_types, dirichlet_partition};

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffgno::{self, DiffGnoConfig, DiffGnoError, DsmWeight, ScoreNet, ScoreParam, VeSchedule};
use crate::linalg::{self, LinalgError, Matrix, Rng};
use crate::sglt::{FeatureMap, GateConfig, SemanticKernel, SgltError};
use crate::spdp::{self, PrivacyBudget, SpdpError};
use crate::tasks::{
    self, Blocks, ClientData, ClientModel, ClientType, LocalTrainConfig, Metrics, ModelConfig, Sample, SyntheticWorld,
    TaskError,
};

#[derive(Debug, Error)]
pub enum FederationError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Sglt(#[from] SgltError),
    #[error(transparent)]
    Spdp(#[from] SpdpError),
    #[error(transparent)]
    DiffGno(#[from] DiffGnoError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("invalid federation config: {0}")]
    InvalidConfig(String),
    #[error("{samples} samples cannot be split across {clients} clients")]
    TooFewSamples { samples: usize, clients: usize },
    #[error("block {name:?}: {detail}")]
    BlockMismatch { name: String, detail: String },
    #[error("mmd: {0}")]
    Mmd(String),
    #[error("round {round}: every sampled client failed")]
    NoSurvivors { round: usize },
}

/// Protocol constants of one federated run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub rounds: usize,
    pub clients: usize,
    pub sample_rate: f64,
    pub local_steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub server_step: f64,
    pub rank: usize,
    /// carried in its own config section
    #[serde(skip)]
    pub budget: PrivacyBudget,
    #[serde(skip)]
    pub sched: VeSchedule,
    pub n_rev: usize,
    pub dsm_steps: usize,
    pub dsm_lr: f64,
    pub dsm_repeats: usize,
    pub consensus_samples: usize,
    pub dirichlet_alpha: f64,
    pub client_type_mix: [f64; 3],
    pub missing_rate: f64,
    pub samples_per_client: usize,
    pub unweighted_fedavg: bool,
    pub seed: u64,
    pub target_rmse: Option<f64>,
}

impl FederationConfig {
    /// Full protocol scale.
    pub fn paper() -> Self {
        Self {
            rounds: 1000,
            clients: 100,
            sample_rate: 0.4,
            local_steps: 100,
            batch: 64,
            lr: 1e-3,
            weight_decay: 1e-4,
            server_step: 1.0,
            rank: 16,
            budget: PrivacyBudget::default(),
            sched: VeSchedule::default(),
            n_rev: 50,
            dsm_steps: 200,
            dsm_lr: 1e-3,
            dsm_repeats: 4,
            consensus_samples: 1,
            dirichlet_alpha: 0.5,
            client_type_mix: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            missing_rate: 0.1,
            samples_per_client: 200,
            unweighted_fedavg: false,
            seed: 0,
            target_rmse: None,
        }
    }

    /// Minutes-scale run on one core.
    pub fn desk() -> Self {
        Self {
            rounds: 50,
            clients: 20,
            local_steps: 10,
            batch: 8,
            lr: 1e-2,
            rank: 4,
            samples_per_client: 100,
            ..Self::paper()
        }
    }

    pub fn validate(&self, allow_weak_null: bool) -> Result<(), FederationError> {
        let bad = |m: String| Err(FederationError::InvalidConfig(m));
        for (name, v) in [
            ("rounds", self.rounds),
            ("clients", self.clients),
            ("batch", self.batch),
            ("rank", self.rank),
            ("n_rev", self.n_rev),
            ("samples_per_client", self.samples_per_client),
            ("dsm_repeats", self.dsm_repeats),
            ("consensus_samples", self.consensus_samples),
        ] {
            if v == 0 {
                return bad(format!("{name} = 0 violates {name} >= 1"));
            }
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return bad(format!(
                "sample_rate = {} violates sample_rate ∈ (0,1]",
                self.sample_rate
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr = {} violates lr >= 0", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "weight_decay = {} violates weight_decay >= 0",
                self.weight_decay
            ));
        }
        if !(self.server_step > 0.0 && self.server_step.is_finite()) {
            return bad(format!("server_step = {} violates server_step > 0", self.server_step));
        }
        if !(self.dsm_lr > 0.0 && self.dsm_lr.is_finite()) {
            return bad(format!("dsm_lr = {} violates dsm_lr > 0", self.dsm_lr));
        }
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return bad(format!(
                "dirichlet_alpha = {} violates dirichlet_alpha > 0",
                self.dirichlet_alpha
            ));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad(format!(
                "missing_rate = {} violates missing_rate ∈ [0,1)",
                self.missing_rate
            ));
        }
        let mix_sum: f64 = self.client_type_mix.iter().sum();
        if (mix_sum - 1.0).abs() > 1e-9 || self.client_type_mix.iter().any(|&p| p < 0.0) {
            return bad(format!(
                "client_type_mix = {:?} violates non-negative entries summing to 1",
                self.client_type_mix
            ));
        }
        if self.seed > i64::MAX as u64 {
            return bad(format!("seed = {} violates seed <= 2^63 - 1", self.seed));
        }
        if let Some(t) = self.target_rmse {
            if !(t > 0.0) {
                return bad(format!("target_rmse = {t} violates target_rmse > 0"));
            }
        }
        self.sched.validate()?;
        self.budget.validate(allow_weak_null)?;
        Ok(())
    }

    pub fn participants_per_round(&self) -> usize {
        ((self.sample_rate * self.clients as f64).ceil() as usize).clamp(1, self.clients)
    }
}

/// Component switches for the ablation tables.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    /// FedAvg on kernel deltas instead of Diff-GNO
    pub no_diffgno: bool,
    /// no noise on kernel deltas (clipping kept unless `no_clip`)
    pub no_spdp: bool,
    /// with `no_spdp`: upload raw deltas
    pub no_clip: bool,
    /// isotropic Gaussian mechanism at the same σ_sig
    pub isotropic_dp: bool,
    /// identity spectral filter
    pub no_sglt_gate: bool,
    /// hard gate `I(σ > τ)` instead of the soft gate
    pub hard_gate: bool,
}

/// Server-side parameters `(θ_M, θ_{\M})` plus the broadcast basis.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalModel {
    pub theta_m: Matrix,
    pub rest: Blocks,
    /// fixed random-feature projection shared by all clients
    pub features: Matrix,
    pub round: usize,
    pub basis_u: Matrix,
    pub basis_w: Matrix,
    pub spectrum: Vec<f64>,
}

/// Scale of the seeded Gaussian initialization of `θ_M`.
pub const THETA_M_INIT_SCALE: f64 = 1e-2;

impl GlobalModel {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, FederationError> {
        let mut rng = Rng::derive(seed, &[0x006d_6f64_656c]);
        let theta_m = linalg::random_gaussian_matrix(&mut rng, cfg.d, cfg.d, THETA_M_INIT_SCALE);
        let features = FeatureMap::new(cfg.d, cfg.d, &mut rng).projection().clone();
        let rest = tasks::init_rest(cfg, &mut rng);
        Self::from_parts(theta_m, rest, features, 0)
    }

    /// Assembles a model and computes its basis.
    pub fn from_parts(theta_m: Matrix, rest: Blocks, features: Matrix, round: usize) -> Result<Self, FederationError> {
        let (basis_u, basis_w, spectrum) = global_basis(&theta_m)?;
        Ok(Self {
            theta_m,
            rest,
            features,
            round,
            basis_u,
            basis_w,
            spectrum,
        })
    }

    pub fn d(&self) -> usize {
        self.theta_m.rows()
    }

    pub fn client_model(&self, gate: GateConfig) -> Result<ClientModel, FederationError> {
        Ok(ClientModel::new(
            SemanticKernel::new(self.theta_m.clone())?,
            self.rest.clone(),
            FeatureMap::from_projection(self.features.clone()),
            gate,
        ))
    }
}

/// Full SVD of `θ_M` under the linalg sign convention. `θ_M = 0` yields identity bases.
pub fn global_basis(theta_m: &Matrix) -> Result<(Matrix, Matrix, Vec<f64>), FederationError> {
    let s = linalg::svd(theta_m)?;
    Ok((s.u, s.w, s.sigma))
}

/// `⌈q·K⌉` distinct client ids in ascending order, a function of `(seed, round)`.
pub fn sample_clients(cfg: &FederationConfig, round: usize) -> Vec<usize> {
    let mut rng = Rng::derive(cfg.seed, &[0x7361_6d70, round as u64]);
    let mut ids = rng.sample_without_replacement(cfg.clients, cfg.participants_per_round());
    ids.sort_unstable();
    ids
}

/// `Σ w_k Δ_k / Σ w_k`, block by block, accumulated in the given order.
pub fn fedavg(deltas: &[&Blocks], weights: &[f64]) -> Result<Blocks, FederationError> {
    if deltas.is_empty() || deltas.len() != weights.len() {
        return Err(FederationError::InvalidConfig(format!(
            "fedavg needs one weight per delta and at least one delta, got {} and {}",
            deltas.len(),
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    let mut out = Blocks::new();
    for (name, first) in deltas[0] {
        let mut acc = Matrix::zeros(first.rows(), first.cols());
        for (d, &w) in deltas.iter().zip(weights) {
            let m = d.get(name).ok_or_else(|| FederationError::BlockMismatch {
                name: name.clone(),
                detail: "missing from a client delta".into(),
            })?;
            acc.axpy(w, m).map_err(|e| FederationError::BlockMismatch {
                name: name.clone(),
                detail: e.to_string(),
            })?;
        }
        out.insert(name.clone(), acc.scale(1.0 / total));
    }
    if deltas.iter().any(|d| d.len() != out.len()) {
        return Err(FederationError::BlockMismatch {
            name: "*".into(),
            detail: "clients disagree on block names".into(),
        });
    }
    Ok(out)
}

/// Weighted mean of single matrices through [`fedavg`].
pub fn fedavg_matrix(deltas: &[&Matrix], weights: &[f64]) -> Result<Matrix, FederationError> {
    let wrapped: Vec<Blocks> = deltas
        .iter()
        .map(|m| Blocks::from([(String::new(), (*m).clone())]))
        .collect();
    let refs: Vec<&Blocks> = wrapped.iter().collect();
    Ok(fedavg(&refs, weights)?.remove("").expect("single block"))
}

/// What one participating client sends back.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub kernel_delta: Matrix,
    pub rest_deltas: Blocks,
    pub num_samples: usize,
    pub train_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based index of the completed round
    pub round: usize,
    pub participating: Vec<usize>,
    pub dropped: Vec<usize>,
    pub train_loss_mean: f64,
    pub metrics: Metrics,
    pub mmd: f64,
    pub sigma_sig: f64,
    pub wallclock_ms: u64,
    pub warnings: Vec<String>,
}

/// Held-out samples per client type, rendered once with every stream present.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub by_type: Vec<(ClientType, Vec<Sample>)>,
}

impl EvalSet {
    pub fn generate(world: &SyntheticWorld, per_type: usize, seed: u64) -> Result<Self, FederationError> {
        let mut rng = Rng::derive(seed, &[0x6576_616c]);
        let by_type = ClientType::ALL
            .iter()
            .map(|&t| {
                let mods = t.layout(world.num_modalities());
                Ok((t, tasks::sample_batch(world, &mods, per_type, &mut rng)?))
            })
            .collect::<Result<_, FederationError>>()?;
        Ok(Self { by_type })
    }

    pub fn all(&self) -> Vec<Sample> {
        self.by_type.iter().flat_map(|(_, s)| s.iter().cloned()).collect()
    }

    fn of(&self, t: ClientType) -> &[Sample] {
        self.by_type
            .iter()
            .find(|(x, _)| *x == t)
            .map(|(_, s)| s.as_slice())
            .unwrap_or(&[])
    }
}

/// A simulated deployment: world, client population and evaluation data.
#[derive(Clone, Debug)]
pub struct Federation {
    pub config: FederationConfig,
    pub ablations: Ablations,
    pub gate: GateConfig,
    pub world: SyntheticWorld,
    pub clients: Vec<ClientData>,
    pub eval: EvalSet,
    eval_all: Vec<Sample>,
}

impl Federation {
    /// Draws the client latent pool, splits it by label with a Dirichlet
    /// partition and assigns client types.
    pub fn build(
        config: FederationConfig,
        ablations: Ablations,
        gate: GateConfig,
        world: SyntheticWorld,
        eval_per_type: usize,
    ) -> Result<Self, FederationError> {
        let mut rng = Rng::derive(config.seed, &[0x0070_6f70_756c]);
        let n = config.clients * config.samples_per_client;
        let latents: Vec<Vec<f64>> = (0..n).map(|_| world.draw_latent(&mut rng)).collect();
        let labels: Vec<usize> = latents.iter().map(|z| world.label(z)).collect();
        let parts = dirichlet_partition(&labels, config.clients, config.dirichlet_alpha, &mut rng)?;
        let types = assign_client_types(config.clients, config.client_type_mix, &mut rng)?;
        let clients = parts
            .into_iter()
            .zip(types)
            .map(|(idx, client_type)| ClientData {
                client_type,
                latents: idx.into_iter().map(|i| latents[i].clone()).collect(),
            })
            .collect();
        let eval = EvalSet::generate(&world, eval_per_type, config.seed)?;
        let eval_all = eval.all();
        Ok(Self {
            config,
            ablations,
            gate,
            world,
            clients,
            eval,
            eval_all,
        })
    }

    pub fn effective_gate(&self) -> GateConfig {
        if self.ablations.no_sglt_gate {
            GateConfig::off()
        } else if self.ablations.hard_gate {
            GateConfig::hard(self.gate.tau)
        } else {
            self.gate
        }
    }

    pub fn diffgno_config(&self) -> DiffGnoConfig {
        DiffGnoConfig {
            sched: self.config.sched,
            param: ScoreParam::Preconditioned,
            weight: DsmWeight::SigmaSquared,
            n_rev: self.config.n_rev,
            dsm_steps: self.config.dsm_steps,
            dsm_lr: self.config.dsm_lr,
            dsm_repeats: self.config.dsm_repeats,
            t_floor: diffgno::T_FLOOR,
            consensus_samples: self.config.consensus_samples,
        }
    }

    pub fn local_config(&self) -> LocalTrainConfig {
        LocalTrainConfig {
            local_steps: self.config.local_steps,
            batch: self.config.batch,
            lr: self.config.lr,
            weight_decay: self.config.weight_decay,
            missing_rate: self.config.missing_rate,
        }
    }

    pub fn sigma_sig(&self) -> f64 {
        if self.ablations.no_spdp {
            0.0
        } else {
            spdp::calibrate_sigma(&self.config.budget)
        }
    }

    /// Local training plus privatization for one client.
    pub fn client_update(&self, model: &GlobalModel, id: usize) -> Result<ClientUpdate, FederationError> {
        let data = &self.clients[id];
        let mut rng = Rng::derive(self.config.seed, &[model.round as u64, id as u64]);
        let local = model.client_model(self.effective_gate())?;
        let up = tasks::local_train(&local, &self.world, data, &self.local_config(), &mut rng)?;
        let budget = &self.config.budget;
        let kernel_delta = if self.ablations.no_spdp {
            if self.ablations.no_clip {
                up.kernel_delta
            } else {
                spdp::clip_only(&up.kernel_delta, budget.clip_bound)
            }
        } else if self.ablations.isotropic_dp {
            spdp::privatize_isotropic(&up.kernel_delta, budget, &mut rng)
        } else {
            let proj = spdp::build_projectors(&model.basis_u, self.config.rank)?;
            spdp::privatize(&up.kernel_delta, &proj, budget, &mut rng)?
        };
        Ok(ClientUpdate {
            client_id: id,
            kernel_delta,
            rest_deltas: up.rest_deltas,
            num_samples: data.num_samples(),
            train_loss: up.mean_loss,
        })
    }

    /// Global-model metrics on the held-out set and the MMD² between pooled
    /// latents of type A and type B evaluation samples.
    pub fn evaluate(&self, model: &GlobalModel) -> Result<(Metrics, f64), FederationError> {
        let cm = model.client_model(self.effective_gate())?;
        let metrics = tasks::evaluate(&cm, &self.eval_all)?;
        let a = tasks::pooled_latents(&cm, self.eval.of(ClientType::A))?;
        let b = tasks::pooled_latents(&cm, self.eval.of(ClientType::B))?;
        let gap = if a.len() >= 2 && b.len() >= 2 {
            mmd(&a, &b, median_bandwidth(&a, &b))?
        } else {
            f64::NAN
        };
        Ok((metrics, gap))
    }

    /// One round of the protocol. Failed clients are dropped and listed in
    /// the record; `E = 0` leaves every parameter untouched.
    pub fn run_round(
        &self,
        model: &GlobalModel,
        net: &mut ScoreNet,
    ) -> Result<(GlobalModel, RoundRecord), FederationError> {
        let start = Instant::now();
        let ids = sample_clients(&self.config, model.round);
        let results: Vec<(usize, Result<ClientUpdate, FederationError>)> =
            ids.par_iter().map(|&id| (id, self.client_update(model, id))).collect();
        let mut updates = Vec::with_capacity(results.len());
        let mut dropped = Vec::new();
        let mut warnings = Vec::new();
        for (id, r) in results {
            match r {
                Ok(u) => updates.push(u),
                Err(e) => {
                    warnings.push(format!("client {id} dropped: {e}"));
                    dropped.push(id);
                }
            }
        }
        if updates.is_empty() {
            return Err(FederationError::NoSurvivors { round: model.round });
        }
        let train_loss_mean = updates.iter().map(|u| u.train_loss).sum::<f64>() / updates.len() as f64;
        let weights: Vec<f64> = updates
            .iter()
            .map(|u| {
                if self.config.unweighted_fedavg {
                    1.0
                } else {
                    u.num_samples as f64
                }
            })
            .collect();

        let mut next = model.clone();
        if self.config.local_steps > 0 {
            let kernel_deltas: Vec<&Matrix> = updates.iter().map(|u| &u.kernel_delta).collect();
            let kernel_step = if self.ablations.no_diffgno {
                fedavg_matrix(&kernel_deltas, &weights)?
            } else {
                let owned: Vec<Matrix> = kernel_deltas.iter().map(|m| (*m).clone()).collect();
                let mut rng = Rng::derive(self.config.seed, &[0x7365_7276, model.round as u64]);
                let agg = diffgno::aggregate(
                    &owned,
                    &model.basis_u,
                    &model.basis_w,
                    self.config.rank,
                    net,
                    &self.diffgno_config(),
                    &mut rng,
                )?;
                warnings.extend(agg.warnings);
                agg.delta
            };
            next.theta_m.axpy(self.config.server_step, &kernel_step)?;
            let rest: Vec<&Blocks> = updates.iter().map(|u| &u.rest_deltas).collect();
            let avg = fedavg(&rest, &weights)?;
            for (name, delta) in &avg {
                let block = next.rest.get_mut(name).ok_or_else(|| FederationError::BlockMismatch {
                    name: name.clone(),
                    detail: "not in the global model".into(),
                })?;
                block.axpy(self.config.server_step, delta)?;
            }
        }
        next.round += 1;
        let (u, w, s) = global_basis(&next.theta_m)?;
        next.basis_u = u;
        next.basis_w = w;
        next.spectrum = s;

        let (metrics, gap) = self.evaluate(&next)?;
        let record = RoundRecord {
            round: next.round,
            participating: updates.iter().map(|u| u.client_id).collect(),
            dropped,
            train_loss_mean,
            metrics,
            mmd: gap,
            sigma_sig: self.sigma_sig(),
            wallclock_ms: start.elapsed().as_millis() as u64,
            warnings,
        };
        Ok((next, record))
    }
}
