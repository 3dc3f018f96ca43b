use serde::{Deserialize, Serialize};

use super::model::{Blocks, ClientModel};
use super::world::{ClientType, Sample, SyntheticWorld};
use super::TaskError;
use crate::linalg::{Matrix, Rng};
use crate::optim::{AdamConfig, AdamW};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalTrainConfig {
    pub local_steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// per-stream dropout for type C clients
    pub missing_rate: f64,
}

/// A client's private data: a fixed set of latents rendered afresh at every
/// draw under the client's sensor layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientData {
    pub client_type: ClientType,
    pub latents: Vec<Vec<f64>>,
}

impl ClientData {
    pub fn num_samples(&self) -> usize {
        self.latents.len()
    }

    /// `b` latents drawn with replacement, one layout per sample.
    pub fn draw_batch(
        &self,
        world: &SyntheticWorld,
        b: usize,
        missing_rate: f64,
        rng: &mut Rng,
    ) -> Result<Vec<Sample>, TaskError> {
        if self.latents.is_empty() {
            return Err(TaskError::EmptyData);
        }
        (0..b)
            .map(|_| {
                let z = &self.latents[rng.below(self.latents.len())];
                let mods = self.client_type.draw_layout(world.num_modalities(), missing_rate, rng);
                world.render(z, &mods, rng)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalUpdate {
    pub kernel_delta: Matrix,
    pub rest_deltas: Blocks,
    /// mean batch loss over the local steps (one held batch when `E = 0`)
    pub mean_loss: f64,
}

/// `E` AdamW steps from the broadcast model. Optimizer state starts empty.
pub fn local_train(
    model: &ClientModel,
    world: &SyntheticWorld,
    data: &ClientData,
    cfg: &LocalTrainConfig,
    rng: &mut Rng,
) -> Result<LocalUpdate, TaskError> {
    let mut local = model.clone();
    let mut opt = AdamW::new(AdamConfig::adamw(cfg.lr, cfg.weight_decay));
    let mut total = 0.0;
    if cfg.local_steps == 0 {
        let batch = data.draw_batch(world, cfg.batch.max(1), cfg.missing_rate, rng)?;
        let (loss, _, _) = local.batch_loss_and_grads(&batch)?;
        total = loss;
    }
    for _ in 0..cfg.local_steps {
        let batch = data.draw_batch(world, cfg.batch.max(1), cfg.missing_rate, rng)?;
        let (loss, grads, _) = local.batch_loss_and_grads(&batch)?;
        if !loss.is_finite() {
            return Err(TaskError::Diverged(loss));
        }
        total += loss;
        let mut params = local.params_mut();
        opt.step(&mut params, &grads.as_list());
    }
    let mean_loss = total / cfg.local_steps.max(1) as f64;
    let kernel_delta = local.kernel.theta_m.sub(&model.kernel.theta_m)?;
    let mut rest_deltas = Blocks::new();
    for (name, new) in &local.rest {
        rest_deltas.insert(name.clone(), new.sub(&model.rest[name])?);
    }
    Ok(LocalUpdate {
        kernel_delta,
        rest_deltas,
        mean_loss,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub top1: f64,
    /// mean absolute error per target coordinate
    pub pose_err: f64,
}

/// Metrics from raw predictions. Each entry is `(regression, predicted label)`.
pub fn score_predictions(preds: &[(Vec<f64>, usize)], targets: &[(Vec<f64>, usize)]) -> Result<Metrics, TaskError> {
    if preds.is_empty() {
        return Err(TaskError::EmptyEvalSet);
    }
    if preds.len() != targets.len() {
        return Err(TaskError::InvalidConfig(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut coords = 0usize;
    let mut hits = 0usize;
    for ((p, pl), (t, tl)) in preds.iter().zip(targets) {
        for (a, b) in p.iter().zip(t) {
            se += (a - b).powi(2);
            ae += (a - b).abs();
        }
        coords += t.len();
        hits += usize::from(pl == tl);
    }
    Ok(Metrics {
        rmse: (se / coords as f64).sqrt(),
        top1: hits as f64 / preds.len() as f64,
        pose_err: ae / coords as f64,
    })
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &x)| if x > best.1 { (i, x) } else { best },
        )
        .0
}

pub fn evaluate(model: &ClientModel, eval_set: &[Sample]) -> Result<Metrics, TaskError> {
    if eval_set.is_empty() {
        return Err(TaskError::EmptyEvalSet);
    }
    let mut preds = Vec::with_capacity(eval_set.len());
    for s in eval_set {
        let pass = model.forward(s)?;
        preds.push((pass.pred_reg, argmax(&pass.logits)));
    }
    let targets: Vec<(Vec<f64>, usize)> = eval_set.iter().map(|s| (s.target.clone(), s.label)).collect();
    score_predictions(&preds, &targets)
}

/// Mean-pooled SGLT outputs, one vector per sample.
pub fn pooled_latents(model: &ClientModel, samples: &[Sample]) -> Result<Vec<Vec<f64>>, TaskError> {
    samples.iter().map(|s| Ok(model.forward(s)?.pooled)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{self, gaussian};
    use crate::sglt::{FeatureMap, GateConfig, SemanticKernel};
    use crate::tasks::model::{init_rest, ModelConfig};
    use crate::tasks::world::{generate_world, WorldConfig};

    fn setup() -> (SyntheticWorld, ClientModel, ClientData) {
        let world = generate_world(&WorldConfig::default()).unwrap();
        let cfg = ModelConfig {
            d: 16,
            modality_dims: world.config.modality_dims.clone(),
            target_dim: 3,
            num_classes: 5,
        };
        let mut rng = Rng::new(1);
        let model = ClientModel::new(
            SemanticKernel::new(linalg::random_gaussian_matrix(&mut rng, 16, 16, 0.01)).unwrap(),
            init_rest(&cfg, &mut rng),
            FeatureMap::new(16, 16, &mut rng),
            GateConfig::default(),
        );
        let data = ClientData {
            client_type: ClientType::A,
            latents: (0..64).map(|_| world.draw_latent(&mut rng)).collect(),
        };
        (world, model, data)
    }

    fn train_cfg(steps: usize, lr: f64) -> LocalTrainConfig {
        LocalTrainConfig {
            local_steps: steps,
            batch: 8,
            lr,
            weight_decay: 1e-4,
            missing_rate: 0.0,
        }
    }

    #[test]
    fn zero_steps_or_zero_lr_give_zero_deltas() {
        let (world, model, data) = setup();
        for cfg in [train_cfg(0, 1e-2), train_cfg(3, 0.0)] {
            let up = local_train(&model, &world, &data, &cfg, &mut Rng::new(2)).unwrap();
            assert!(up.kernel_delta.as_slice().iter().all(|&v| v == 0.0));
            assert!(up.rest_deltas.values().all(|m| m.as_slice().iter().all(|&v| v == 0.0)));
            assert!(up.mean_loss > 0.0 && up.mean_loss.is_finite());
        }
    }

    #[test]
    fn deterministic_per_rng() {
        let (world, model, data) = setup();
        let a = local_train(&model, &world, &data, &train_cfg(3, 1e-2), &mut Rng::derive(5, &[1, 2])).unwrap();
        let b = local_train(&model, &world, &data, &train_cfg(3, 1e-2), &mut Rng::derive(5, &[1, 2])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn perfect_predictions() {
        let t = vec![(vec![1.0, -2.0], 3), (vec![0.5, 0.0], 1)];
        let m = score_predictions(&t, &t).unwrap();
        assert_eq!((m.rmse, m.top1, m.pose_err), (0.0, 1.0, 0.0));
        assert!(score_predictions(&[], &[]).is_err());
    }

    #[test]
    fn zero_predictor_rmse_is_target_std() {
        let world = generate_world(&WorldConfig::default()).unwrap();
        let mut rng = Rng::new(3);
        let targets: Vec<(Vec<f64>, usize)> = (0..1000)
            .map(|_| {
                let z = world.draw_latent(&mut rng);
                (world.target(&z), world.label(&z))
            })
            .collect();
        let preds: Vec<(Vec<f64>, usize)> = targets.iter().map(|_| (vec![0.0; 3], 0)).collect();
        let m = score_predictions(&preds, &targets).unwrap();
        assert!((m.rmse - 1.0).abs() <= 0.05, "{}", m.rmse);
    }

    #[test]
    fn random_classifier_is_at_chance() {
        let mut rng = Rng::new(4);
        let n = 2000;
        let targets: Vec<(Vec<f64>, usize)> = (0..n).map(|_| (gaussian(&mut rng, 1, 1.0), rng.below(10))).collect();
        let preds: Vec<(Vec<f64>, usize)> = (0..n).map(|_| (vec![0.0], rng.below(10))).collect();
        let m = score_predictions(&preds, &targets).unwrap();
        let sd = (0.1 * 0.9 / n as f64).sqrt();
        assert!((m.top1 - 0.1).abs() <= 3.0 * sd, "{}", m.top1);
    }

    #[test]
    fn training_reduces_loss() {
        let (world, model, data) = setup();
        let cfg = train_cfg(200, 1e-2);
        let mut rng = Rng::new(6);
        let held = data.draw_batch(&world, 64, 0.0, &mut Rng::new(7)).unwrap();
        let before = model.batch_loss_and_grads(&held).unwrap().0;
        let up = local_train(&model, &world, &data, &cfg, &mut rng).unwrap();
        let mut trained = model.clone();
        trained.kernel.theta_m.axpy(1.0, &up.kernel_delta).unwrap();
        for (k, v) in trained.rest.iter_mut() {
            v.axpy(1.0, &up.rest_deltas[k]).unwrap();
        }
        let after = trained.batch_loss_and_grads(&held).unwrap().0;
        assert!(after < 0.8 * before, "{before} -> {after}");
    }

    #[test]
    fn empty_eval_set_is_error() {
        let (_, model, _) = setup();
        assert!(matches!(evaluate(&model, &[]), Err(TaskError::EmptyEvalSet)));
    }
}
