use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::world::Sample;
use super::TaskError;
use crate::linalg::{self, Matrix, Rng};
use crate::sglt::{self, FeatureMap, FilterSource, GateConfig, SemanticKernel};

/// Named parameter blocks outside the semantic kernel.
pub type Blocks = BTreeMap<String, Matrix>;

pub fn embed_weight(m: usize) -> String {
    format!("embed.{m}.w")
}

pub fn embed_bias(m: usize) -> String {
    format!("embed.{m}.b")
}

pub const HEAD_REG_W: &str = "head.reg.w";
pub const HEAD_REG_B: &str = "head.reg.b";
pub const HEAD_CLS_W: &str = "head.cls.w";
pub const HEAD_CLS_B: &str = "head.cls.b";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// token width `d`; also the number of random features
    pub d: usize,
    pub modality_dims: Vec<usize>,
    pub target_dim: usize,
    pub num_classes: usize,
}

/// Per-client network: modality embedders, one SGLT layer, mean pooling and
/// two linear heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientModel {
    pub kernel: SemanticKernel,
    pub rest: Blocks,
    pub features: FeatureMap,
    pub gate: GateConfig,
    pub eps: f64,
}

/// Everything needed to backpropagate one sample.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub pred_reg: Vec<f64>,
    pub logits: Vec<f64>,
    /// SGLT output tokens `H'`
    pub latent_tokens: Matrix,
    pub pooled: Vec<f64>,
    embedded: Matrix,
    scaled: Matrix,
    sglt_out: sglt::SgltOutput,
    trace: sglt::SgltTrace,
}

impl ForwardPass {
    pub fn filter(&self) -> &Matrix {
        &self.sglt_out.filter
    }
}

/// Fresh non-kernel blocks: embedders scaled so tokens land near unit norm,
/// small heads, zero biases.
pub fn init_rest(cfg: &ModelConfig, rng: &mut Rng) -> Blocks {
    let mut rest = Blocks::new();
    for (m, &d_in) in cfg.modality_dims.iter().enumerate() {
        rest.insert(
            embed_weight(m),
            linalg::random_gaussian_matrix(rng, d_in, cfg.d, 0.5 / (d_in as f64).sqrt()),
        );
        rest.insert(embed_bias(m), Matrix::zeros(1, cfg.d));
    }
    let head_scale = 1.0 / (cfg.d as f64).sqrt();
    rest.insert(
        HEAD_REG_W.into(),
        linalg::random_gaussian_matrix(rng, cfg.d, cfg.target_dim, head_scale),
    );
    rest.insert(HEAD_REG_B.into(), Matrix::zeros(1, cfg.target_dim));
    rest.insert(
        HEAD_CLS_W.into(),
        linalg::random_gaussian_matrix(rng, cfg.d, cfg.num_classes, head_scale),
    );
    rest.insert(HEAD_CLS_B.into(), Matrix::zeros(1, cfg.num_classes));
    rest
}

pub fn zero_rest(cfg: &ModelConfig) -> Blocks {
    let mut rest = Blocks::new();
    for (m, &d_in) in cfg.modality_dims.iter().enumerate() {
        rest.insert(embed_weight(m), Matrix::zeros(d_in, cfg.d));
        rest.insert(embed_bias(m), Matrix::zeros(1, cfg.d));
    }
    rest.insert(HEAD_REG_W.into(), Matrix::zeros(cfg.d, cfg.target_dim));
    rest.insert(HEAD_REG_B.into(), Matrix::zeros(1, cfg.target_dim));
    rest.insert(HEAD_CLS_W.into(), Matrix::zeros(cfg.d, cfg.num_classes));
    rest.insert(HEAD_CLS_B.into(), Matrix::zeros(1, cfg.num_classes));
    rest
}

/// Gradients with the same layout as the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub kernel: Matrix,
    pub rest: Blocks,
}

impl ModelGrads {
    pub fn zeros_like(model: &ClientModel) -> Self {
        Self {
            kernel: Matrix::zeros(model.d(), model.d()),
            rest: model
                .rest
                .iter()
                .map(|(k, v)| (k.clone(), Matrix::zeros(v.rows(), v.cols())))
                .collect(),
        }
    }
}

fn block<'a>(rest: &'a Blocks, name: &str) -> Result<&'a Matrix, TaskError> {
    rest.get(name).ok_or_else(|| TaskError::MissingBlock(name.to_string()))
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `logsumexp(logits) − logits[label]`
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

pub fn mse(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64
}

impl ClientModel {
    pub fn new(kernel: SemanticKernel, rest: Blocks, features: FeatureMap, gate: GateConfig) -> Self {
        Self {
            kernel,
            rest,
            features,
            gate,
            eps: sglt::DEFAULT_EPS,
        }
    }

    pub fn d(&self) -> usize {
        self.kernel.dim()
    }

    /// `d^{-1/4}` applied to queries and keys, as in scaled softmax attention.
    fn qk_scale(&self) -> f64 {
        (self.d() as f64).powf(-0.25)
    }

    fn embed(&self, sample: &Sample) -> Result<Matrix, TaskError> {
        let d = self.d();
        let total = sample.num_tokens();
        let mut h = Matrix::zeros(total, d);
        let mut row = 0;
        for (m, x) in &sample.tokens {
            let w = block(&self.rest, &embed_weight(*m))?;
            let b = block(&self.rest, &embed_bias(*m))?;
            let e = x.matmul(w)?;
            for r in 0..e.rows() {
                let dst = h.row_mut(row + r);
                for c in 0..d {
                    dst[c] = e[(r, c)] + b[(0, c)];
                }
            }
            row += e.rows();
        }
        Ok(h)
    }

    pub fn forward(&self, sample: &Sample) -> Result<ForwardPass, TaskError> {
        self.forward_with(sample, FilterSource::Gate(&self.gate))
    }

    /// Forward pass with an explicit filter source; [`FilterSource::Frozen`]
    /// replays a recorded filter.
    pub fn forward_with(&self, sample: &Sample, filter: FilterSource<'_>) -> Result<ForwardPass, TaskError> {
        let embedded = self.embed(sample)?;
        let scaled = embedded.scale(self.qk_scale());
        let (sglt_out, trace) = sglt::sglt_forward_traced(
            &self.features,
            &self.kernel,
            filter,
            &scaled,
            &scaled,
            &embedded,
            self.eps,
        )?;
        let h = &sglt_out.h_prime;
        let n = h.rows() as f64;
        let pooled: Vec<f64> = (0..h.cols())
            .map(|c| (0..h.rows()).map(|r| h[(r, c)]).sum::<f64>() / n)
            .collect();
        let head = |w: &str, b: &str| -> Result<Vec<f64>, TaskError> {
            let w = block(&self.rest, w)?;
            let b = block(&self.rest, b)?;
            Ok(w.transpose()
                .matvec(&pooled)?
                .into_iter()
                .zip(b.row(0))
                .map(|(v, bb)| v + bb)
                .collect())
        };
        let pred_reg = head(HEAD_REG_W, HEAD_REG_B)?;
        let logits = head(HEAD_CLS_W, HEAD_CLS_B)?;
        Ok(ForwardPass {
            pred_reg,
            logits,
            latent_tokens: sglt_out.h_prime.clone(),
            pooled,
            embedded,
            scaled,
            sglt_out,
            trace,
        })
    }

    /// `MSE + CE` for one sample.
    pub fn sample_loss(pass: &ForwardPass, sample: &Sample) -> f64 {
        mse(&pass.pred_reg, &sample.target) + cross_entropy(&pass.logits, sample.label)
    }

    /// Adds `weight · ∂(MSE + CE)/∂params` for one sample into `grads`, with
    /// the filter recorded in `pass` held fixed.
    pub fn backward(
        &self,
        sample: &Sample,
        pass: &ForwardPass,
        weight: f64,
        grads: &mut ModelGrads,
    ) -> Result<(), TaskError> {
        let t = pass.pred_reg.len() as f64;
        let d_reg: Vec<f64> = pass
            .pred_reg
            .iter()
            .zip(&sample.target)
            .map(|(p, y)| weight * 2.0 * (p - y) / t)
            .collect();
        let mut d_logits = softmax(&pass.logits);
        d_logits[sample.label] -= 1.0;
        d_logits.iter_mut().for_each(|g| *g *= weight);

        let mut d_pooled = vec![0.0; pass.pooled.len()];
        for (wn, bn, dy) in [(HEAD_REG_W, HEAD_REG_B, &d_reg), (HEAD_CLS_W, HEAD_CLS_B, &d_logits)] {
            let w = block(&self.rest, wn)?;
            {
                let gw = grads
                    .rest
                    .get_mut(wn)
                    .ok_or_else(|| TaskError::MissingBlock(wn.into()))?;
                for (i, &p) in pass.pooled.iter().enumerate() {
                    for (j, &g) in dy.iter().enumerate() {
                        gw[(i, j)] += p * g;
                    }
                }
            }
            let gb = grads
                .rest
                .get_mut(bn)
                .ok_or_else(|| TaskError::MissingBlock(bn.into()))?;
            gb.row_mut(0).iter_mut().zip(dy.iter()).for_each(|(a, g)| *a += g);
            for (i, dp) in d_pooled.iter_mut().enumerate() {
                *dp += linalg::dot(w.row(i), dy);
            }
        }

        let h = &pass.sglt_out.h_prime;
        let n = h.rows() as f64;
        let d_h = Matrix::from_fn(h.rows(), h.cols(), |_, c| d_pooled[c] / n);
        let sg = sglt::sglt_backward(
            &self.features,
            &pass.sglt_out,
            &pass.trace,
            &pass.scaled,
            &pass.scaled,
            &pass.embedded,
            &d_h,
        );
        grads.kernel.axpy(1.0, &sg.d_theta_m)?;
        let mut d_emb = sg.d_v;
        d_emb.axpy(self.qk_scale(), &sg.d_q)?;
        d_emb.axpy(self.qk_scale(), &sg.d_k)?;

        let mut row = 0;
        for (m, x) in &sample.tokens {
            let rows = x.rows();
            let d_slice = Matrix::from_fn(rows, d_emb.cols(), |r, c| d_emb[(row + r, c)]);
            let gw_name = embed_weight(*m);
            let gw = grads.rest.get_mut(&gw_name).ok_or(TaskError::MissingBlock(gw_name))?;
            gw.axpy(1.0, &x.t_matmul(&d_slice)?)?;
            let gb_name = embed_bias(*m);
            let gb = grads.rest.get_mut(&gb_name).ok_or(TaskError::MissingBlock(gb_name))?;
            for r in 0..rows {
                gb.row_mut(0).iter_mut().zip(d_slice.row(r)).for_each(|(a, g)| *a += g);
            }
            row += rows;
        }
        Ok(())
    }

    /// Mean loss over `batch` and its gradient. Returns the per-sample filters
    /// so the same function can be re-evaluated with them frozen.
    pub fn batch_loss_and_grads(&self, batch: &[Sample]) -> Result<(f64, ModelGrads, Vec<Matrix>), TaskError> {
        let mut grads = ModelGrads::zeros_like(self);
        let mut loss = 0.0;
        let mut filters = Vec::with_capacity(batch.len());
        let w = 1.0 / batch.len() as f64;
        for s in batch {
            let pass = self.forward(s)?;
            loss += Self::sample_loss(&pass, s);
            self.backward(s, &pass, w, &mut grads)?;
            filters.push(pass.sglt_out.filter);
        }
        Ok((loss * w, grads, filters))
    }

    /// Mean loss with recorded filters in place of the gate.
    pub fn batch_loss_frozen(&self, batch: &[Sample], filters: &[Matrix]) -> Result<f64, TaskError> {
        let mut loss = 0.0;
        for (s, f) in batch.iter().zip(filters) {
            let pass = self.forward_with(s, FilterSource::Frozen(f))?;
            loss += Self::sample_loss(&pass, s);
        }
        Ok(loss / batch.len() as f64)
    }

    /// Parameters in optimizer order: kernel first, then blocks by name.
    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.kernel.theta_m];
        out.extend(self.rest.values_mut());
        out
    }
}

impl ModelGrads {
    pub fn as_list(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.kernel];
        out.extend(self.rest.values());
        out
    }
}
