//! Synthetic multi-modal clients: a planted low-rank world, the per-client
//! network, local training and evaluation metrics.

mod model;
mod train;
mod world;

pub use model::{
    cross_entropy, embed_bias, embed_weight, init_rest, mse, zero_rest, Blocks, ClientModel, ForwardPass, ModelConfig,
    ModelGrads, HEAD_CLS_B, HEAD_CLS_W, HEAD_REG_B, HEAD_REG_W,
};
pub use train::{
    evaluate, local_train, pooled_latents, score_predictions, ClientData, LocalTrainConfig, LocalUpdate, Metrics,
};
pub use world::{
    generate_world, sample_batch, token_weight, ClientType, ModalityConfig, ModalityMap, Sample, SyntheticWorld,
    WorldConfig,
};

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::sglt::SgltError;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Sglt(#[from] SgltError),
    #[error("every modality is absent")]
    NoModality,
    #[error("unknown modality {0}")]
    UnknownModality(usize),
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("client has no data")]
    EmptyData,
    #[error("parameter block {0:?} missing")]
    MissingBlock(String),
    #[error("training diverged (loss {0})")]
    Diverged(f64),
    #[error("invalid task config: {0}")]
    InvalidConfig(String),
}

/// Writes every token matrix of `samples` into `dir` in the matrix binary
/// format, one file per (sample, modality).
pub fn dump_samples(samples: &[Sample], dir: &Path) -> Result<(), TaskError> {
    std::fs::create_dir_all(dir).map_err(LinalgError::from)?;
    for (i, s) in samples.iter().enumerate() {
        for (m, x) in &s.tokens {
            let path = dir.join(format!("sample{i:04}_mod{m}.bin"));
            let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(LinalgError::from)?);
            linalg::write_matrix(&mut f, x)?;
            f.flush().map_err(LinalgError::from)?;
        }
    }
    Ok(())
}
