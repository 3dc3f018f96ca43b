use serde::{Deserialize, Serialize};

use super::TaskError;
use crate::linalg::{self, dot, norm2, Matrix, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    /// ambient semantic dimension `p`
    pub latent_dim: usize,
    /// dimension of the latent variable `z`, i.e. rank of the shared operator
    pub rank_true: usize,
    pub num_classes: usize,
    pub target_dim: usize,
    /// feature width of each modality
    pub modality_dims: Vec<usize>,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            rank_true: 4,
            num_classes: 5,
            target_dim: 3,
            modality_dims: vec![12, 16, 20],
            noise_scale: 0.3,
            seed: 7,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), TaskError> {
        let bad = |msg: String| Err(TaskError::InvalidConfig(msg));
        if self.rank_true == 0 || self.rank_true > self.latent_dim {
            return bad(format!(
                "rank_true must be in 1..=latent_dim ({}), got {}",
                self.latent_dim, self.rank_true
            ));
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.target_dim == 0 {
            return bad("target_dim must be >= 1".into());
        }
        if self.modality_dims.is_empty() {
            return bad("at least one modality is required".into());
        }
        if let Some(&d) = self.modality_dims.iter().find(|&&d| d < self.rank_true) {
            return bad(format!(
                "modality width {d} is below rank_true {}; signal would not be identifiable",
                self.rank_true
            ));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad(format!("noise_scale must be finite and >= 0, got {}", self.noise_scale));
        }
        Ok(())
    }
}

/// One sensor stream: how the shared semantics show up in its features.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityMap {
    /// `d_in × p`
    pub mixing: Matrix,
    /// orthonormal basis of the signal span `col(A_m G)`, `d_in × rank_true`
    pub signal_basis: Matrix,
    /// orthonormal complement of `signal_basis`, `d_in × (d_in − rank_true)`
    pub noise_basis: Matrix,
}

impl ModalityMap {
    pub fn input_dim(&self) -> usize {
        self.mixing.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    /// `p × rank_true`, orthonormal columns
    pub operator: Matrix,
    pub modalities: Vec<ModalityMap>,
    /// `target_dim × rank_true`, unit rows, so every target coordinate is N(0, 1)
    pub readout: Matrix,
    pub class_direction: Vec<f64>,
    /// ascending cut points of the class readout, `num_classes − 1` of them
    pub class_edges: Vec<f64>,
}

const CLASS_REFERENCE_DRAWS: usize = 20_000;

/// Gram–Schmidt on `start`'s columns, then extends with random directions to
/// `n` orthonormal columns. `start` must have full column rank.
fn orthonormal_extension(start: &Matrix, n: usize, rng: &mut Rng) -> Matrix {
    let dim = start.rows();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let push = |mut v: Vec<f64>, cols: &mut Vec<Vec<f64>>| -> bool {
        let scale = norm2(&v);
        for _ in 0..2 {
            for c in cols.iter() {
                let p = dot(&v, c);
                v.iter_mut().zip(c).for_each(|(x, y)| *x -= p * y);
            }
        }
        let nrm = norm2(&v);
        if nrm > 1e-8 * scale.max(1.0) {
            v.iter_mut().for_each(|x| *x /= nrm);
            cols.push(v);
            true
        } else {
            false
        }
    };
    for c in 0..start.cols() {
        assert!(push(start.col(c), &mut cols), "start columns are rank deficient");
    }
    while cols.len() < n {
        push(linalg::gaussian(rng, dim, 1.0), &mut cols);
    }
    Matrix::from_fn(dim, n, |r, c| cols[c][r])
}

fn unit_rows(m: Matrix) -> Matrix {
    let mut m = m;
    for r in 0..m.rows() {
        let n = norm2(m.row(r));
        m.row_mut(r).iter_mut().for_each(|x| *x /= n);
    }
    m
}

/// Builds the world from its seed alone.
pub fn generate_world(config: &WorldConfig) -> Result<SyntheticWorld, TaskError> {
    config.validate()?;
    let mut rng = Rng::derive(config.seed, &[0x0077_6f72_6c64]);
    let p = config.latent_dim;
    let r = config.rank_true;
    let operator = linalg::random_orthonormal(&mut rng, p, r);
    let mut modalities = Vec::with_capacity(config.modality_dims.len());
    for &d_in in &config.modality_dims {
        let mixing = linalg::random_gaussian_matrix(&mut rng, d_in, p, 1.0 / (p as f64).sqrt());
        let signal = mixing.matmul(&operator)?;
        let full = orthonormal_extension(&signal, d_in, &mut rng);
        let signal_basis = full.leading_cols(r);
        let noise_basis = Matrix::from_fn(d_in, d_in - r, |i, j| full[(i, j + r)]);
        modalities.push(ModalityMap {
            mixing,
            signal_basis,
            noise_basis,
        });
    }
    let readout = unit_rows(linalg::random_gaussian_matrix(&mut rng, config.target_dim, r, 1.0));
    let class_direction = {
        let v = linalg::gaussian(&mut rng, r, 1.0);
        let n = norm2(&v);
        v.into_iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let mut reference: Vec<f64> = (0..CLASS_REFERENCE_DRAWS)
        .map(|_| dot(&class_direction, &linalg::gaussian(&mut rng, r, 1.0)))
        .collect();
    reference.sort_by(f64::total_cmp);
    let class_edges = (1..config.num_classes)
        .map(|k| reference[k * CLASS_REFERENCE_DRAWS / config.num_classes])
        .collect();
    Ok(SyntheticWorld {
        config: config.clone(),
        operator,
        modalities,
        readout,
        class_direction,
        class_edges,
    })
}

/// Token position weighting `1 + ½cos(2πs)` at the cell centre `s = (i + ½)/L`.
pub fn token_weight(i: usize, len: usize) -> f64 {
    let s = (i as f64 + 0.5) / len as f64;
    1.0 + 0.5 * (2.0 * std::f64::consts::PI * s).cos()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityConfig {
    pub modality: usize,
    pub seq_len: usize,
    pub present: bool,
}

/// A latent draw, its ground-truth targets, and one rendering per present modality.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub z: Vec<f64>,
    /// `(modality id, L × d_in tokens)` in modality order
    pub tokens: Vec<(usize, Matrix)>,
    pub target: Vec<f64>,
    pub label: usize,
}

impl Sample {
    pub fn num_tokens(&self) -> usize {
        self.tokens.iter().map(|(_, t)| t.rows()).sum()
    }
}

impl SyntheticWorld {
    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn draw_latent(&self, rng: &mut Rng) -> Vec<f64> {
        linalg::gaussian(rng, self.config.rank_true, 1.0)
    }

    pub fn target(&self, z: &[f64]) -> Vec<f64> {
        self.readout.matvec(z).expect("latent length")
    }

    pub fn label(&self, z: &[f64]) -> usize {
        let c = dot(&self.class_direction, z);
        self.class_edges.iter().take_while(|&&e| c >= e).count()
    }

    /// Noiseless per-token signal direction `A_m G z` (before position weighting).
    pub fn signal(&self, modality: usize, z: &[f64]) -> Vec<f64> {
        let m = &self.modalities[modality];
        let pz = self.operator.matvec(z).expect("latent length");
        m.mixing.matvec(&pz).expect("mixing shape")
    }

    /// Renders `z` under `mods`. Noise alternates sign from token to token and
    /// lives in each modality's noise basis only.
    pub fn render(&self, z: &[f64], mods: &[ModalityConfig], rng: &mut Rng) -> Result<Sample, TaskError> {
        if !mods.iter().any(|m| m.present) {
            return Err(TaskError::NoModality);
        }
        let mut tokens = Vec::new();
        for mc in mods.iter().filter(|m| m.present) {
            let map = self
                .modalities
                .get(mc.modality)
                .ok_or(TaskError::UnknownModality(mc.modality))?;
            let sig = self.signal(mc.modality, z);
            let d_in = map.input_dim();
            let n_noise = map.noise_basis.cols();
            let mut x = Matrix::zeros(mc.seq_len, d_in);
            for i in 0..mc.seq_len {
                let w = token_weight(i, mc.seq_len);
                let row = x.row_mut(i);
                row.iter_mut().zip(&sig).for_each(|(a, s)| *a = w * s);
                if self.config.noise_scale > 0.0 && n_noise > 0 {
                    let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                    let xi = linalg::gaussian(rng, n_noise, self.config.noise_scale);
                    let noise = map.noise_basis.matvec(&xi)?;
                    row.iter_mut().zip(&noise).for_each(|(a, e)| *a += sign * e);
                }
            }
            tokens.push((mc.modality, x));
        }
        Ok(Sample {
            z: z.to_vec(),
            tokens,
            target: self.target(z),
            label: self.label(z),
        })
    }
}

/// Draws `b` fresh latents and renders each under `mods`.
pub fn sample_batch(
    world: &SyntheticWorld,
    mods: &[ModalityConfig],
    b: usize,
    rng: &mut Rng,
) -> Result<Vec<Sample>, TaskError> {
    (0..b)
        .map(|_| {
            let z = world.draw_latent(rng);
            world.render(&z, mods, rng)
        })
        .collect()
}

/// Discretization profile of a client.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClientType {
    /// one modality, short sequence
    A,
    /// two modalities, long sequences
    B,
    /// all modalities, mixed lengths, streams may drop out
    C,
}

impl ClientType {
    pub const ALL: [ClientType; 3] = [ClientType::A, ClientType::B, ClientType::C];

    /// Full layout with every stream present. Needs at least three modalities
    /// in the world for type C and two for type B; missing ones are skipped.
    pub fn layout(self, num_modalities: usize) -> Vec<ModalityConfig> {
        let spec: &[(usize, usize)] = match self {
            ClientType::A => &[(0, 8)],
            ClientType::B => &[(0, 32), (1, 32)],
            ClientType::C => &[(0, 16), (1, 16), (2, 32)],
        };
        spec.iter()
            .filter(|(m, _)| *m < num_modalities)
            .map(|&(modality, seq_len)| ModalityConfig {
                modality,
                seq_len,
                present: true,
            })
            .collect()
    }

    /// Layout for one draw. Type C streams go missing independently with
    /// probability `missing_rate`; if every stream drops, one is restored at
    /// random.
    pub fn draw_layout(self, num_modalities: usize, missing_rate: f64, rng: &mut Rng) -> Vec<ModalityConfig> {
        let mut mods = self.layout(num_modalities);
        if self == ClientType::C && missing_rate > 0.0 {
            for m in mods.iter_mut() {
                m.present = !rng.bernoulli(missing_rate);
            }
            if !mods.iter().any(|m| m.present) {
                let k = rng.below(mods.len());
                mods[k].present = true;
            }
        }
        mods
    }
}
