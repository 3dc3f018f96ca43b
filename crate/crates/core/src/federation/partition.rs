use super::FederationError;
use crate::linalg::Rng;
use crate::tasks::ClientType;

const MAX_REDRAWS: usize = 100;

fn split_once(by_class: &[Vec<usize>], k: usize, alpha: f64, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut parts = vec![Vec::new(); k];
    for idx in by_class {
        let mut idx = idx.clone();
        rng.shuffle(&mut idx);
        let p = rng.dirichlet(alpha, k);
        let n = idx.len();
        let mut start = 0;
        let mut cum = 0.0;
        for (client, share) in p.iter().enumerate() {
            cum += share;
            let end = if client + 1 == k {
                n
            } else {
                ((cum * n as f64).round() as usize).clamp(start, n)
            };
            parts[client].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    for p in parts.iter_mut() {
        p.sort_unstable();
    }
    parts
}

/// Label-skewed split: for every class, the share each client receives is
/// drawn from `Dirichlet(α·1_K)`.
///
/// A draw that leaves some client empty is redrawn, up to 100 times; after
/// that, empty clients take one index each from the largest client.
pub fn dirichlet_partition(
    labels: &[usize],
    k: usize,
    alpha: f64,
    rng: &mut Rng,
) -> Result<Vec<Vec<usize>>, FederationError> {
    if k == 0 {
        return Err(FederationError::InvalidConfig("clients must be >= 1".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(FederationError::InvalidConfig(format!(
            "dirichlet_alpha must be > 0, got {alpha}"
        )));
    }
    if labels.len() < k {
        return Err(FederationError::TooFewSamples {
            samples: labels.len(),
            clients: k,
        });
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut parts = split_once(&by_class, k, alpha, rng);
    for _ in 0..MAX_REDRAWS {
        if parts.iter().all(|p| !p.is_empty()) {
            return Ok(parts);
        }
        parts = split_once(&by_class, k, alpha, rng);
    }
    while let Some(empty) = parts.iter().position(|p| p.is_empty()) {
        let largest = (0..k)
            .max_by_key(|&i| (parts[i].len(), std::cmp::Reverse(i)))
            .expect("k >= 1");
        let moved = parts[largest].pop().expect("largest is non-empty");
        parts[empty].push(moved);
    }
    Ok(parts)
}

/// Independent categorical draw per client with probabilities `mix` for
/// types A, B, C.
pub fn assign_client_types(k: usize, mix: [f64; 3], rng: &mut Rng) -> Result<Vec<ClientType>, FederationError> {
    let sum: f64 = mix.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || mix.iter().any(|&p| p < 0.0) {
        return Err(FederationError::InvalidConfig(format!(
            "client_type_mix must be non-negative and sum to 1, got {mix:?}"
        )));
    }
    let last = (0..3).rev().find(|&i| mix[i] > 0.0).expect("mix sums to 1");
    Ok((0..k)
        .map(|_| {
            let u = rng.uniform();
            let mut cum = 0.0;
            let pick = (0..3)
                .find(|&i| {
                    cum += mix[i];
                    u < cum
                })
                .unwrap_or(last);
            ClientType::ALL[pick]
        })
        .collect())
}
