//! 2-D neighbour embedding of classifier features and cluster separation
//! scores.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsneParams {
    /// Capped at `(n - 1) / 3` for small inputs.
    pub perplexity: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TsneParams {
    fn default() -> Self {
        Self { perplexity: 20.0, epochs: 1000, seed: 0 }
    }
}

impl TsneParams {
    pub fn effective_perplexity(&self, n: usize) -> f64 {
        self.perplexity.min((n.saturating_sub(1)) as f64 / 3.0)
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Exact t-SNE from a seeded Gaussian start, so the result depends only on
/// the inputs and `params`.
pub fn tsne_2d(features: &[Vec<f64>], params: &TsneParams) -> Result<Vec<[f64; 2]>> {
    let n = features.len();
    if n < 4 {
        return Err(Error::Validation(format!("need at least 4 points to embed, got {n}")));
    }
    let dim = features[0].len();
    if dim == 0 || features.iter().any(|f| f.len() != dim || f.iter().any(|v| !v.is_finite())) {
        return Err(Error::Validation("features must be finite vectors of one non-zero length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid std");
    let init: Vec<f64> = (0..2 * n).map(|_| normal.sample(&mut rng)).collect();
    let flat = bhtsne::tSNE::<f64, Vec<f64>, 2>::new(features)
        .perplexity(params.effective_perplexity(n))
        .epochs(params.epochs)
        .initial_embedding(init)
        .exact(|a, b| euclidean(a, b))
        .embedding();
    Ok(flat.chunks_exact(2).map(|p| [p[0], p[1]]).collect())
}

/// Mean silhouette coefficient under Euclidean distance. Points in
/// singleton clusters score 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() || points.len() < 2 {
        return Err(Error::Validation(format!("{} points against {} labels", points.len(), labels.len())));
    }
    let k = labels.iter().max().expect("non-empty") + 1;
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::Validation("silhouette needs at least two non-empty clusters".into()));
    }
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let li = labels[i];
        if sizes[li] == 1 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for (j, q) in points.iter().enumerate() {
            if i != j {
                sums[labels[j]] += euclidean(p, q);
            }
        }
        let a = sums[li] / (sizes[li] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != li && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / points.len() as f64)
}
