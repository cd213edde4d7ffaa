//! SMOTE oversampling.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{Prng, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SmoteError {
    #[error("SMOTE needs more than k = {k} minority rows, got {n}")]
    TooFewRows { n: usize, k: usize },
    #[error("neighbor count must be at least 1")]
    ZeroNeighbors,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmoteConfig {
    pub k: usize,
    pub seed: u64,
}

impl Default for SmoteConfig {
    fn default() -> Self {
        Self { k: 5, seed: 0 }
    }
}

/// Where a synthetic row came from: `x_base + λ·(x_neighbor − x_base)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoteOrigin {
    pub base: usize,
    pub neighbor: usize,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoteOutput {
    pub rows: Tensor,
    pub origins: Vec<SmoteOrigin>,
}

/// Indices of the `k` nearest other rows of each row (Euclidean, ties to
/// the lower index).
pub fn nearest_neighbors(x: &Tensor, k: usize) -> Vec<Vec<usize>> {
    let n = x.rows();
    (0..n)
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let s: f64 = x
                        .row(i)
                        .iter()
                        .zip(x.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (s, j)
                })
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

/// Generates `count` rows by interpolating between minority rows and
/// their nearest minority neighbors. Base rows are visited round-robin in
/// a seeded random order.
pub fn smote(x: &Tensor, count: usize, config: &SmoteConfig) -> Result<SmoteOutput, SmoteError> {
    let n = x.rows();
    if config.k == 0 {
        return Err(SmoteError::ZeroNeighbors);
    }
    if n <= config.k {
        return Err(SmoteError::TooFewRows { n, k: config.k });
    }
    let mut rng = Prng::new(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let knn = nearest_neighbors(x, config.k);
    let mut data = Vec::with_capacity(count * x.cols());
    let mut origins = Vec::with_capacity(count);
    for r in 0..count {
        let base = order[r % n];
        let neighbor = knn[base][rng.below(config.k)];
        let lambda = rng.next_f64();
        data.extend(interpolate(x.row(base), x.row(neighbor), lambda));
        origins.push(SmoteOrigin {
            base,
            neighbor,
            lambda,
        });
    }
    Ok(SmoteOutput {
        rows: Tensor::matrix(count, x.cols(), data).expect("count × d"),
        origins,
    })
}

fn interpolate<'a>(a: &'a [f64], b: &'a [f64], lambda: f64) -> impl Iterator<Item = f64> + 'a {
    a.iter().zip(b).map(move |(p, q)| p + lambda * (q - p))
}
