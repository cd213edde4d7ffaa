//! Parameter-free sinusoidal embedding of a feature vector and timestep.
//!
//! A record `x ∈ ℝᵈ` at timestep `t` becomes a `(d + 1) × D` matrix: row
//! `j` (1-based) is `x_j · ψ(j, s₁)` and the last row is `ψ(t, s₂)`, where
//! `ψ(j, s)` interleaves `sin(γᵏ·s·j)` and `cos(γᵏ·s·j)` for
//! `k = 0 … D/2 − 1` and `γ = 10000^(−2/D)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("embedding dimension {0} must be even and positive")]
    OddDimension(usize),
    #[error("embedding scale {0} must be positive and finite")]
    Scale(f64),
    #[error("timestep {t} outside [1, {max}]")]
    Timestep { t: usize, max: usize },
    #[error("feature vector has a non-finite entry")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    /// Latent width `D`.
    pub dim: usize,
    /// Feature index scale `s₁`.
    pub feature_scale: f64,
    /// Timestep scale `s₂`.
    pub time_scale: f64,
    /// Largest valid timestep `T`.
    pub timesteps: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            feature_scale: 500.0,
            time_scale: 0.5,
            timesteps: 1000,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<(), EmbeddingError> {
        if self.dim == 0 || self.dim % 2 != 0 {
            return Err(EmbeddingError::OddDimension(self.dim));
        }
        for s in [self.feature_scale, self.time_scale] {
            if !(s > 0.0 && s.is_finite()) {
                return Err(EmbeddingError::Scale(s));
            }
        }
        Ok(())
    }

    /// Frequency ratio `γ = 10000^(−2/D)`.
    pub fn gamma(&self) -> f64 {
        10000f64.powf(-2.0 / self.dim as f64)
    }
}

/// `ψ(j, s)` as a `D`-vector in interleaved sin/cos order.
pub fn psi(j: usize, scale: f64, config: &EmbeddingConfig) -> Vec<f64> {
    let gamma = config.gamma();
    let mut out = Vec::with_capacity(config.dim);
    let mut freq = 1.0;
    for _ in 0..config.dim / 2 {
        let arg = freq * scale * j as f64;
        out.push(arg.sin());
        out.push(arg.cos());
        freq *= gamma;
    }
    out
}

/// Embeds one record. Row `j − 1` holds feature `j`; the last row is time.
pub fn embed(x: &[f64], t: usize, config: &EmbeddingConfig) -> Result<Tensor, EmbeddingError> {
    Embedder::new(*config, x.len())?.embed_batch(&[x], &[t])
}

/// Embedding with the per-feature basis vectors precomputed.
#[derive(Debug, Clone)]
pub struct Embedder {
    config: EmbeddingConfig,
    features: usize,
    /// `d × D`, row `j − 1` = `ψ(j, s₁)`.
    basis: Vec<f64>,
}

impl Embedder {
    pub fn new(config: EmbeddingConfig, features: usize) -> Result<Self, EmbeddingError> {
        config.validate()?;
        let mut basis = Vec::with_capacity(features * config.dim);
        for j in 1..=features {
            basis.extend(psi(j, config.feature_scale, &config));
        }
        Ok(Self {
            config,
            features,
            basis,
        })
    }

    pub fn config(&self) -> &EmbeddingConfig {
        &self.config
    }

    pub fn features(&self) -> usize {
        self.features
    }

    /// Rows per embedded record, `d + 1`.
    pub fn tokens(&self) -> usize {
        self.features + 1
    }

    /// Stacks the embeddings of several records into a
    /// `(batch · (d + 1)) × D` matrix.
    pub fn embed_batch<R: AsRef<[f64]>>(
        &self,
        xs: &[R],
        ts: &[usize],
    ) -> Result<Tensor, EmbeddingError> {
        let dim = self.config.dim;
        let tokens = self.tokens();
        let mut data = Vec::with_capacity(xs.len() * tokens * dim);
        for (x, &t) in xs.iter().zip(ts) {
            let x = x.as_ref();
            assert_eq!(x.len(), self.features, "feature count");
            if t == 0 || t > self.config.timesteps {
                return Err(EmbeddingError::Timestep {
                    t,
                    max: self.config.timesteps,
                });
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(EmbeddingError::NonFinite);
            }
            for (j, &xj) in x.iter().enumerate() {
                data.extend(self.basis[j * dim..(j + 1) * dim].iter().map(|b| xj * b));
            }
            data.extend(psi(t, self.config.time_scale, &self.config));
        }
        Ok(Tensor::matrix(xs.len() * tokens, dim, data).expect("row-major fill"))
    }
}
