//! Cluster-guided diffusion synthesis of minority-class tabular records.
//!
//! The pipeline embeds each record and its diffusion timestep with a
//! parameter-free sinusoidal map, denoises with a single Transformer
//! block, and trains one DDPM per cluster of the minority class found by
//! a neighbor-graph layout followed by k-means. Synthetic records are
//! judged by a gradient-boosted tree classifier and by privacy and
//! fidelity metrics.

pub mod numeric;
pub mod apportion;
pub mod dataset;
pub mod denoiser;
pub mod embedding;
pub mod diffusion;
pub mod clustering;
pub mod baselines;
pub mod classifier;
pub mod evaluation;
