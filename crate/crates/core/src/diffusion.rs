//! DDPM noise schedule, training loop and ancestral sampler.
//!
//! Timesteps are 1-based: `t ∈ [1, T]`, with `ᾱ_0 := 1` so the final
//! reverse step is deterministic.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoiser::{
    predict_graph, predict_noise_batch, DenoiserConfig, DenoiserError, DenoiserParams,
};
use crate::embedding::{Embedder, EmbeddingError};
use crate::numeric::{AdamConfig, AdamState, NumericError, Prng, Tape, Tensor};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid schedule: T = {timesteps}, beta from {start} to {end}")]
    Schedule {
        timesteps: usize,
        start: f64,
        end: f64,
    },
    #[error("timestep {t} outside [1, {max}]")]
    Timestep { t: usize, max: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("non-finite value in reverse chain at t = {t}")]
    NonFiniteSample { t: usize },
    #[error("data has {found} columns, model expects {expected}")]
    Width { found: usize, expected: usize },
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Precomputed `β_t`, `α_t = 1 − β_t` and `ᾱ_t = Π α_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear `β_t` from `beta_start` at `t = 1` to `beta_end` at `t = T`.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self, DiffusionError> {
        if timesteps == 0 || !(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0) {
            return Err(DiffusionError::Schedule {
                timesteps,
                start: beta_start,
                end: beta_end,
            });
        }
        let betas: Vec<f64> = (0..timesteps)
            .map(|i| {
                if timesteps == 1 {
                    return beta_start;
                }
                let f = i as f64 / (timesteps - 1) as f64;
                beta_start * (1.0 - f) + beta_end * f
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(timesteps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Reverse-step variance `σ_t² = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.posterior_variance(t).sqrt()
    }

    fn check(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.timesteps() {
            Err(DiffusionError::Timestep {
                t,
                max: self.timesteps(),
            })
        } else {
            Ok(())
        }
    }
}

/// `x_t = √ᾱ_t · x₀ + √(1 − ᾱ_t) · ε`.
pub fn forward_sample(
    x0: &[f64],
    t: usize,
    eps: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>, DiffusionError> {
    schedule.check(t)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// `x̂₀ = (x_t − √(1 − ᾱ_t) · ε̂) / √ᾱ_t`.
pub fn reconstruct_x0(
    x_t: &[f64],
    t: usize,
    eps_hat: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>, DiffusionError> {
    schedule.check(t)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x_t.iter().zip(eps_hat).map(|(x, e)| (x - b * e) / a).collect())
}

/// How the reverse-step mean consumes the predicted noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PosteriorMean {
    /// Posterior mean of `q(x_{t−1} | x_t, x̂₀)` with `x̂₀` rebuilt from `ε̂`.
    #[default]
    Standard,
    /// The two-coefficient mean applied to `ε̂` directly in place of `x̂₀`.
    /// Kept for comparison only; it does not denoise.
    Literal,
}

/// Posterior-mean coefficients `(c₀, c_t)` of `μ = c₀·x̂₀ + c_t·x_t`.
pub fn posterior_coefficients(t: usize, schedule: &NoiseSchedule) -> (f64, f64) {
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t - 1);
    let beta = schedule.beta(t);
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
    let ct = schedule.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
    (c0, ct)
}

/// Reverse-step mean `μ_θ(x_t, t)`.
pub fn posterior_mean(
    x_t: &[f64],
    t: usize,
    eps_hat: &[f64],
    schedule: &NoiseSchedule,
    mode: PosteriorMean,
) -> Result<Vec<f64>, DiffusionError> {
    schedule.check(t)?;
    let (c0, ct) = posterior_coefficients(t, schedule);
    let lead = match mode {
        PosteriorMean::Standard => reconstruct_x0(x_t, t, eps_hat, schedule)?,
        PosteriorMean::Literal => eps_hat.to_vec(),
    };
    Ok(lead.iter().zip(x_t).map(|(l, x)| c0 * l + ct * x).collect())
}

/// `x_{t−1} = μ_θ(x_t, t) + σ_t · z`.
pub fn posterior_step(
    x_t: &[f64],
    t: usize,
    eps_hat: &[f64],
    schedule: &NoiseSchedule,
    z: &[f64],
    mode: PosteriorMean,
) -> Result<Vec<f64>, DiffusionError> {
    let mu = posterior_mean(x_t, t, eps_hat, schedule, mode)?;
    let sigma = schedule.sigma(t);
    Ok(mu.iter().zip(z).map(|(m, zi)| m + sigma * zi).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Decay of the exponential moving average of the weights that
    /// `train` returns; 0 returns the last iterate.
    #[serde(default)]
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 64,
            learning_rate: 1e-3,
            timesteps: 1000,
            beta_start: 0.001,
            beta_end: 0.02,
            ema_decay: 0.99,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule, DiffusionError> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        if self.batch_size == 0 {
            return Err(DiffusionError::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(DiffusionError::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(DiffusionError::Config(format!(
                "EMA decay {} must lie in [0, 1)",
                self.ema_decay
            )));
        }
        self.schedule().map(|_| ())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: DenoiserParams,
    /// Row-weighted mean batch loss of each epoch.
    pub loss_trace: Vec<f64>,
}

/// Minibatch noise-prediction training on standardized rows of `data`.
///
/// Each epoch shuffles the rows, and every row of a batch gets its own
/// uniform timestep and Gaussian noise. One Adam step per batch minimizes
/// the mean squared error between the drawn and the predicted noise. The
/// returned weights are the moving average when `ema_decay > 0`.
pub fn train(
    data: &Tensor,
    config: &TrainConfig,
    denoiser: &DenoiserConfig,
) -> Result<TrainOutcome, DiffusionError> {
    config.validate()?;
    denoiser.validate()?;
    if data.rows() > 0 && data.cols() != denoiser.features {
        return Err(DiffusionError::Width {
            found: data.cols(),
            expected: denoiser.features,
        });
    }
    if denoiser.embedding.timesteps != config.timesteps {
        return Err(DiffusionError::Config(format!(
            "embedding accepts T = {}, schedule has T = {}",
            denoiser.embedding.timesteps, config.timesteps
        )));
    }
    let schedule = config.schedule()?;
    let embedder = Embedder::new(denoiser.embedding, denoiser.features)?;
    let mut params = DenoiserParams::init(denoiser, &mut Prng::new(denoiser.init_seed))?;
    let names: Vec<(String, Tensor)> = params
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let mut adam = AdamState::new(AdamConfig::default(), names.iter().map(|(n, t)| (n.clone(), t)));
    let mut rng = Prng::new(config.seed);
    let d = denoiser.features;
    let n = data.rows();
    let mut order: Vec<usize> = (0..n).collect();
    let mut loss_trace = Vec::with_capacity(config.epochs);
    let mut ema = (config.ema_decay > 0.0).then(|| params.clone());

    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let b = chunk.len();
            let mut noisy = Vec::with_capacity(b * d);
            let mut noise = Vec::with_capacity(b * d);
            let mut ts = Vec::with_capacity(b);
            for &row in chunk {
                let t = 1 + rng.below(schedule.timesteps());
                let eps = rng.gaussian_vec(d);
                noisy.extend(forward_sample(data.row(row), t, &eps, &schedule)?);
                noise.extend(eps);
                ts.push(t);
            }
            let rows: Vec<&[f64]> = noisy.chunks(d).collect();
            let embedded = embedder.embed_batch(&rows, &ts)?;

            let mut tape = Tape::new();
            let nodes = params.record(&mut tape);
            let z = tape.constant(embedded);
            let pred = predict_graph(&mut tape, &nodes, z, b, d)?;
            let target = tape.constant(Tensor::matrix(b * d, 1, noise)?);
            let loss = tape.mse_loss(pred, target)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(DiffusionError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            total += value * b as f64;
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Tensor> = nodes
                .all()
                .iter()
                .zip(params.named())
                .map(|(id, (_, value))| {
                    grads
                        .take(*id)
                        .unwrap_or_else(|| Tensor::zeros(value.rows(), value.cols()))
                })
                .collect();
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            adam.update(&mut params.tensors_mut(), &grad_refs, config.learning_rate)?;
            if let Some(avg) = ema.as_mut() {
                let decay = config.ema_decay;
                for (a, (_, p)) in avg.tensors_mut().into_iter().zip(params.named()) {
                    for (x, y) in a.data_mut().iter_mut().zip(p.data()) {
                        *x = decay * *x + (1.0 - decay) * y;
                    }
                }
            }
        }
        let mean = if n == 0 { 0.0 } else { total / n as f64 };
        log::debug!("epoch {epoch}: loss {mean:.5}");
        loss_trace.push(mean);
    }
    Ok(TrainOutcome {
        params: ema.unwrap_or(params),
        loss_trace,
    })
}

/// Rows pushed through the denoiser at once while sampling.
const SAMPLE_CHUNK: usize = 128;

/// Ancestral sampling of `count` records from a trained denoiser.
pub fn sample(
    count: usize,
    params: &DenoiserParams,
    denoiser: &DenoiserConfig,
    schedule: &NoiseSchedule,
    rng: &mut Prng,
    mode: PosteriorMean,
) -> Result<Tensor, DiffusionError> {
    let embedder = Embedder::new(denoiser.embedding, denoiser.features)?;
    if schedule.timesteps() > denoiser.embedding.timesteps {
        return Err(DiffusionError::Config(format!(
            "schedule has T = {}, embedding accepts at most {}",
            schedule.timesteps(),
            denoiser.embedding.timesteps
        )));
    }
    sample_with(count, denoiser.features, schedule, rng, mode, |x, t| {
        let mut out = Vec::with_capacity(x.len());
        let rows: Vec<usize> = (0..x.rows()).collect();
        for chunk in rows.chunks(SAMPLE_CHUNK) {
            let xs = x.select_rows(chunk);
            let ts = vec![t; chunk.len()];
            out.extend(predict_noise_batch(&xs, &ts, params, &embedder)?.into_data());
        }
        Ok(Tensor::matrix(x.rows(), x.cols(), out)?)
    })
}

/// Reverse chain with an arbitrary noise predictor `predict(x_t, t)`.
///
/// `x_T` is drawn row-major from `rng`; at every `t > 1` a fresh `z` is
/// drawn row-major as well, so the stream depends only on `count`, `d`
/// and `T`.
pub fn sample_with<F>(
    count: usize,
    features: usize,
    schedule: &NoiseSchedule,
    rng: &mut Prng,
    mode: PosteriorMean,
    mut predict: F,
) -> Result<Tensor, DiffusionError>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor, DiffusionError>,
{
    let mut x = Tensor::matrix(count, features, rng.gaussian_vec(count * features))?;
    if count == 0 {
        return Ok(x);
    }
    for t in (1..=schedule.timesteps()).rev() {
        let eps_hat = predict(&x, t)?;
        let sigma = schedule.sigma(t);
        let (c0, ct) = posterior_coefficients(t, schedule);
        let ab = schedule.alpha_bar(t);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data = x.data_mut();
        for (i, v) in data.iter_mut().enumerate() {
            let e = eps_hat.data()[i];
            let lead = match mode {
                PosteriorMean::Standard => (*v - sb * e) / sa,
                PosteriorMean::Literal => e,
            };
            let z = if t > 1 { rng.next_gaussian() } else { 0.0 };
            *v = c0 * lead + ct * *v + sigma * z;
        }
        if !x.is_finite() {
            return Err(DiffusionError::NonFiniteSample { t });
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_schedule() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 0.001, 0.02).unwrap()
    }

    #[test]
    fn schedule_end_points() {
        let s = default_schedule();
        assert_eq!(s.beta(1), 0.001);
        assert_eq!(s.beta(1000), 0.02);
        assert_eq!(s.alpha_bar(1), 0.999);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert_eq!(s.sigma(1), 0.0);
    }

    #[test]
    fn final_alpha_bar_is_tiny() {
        // direct product, independent of the cumulative buffer
        let mut prod = 1.0;
        for t in 1..=1000 {
            let beta = 0.001 + (t - 1) as f64 * (0.02 - 0.001) / 999.0;
            prod *= 1.0 - beta;
        }
        assert!(prod < 1e-4);
        let s = default_schedule();
        assert!((s.alpha_bar(1000) - prod).abs() < 1e-15);
        assert!(s.alpha_bar(1000) < 1e-4 && s.alpha_bar(1000) > 0.0);
    }

    #[test]
    fn schedule_is_monotone() {
        let s = default_schedule();
        for t in 2..=1000 {
            assert!(s.beta(t) >= s.beta(t - 1));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert_eq!(s.alpha(t), 1.0 - s.beta(t));
        }
    }

    #[test]
    fn invalid_schedules() {
        assert!(NoiseSchedule::linear(0, 0.001, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.001, 1.0).is_err());
        assert_eq!(NoiseSchedule::linear(1, 0.1, 0.2).unwrap().beta(1), 0.1);
    }

    #[test]
    fn noiseless_forward() {
        let s = default_schedule();
        let x = forward_sample(&[2.0, -1.0], 300, &[0.0, 0.0], &s).unwrap();
        let k = s.alpha_bar(300).sqrt();
        assert_eq!(x, vec![2.0 * k, -k]);
    }

    #[test]
    fn last_step_forward_is_mostly_noise() {
        let s = default_schedule();
        let x = forward_sample(&[0.0, 0.0], 1000, &[1.0, 0.0], &s).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-4 && x[1] == 0.0);
    }

    #[test]
    fn coefficients_square_to_one() {
        let s = default_schedule();
        for t in 1..=1000 {
            let ab = s.alpha_bar(t);
            let sum = ab.sqrt().powi(2) + (1.0 - ab).sqrt().powi(2);
            assert!((sum - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn exact_noise_inverts_forward() {
        let s = default_schedule();
        let x0 = [0.3, -2.0, 5.0];
        let eps = [1.1, -0.4, 0.05];
        for t in [1, 2, 500, 1000] {
            let xt = forward_sample(&x0, t, &eps, &s).unwrap();
            let back = reconstruct_x0(&xt, t, &eps, &s).unwrap();
            for (a, b) in back.iter().zip(&x0) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn noiseless_chain_returns_to_start() {
        // With ε = 0 the forward marginal is √ᾱ_t·x₀ and μ must map it to
        // √ᾱ_{t−1}·x₀, ending at x₀.
        let s = default_schedule();
        let x0 = [1.5, -0.75];
        let mut x = forward_sample(&x0, 1000, &[0.0, 0.0], &s).unwrap();
        for t in (1..=1000).rev() {
            x = posterior_step(&x, t, &[0.0, 0.0], &s, &[0.0, 0.0], PosteriorMean::Standard)
                .unwrap();
            let expect = s.alpha_bar(t - 1).sqrt();
            assert!((x[0] - expect * x0[0]).abs() < 1e-10);
        }
        assert!((x[0] - x0[0]).abs() < 1e-10 && (x[1] - x0[1]).abs() < 1e-10);
    }

    #[test]
    fn timestep_zero_rejected() {
        let s = default_schedule();
        assert!(matches!(
            posterior_step(&[0.0], 0, &[0.0], &s, &[0.0], PosteriorMean::Standard),
            Err(DiffusionError::Timestep { .. })
        ));
    }

    #[test]
    fn literal_mode_differs() {
        let s = default_schedule();
        let a = posterior_mean(&[1.0], 500, &[0.5], &s, PosteriorMean::Standard).unwrap();
        let b = posterior_mean(&[1.0], 500, &[0.5], &s, PosteriorMean::Literal).unwrap();
        assert_ne!(a, b);
        let (c0, ct) = posterior_coefficients(500, &s);
        assert_eq!(b[0], c0 * 0.5 + ct * 1.0);
    }

    #[test]
    fn empty_sample() {
        let s = default_schedule();
        let out = sample_with(0, 3, &s, &mut Prng::new(1), PosteriorMean::Standard, |_, _| {
            unreachable!()
        })
        .unwrap();
        assert_eq!(out.rows(), 0);
    }
}
