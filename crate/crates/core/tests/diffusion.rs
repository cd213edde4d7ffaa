use emdt_core::denoiser::{DenoiserConfig, DenoiserParams};
use emdt_core::diffusion::{
    forward_sample, posterior_coefficients, sample, sample_with, train, NoiseSchedule, PosteriorMean,
    TrainConfig,
};
use emdt_core::embedding::EmbeddingConfig;
use emdt_core::numeric::{Prng, Tensor};

fn small_denoiser(dim: usize, features: usize) -> DenoiserConfig {
    let embedding = EmbeddingConfig {
        dim,
        ..EmbeddingConfig::default()
    };
    DenoiserConfig::new(embedding, features)
}

fn gmm(n: usize, centers: &[[f64; 2]], std: f64, rng: &mut Prng) -> Tensor {
    let mut data = Vec::with_capacity(n * 2);
    for i in 0..n {
        let c = centers[i % centers.len()];
        data.push(c[0] + std * rng.next_gaussian());
        data.push(c[1] + std * rng.next_gaussian());
    }
    Tensor::matrix(n, 2, data).unwrap()
}

/// Exact output variance of the reverse chain when `ε̂ ≡ 0`: each step is
/// `x ← k_t·x + σ_t·z`, so `v_{t−1} = k_t²·v_t + σ_t²` from `v_T = 1`.
fn zero_predictor_variance(schedule: &NoiseSchedule, mode: PosteriorMean) -> f64 {
    let mut v = 1.0;
    for t in (1..=schedule.timesteps()).rev() {
        let (c0, ct) = posterior_coefficients(t, schedule);
        let k = match mode {
            PosteriorMean::Standard => c0 / schedule.alpha_bar(t).sqrt() + ct,
            PosteriorMean::Literal => ct,
        };
        v = k * k * v + schedule.posterior_variance(t);
    }
    v
}

fn zero_predictor_moments(mode: PosteriorMean) -> (f64, f64) {
    let schedule = NoiseSchedule::linear(1000, 0.001, 0.02).unwrap();
    let mut rng = Prng::new(11);
    let out = sample_with(10_000, 2, &schedule, &mut rng, mode, |x, _| {
        Ok(Tensor::zeros(x.rows(), x.cols()))
    })
    .unwrap();
    let expected = zero_predictor_variance(&schedule, mode);
    let mut worst_mean: f64 = 0.0;
    for j in 0..2 {
        let col = out.column(j);
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
        if expected == 0.0 {
            assert_eq!(var, 0.0);
        } else {
            assert!((var / expected - 1.0).abs() < 0.05, "variance {var} vs {expected}");
        }
        worst_mean = worst_mean.max(mean.abs());
    }
    (worst_mean, expected)
}

#[test]
fn zero_predictor_literal_chain_is_centered() {
    // the last step has no x_t term, so with ε̂ = 0 every sample lands on 0
    let (mean, var) = zero_predictor_moments(PosteriorMean::Literal);
    assert_eq!(var, 0.0);
    assert!(mean < 0.05, "mean {mean}");
}

#[test]
fn zero_predictor_standard_chain_is_centered() {
    // Here each step scales by 1/√α_t, so the spread grows to roughly
    // 1/√ᾱ_T and the mean is only pinned to a few standard errors.
    let (mean, var) = zero_predictor_moments(PosteriorMean::Standard);
    assert!(var > 1.0);
    assert!(mean < 4.0 * (var / 10_000.0).sqrt(), "mean {mean}");
}

#[test]
fn first_epoch_loss_near_unit_variance() {
    let mut rng = Prng::new(3);
    let data = gmm(256, &[[-1.0, -1.0], [1.0, 1.0]], 0.3, &mut rng);
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let out = train(&data, &cfg, &small_denoiser(32, 2)).unwrap();
    let first = out.loss_trace[0];
    assert!((0.8..=1.2).contains(&first), "first epoch loss {first}");
}

#[test]
fn zero_epochs_keeps_initialization() {
    let data = Tensor::filled(10, 2, 0.5);
    let den = small_denoiser(8, 2);
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let out = train(&data, &cfg, &den).unwrap();
    let init = DenoiserParams::init(&den, &mut Prng::new(den.init_seed)).unwrap();
    assert_eq!(out.params, init);
    assert!(out.loss_trace.is_empty());
}

#[test]
fn training_is_deterministic() {
    let mut rng = Prng::new(5);
    let data = gmm(40, &[[0.0, 1.0]], 0.5, &mut rng);
    let den = small_denoiser(8, 2);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 16,
        seed: 9,
        ..TrainConfig::default()
    };
    let a = train(&data, &cfg, &den).unwrap();
    let b = train(&data, &cfg, &den).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.loss_trace, b.loss_trace);
}

#[test]
fn wrong_width_is_rejected() {
    let data = Tensor::filled(4, 3, 0.0);
    assert!(train(&data, &TrainConfig::default(), &small_denoiser(8, 2)).is_err());
}

#[test]
fn toy_mixture_means_recovered() {
    let centers = [[-1.5, -1.0], [1.5, 1.0]];
    let mut rng = Prng::new(2024);
    let data = gmm(500, &centers, 0.4, &mut rng);
    let den = small_denoiser(32, 2);
    let cfg = TrainConfig {
        seed: 1,
        ..TrainConfig::default()
    };
    let started = std::time::Instant::now();
    let out = train(&data, &cfg, &den).unwrap();
    let trace = &out.loss_trace;
    assert!(trace[149] < 0.5 * trace[0], "loss {} -> {}", trace[0], trace[149]);
    let schedule = cfg.schedule().unwrap();
    let synth = sample(
        1000,
        &out.params,
        &den,
        &schedule,
        &mut Prng::new(77),
        PosteriorMean::Standard,
    )
    .unwrap();
    let mut sums = [[0.0; 2]; 2];
    let mut counts = [0usize; 2];
    for row in synth.row_iter() {
        let d = |c: &[f64; 2]| (row[0] - c[0]).powi(2) + (row[1] - c[1]).powi(2);
        let k = if d(&centers[0]) <= d(&centers[1]) { 0 } else { 1 };
        sums[k][0] += row[0];
        sums[k][1] += row[1];
        counts[k] += 1;
    }
    for k in 0..2 {
        for j in 0..2 {
            let m = sums[k][j] / counts[k] as f64;
            assert!((m - centers[k][j]).abs() < 0.15, "component {k} dim {j}: {m}");
        }
    }
    assert!(started.elapsed().as_secs() < 300);
}

#[test]
fn point_mass_is_reproduced() {
    let data = Tensor::filled(500, 2, 1.0);
    let den = small_denoiser(32, 2);
    let cfg = TrainConfig {
        seed: 4,
        ..TrainConfig::default()
    };
    let out = train(&data, &cfg, &den).unwrap();
    let synth = sample(
        200,
        &out.params,
        &den,
        &cfg.schedule().unwrap(),
        &mut Prng::new(8),
        PosteriorMean::Standard,
    )
    .unwrap();
    for j in 0..2 {
        let col = synth.column(j);
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        assert!((mean - 1.0).abs() < 0.1, "dim {j}: {mean}");
    }
}

/// Optimal noise prediction for an isotropic Gaussian mixture with equal
/// weights: `ε̂ = (x_t − √ᾱ·E[x₀ | x_t]) / √(1 − ᾱ)`.
fn mixture_oracle(x: &Tensor, t: usize, schedule: &NoiseSchedule, centers: &[[f64; 2]], std: f64) -> Tensor {
    let ab = schedule.alpha_bar(t);
    let var = ab * std * std + (1.0 - ab);
    let mut out = Vec::with_capacity(x.len());
    for row in x.row_iter() {
        let logits: Vec<f64> = centers
            .iter()
            .map(|c| {
                let d2: f64 = (0..2).map(|j| (row[j] - ab.sqrt() * c[j]).powi(2)).sum();
                -d2 / (2.0 * var)
            })
            .collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let total: f64 = w.iter().sum();
        for j in 0..2 {
            // E[x₀ | x_t] within a component, then mixed by responsibility
            let mean: f64 = centers
                .iter()
                .zip(&w)
                .map(|(c, wk)| {
                    let post = c[j] + ab.sqrt() * std * std / var * (row[j] - ab.sqrt() * c[j]);
                    wk / total * post
                })
                .sum();
            out.push((row[j] - ab.sqrt() * mean) / (1.0 - ab).sqrt());
        }
    }
    Tensor::matrix(x.rows(), 2, out).unwrap()
}

#[test]
fn sampler_with_oracle_predictor_recovers_mixture() {
    let centers = [[-1.5, -1.0], [1.5, 1.0]];
    let schedule = NoiseSchedule::linear(1000, 0.001, 0.02).unwrap();
    let synth = sample_with(2000, 2, &schedule, &mut Prng::new(4), PosteriorMean::Standard, |x, t| {
        Ok(mixture_oracle(x, t, &schedule, &centers, 0.4))
    })
    .unwrap();
    let mut sums = [[0.0; 2]; 2];
    let mut counts = [0usize; 2];
    for row in synth.row_iter() {
        let k = usize::from(row[0] > 0.0);
        sums[k][0] += row[0];
        sums[k][1] += row[1];
        counts[k] += 1;
    }
    for k in 0..2 {
        for j in 0..2 {
            let m = sums[k][j] / counts[k] as f64;
            assert!((m - centers[k][j]).abs() < 0.05, "component {k} dim {j}: {m}");
        }
    }
}

#[test]
fn forward_marginal_matches_closed_form() {
    let s = NoiseSchedule::linear(1000, 0.001, 0.02).unwrap();
    let x0 = [1.5, -0.5];
    let n = 100_000;
    let mut rng = Prng::new(21);
    for t in [10, 250, 900] {
        let ab = s.alpha_bar(t);
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let eps = rng.gaussian_vec(2);
            let x = forward_sample(&x0, t, &eps, &s).unwrap();
            for j in 0..2 {
                sum[j] += x[j];
                sq[j] += x[j] * x[j];
            }
        }
        let var = 1.0 - ab;
        for j in 0..2 {
            let mean = sum[j] / n as f64;
            let sample_var = sq[j] / n as f64 - mean * mean;
            let se = (var / n as f64).sqrt();
            assert!((mean - ab.sqrt() * x0[j]).abs() < 3.0 * se, "t {t} mean {mean}");
            assert!((sample_var / var - 1.0).abs() < 0.05, "t {t} var {sample_var}");
        }
    }
}
