//! Preprocess, cluster, train and generate stages.

use std::fmt::Write as _;
use std::fs;
use std::time::Instant;

use anyhow::{Context, Result};
use emdt_core::clustering::{allocate_quotas, cluster_minority};
use emdt_core::dataset::{self, load_csv, stratified_split, TransactionTable};
use emdt_core::denoiser::{write_checkpoint, DenoiserConfig, DenoiserParams};
use emdt_core::diffusion::{sample, train as train_ddpm, NoiseSchedule, PosteriorMean, TrainConfig};
use emdt_core::numeric::Tensor;
use log::{info, warn};
use serde_json::json;

use crate::config::{Arm, PipelineConfig};
use crate::error::CliError;
use crate::seeds::{derive, stream, Purpose};
use crate::workspace::{ensure_dir, file_digest, Variant, Workspace};

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Rebuild stages even when their inputs are unchanged.
    pub force: bool,
    /// Leave wall-clock timings out of reports.
    pub canonical: bool,
}

/// Raw credit-card header without the label.
pub fn expected_columns() -> Vec<String> {
    let mut cols = vec![dataset::TIME_COLUMN.to_string()];
    cols.extend((1..=28).map(|i| format!("V{i}")));
    cols.push(dataset::AMOUNT_COLUMN.to_string());
    cols
}

fn schema_problem(cfg: &PipelineConfig, message: String) -> Result<()> {
    if cfg.data.strict {
        Err(CliError::Data(message).into())
    } else {
        warn!("{message}");
        Ok(())
    }
}

/// Splits the raw table, fits standardization on the training split and
/// writes the three preprocessed splits. Returns the stage digest.
pub fn preprocess(cfg: &PipelineConfig, ws: &Workspace, opts: RunOptions) -> Result<String> {
    let path = &cfg.data.path;
    let digest = crate::config::digest_of(&json!({
        "data": cfg.data,
        "source": file_digest(path)?,
    }));
    let dir = ws.data_dir();
    if !opts.force && ws.is_current(&dir, &digest) {
        info!("preprocess: up to date");
        return Ok(digest);
    }
    let raw = load_csv(path).with_context(|| format!("loading {}", path.display()))?;
    if cfg.data.check_columns && raw.columns() != expected_columns().as_slice() {
        schema_problem(
            cfg,
            format!(
                "{} has columns {:?}, expected Time, V1..V28, Amount, Class",
                path.display(),
                raw.columns()
            ),
        )?;
    }
    if cfg.data.expected_rows > 0 && raw.len() != cfg.data.expected_rows {
        schema_problem(
            cfg,
            format!(
                "{} has {} rows, expected {}",
                path.display(),
                raw.len(),
                cfg.data.expected_rows
            ),
        )?;
    }
    let splits = stratified_split(&raw, cfg.data.fractions, cfg.data.split_seed)?;
    let (train, stats) = dataset::preprocess(&splits.train, None)?;
    let (validation, _) = dataset::preprocess(&splits.validation, Some(&stats))?;
    let (test, _) = dataset::preprocess(&splits.test, Some(&stats))?;
    ensure_dir(&dir)?;
    for (name, table) in [("train", &train), ("validation", &validation), ("test", &test)] {
        table.save_csv(&dir.join(format!("{name}.csv")))?;
    }
    for (name, idx) in ["train", "validation", "test"].iter().zip(&splits.indices) {
        let mut text = String::with_capacity(idx.len() * 7);
        for i in idx {
            writeln!(text, "{i}").ok();
        }
        fs::write(dir.join(format!("split_{name}.txt")), text)?;
    }
    stats.save(&dir.join("stats.txt"))?;
    info!(
        "preprocess: {} rows -> train {} ({} frauds), validation {} ({}), test {} ({})",
        raw.len(),
        train.len(),
        splits.fraud_counts[0],
        validation.len(),
        splits.fraud_counts[1],
        test.len(),
        splits.fraud_counts[2]
    );
    ws.write_marker(&dir, &digest)?;
    Ok(digest)
}

/// Clusters the training frauds; with clustering disabled every fraud
/// lands in cluster 1.
pub fn cluster(cfg: &PipelineConfig, ws: &Workspace, opts: RunOptions) -> Result<String> {
    let upstream = ws.require(&ws.data_dir(), "preprocess")?;
    let digest = crate::config::digest_of(&json!({
        "data": upstream,
        "clustering": cfg.clustering,
    }));
    let dir = ws.clusters_dir();
    if !opts.force && ws.is_current(&dir, &digest) {
        info!("cluster: up to date");
        return Ok(digest);
    }
    let splits = ws.load_splits()?;
    let frauds = splits.train.class_rows(1);
    ensure_dir(&dir)?;
    let path = dir.join("clusters.csv");
    if cfg.clustering.enabled {
        let mut rng = stream(cfg.clustering.seed, Purpose::Cluster, 0);
        let plan = cluster_minority(&frauds, &cfg.cluster_config(), &mut rng)?;
        let f = fs::File::create(&path)?;
        plan.write_csv(std::io::BufWriter::new(f))?;
        info!("cluster: sizes {:?}", plan.sizes());
    } else {
        let mut text = String::from("row,cluster,x,y\n");
        for i in 0..frauds.rows() {
            writeln!(text, "{i},1,0,0").ok();
        }
        fs::write(&path, text)?;
        info!("cluster: disabled, {} frauds in one group", frauds.rows());
    }
    ws.write_marker(&dir, &digest)?;
    Ok(digest)
}

/// Which model sets the configuration calls for.
pub fn variants(cfg: &PipelineConfig) -> Vec<Variant> {
    let mut v = Vec::new();
    if cfg.clustering.enabled {
        v.push(Variant::Clustered);
    }
    if !cfg.clustering.enabled || cfg.evaluation.arms.contains(&Arm::EmdtNoCluster) {
        v.push(Variant::Global);
    }
    v
}

/// Training fraud rows grouped per model of `variant`.
pub fn groups(frauds: &Tensor, labels: &[usize], variant: Variant) -> Result<Vec<Tensor>> {
    if labels.len() != frauds.rows() {
        return Err(CliError::Data(format!(
            "cluster file lists {} rows but the training split has {} frauds; rerun `emdt cluster`",
            labels.len(),
            frauds.rows()
        ))
        .into());
    }
    Ok(match variant {
        Variant::Global => vec![frauds.clone()],
        Variant::Clustered => {
            let k = labels.iter().max().map_or(0, |m| m + 1);
            (0..k)
                .map(|c| {
                    let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
                    frauds.select_rows(&idx)
                })
                .collect()
        }
    })
}

/// Config for the model of cluster `k`, with per-cluster seed streams.
pub fn model_configs(cfg: &PipelineConfig, features: usize, k: usize) -> (TrainConfig, DenoiserConfig) {
    let train = TrainConfig {
        seed: derive(cfg.diffusion.seed, Purpose::Train, k as u64),
        ..cfg.train_config()
    };
    let denoiser = DenoiserConfig {
        init_seed: derive(cfg.diffusion.seed, Purpose::Init, k as u64),
        ..cfg.denoiser_config(features)
    };
    (train, denoiser)
}

/// A trained model per group and the group sizes that set sample quotas.
#[derive(Debug, Clone)]
pub struct ModelSet {
    pub models: Vec<(DenoiserConfig, DenoiserParams)>,
    pub sizes: Vec<usize>,
    pub schedule: NoiseSchedule,
    pub mode: PosteriorMean,
}

impl ModelSet {
    /// Trains one model per group. Returns the set and each group's loss
    /// trace.
    pub fn train(cfg: &PipelineConfig, groups: &[Tensor]) -> Result<(Self, Vec<Vec<f64>>)> {
        let mut models = Vec::with_capacity(groups.len());
        let mut traces = Vec::with_capacity(groups.len());
        for (k, g) in groups.iter().enumerate() {
            if g.rows() < 2 {
                return Err(CliError::Data(format!(
                    "cluster {} has {} sample(s); at least 2 are needed to train",
                    k + 1,
                    g.rows()
                ))
                .into());
            }
            let (tc, dc) = model_configs(cfg, g.cols(), k);
            let start = Instant::now();
            let outcome = train_ddpm(g, &tc, &dc).with_context(|| format!("training cluster {}", k + 1))?;
            info!(
                "train: cluster {} ({} rows) final loss {:.4} in {:.1}s",
                k + 1,
                g.rows(),
                outcome.loss_trace.last().copied().unwrap_or(f64::NAN),
                start.elapsed().as_secs_f64()
            );
            traces.push(outcome.loss_trace);
            models.push((dc, outcome.params));
        }
        Ok((
            Self {
                models,
                sizes: groups.iter().map(Tensor::rows).collect(),
                schedule: cfg.train_config().schedule()?,
                mode: cfg.diffusion.posterior_mean,
            },
            traces,
        ))
    }

    /// Loads checkpoints and checks them against the configuration.
    pub fn load(cfg: &PipelineConfig, ws: &Workspace, variant: Variant, sizes: Vec<usize>) -> Result<Self> {
        let models = ws.load_models(variant)?;
        if models.len() != sizes.len() {
            return Err(CliError::Data(format!(
                "{} checkpoints in {} but {} clusters; rerun `emdt train`",
                models.len(),
                ws.variant_dir(variant).display(),
                sizes.len()
            ))
            .into());
        }
        for (k, (dc, _)) in models.iter().enumerate() {
            let e = cfg.embedding_config();
            if dc.embedding != e || dc.heads != cfg.diffusion.heads || dc.norm != cfg.diffusion.norm {
                return Err(CliError::Usage(format!(
                    "checkpoint {} was trained with D = {}, s1 = {}, s2 = {}, T = {}, {} heads, {} norm; \
                     the config asks for D = {}, s1 = {}, s2 = {}, T = {}, {} heads, {} norm",
                    ws.checkpoint(variant, k).display(),
                    dc.embedding.dim,
                    dc.embedding.feature_scale,
                    dc.embedding.time_scale,
                    dc.embedding.timesteps,
                    dc.heads,
                    dc.norm.as_str(),
                    e.dim,
                    e.feature_scale,
                    e.time_scale,
                    e.timesteps,
                    cfg.diffusion.heads,
                    cfg.diffusion.norm.as_str()
                ))
                .into());
            }
        }
        Ok(Self {
            models,
            sizes,
            schedule: cfg.train_config().schedule()?,
            mode: cfg.diffusion.posterior_mean,
        })
    }

    /// `count` rows split across models in proportion to group sizes.
    pub fn generate(&self, count: usize, seed: u64) -> Result<Tensor> {
        let quotas = allocate_quotas(count, &self.sizes);
        let d = self.models.first().map_or(0, |(dc, _)| dc.features);
        let mut parts = Vec::with_capacity(quotas.len());
        for (k, ((dc, params), &q)) in self.models.iter().zip(&quotas).enumerate() {
            let mut rng = stream(seed, Purpose::Generate, k as u64);
            parts.push(sample(q, params, dc, &self.schedule, &mut rng, self.mode)?);
        }
        if parts.is_empty() {
            return Ok(Tensor::zeros(0, d));
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Tensor::vstack(&refs)?)
    }
}

/// Synthetic fraud count for a training split with `frauds` frauds.
pub fn synthetic_count(cfg: &PipelineConfig, frauds: usize) -> usize {
    (cfg.augmentation.multiplier * frauds as f64).round() as usize
}

/// Trains every configured model set and writes checkpoints and loss
/// traces.
pub fn train(cfg: &PipelineConfig, ws: &Workspace, opts: RunOptions) -> Result<String> {
    let upstream = ws.require(&ws.clusters_dir(), "cluster")?;
    let wanted = variants(cfg);
    let digest = crate::config::digest_of(&json!({
        "clusters": upstream,
        "embedding": cfg.embedding,
        "diffusion": cfg.diffusion,
        "variants": wanted,
    }));
    let dir = ws.models_dir();
    if !opts.force && ws.is_current(&dir, &digest) {
        info!("train: up to date");
        return Ok(digest);
    }
    let splits = ws.load_splits()?;
    let frauds = splits.train.class_rows(1);
    let labels = ws.load_cluster_labels()?;
    ensure_dir(&dir)?;
    for v in [Variant::Clustered, Variant::Global] {
        let vdir = ws.variant_dir(v);
        if vdir.exists() {
            fs::remove_dir_all(&vdir)?;
        }
    }
    for v in wanted {
        let groups = groups(&frauds, &labels, v)?;
        let (set, traces) = ModelSet::train(cfg, &groups)?;
        let vdir = ws.variant_dir(v);
        ensure_dir(&vdir)?;
        for (k, (dc, params)) in set.models.iter().enumerate() {
            let f = fs::File::create(ws.checkpoint(v, k))?;
            write_checkpoint(std::io::BufWriter::new(f), dc, params)?;
        }
        let mut text = String::from("cluster,epoch,loss\n");
        for (k, trace) in traces.iter().enumerate() {
            for (e, loss) in trace.iter().enumerate() {
                writeln!(text, "{},{},{}", k + 1, e + 1, loss).ok();
            }
        }
        fs::write(vdir.join("loss.csv"), text)?;
        info!("train: wrote {} {} checkpoint(s)", set.models.len(), v.name());
    }
    ws.write_marker(&dir, &digest)?;
    Ok(digest)
}

/// Loads the model set of `variant` with group sizes from the cluster file.
pub fn load_model_set(cfg: &PipelineConfig, ws: &Workspace, variant: Variant, frauds: &Tensor) -> Result<ModelSet> {
    let labels = ws.load_cluster_labels()?;
    let sizes = groups(frauds, &labels, variant)?
        .iter()
        .map(Tensor::rows)
        .collect();
    ModelSet::load(cfg, ws, variant, sizes)
}

/// Samples synthetic frauds from every trained variant into
/// `synthetic/<variant>.csv`, with `Amount` back in original units.
pub fn generate(cfg: &PipelineConfig, ws: &Workspace, opts: RunOptions) -> Result<String> {
    let upstream = ws.require(&ws.models_dir(), "train")?;
    let digest = crate::config::digest_of(&json!({
        "models": upstream,
        "augmentation": cfg.augmentation,
        "seed": cfg.evaluation.base_seed,
        "posterior_mean": cfg.diffusion.posterior_mean,
    }));
    let dir = ws.synthetic_dir();
    if !opts.force && ws.is_current(&dir, &digest) {
        info!("generate: up to date");
        return Ok(digest);
    }
    let splits = ws.load_splits()?;
    let frauds = splits.train.class_rows(1);
    let count = synthetic_count(cfg, frauds.rows());
    ensure_dir(&dir)?;
    for v in variants(cfg) {
        let set = load_model_set(cfg, ws, v, &frauds)?;
        let mut rows = set.generate(count, cfg.evaluation.base_seed)?;
        splits.stats.invert(splits.train.columns(), &mut rows)?;
        let table = TransactionTable::new(splits.train.columns().to_vec(), rows, vec![1; count])?;
        let path = dir.join(format!("{}.csv", v.name()));
        table.save_csv(&path)?;
        info!("generate: {count} rows -> {}", path.display());
    }
    ws.write_marker(&dir, &digest)?;
    Ok(digest)
}
