//! Classifier evaluation per method arm and the hyperparameter sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;

use anyhow::{Context, Result};
use emdt_core::baselines::{smote, SmoteConfig};
use emdt_core::classifier::tune;
use emdt_core::dataset::TransactionTable;
use emdt_core::evaluation::{
    correlation_similarity, dcr_score, marginal_histogram, write_histograms_csv, ClassificationMetrics,
    ConfusionCounts, MetricSummary, MetricsReport,
};
use emdt_core::numeric::Tensor;
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{Arm, PipelineConfig};
use crate::seeds::{derive, stream, Purpose};
use crate::stages::{groups, load_model_set, synthetic_count, ModelSet};
use crate::workspace::{ensure_dir, Splits, Variant, Workspace};

/// One classifier fit and its scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub test: ClassificationMetrics,
    pub validation_f1: f64,
    pub trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub synthetic_rows: usize,
    pub dcr: Option<f64>,
    pub correlation_similarity: Option<f64>,
    pub constant_columns: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub summary: MetricsReport,
    pub runs: Vec<SeedRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedArm {
    pub arm: Arm,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_digest: String,
    pub arms: Vec<ArmReport>,
    pub skipped: Vec<SkippedArm>,
    /// Wall-clock seconds per stage; absent in canonical output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_seconds: Option<BTreeMap<String, f64>>,
}

impl RunReport {
    pub fn arm(&self, arm: Arm) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.summary.method == arm.name())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Train split with extra fraud rows appended.
fn augment(train: &TransactionTable, synth: &Tensor) -> Result<(Tensor, Vec<u8>)> {
    let mut y = train.labels().to_vec();
    if synth.rows() == 0 {
        return Ok((train.features().clone(), y));
    }
    let x = Tensor::vstack(&[train.features(), synth])?;
    y.extend(std::iter::repeat_n(1u8, synth.rows()));
    Ok((x, y))
}

/// Tunes on validation and scores the test split.
fn fit_and_score(cfg: &PipelineConfig, splits: &Splits, synth: &Tensor, seed: u64) -> Result<SeedRun> {
    let (x, y) = augment(&splits.train, synth)?;
    let base = cfg.gbdt(1, 1, 0.1);
    let tuned = tune(
        &x,
        &y,
        splits.validation.features(),
        splits.validation.labels(),
        &cfg.tuning_grid(),
        &base,
    )?;
    let pred = tuned.model.predict(splits.test.features())?;
    let test = ConfusionCounts::from_labels(splits.test.labels(), &pred)?.metrics();
    Ok(SeedRun {
        seed,
        test,
        validation_f1: tuned.validation_f1,
        trees: tuned.config.trees,
        max_depth: tuned.config.max_depth,
        learning_rate: tuned.config.learning_rate,
        synthetic_rows: synth.rows(),
        dcr: None,
        correlation_similarity: None,
        constant_columns: false,
    })
}

/// Where an arm's synthetic rows come from.
enum Source {
    Nothing,
    Smote,
    Models(ModelSet),
}

impl Source {
    fn draw(&self, cfg: &PipelineConfig, frauds: &Tensor, seed: u64) -> Result<Tensor> {
        let count = synthetic_count(cfg, frauds.rows());
        match self {
            Self::Nothing => Ok(Tensor::zeros(0, frauds.cols())),
            Self::Smote => {
                let sc = SmoteConfig {
                    k: cfg.augmentation.smote_k,
                    seed: derive(seed, Purpose::Smote, 0),
                };
                Ok(smote(frauds, count, &sc)?.rows)
            }
            Self::Models(set) => set.generate(count, seed),
        }
    }
}

fn arm_variant(cfg: &PipelineConfig, arm: Arm) -> Option<Variant> {
    match arm {
        Arm::Original | Arm::Smote => None,
        Arm::Emdt if cfg.clustering.enabled => Some(Variant::Clustered),
        Arm::Emdt | Arm::EmdtNoCluster => Some(Variant::Global),
    }
}

fn export_first_seed(
    cfg: &PipelineConfig,
    ws: &Workspace,
    arm: Arm,
    splits: &Splits,
    frauds: &Tensor,
    synth: &Tensor,
) -> Result<()> {
    if synth.rows() < 2 {
        return Ok(());
    }
    let dir = ws.evaluation_dir();
    let names = splits.train.columns();
    let report = correlation_similarity(frauds, synth)?;
    let f = fs::File::create(dir.join(format!("correlation_{}.csv", arm.name())))?;
    report.write_diff_csv(BufWriter::new(f), names)?;
    let mut hists = Vec::with_capacity(names.len());
    for (j, name) in names.iter().enumerate() {
        let h = marginal_histogram(&frauds.column(j), &synth.column(j), cfg.evaluation.histogram_bins)?;
        hists.push((name.clone(), h));
    }
    let f = fs::File::create(dir.join(format!("histograms_{}.csv", arm.name())))?;
    write_histograms_csv(BufWriter::new(f), &hists)?;
    Ok(())
}

#[cfg(feature = "parallel")]
fn map_seeds<F>(seeds: &[u64], f: F) -> Result<Vec<SeedRun>>
where
    F: Fn(u64) -> Result<SeedRun> + Sync + Send,
{
    use rayon::prelude::*;
    seeds.par_iter().map(|&s| f(s)).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_seeds<F>(seeds: &[u64], f: F) -> Result<Vec<SeedRun>>
where
    F: Fn(u64) -> Result<SeedRun>,
{
    seeds.iter().map(|&s| f(s)).collect()
}

fn run_arm(
    cfg: &PipelineConfig,
    ws: &Workspace,
    arm: Arm,
    source: &Source,
    splits: &Splits,
    seeds: &[u64],
    digest: &str,
) -> Result<ArmReport> {
    let frauds = splits.train.class_rows(1);
    let holdout = splits.test.class_rows(1);
    let runs = if matches!(source, Source::Nothing) {
        // No randomness reaches this arm, so one fit stands for every seed.
        let run = fit_and_score(cfg, splits, &Tensor::zeros(0, frauds.cols()), seeds[0])?;
        seeds.iter().map(|&seed| SeedRun { seed, ..run.clone() }).collect()
    } else {
        map_seeds(seeds, |seed| {
            let synth = source.draw(cfg, &frauds, seed)?;
            if seed == seeds[0] {
                export_first_seed(cfg, ws, arm, splits, &frauds, &synth)?;
            }
            let mut run = fit_and_score(cfg, splits, &synth, seed)?;
            if synth.rows() > 0 && holdout.rows() > 0 {
                let mut rng = stream(seed, Purpose::Dcr, 0);
                run.dcr = Some(dcr_score(&synth, &frauds, &holdout, &mut rng)?);
            }
            if synth.rows() >= 2 && frauds.rows() >= 2 {
                let c = correlation_similarity(&frauds, &synth)?;
                run.correlation_similarity = Some(c.similarity);
                run.constant_columns = c.has_constant_columns();
            }
            info!("evaluate: {} seed {seed} test F1 {:.4}", arm.name(), run.test.f1);
            Ok(run)
        })?
    };
    let metrics: Vec<ClassificationMetrics> = runs.iter().map(|r| r.test).collect();
    let mut summary = MetricsReport::from_runs(arm.name(), seeds.to_vec(), &metrics, digest);
    let collect = |f: fn(&SeedRun) -> Option<f64>| -> Option<MetricSummary> {
        let v: Option<Vec<f64>> = runs.iter().map(f).collect();
        v.map(MetricSummary::from_values)
    };
    summary.dcr = collect(|r| r.dcr);
    summary.correlation_similarity = collect(|r| r.correlation_similarity);
    summary.constant_column_warning = runs.iter().any(|r| r.constant_columns);
    Ok(ArmReport { summary, runs })
}

/// Runs every configured arm over every evaluation seed and writes
/// `evaluation/report.json`.
pub fn evaluate(cfg: &PipelineConfig, ws: &Workspace) -> Result<RunReport> {
    let data = ws.require(&ws.data_dir(), "preprocess")?;
    let digest = cfg.digest();
    let dir = ws.evaluation_dir();
    ensure_dir(&dir)?;
    let splits = ws.load_splits()?;
    let frauds = splits.train.class_rows(1);
    let seeds: Vec<u64> = (0..cfg.evaluation.seeds as u64)
        .map(|i| cfg.evaluation.base_seed + i)
        .collect();
    let mut arms = Vec::new();
    let mut skipped = Vec::new();
    for &arm in &cfg.evaluation.arms {
        let source = match arm_variant(cfg, arm) {
            None if arm == Arm::Original => Source::Nothing,
            None => Source::Smote,
            Some(v) => match ws
                .require(&ws.models_dir(), "train")
                .and_then(|_| load_model_set(cfg, ws, v, &frauds))
            {
                Ok(set) => Source::Models(set),
                Err(e) => {
                    let reason = format!("{e:#}");
                    warn!("evaluate: skipping {}: {reason}", arm.name());
                    skipped.push(SkippedArm { arm, reason });
                    continue;
                }
            },
        };
        arms.push(
            run_arm(cfg, ws, arm, &source, &splits, &seeds, &digest)
                .with_context(|| format!("evaluating arm {}", arm.name()))?,
        );
    }
    let report = RunReport {
        config_digest: digest.clone(),
        arms,
        skipped,
        stage_seconds: None,
    };
    write_report(ws, &report)?;
    ws.write_marker(&dir, &crate::config::digest_of(&json!({ "data": data, "config": digest })))?;
    Ok(report)
}

pub fn write_report(ws: &Workspace, report: &RunReport) -> Result<()> {
    let path = ws.evaluation_dir().join("report.json");
    fs::write(&path, format!("{}\n", report.to_json()))
        .with_context(|| format!("writing {}", path.display()))
}

/// One row of the sensitivity table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub factor: &'static str,
    pub value: f64,
    pub seed: u64,
    pub validation_f1: f64,
    pub test_f1: f64,
}

/// Configs of the one-factor-at-a-time grid, each labelled by factor and
/// value; everything else stays at the base config.
pub fn sweep_grid(cfg: &PipelineConfig) -> Vec<(&'static str, f64, PipelineConfig)> {
    let s = &cfg.sweep;
    let mut out = Vec::new();
    for &v in &s.learning_rates {
        let mut c = cfg.clone();
        c.diffusion.learning_rate = v;
        out.push(("learning_rate", v, c));
    }
    for &v in &s.batch_sizes {
        let mut c = cfg.clone();
        c.diffusion.batch_size = v;
        out.push(("batch_size", v as f64, c));
    }
    for &v in &s.dims {
        let mut c = cfg.clone();
        c.embedding.dim = v;
        out.push(("dim", v as f64, c));
    }
    for &v in &s.feature_scales {
        let mut c = cfg.clone();
        c.embedding.feature_scale = v;
        out.push(("feature_scale", v, c));
    }
    for &v in &s.time_scales {
        let mut c = cfg.clone();
        c.embedding.time_scale = v;
        out.push(("time_scale", v, c));
    }
    out
}

/// Trains, augments and scores every sweep cell in memory, writing
/// `sweep/sweep.csv`.
pub fn sweep(cfg: &PipelineConfig, ws: &Workspace) -> Result<Vec<SweepRow>> {
    let splits = ws.load_splits()?;
    let frauds = splits.train.class_rows(1);
    let variant = if cfg.clustering.enabled {
        Variant::Clustered
    } else {
        Variant::Global
    };
    let labels = match variant {
        Variant::Clustered => ws.load_cluster_labels()?,
        Variant::Global => vec![0; frauds.rows()],
    };
    let groups = groups(&frauds, &labels, variant)?;
    let count = synthetic_count(cfg, frauds.rows());
    let mut rows = Vec::new();
    for (factor, value, base) in sweep_grid(cfg) {
        base.validate()?;
        for i in 0..cfg.sweep.seeds as u64 {
            let mut c = base.clone();
            c.diffusion.seed = base.diffusion.seed + i;
            let (set, _) = ModelSet::train(&c, &groups)?;
            let seed = cfg.evaluation.base_seed + i;
            let synth = set.generate(count, seed)?;
            let run = fit_and_score(&c, &splits, &synth, seed)?;
            info!("sweep: {factor} = {value} seed {i} test F1 {:.4}", run.test.f1);
            rows.push(SweepRow {
                factor,
                value,
                seed: i,
                validation_f1: run.validation_f1,
                test_f1: run.test.f1,
            });
        }
    }
    let dir = ws.sweep_dir();
    ensure_dir(&dir)?;
    let mut text = String::from("factor,value,seed,validation_f1,test_f1\n");
    for r in &rows {
        writeln!(text, "{},{},{},{},{}", r.factor, r.value, r.seed, r.validation_f1, r.test_f1).ok();
    }
    fs::write(dir.join("sweep.csv"), text)?;
    Ok(rows)
}
