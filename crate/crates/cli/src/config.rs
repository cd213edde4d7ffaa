//! Pipeline configuration: TOML file, defaults and dotted-name overrides.

use std::path::{Path, PathBuf};

use emdt_core::classifier::{GbdtConfig, TuningGrid};
use emdt_core::clustering::{ClusterConfig, LayoutConfig};
use emdt_core::denoiser::{DenoiserConfig, NormPlacement};
use emdt_core::diffusion::{PosteriorMean, TrainConfig};
use emdt_core::embedding::EmbeddingConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub path: PathBuf,
    pub fractions: [f64; 3],
    pub split_seed: u64,
    /// Expected raw row count; 0 skips the check.
    pub expected_rows: usize,
    /// Require the exact credit-card header.
    pub check_columns: bool,
    /// Turn schema and row-count warnings into errors.
    pub strict: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: PathBuf::from("creditcard.csv"),
            fractions: [0.6, 0.2, 0.2],
            split_seed: 0,
            expected_rows: emdt_core::dataset::KAGGLE_ROWS,
            check_columns: true,
            strict: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingSection {
    pub dim: usize,
    pub feature_scale: f64,
    pub time_scale: f64,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        let e = EmbeddingConfig::default();
        Self {
            dim: e.dim,
            feature_scale: e.feature_scale,
            time_scale: e.time_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub ema_decay: f64,
    pub heads: usize,
    pub norm: NormPlacement,
    pub posterior_mean: PosteriorMean,
    pub seed: u64,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            timesteps: t.timesteps,
            beta_start: t.beta_start,
            beta_end: t.beta_end,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            ema_decay: t.ema_decay,
            heads: 2,
            norm: NormPlacement::default(),
            posterior_mean: PosteriorMean::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusteringSection {
    /// Train one model per cluster; off trains a single global model.
    pub enabled: bool,
    pub clusters: usize,
    pub neighbors: usize,
    pub layout_epochs: usize,
    pub negative_samples: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for ClusteringSection {
    fn default() -> Self {
        let c = ClusterConfig::default();
        Self {
            enabled: true,
            clusters: c.clusters,
            neighbors: c.neighbors,
            layout_epochs: c.layout.epochs,
            negative_samples: c.layout.negative_samples,
            restarts: c.restarts,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSection {
    /// Synthetic frauds per training fraud; 1 doubles the minority class.
    pub multiplier: f64,
    pub smote_k: usize,
}

impl Default for AugmentationSection {
    fn default() -> Self {
        Self {
            multiplier: 1.0,
            smote_k: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    pub trees: Vec<usize>,
    pub max_depths: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub lambda: f64,
    pub min_split_gain: f64,
    pub min_child_hessian: f64,
    pub threshold: f64,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        let g = TuningGrid::default();
        let c = GbdtConfig::default();
        Self {
            trees: g.trees,
            max_depths: g.max_depths,
            learning_rates: g.learning_rates,
            lambda: c.lambda,
            min_split_gain: c.min_split_gain,
            min_child_hessian: c.min_child_hessian,
            threshold: c.threshold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    Original,
    Smote,
    Emdt,
    EmdtNoCluster,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Self::Original => "original",
            Self::Smote => "smote",
            Self::Emdt => "emdt",
            Self::EmdtNoCluster => "emdt-no-cluster",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub seeds: usize,
    pub base_seed: u64,
    pub arms: Vec<Arm>,
    pub histogram_bins: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            seeds: 10,
            base_seed: 0,
            arms: vec![Arm::Original, Arm::Smote, Arm::Emdt, Arm::EmdtNoCluster],
            histogram_bins: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub dims: Vec<usize>,
    pub feature_scales: Vec<f64>,
    pub time_scales: Vec<f64>,
    pub seeds: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            learning_rates: vec![1e-5, 1e-4, 5e-4, 1e-3, 3e-3],
            batch_sizes: vec![64, 128, 256],
            dims: vec![32, 64, 128],
            feature_scales: vec![1.0, 10.0, 50.0, 100.0, 500.0],
            time_scales: vec![0.5, 1.0, 2.0],
            seeds: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub data: DataSection,
    pub embedding: EmbeddingSection,
    pub diffusion: DiffusionSection,
    pub clustering: ClusteringSection,
    pub augmentation: AugmentationSection,
    pub classifier: ClassifierSection,
    pub evaluation: EvaluationSection,
    pub sweep: SweepSection,
    pub output: OutputSection,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::MissingInput(path.to_path_buf()),
            _ => CliError::Usage(format!("cannot read config {}: {e}", path.display())),
        })?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `section.field=value` overrides. Values are read as TOML
    /// literals, falling back to a bare string.
    pub fn apply_overrides(&mut self, overrides: &[(String, String)]) -> Result<(), CliError> {
        if overrides.is_empty() {
            return Ok(());
        }
        let mut tree = toml::Value::try_from(&*self).expect("config serializes");
        for (key, raw) in overrides {
            let mut slot = &mut tree;
            for part in key.split('.') {
                slot = slot
                    .as_table_mut()
                    .and_then(|t| t.get_mut(part))
                    .ok_or_else(|| CliError::Usage(format!("unknown config key `{key}`")))?;
            }
            *slot = parse_literal(raw);
        }
        *self = tree
            .try_into()
            .map_err(|e| CliError::Usage(format!("override: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Usage(m));
        let f = self.data.fractions;
        if f.iter().any(|v| !(*v >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("data.fractions {f:?} must be non-negative and sum to 1"));
        }
        if !(self.augmentation.multiplier >= 0.0 && self.augmentation.multiplier.is_finite()) {
            return bad("augmentation.multiplier must be a non-negative number".into());
        }
        if self.evaluation.seeds == 0 {
            return bad("evaluation.seeds must be at least 1".into());
        }
        if self.evaluation.histogram_bins < 2 {
            return bad("evaluation.histogram_bins must be at least 2".into());
        }
        if self.clustering.clusters == 0 {
            return bad("clustering.clusters must be at least 1".into());
        }
        if self.classifier.trees.is_empty()
            || self.classifier.max_depths.is_empty()
            || self.classifier.learning_rates.is_empty()
        {
            return bad("classifier grid lists must be non-empty".into());
        }
        for &t in &self.classifier.trees {
            self.gbdt(t, self.classifier.max_depths[0], self.classifier.learning_rates[0])
                .validate()
                .map_err(|e| CliError::Usage(e.to_string()))?;
        }
        for &d in &self.classifier.max_depths {
            for &r in &self.classifier.learning_rates {
                self.gbdt(1, d, r)
                    .validate()
                    .map_err(|e| CliError::Usage(e.to_string()))?;
            }
        }
        self.train_config()
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        self.denoiser_config(1)
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(())
    }

    pub fn embedding_config(&self) -> EmbeddingConfig {
        EmbeddingConfig {
            dim: self.embedding.dim,
            feature_scale: self.embedding.feature_scale,
            time_scale: self.embedding.time_scale,
            timesteps: self.diffusion.timesteps,
        }
    }

    pub fn denoiser_config(&self, features: usize) -> DenoiserConfig {
        DenoiserConfig {
            heads: self.diffusion.heads,
            norm: self.diffusion.norm,
            init_seed: self.diffusion.seed,
            ..DenoiserConfig::new(self.embedding_config(), features)
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let d = &self.diffusion;
        TrainConfig {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            timesteps: d.timesteps,
            beta_start: d.beta_start,
            beta_end: d.beta_end,
            ema_decay: d.ema_decay,
            seed: d.seed,
        }
    }

    pub fn cluster_config(&self) -> ClusterConfig {
        let c = &self.clustering;
        ClusterConfig {
            clusters: c.clusters,
            neighbors: c.neighbors,
            layout: LayoutConfig {
                epochs: c.layout_epochs,
                negative_samples: c.negative_samples,
                ..LayoutConfig::default()
            },
            restarts: c.restarts,
        }
    }

    pub fn gbdt(&self, trees: usize, max_depth: usize, learning_rate: f64) -> GbdtConfig {
        let c = &self.classifier;
        GbdtConfig {
            trees,
            max_depth,
            learning_rate,
            lambda: c.lambda,
            min_split_gain: c.min_split_gain,
            min_child_hessian: c.min_child_hessian,
            threshold: c.threshold,
            seed: 0,
        }
    }

    pub fn tuning_grid(&self) -> TuningGrid {
        TuningGrid {
            trees: self.classifier.trees.clone(),
            max_depths: self.classifier.max_depths.clone(),
            learning_rates: self.classifier.learning_rates.clone(),
        }
    }

    /// Hex SHA-256 of the canonical JSON of everything but the output
    /// directory.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("object").remove("output");
        digest_of(&v)
    }
}

pub fn digest_of<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable");
    let hash = Sha256::digest(&bytes);
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

fn parse_literal(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    match toml::from_str::<Wrap>(&format!("v = {raw}")) {
        Ok(w) => w.v,
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Splits `--section.field value` and `--section.field=value` arguments
/// out of `args`, returning the remaining arguments and the overrides.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), CliError> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !name.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| CliError::Usage(format!("--{name} needs a value")))?,
        };
        overrides.push((name, value));
    }
    Ok((rest, overrides))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
        c.validate().unwrap();
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = PipelineConfig::from_toml("[diffusion]\nepochs = 3\n").unwrap();
        assert_eq!(c.diffusion.epochs, 3);
        assert_eq!(c.embedding.dim, 128);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(PipelineConfig::from_toml("[diffusion]\nepoch = 3\n").is_err());
        let mut c = PipelineConfig::default();
        assert!(c
            .apply_overrides(&[("diffusion.epoch".into(), "3".into())])
            .is_err());
    }

    #[test]
    fn overrides_parse_literals() {
        let mut c = PipelineConfig::default();
        c.apply_overrides(&[
            ("diffusion.learning_rate".into(), "0.003".into()),
            ("data.path".into(), "/tmp/x.csv".into()),
            ("evaluation.arms".into(), "[\"original\", \"smote\"]".into()),
            ("clustering.enabled".into(), "false".into()),
            ("diffusion.norm".into(), "pre".into()),
        ])
        .unwrap();
        assert_eq!(c.diffusion.learning_rate, 0.003);
        assert_eq!(c.data.path, PathBuf::from("/tmp/x.csv"));
        assert_eq!(c.evaluation.arms, vec![Arm::Original, Arm::Smote]);
        assert!(!c.clustering.enabled);
        assert_eq!(c.diffusion.norm, NormPlacement::Pre);
    }

    #[test]
    fn wrong_type_rejected() {
        let mut c = PipelineConfig::default();
        assert!(c
            .apply_overrides(&[("diffusion.epochs".into(), "many".into())])
            .is_err());
    }

    #[test]
    fn dotted_flags_are_extracted() {
        let args = vec![
            "emdt".to_string(),
            "train".into(),
            "--diffusion.epochs".into(),
            "5".into(),
            "--embedding.dim=32".into(),
            "--force".into(),
        ];
        let (rest, ov) = extract_overrides(args).unwrap();
        assert_eq!(rest, vec!["emdt", "train", "--force"]);
        assert_eq!(
            ov,
            vec![
                ("diffusion.epochs".to_string(), "5".to_string()),
                ("embedding.dim".to_string(), "32".to_string())
            ]
        );
    }

    #[test]
    fn digest_ignores_output_dir() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.output.dir = PathBuf::from("elsewhere");
        assert_eq!(a.digest(), b.digest());
        b.diffusion.epochs += 1;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn bad_fractions_rejected() {
        let mut c = PipelineConfig::default();
        c.data.fractions = [0.5, 0.2, 0.2];
        assert!(c.validate().is_err());
    }
}
