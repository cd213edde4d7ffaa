//! On-disk layout of a run directory and stage up-to-date markers.
//!
//! ```text
//! <dir>/data/        train.csv validation.csv test.csv stats.txt split_*.txt
//! <dir>/clusters/    clusters.csv
//! <dir>/models/      clustered/cluster_<k>.ckpt global/cluster_1.ckpt loss.csv
//! <dir>/synthetic/   <variant>.csv
//! <dir>/evaluation/  report.json histograms_<arm>.csv correlation_<arm>.csv
//! <dir>/sweep/       sweep.csv
//! ```
//!
//! Each stage directory holds a `stage.digest` file with the digest of the
//! inputs it was built from.

use std::fs;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use emdt_core::dataset::{load_csv, StandardizationStats, TransactionTable};
use emdt_core::denoiser::{read_checkpoint, DenoiserConfig, DenoiserParams};
use sha2::{Digest, Sha256};

use crate::error::CliError;

const MARKER: &str = "stage.digest";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// One model per cluster of training frauds.
    Clustered,
    /// One model on all training frauds.
    Global,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Clustered => "clustered",
            Self::Global => "global",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn clusters_dir(&self) -> PathBuf {
        self.root.join("clusters")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn variant_dir(&self, v: Variant) -> PathBuf {
        self.models_dir().join(v.name())
    }

    pub fn checkpoint(&self, v: Variant, cluster: usize) -> PathBuf {
        self.variant_dir(v).join(format!("cluster_{}.ckpt", cluster + 1))
    }

    pub fn synthetic_dir(&self) -> PathBuf {
        self.root.join("synthetic")
    }

    pub fn evaluation_dir(&self) -> PathBuf {
        self.root.join("evaluation")
    }

    pub fn sweep_dir(&self) -> PathBuf {
        self.root.join("sweep")
    }

    /// Digest recorded by the stage in `dir`, if any.
    pub fn marker(&self, dir: &Path) -> Option<String> {
        fs::read_to_string(dir.join(MARKER))
            .ok()
            .map(|s| s.trim().to_string())
    }

    pub fn is_current(&self, dir: &Path, digest: &str) -> bool {
        self.marker(dir).as_deref() == Some(digest)
    }

    pub fn write_marker(&self, dir: &Path, digest: &str) -> Result<()> {
        fs::write(dir.join(MARKER), format!("{digest}\n"))
            .with_context(|| format!("writing marker in {}", dir.display()))
    }

    /// Digest of an upstream stage, failing with a usage error that names
    /// the stage to run first.
    pub fn require(&self, dir: &Path, stage: &str) -> Result<String> {
        self.marker(dir).ok_or_else(|| {
            CliError::MissingInput(dir.join(MARKER))
                .into_anyhow(format!("run `emdt {stage}` first"))
        })
    }

    pub fn load_splits(&self) -> Result<Splits> {
        let dir = self.data_dir();
        self.require(&dir, "preprocess")?;
        let load = |name: &str| -> Result<TransactionTable> {
            let p = dir.join(name);
            load_csv(&p).with_context(|| format!("loading {}", p.display()))
        };
        Ok(Splits {
            train: load("train.csv")?,
            validation: load("validation.csv")?,
            test: load("test.csv")?,
            stats: StandardizationStats::load(&dir.join("stats.txt"))
                .context("loading standardization stats")?,
        })
    }

    /// Cluster number (from 0) of each training fraud, in row order.
    pub fn load_cluster_labels(&self) -> Result<Vec<usize>> {
        let dir = self.clusters_dir();
        self.require(&dir, "cluster")?;
        let path = dir.join("clusters.csv");
        let text = fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        let mut labels = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let cluster: usize = line
                .split(',')
                .nth(1)
                .and_then(|c| c.parse().ok())
                .filter(|&c: &usize| c >= 1)
                .ok_or_else(|| {
                    CliError::Data(format!("{} line {}: bad cluster field", path.display(), i + 1))
                })?;
            labels.push(cluster - 1);
        }
        Ok(labels)
    }

    /// Checkpoints of one variant, in cluster order.
    pub fn load_models(&self, v: Variant) -> Result<Vec<(DenoiserConfig, DenoiserParams)>> {
        let mut out = Vec::new();
        for k in 0.. {
            let path = self.checkpoint(v, k);
            if !path.exists() {
                break;
            }
            let f = fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
            let model = read_checkpoint(std::io::BufReader::new(f))
                .with_context(|| format!("reading {}", path.display()))?;
            out.push(model);
        }
        if out.is_empty() {
            return Err(CliError::MissingInput(self.checkpoint(v, 0))
                .into_anyhow("run `emdt train` first".into()));
        }
        Ok(out)
    }
}

impl CliError {
    fn into_anyhow(self, hint: String) -> anyhow::Error {
        anyhow::Error::new(self).context(hint)
    }
}

/// Preprocessed splits plus the statistics fitted on the training split.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: TransactionTable,
    pub validation: TransactionTable,
    pub test: TransactionTable,
    pub stats: StandardizationStats,
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let f = fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => anyhow::Error::new(CliError::MissingInput(path.to_path_buf())),
        _ => anyhow::Error::new(e).context(format!("opening {}", path.display())),
    })?;
    let mut reader = BufReader::new(f);
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = reader.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}
