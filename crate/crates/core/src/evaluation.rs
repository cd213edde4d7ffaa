//! Classification metrics, distance-to-closest-record privacy score,
//! correlation fidelity and marginal density exports.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{Prng, Tensor};

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("length mismatch: {left} vs {right}")]
    Length { left: usize, right: usize },
    #[error("dimension mismatch: {left} vs {right} columns")]
    Dimension { left: usize, right: usize },
    #[error("{0} set is empty")]
    Empty(&'static str),
    #[error("correlation needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("histogram needs at least 2 bins, got {0}")]
    Bins(usize),
    #[error("labels must be 0 or 1")]
    Label,
    #[error("csv export: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub f1: f64,
    pub recall: f64,
    pub precision: f64,
    pub balanced_accuracy: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionCounts {
    pub fn from_labels(y_true: &[u8], y_pred: &[u8]) -> Result<Self, EvaluationError> {
        if y_true.len() != y_pred.len() {
            return Err(EvaluationError::Length {
                left: y_true.len(),
                right: y_pred.len(),
            });
        }
        let mut c = Self::default();
        for (&t, &p) in y_true.iter().zip(y_pred) {
            match (t, p) {
                (1, 1) => c.tp += 1,
                (0, 1) => c.fp += 1,
                (0, 0) => c.tn += 1,
                (1, 0) => c.fn_ += 1,
                _ => return Err(EvaluationError::Label),
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Any ratio with a zero denominator is 0.
    pub fn metrics(&self) -> ClassificationMetrics {
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let specificity = ratio(self.tn, self.tn + self.fp);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassificationMetrics {
            f1,
            recall,
            precision,
            balanced_accuracy: (recall + specificity) / 2.0,
        }
    }
}

pub fn classification_metrics(
    y_true: &[u8],
    y_pred: &[u8],
) -> Result<ClassificationMetrics, EvaluationError> {
    Ok(ConfusionCounts::from_labels(y_true, y_pred)?.metrics())
}

/// Area under the ROC curve by the rank-sum statistic, ties averaged.
/// Returns 0.5 when one class is absent.
pub fn roc_auc(scores: &[f64], y_true: &[u8]) -> Result<f64, EvaluationError> {
    if scores.len() != y_true.len() {
        return Err(EvaluationError::Length {
            left: scores.len(),
            right: y_true.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mean_rank = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if y_true[k] == 1 {
                rank_sum += mean_rank;
            }
        }
        i = j + 1;
    }
    let pos = y_true.iter().filter(|&&l| l == 1).count() as f64;
    let neg = y_true.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Ok(0.5);
    }
    Ok((rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

fn nearest_distance_sq(row: &[f64], set: &Tensor) -> f64 {
    set.row_iter()
        .map(|other| {
            row.iter()
                .zip(other)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Fraction of synthetic rows whose nearest train row is closer than their
/// nearest holdout row, ties counting one half. Train is first subsampled
/// without replacement to the holdout size. Features are expected to be on
/// a common scale already.
pub fn dcr_score(
    synth: &Tensor,
    train: &Tensor,
    holdout: &Tensor,
    rng: &mut Prng,
) -> Result<f64, EvaluationError> {
    for (name, t) in [("synthetic", synth), ("train", train), ("holdout", holdout)] {
        if t.rows() == 0 {
            return Err(EvaluationError::Empty(name));
        }
    }
    for t in [train, holdout] {
        if t.cols() != synth.cols() {
            return Err(EvaluationError::Dimension {
                left: synth.cols(),
                right: t.cols(),
            });
        }
    }
    let train = if train.rows() > holdout.rows() {
        let mut idx: Vec<usize> = (0..train.rows()).collect();
        rng.shuffle(&mut idx);
        idx.truncate(holdout.rows());
        idx.sort_unstable();
        train.select_rows(&idx)
    } else {
        train.clone()
    };
    let score: f64 = synth
        .row_iter()
        .map(|row| {
            let d_tr = nearest_distance_sq(row, &train);
            let d_ho = nearest_distance_sq(row, holdout);
            if d_tr < d_ho {
                1.0
            } else if d_tr == d_ho {
                0.5
            } else {
                0.0
            }
        })
        .sum();
    Ok(score / synth.rows() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correlation {
    pub matrix: Tensor,
    /// Columns with zero variance; their off-diagonal entries are 0.
    pub constant_columns: Vec<usize>,
}

/// Pearson correlation matrix of the columns of `x`.
pub fn correlation_matrix(x: &Tensor) -> Result<Correlation, EvaluationError> {
    let (n, d) = (x.rows(), x.cols());
    if n < 2 {
        return Err(EvaluationError::TooFewRows(n));
    }
    let means: Vec<f64> = (0..d)
        .map(|j| x.row_iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let mut cov = vec![0.0; d * d];
    for row in x.row_iter() {
        for a in 0..d {
            let da = row[a] - means[a];
            for b in a..d {
                cov[a * d + b] += da * (row[b] - means[b]);
            }
        }
    }
    let constant_columns: Vec<usize> = (0..d).filter(|&j| cov[j * d + j] <= 0.0).collect();
    let mut m = Tensor::zeros(d, d);
    for a in 0..d {
        m.set(a, a, 1.0);
        for b in a + 1..d {
            let den = (cov[a * d + a] * cov[b * d + b]).sqrt();
            let r = if den > 0.0 {
                (cov[a * d + b] / den).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            m.set(a, b, r);
            m.set(b, a, r);
        }
    }
    Ok(Correlation {
        matrix: m,
        constant_columns,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    /// Elementwise `|C_real − C_synth|`.
    pub diff: Tensor,
    /// `1 − ‖C_real − C_synth‖_F / (2d)`.
    pub similarity: f64,
    pub constant_columns_real: Vec<usize>,
    pub constant_columns_synth: Vec<usize>,
}

impl CorrelationReport {
    pub fn has_constant_columns(&self) -> bool {
        !self.constant_columns_real.is_empty() || !self.constant_columns_synth.is_empty()
    }

    /// Square CSV with a header row of column names.
    pub fn write_diff_csv<W: Write>(&self, mut out: W, names: &[String]) -> Result<(), EvaluationError> {
        writeln!(out, "feature,{}", names.join(","))?;
        for (i, row) in self.diff.row_iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{},{}", names[i], cells.join(","))?;
        }
        Ok(())
    }
}

pub fn correlation_similarity(real: &Tensor, synth: &Tensor) -> Result<CorrelationReport, EvaluationError> {
    if real.cols() != synth.cols() {
        return Err(EvaluationError::Dimension {
            left: real.cols(),
            right: synth.cols(),
        });
    }
    let cr = correlation_matrix(real)?;
    let cs = correlation_matrix(synth)?;
    let d = real.cols();
    let diff = Tensor::matrix(
        d,
        d,
        cr.matrix
            .data()
            .iter()
            .zip(cs.matrix.data())
            .map(|(a, b)| (a - b).abs())
            .collect(),
    )
    .expect("d × d");
    let frobenius = diff.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let similarity = if d == 0 { 1.0 } else { 1.0 - frobenius / (2.0 * d as f64) };
    Ok(CorrelationReport {
        diff,
        similarity,
        constant_columns_real: cr.constant_columns,
        constant_columns_synth: cs.constant_columns,
    })
}

/// Densities of two samples over shared bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalHistogram {
    /// `bins + 1` ascending edges spanning both samples.
    pub edges: Vec<f64>,
    pub real: Vec<f64>,
    pub synth: Vec<f64>,
}

pub fn marginal_histogram(
    real: &[f64],
    synth: &[f64],
    bins: usize,
) -> Result<MarginalHistogram, EvaluationError> {
    if bins < 2 {
        return Err(EvaluationError::Bins(bins));
    }
    if real.is_empty() {
        return Err(EvaluationError::Empty("real column"));
    }
    if synth.is_empty() {
        return Err(EvaluationError::Empty("synthetic column"));
    }
    let all = real.iter().chain(synth);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    // a constant column still gets a unit-width span
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + width * i as f64 })
        .collect();
    let density = |xs: &[f64]| -> Vec<f64> {
        let mut counts = vec![0usize; bins];
        for &v in xs {
            let b = (((v - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        counts
            .iter()
            .enumerate()
            .map(|(b, &c)| c as f64 / (xs.len() as f64 * (edges[b + 1] - edges[b])))
            .collect()
    };
    Ok(MarginalHistogram {
        real: density(real),
        synth: density(synth),
        edges,
    })
}

/// Long-format CSV: `feature,bin,left,right,real_density,synth_density`.
pub fn write_histograms_csv<W: Write>(
    mut out: W,
    histograms: &[(String, MarginalHistogram)],
) -> Result<(), EvaluationError> {
    writeln!(out, "feature,bin,left,right,real_density,synth_density")?;
    for (name, h) in histograms {
        for b in 0..h.real.len() {
            writeln!(
                out,
                "{name},{b},{},{},{},{}",
                h.edges[b],
                h.edges[b + 1],
                h.real[b],
                h.synth[b]
            )?;
        }
    }
    Ok(())
}

/// Mean and sample standard deviation of per-seed values. A single value
/// has std 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl MetricSummary {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: 0.0,
                values,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std, values }
    }
}

/// How the privacy and fidelity numbers were computed, stored alongside
/// them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub dcr: String,
    pub correlation_similarity: String,
    pub zero_denominator: String,
}

impl Default for Conventions {
    fn default() -> Self {
        Self {
            dcr: "euclidean nearest neighbor; train subsampled without replacement to holdout size; ties count 0.5".into(),
            correlation_similarity: "1 - ||C_real - C_synth||_F / (2d); constant columns correlate 0 off the diagonal".into(),
            zero_denominator: "precision, recall and rates with a zero denominator are 0".into(),
        }
    }
}

/// Aggregated metrics of one method over evaluation seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub seeds: Vec<u64>,
    pub f1: MetricSummary,
    pub recall: MetricSummary,
    pub precision: MetricSummary,
    pub balanced_accuracy: MetricSummary,
    pub dcr: Option<MetricSummary>,
    pub correlation_similarity: Option<MetricSummary>,
    pub constant_column_warning: bool,
    pub config_digest: String,
    pub conventions: Conventions,
}

impl MetricsReport {
    pub fn from_runs(
        method: impl Into<String>,
        seeds: Vec<u64>,
        runs: &[ClassificationMetrics],
        config_digest: impl Into<String>,
    ) -> Self {
        let pick = |f: fn(&ClassificationMetrics) -> f64| {
            MetricSummary::from_values(runs.iter().map(f).collect())
        };
        Self {
            method: method.into(),
            seeds,
            f1: pick(|m| m.f1),
            recall: pick(|m| m.recall),
            precision: pick(|m| m.precision),
            balanced_accuracy: pick(|m| m.balanced_accuracy),
            dcr: None,
            correlation_similarity: None,
            constant_column_warning: false,
            config_digest: config_digest.into(),
            conventions: Conventions::default(),
        }
    }
}
