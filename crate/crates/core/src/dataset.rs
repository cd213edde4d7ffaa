//! Transaction table ingestion, preprocessing and stratified splitting.
//!
//! Raw input follows the public credit-card fraud schema: a header row,
//! numeric columns (`Time`, `V1`…`V28`, `Amount`) and a final `Class`
//! column holding 0/1 labels.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::apportion::largest_remainder;
use crate::numeric::{Prng, Tensor};

pub const LABEL_COLUMN: &str = "Class";
pub const TIME_COLUMN: &str = "Time";
pub const AMOUNT_COLUMN: &str = "Amount";

/// Row and fraud counts of the public credit-card dataset.
pub const KAGGLE_ROWS: usize = 284_807;
pub const KAGGLE_FRAUDS: usize = 492;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("header must end with a `{LABEL_COLUMN}` column, found {found:?}")]
    MissingLabel { found: Option<String> },
    #[error("blank cell at data row {row}, column `{column}`")]
    BlankCell { row: usize, column: String },
    #[error("non-numeric value {value:?} at data row {row}, column `{column}`")]
    NotNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row} has {found} fields, header has {expected}")]
    FieldCount {
        row: usize,
        found: usize,
        expected: usize,
    },
    #[error("label {value} at data row {row} is not 0 or 1")]
    BadLabel { row: usize, value: f64 },
    #[error("required column `{0}` is missing")]
    MissingColumn(String),
    #[error("column `{column}` has zero standard deviation")]
    ZeroVariance { column: String },
    #[error("split fractions {0:?} must be non-negative and sum to 1")]
    Fractions([f64; 3]),
    #[error("class {label} has {count} rows, fewer than the {splits} non-empty splits")]
    ClassTooSmall {
        label: u8,
        count: usize,
        splits: usize,
    },
    #[error("malformed stats file line {line}: {text:?}")]
    StatsFormat { line: usize, text: String },
}

/// Numeric feature matrix with binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TransactionTable {
    columns: Vec<String>,
    features: Tensor,
    labels: Vec<u8>,
}

impl TransactionTable {
    pub fn new(
        columns: Vec<String>,
        features: Tensor,
        labels: Vec<u8>,
    ) -> Result<Self, DatasetError> {
        if features.cols() != columns.len() && features.rows() > 0 {
            return Err(DatasetError::FieldCount {
                row: 0,
                found: features.cols(),
                expected: columns.len(),
            });
        }
        if features.rows() != labels.len() {
            return Err(DatasetError::FieldCount {
                row: labels.len(),
                found: features.rows(),
                expected: labels.len(),
            });
        }
        if let Some((row, &v)) = labels.iter().enumerate().find(|(_, &l)| l > 1) {
            return Err(DatasetError::BadLabel {
                row,
                value: v as f64,
            });
        }
        let features = if features.rows() == 0 {
            Tensor::zeros(0, columns.len())
        } else {
            features
        };
        Ok(Self {
            columns,
            features,
            labels,
        })
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            columns: self.columns.clone(),
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Rows with the given label.
    pub fn class_rows(&self, label: u8) -> Tensor {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == label).collect();
        self.features.select_rows(&idx)
    }

    /// Appends rows that all carry `label`.
    pub fn with_rows(&self, rows: &Tensor, label: u8) -> Result<Self, DatasetError> {
        if rows.rows() > 0 && rows.cols() != self.dim() {
            return Err(DatasetError::FieldCount {
                row: 0,
                found: rows.cols(),
                expected: self.dim(),
            });
        }
        let features = Tensor::vstack(&[&self.features, rows]).expect("column counts checked");
        let mut labels = self.labels.clone();
        labels.extend(std::iter::repeat_n(label, rows.rows()));
        Ok(Self {
            columns: self.columns.clone(),
            features,
            labels,
        })
    }

    /// Writes the table with a trailing `Class` column.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DatasetError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = self.columns.clone();
        header.push(LABEL_COLUMN.to_string());
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for (i, row) in self.features.row_iter().enumerate() {
            record.clear();
            record.extend(row.iter().map(|v| v.to_string()));
            record.push(self.labels[i].to_string());
            w.write_record(&record)?;
        }
        w.flush().map_err(|e| DatasetError::Io {
            path: "<csv writer>".into(),
            source: e,
        })?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), DatasetError> {
        let f = File::create(path).map_err(|e| io_err(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn load_csv(path: &Path) -> Result<TransactionTable, DatasetError> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    read_csv(BufReader::new(f))
}

/// Parses a table from CSV text. Row numbers in errors count data rows
/// from 1 (the header is not counted).
pub fn read_csv<R: Read>(input: R) -> Result<TransactionTable, DatasetError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    let header: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.last().map(String::as_str) != Some(LABEL_COLUMN) {
        return Err(DatasetError::MissingLabel {
            found: header.last().cloned(),
        });
    }
    let d = header.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        if record.len() != header.len() {
            return Err(DatasetError::FieldCount {
                row,
                found: record.len(),
                expected: header.len(),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if cell.is_empty() {
                return Err(DatasetError::BlankCell {
                    row,
                    column: header[j].clone(),
                });
            }
            let v: f64 = cell.parse().map_err(|_| DatasetError::NotNumeric {
                row,
                column: header[j].clone(),
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(DatasetError::NotNumeric {
                    row,
                    column: header[j].clone(),
                    value: cell.to_string(),
                });
            }
            if j < d {
                data.push(v);
            } else if v == 0.0 || v == 1.0 {
                labels.push(v as u8);
            } else {
                return Err(DatasetError::BadLabel { row, value: v });
            }
        }
    }
    let features = Tensor::matrix(labels.len(), d, data).expect("row-major fill");
    TransactionTable::new(header[..d].to_vec(), features, labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnStats {
    pub column: String,
    pub mean: f64,
    pub std: f64,
}

/// Z-score parameters, fitted on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizationStats {
    pub entries: Vec<ColumnStats>,
}

impl StandardizationStats {
    /// Population (1/n) mean and standard deviation of each named column.
    pub fn fit(table: &TransactionTable, columns: &[&str]) -> Result<Self, DatasetError> {
        let mut entries = Vec::new();
        for &name in columns {
            let j = table
                .column_index(name)
                .ok_or_else(|| DatasetError::MissingColumn(name.to_string()))?;
            let col = table.features.column(j);
            let n = col.len() as f64;
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            if !(std > 0.0) {
                return Err(DatasetError::ZeroVariance {
                    column: name.to_string(),
                });
            }
            entries.push(ColumnStats {
                column: name.to_string(),
                mean,
                std,
            });
        }
        Ok(Self { entries })
    }

    pub fn get(&self, column: &str) -> Option<&ColumnStats> {
        self.entries.iter().find(|e| e.column == column)
    }

    /// Standardizes the named columns of `features` in place.
    pub fn apply(&self, columns: &[String], features: &mut Tensor) -> Result<(), DatasetError> {
        self.transform(columns, features, |v, s| (v - s.mean) / s.std)
    }

    /// Maps standardized columns back to the original scale.
    pub fn invert(&self, columns: &[String], features: &mut Tensor) -> Result<(), DatasetError> {
        self.transform(columns, features, |v, s| v * s.std + s.mean)
    }

    fn transform(
        &self,
        columns: &[String],
        features: &mut Tensor,
        f: impl Fn(f64, &ColumnStats) -> f64,
    ) -> Result<(), DatasetError> {
        for s in &self.entries {
            if !(s.std > 0.0) {
                return Err(DatasetError::ZeroVariance {
                    column: s.column.clone(),
                });
            }
            let j = columns
                .iter()
                .position(|c| *c == s.column)
                .ok_or_else(|| DatasetError::MissingColumn(s.column.clone()))?;
            for r in 0..features.rows() {
                let v = features.get(r, j);
                features.set(r, j, f(v, s));
            }
        }
        Ok(())
    }

    /// One `column<TAB>mean<TAB>std` line per entry.
    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in &self.entries {
            writeln!(out, "{}\t{}\t{}", e.column, e.mean, e.std)?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self, DatasetError> {
        let mut entries = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line.map_err(|e| DatasetError::Io {
                path: "<stats>".into(),
                source: e,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = || DatasetError::StatsFormat {
                line: i + 1,
                text: line.clone(),
            };
            let mut parts = line.split('\t');
            let column = parts.next().ok_or_else(bad)?.to_string();
            let mean: f64 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let std: f64 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            if parts.next().is_some() {
                return Err(bad());
            }
            entries.push(ColumnStats { column, mean, std });
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let f = File::create(path).map_err(|e| io_err(path, e))?;
        self.write(f).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let f = File::open(path).map_err(|e| io_err(path, e))?;
        Self::read(BufReader::new(f))
    }
}

/// Drops `Time` and z-scores `Amount`.
///
/// With `stats = None` the statistics are fitted on `table` itself; the
/// statistics actually used are returned either way.
pub fn preprocess(
    table: &TransactionTable,
    stats: Option<&StandardizationStats>,
) -> Result<(TransactionTable, StandardizationStats), DatasetError> {
    let time = table
        .column_index(TIME_COLUMN)
        .ok_or_else(|| DatasetError::MissingColumn(TIME_COLUMN.into()))?;
    if table.column_index(AMOUNT_COLUMN).is_none() {
        return Err(DatasetError::MissingColumn(AMOUNT_COLUMN.into()));
    }
    let keep: Vec<usize> = (0..table.dim()).filter(|&j| j != time).collect();
    let columns: Vec<String> = keep.iter().map(|&j| table.columns[j].clone()).collect();
    let mut data = Vec::with_capacity(table.len() * keep.len());
    for row in table.features.row_iter() {
        data.extend(keep.iter().map(|&j| row[j]));
    }
    let mut features = Tensor::matrix(table.len(), keep.len(), data).expect("row-major fill");
    let stats = match stats {
        Some(s) => s.clone(),
        None => StandardizationStats::fit(table, &[AMOUNT_COLUMN])?,
    };
    stats.apply(&columns, &mut features)?;
    let out = TransactionTable::new(columns, features, table.labels.clone())?;
    Ok((out, stats))
}

/// Train / validation / test partition of one table.
#[derive(Debug, Clone)]
pub struct DataSplits {
    pub train: TransactionTable,
    pub validation: TransactionTable,
    pub test: TransactionTable,
    /// Row indices into the source table, ascending within each split.
    pub indices: [Vec<usize>; 3],
    pub seed: u64,
    pub fraud_counts: [usize; 3],
}

/// Per-class shuffle under `seed`, then a contiguous cut of each class by
/// largest-remainder counts.
pub fn stratified_split(
    table: &TransactionTable,
    fractions: [f64; 3],
    seed: u64,
) -> Result<DataSplits, DatasetError> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(DatasetError::Fractions(fractions));
    }
    let nonempty = fractions.iter().filter(|&&f| f > 0.0).count();
    let mut rng = Prng::new(seed);
    let mut indices: [Vec<usize>; 3] = Default::default();
    let mut fraud_counts = [0usize; 3];
    for label in [0u8, 1u8] {
        let mut members: Vec<usize> = (0..table.len())
            .filter(|&i| table.labels[i] == label)
            .collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < nonempty {
            return Err(DatasetError::ClassTooSmall {
                label,
                count: members.len(),
                splits: nonempty,
            });
        }
        rng.shuffle(&mut members);
        let counts = largest_remainder(members.len(), &fractions);
        let mut start = 0;
        for (s, &c) in counts.iter().enumerate() {
            indices[s].extend_from_slice(&members[start..start + c]);
            if label == 1 {
                fraud_counts[s] = c;
            }
            start += c;
        }
    }
    for idx in indices.iter_mut() {
        idx.sort_unstable();
    }
    Ok(DataSplits {
        train: table.select(&indices[0]),
        validation: table.select(&indices[1]),
        test: table.select(&indices[2]),
        indices,
        seed,
        fraud_counts,
    })
}
