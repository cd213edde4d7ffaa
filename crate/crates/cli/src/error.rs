//! Failure categories and their process exit statuses.

use std::path::PathBuf;

use emdt_core::classifier::ClassifierError;
use emdt_core::clustering::ClusteringError;
use emdt_core::dataset::DatasetError;
use emdt_core::denoiser::DenoiserError;
use emdt_core::diffusion::DiffusionError;
use emdt_core::numeric::NumericError;
use thiserror::Error;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("input path {} does not exist", .0.display())]
    MissingInput(PathBuf),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

/// Exit status for an error chain: the first recognized cause decides.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Usage(_) | CliError::MissingInput(_) => EXIT_USAGE,
                CliError::Data(_) => EXIT_DATA,
                CliError::Numerical(_) => EXIT_NUMERIC,
            };
        }
        if let Some(e) = cause.downcast_ref::<DiffusionError>() {
            return match e {
                DiffusionError::NonFiniteLoss { .. }
                | DiffusionError::NonFiniteSample { .. }
                | DiffusionError::Numeric(_) => EXIT_NUMERIC,
                DiffusionError::Denoiser(DenoiserError::Numeric(_)) => EXIT_NUMERIC,
                DiffusionError::Config(_)
                | DiffusionError::Schedule { .. }
                | DiffusionError::Embedding(_)
                | DiffusionError::Denoiser(DenoiserError::Config(_)) => EXIT_USAGE,
                _ => EXIT_DATA,
            };
        }
        if cause.downcast_ref::<NumericError>().is_some() {
            return EXIT_NUMERIC;
        }
        if let Some(e) = cause.downcast_ref::<DenoiserError>() {
            return match e {
                DenoiserError::Numeric(_) => EXIT_NUMERIC,
                DenoiserError::Config(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            };
        }
        if let Some(e) = cause.downcast_ref::<ClassifierError>() {
            return match e {
                ClassifierError::Config(_) | ClassifierError::EmptyGrid => EXIT_USAGE,
                _ => EXIT_DATA,
            };
        }
        if let Some(e) = cause.downcast_ref::<DatasetError>() {
            return match e {
                DatasetError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                    EXIT_USAGE
                }
                _ => EXIT_DATA,
            };
        }
        if cause.downcast_ref::<ClusteringError>().is_some()
            || cause.downcast_ref::<std::io::Error>().is_some()
        {
            return EXIT_DATA;
        }
    }
    1
}
