//! Command-line pipeline around `emdt-core`: configuration, stage
//! orchestration on a run directory, and report emission.

pub mod config;
pub mod error;
pub mod evaluate;
pub mod seeds;
pub mod stages;
pub mod workspace;

use std::collections::BTreeMap;
use std::time::Instant;

use anyhow::Result;

use crate::config::PipelineConfig;
use crate::evaluate::RunReport;
use crate::stages::RunOptions;
use crate::workspace::Workspace;

/// Every stage in order, then the evaluation report with per-stage
/// timings unless `opts.canonical` is set.
pub fn pipeline(cfg: &PipelineConfig, opts: RunOptions) -> Result<RunReport> {
    let ws = Workspace::new(&cfg.output.dir);
    let mut seconds = BTreeMap::new();
    let mut timed = |name: &str, f: &dyn Fn() -> Result<String>| -> Result<()> {
        let start = Instant::now();
        f()?;
        seconds.insert(name.to_string(), start.elapsed().as_secs_f64());
        Ok(())
    };
    timed("preprocess", &|| stages::preprocess(cfg, &ws, opts))?;
    timed("cluster", &|| stages::cluster(cfg, &ws, opts))?;
    timed("train", &|| stages::train(cfg, &ws, opts))?;
    timed("generate", &|| stages::generate(cfg, &ws, opts))?;
    let start = Instant::now();
    let mut report = evaluate::evaluate(cfg, &ws)?;
    seconds.insert("evaluate".into(), start.elapsed().as_secs_f64());
    if !opts.canonical {
        report.stage_seconds = Some(seconds);
        evaluate::write_report(&ws, &report)?;
    }
    Ok(report)
}
