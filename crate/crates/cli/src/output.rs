//! CSV results, fit summaries and the JSON run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{ExperimentConfig, RunKind, SCHEMA_VERSION};
use crate::error::CliError;
use crate::run::{FitSummary, Outcome, Verdict};

#[derive(Debug, Clone)]
pub struct Artifacts {
    pub results: PathBuf,
    pub fits: Option<PathBuf>,
    pub manifest: PathBuf,
}

#[derive(Debug, Serialize)]
struct Versions {
    wickbench_cli: &'static str,
    wickbench_core: &'static str,
    schema: u32,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    kind: &'static str,
    config_hash: &'a str,
    seed: u64,
    versions: Versions,
    config: &'a ExperimentConfig,
    rows: usize,
    failed_rows: usize,
    verdicts: &'a [Verdict],
    fits: &'a [FitSummary],
    warnings: &'a [String],
    status: &'a str,
    exit_code: i32,
}

pub fn write_results(path: &Path, hash: &str, outcome: &Outcome) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["grid_index", "config_hash", "anchor", "status"];
    header.extend(outcome.columns.iter().copied());
    header.push("message");
    w.write_record(&header)?;
    for row in &outcome.rows {
        let mut rec = vec![row.grid_index.to_string(), hash.to_string(), row.anchor.clone()];
        match &row.values {
            Some(values) => {
                rec.push("ok".into());
                rec.extend(values.iter().map(|v| v.render()));
            }
            None => {
                rec.push("failed".into());
                rec.extend(std::iter::repeat_n(String::new(), outcome.columns.len()));
            }
        }
        rec.push(row.message.clone());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_fits(path: &Path, hash: &str, fits: &[FitSummary]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["config_hash", "anchor", "group", "x", "y", "points", "slope", "intercept", "r_squared"])?;
    for fit in fits {
        w.write_record([
            hash.to_string(),
            fit.anchor.clone(),
            fit.group.clone(),
            fit.x.to_string(),
            fit.y.to_string(),
            fit.points.to_string(),
            format!("{:e}", fit.slope),
            format!("{:e}", fit.intercept),
            format!("{:e}", fit.r_squared),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn write_all(
    dir: &Path,
    kind: RunKind,
    cfg: &ExperimentConfig,
    hash: &str,
    outcome: &Outcome,
    status: &str,
    exit_code: i32,
) -> Result<Artifacts, CliError> {
    fs::create_dir_all(dir)?;
    let results = dir.join(format!("{kind}.csv"));
    write_results(&results, hash, outcome)?;
    let fits = if outcome.fits.is_empty() {
        None
    } else {
        let p = dir.join(format!("{kind}.fits.csv"));
        write_fits(&p, hash, &outcome.fits)?;
        Some(p)
    };
    let manifest = dir.join(format!("{kind}.manifest.json"));
    let m = Manifest {
        kind: kind.name(),
        config_hash: hash,
        seed: cfg.seed,
        versions: Versions {
            wickbench_cli: env!("CARGO_PKG_VERSION"),
            wickbench_core: wickbench_core::VERSION,
            schema: SCHEMA_VERSION,
        },
        config: cfg,
        rows: outcome.rows.len(),
        failed_rows: outcome.failures.len(),
        verdicts: &outcome.verdicts,
        fits: &outcome.fits,
        warnings: &outcome.warnings,
        status,
        exit_code,
    };
    let text = serde_json::to_string_pretty(&m).map_err(|e| CliError::Io(e.to_string()))?;
    fs::write(&manifest, text + "\n")?;
    Ok(Artifacts { results, fits, manifest })
}
