//! Experiment runner: JSON configs in, CSV results and JSON manifests out.

pub mod config;
pub mod error;
pub mod model;
pub mod output;
pub mod run;

use std::path::PathBuf;

use clap::Parser;

pub use config::{ExperimentConfig, RunKind};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "wickbench", version, about = "Finite-lattice experiments on weakly driven fermionic Gibbs states")]
pub struct Args {
    /// What to compute.
    #[arg(value_enum)]
    pub kind: RunKind,
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output directory; overrides the config's `output`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for random observables; overrides the config's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug)]
pub struct Report {
    pub exit_code: i32,
    pub artifacts: Option<output::Artifacts>,
    pub warnings: Vec<String>,
    pub error: Option<CliError>,
}

fn status_of(outcome: &run::Outcome) -> (&'static str, i32) {
    if !outcome.failures.is_empty() {
        if outcome.failures.len() == outcome.rows.len() && outcome.failures.iter().all(|e| matches!(e, CliError::Config(_))) {
            return ("config-error", error::EXIT_CONFIG);
        }
        return ("row-failures", error::EXIT_BUDGET);
    }
    if outcome.verdicts.iter().any(|v| v.verdict == "fail") {
        return ("identity-failed", error::EXIT_IDENTITY);
    }
    ("ok", 0)
}

fn prepare(args: &Args) -> Result<(ExperimentConfig, String), CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate(args.kind)?;
    cfg.kind = Some(args.kind);
    let hash = cfg.hash();
    Ok((cfg, hash))
}

/// Full invocation: load, validate, run on a pool of `--jobs` threads, write artifacts.
pub fn invoke(args: &Args) -> Report {
    let fail = |e: CliError| Report { exit_code: e.exit_code(), artifacts: None, warnings: Vec::new(), error: Some(e) };
    let (cfg, hash) = match prepare(args) {
        Ok(v) => v,
        Err(e) => return fail(e),
    };
    if args.jobs == Some(0) {
        return fail(CliError::Config("--jobs must be positive".into()));
    }
    let max_dim = match model::max_dim_from_env() {
        Ok(d) => d,
        Err(e) => return fail(e),
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(args.jobs.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => return fail(CliError::Io(e.to_string())),
    };
    let outcome = pool.install(|| {
        let model = model::Model::build(&cfg, max_dim)?;
        run::execute(&cfg, args.kind, &model)
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => return fail(e),
    };
    let (status, exit_code) = status_of(&outcome);
    let dir = args.out.clone().or_else(|| cfg.output.as_ref().map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("."));
    match output::write_all(&dir, args.kind, &cfg, &hash, &outcome, status, exit_code) {
        Ok(artifacts) => Report {
            exit_code,
            artifacts: Some(artifacts),
            warnings: outcome.warnings,
            error: outcome.failures.into_iter().next(),
        },
        Err(e) => fail(e),
    }
}
