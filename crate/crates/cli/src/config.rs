//! Experiment configuration: JSON schema, validation and hashing.

use std::fmt;
use std::path::Path;

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_MAX_JOBS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum RunKind {
    Spectrum,
    Gibbs,
    Evolve,
    WickCheck,
    Duhamel,
    AdiabaticSweep,
    ImprovedSweep,
    Kubo,
    Assumption1,
    Twopoint,
}

impl RunKind {
    pub fn name(self) -> &'static str {
        match self {
            RunKind::Spectrum => "spectrum",
            RunKind::Gibbs => "gibbs",
            RunKind::Evolve => "evolve",
            RunKind::WickCheck => "wick-check",
            RunKind::Duhamel => "duhamel",
            RunKind::AdiabaticSweep => "adiabatic-sweep",
            RunKind::ImprovedSweep => "improved-sweep",
            RunKind::Kubo => "kubo",
            RunKind::Assumption1 => "assumption1",
            RunKind::Twopoint => "twopoint",
        }
    }
}

impl fmt::Display for RunKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<RunKind>,
    pub model: ModelConfig,
    pub state: StateConfig,
    #[serde(default)]
    pub drive: DriveConfig,
    /// Defaults to the density at site 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<Vec<TermConfig>>,
    /// Defaults to the density at site 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observable: Option<Vec<TermConfig>>,
    #[serde(default)]
    pub controls: ControlsConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub run: RunOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub lattice: LatticeConfig,
    pub kernel: KernelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interaction: Option<InteractionConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeConfig {
    #[serde(default = "one")]
    pub dim: usize,
    pub side: usize,
    #[serde(default = "one")]
    pub labels: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelConfig {
    /// Nearest-neighbour hopping with uniform or per-mode on-site energies.
    Chain {
        hopping: f64,
        #[serde(default)]
        onsite: Vec<f64>,
    },
    /// Nearest-neighbour hopping with on-site energies `(−1)^x δ`.
    Staggered { hopping: f64, delta: f64 },
    /// One mode with energy `level`; the lattice must have a single mode.
    SingleMode { level: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionConfig {
    pub u: f64,
    pub coupling: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateConfig {
    pub beta: f64,
    #[serde(default)]
    pub mu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriveConfig {
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default)]
    pub switch: SwitchConfig,
    #[serde(default)]
    pub t: f64,
}

fn default_eta() -> f64 {
    0.5
}

impl Default for DriveConfig {
    fn default() -> Self {
        Self { epsilon: 0.0, eta: default_eta(), switch: SwitchConfig::default(), t: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SwitchConfig {
    #[default]
    Exp,
    PolyFlat {
        m: u32,
    },
    /// `(rate, weight)` pairs.
    Atoms {
        atoms: Vec<(f64, f64)>,
    },
    Rational {
        a: f64,
        n: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TermConfig {
    Density {
        site: usize,
        #[serde(default = "unit")]
        weight: f64,
    },
    Hopping {
        x: usize,
        y: usize,
        #[serde(default = "unit")]
        weight: f64,
    },
    Current {
        x: usize,
        y: usize,
        #[serde(default = "unit")]
        weight: f64,
    },
    Number {
        #[serde(default = "unit")]
        weight: f64,
    },
    Identity {
        #[serde(default = "unit")]
        weight: f64,
    },
    /// Random self-adjoint quadratic operator on the listed modes, drawn from the run seed.
    Random {
        sites: Vec<usize>,
        #[serde(default = "unit")]
        weight: f64,
    },
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SourceConfig {
    #[default]
    True,
    Periodized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PathConfig {
    #[default]
    Exact,
    Ring,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GapConfig {
    #[default]
    True,
    Periodized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlsConfig {
    /// Panel width of the Euclidean and real-time composite rules.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub panel_width: Option<f64>,
    #[serde(default = "default_order")]
    pub order: usize,
    /// Propagator step; defaults to a fraction of `1/‖𝓗(t)‖`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    /// Real-time cutoff `T`; defaults to the switch tail rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_cutoff: Option<f64>,
    #[serde(default = "unit")]
    pub budget_multiplier: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_budget: Option<usize>,
    #[serde(default)]
    pub source: SourceConfig,
    #[serde(default = "default_max_jobs")]
    pub max_jobs: usize,
}

fn default_order() -> usize {
    8
}

fn default_max_jobs() -> usize {
    DEFAULT_MAX_JOBS
}

impl Default for ControlsConfig {
    fn default() -> Self {
        Self {
            panel_width: None,
            order: default_order(),
            step: None,
            t_cutoff: None,
            budget_multiplier: 1.0,
            tolerance: None,
            node_budget: None,
            source: SourceConfig::default(),
            max_jobs: DEFAULT_MAX_JOBS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub eta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub beta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub epsilon: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub t: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoPointSample {
    pub t: f64,
    pub x: usize,
    pub tp: f64,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOptions {
    /// Perturbative orders for `wick-check` and `duhamel`.
    #[serde(default = "default_orders")]
    pub orders: Vec<usize>,
    /// Flatness of the switch in `improved-sweep`.
    #[serde(default = "default_m")]
    pub m: u32,
    /// Cumulant order for `assumption1`.
    #[serde(default = "one")]
    pub n: usize,
    #[serde(default = "unit")]
    pub weight_power: f64,
    #[serde(default)]
    pub path: PathConfig,
    #[serde(default)]
    pub gap: GapConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub samples: Vec<TwoPointSample>,
    /// Reference-state inverse temperature for the adiabatic sweeps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_beta: Option<f64>,
}

fn default_orders() -> Vec<usize> {
    vec![1]
}

fn default_m() -> u32 {
    1
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            orders: default_orders(),
            m: default_m(),
            n: 1,
            weight_power: 1.0,
            path: PathConfig::default(),
            gap: GapConfig::default(),
            samples: Vec::new(),
            reference_beta: None,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} must be positive and finite, got {v}")))
    }
}

fn finite(name: &str, v: f64) -> Result<(), CliError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} must be finite, got {v}")))
    }
}

fn non_positive(name: &str, v: f64) -> Result<(), CliError> {
    finite(name, v)?;
    if v > 0.0 {
        return Err(CliError::Config(format!("{name} must be ≤ 0, got {v}")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text)
            .map_err(|e| CliError::Config(format!("malformed config at line {} column {}: {e}", e.line(), e.column())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Range checks on every numeric field before dispatch.
    pub fn validate(&self, kind: RunKind) -> Result<(), CliError> {
        if self.schema != SCHEMA_VERSION {
            return Err(CliError::Config(format!("unsupported schema {}, expected {SCHEMA_VERSION}", self.schema)));
        }
        if let Some(k) = self.kind {
            if k != kind {
                return Err(CliError::Config(format!("config declares kind {k} but {kind} was requested")));
            }
        }
        let l = &self.model.lattice;
        if l.dim == 0 || l.side == 0 || l.labels == 0 {
            return Err(CliError::Config("lattice dim, side and labels must be positive".into()));
        }
        match &self.model.kernel {
            KernelConfig::Chain { hopping, onsite } => {
                finite("kernel.hopping", *hopping)?;
                for (i, v) in onsite.iter().enumerate() {
                    finite(&format!("kernel.onsite[{i}]"), *v)?;
                }
            }
            KernelConfig::Staggered { hopping, delta } => {
                finite("kernel.hopping", *hopping)?;
                finite("kernel.delta", *delta)?;
            }
            KernelConfig::SingleMode { level } => {
                finite("kernel.level", *level)?;
                if l.side.pow(l.dim as u32) * l.labels != 1 {
                    return Err(CliError::Config("single_mode kernel needs a one-mode lattice".into()));
                }
            }
        }
        if let Some(i) = &self.model.interaction {
            finite("interaction.u", i.u)?;
            finite("interaction.coupling", i.coupling)?;
        }
        positive("state.beta", self.state.beta)?;
        finite("state.mu", self.state.mu)?;
        finite("drive.epsilon", self.drive.epsilon)?;
        positive("drive.eta", self.drive.eta)?;
        non_positive("drive.t", self.drive.t)?;
        match &self.drive.switch {
            SwitchConfig::Exp => {}
            SwitchConfig::PolyFlat { m } => {
                if *m > 8 {
                    return Err(CliError::Config(format!("poly_flat m must be ≤ 8, got {m}")));
                }
            }
            SwitchConfig::Atoms { atoms } => {
                if atoms.is_empty() {
                    return Err(CliError::Config("atoms switch needs at least one atom".into()));
                }
                for (i, (r, w)) in atoms.iter().enumerate() {
                    positive(&format!("switch.atoms[{i}].rate"), *r)?;
                    finite(&format!("switch.atoms[{i}].weight"), *w)?;
                }
            }
            SwitchConfig::Rational { a, n } => {
                positive("switch.a", *a)?;
                if *n == 0 {
                    return Err(CliError::Config("rational switch needs n ≥ 1".into()));
                }
            }
        }
        for (name, terms) in [("perturbation", &self.perturbation), ("observable", &self.observable)] {
            if let Some(terms) = terms {
                if terms.is_empty() {
                    return Err(CliError::Config(format!("{name} must list at least one term")));
                }
                for t in terms {
                    let w = match t {
                        TermConfig::Density { weight, .. }
                        | TermConfig::Hopping { weight, .. }
                        | TermConfig::Current { weight, .. }
                        | TermConfig::Number { weight }
                        | TermConfig::Identity { weight }
                        | TermConfig::Random { weight, .. } => *weight,
                    };
                    finite(&format!("{name} weight"), w)?;
                }
            }
        }
        let c = &self.controls;
        if let Some(w) = c.panel_width {
            positive("controls.panel_width", w)?;
        }
        if c.order == 0 || c.order > 64 {
            return Err(CliError::Config(format!("controls.order must be in 1..=64, got {}", c.order)));
        }
        if let Some(s) = c.step {
            positive("controls.step", s)?;
        }
        if let Some(t) = c.t_cutoff {
            positive("controls.t_cutoff", t)?;
        }
        positive("controls.budget_multiplier", c.budget_multiplier)?;
        if let Some(t) = c.tolerance {
            positive("controls.tolerance", t)?;
        }
        if c.node_budget == Some(0) {
            return Err(CliError::Config("controls.node_budget must be positive".into()));
        }
        if c.max_jobs == 0 {
            return Err(CliError::Config("controls.max_jobs must be positive".into()));
        }
        for (i, v) in self.sweep.eta.iter().enumerate() {
            positive(&format!("sweep.eta[{i}]"), *v)?;
        }
        for (i, v) in self.sweep.beta.iter().enumerate() {
            positive(&format!("sweep.beta[{i}]"), *v)?;
        }
        for (i, v) in self.sweep.epsilon.iter().enumerate() {
            finite(&format!("sweep.epsilon[{i}]"), *v)?;
        }
        for (i, v) in self.sweep.t.iter().enumerate() {
            non_positive(&format!("sweep.t[{i}]"), *v)?;
        }
        let r = &self.run;
        if r.orders.is_empty() || r.orders.iter().any(|&n| n == 0 || n > 3) {
            return Err(CliError::Config(format!("run.orders must be a non-empty list from 1..=3, got {:?}", r.orders)));
        }
        if kind == RunKind::WickCheck && r.orders.iter().any(|&n| n > 2) {
            return Err(CliError::Config("wick-check supports orders 1 and 2".into()));
        }
        if r.m > 8 {
            return Err(CliError::Config(format!("run.m must be ≤ 8, got {}", r.m)));
        }
        if r.n == 0 || r.n > 3 {
            return Err(CliError::Config(format!("run.n must be in 1..=3, got {}", r.n)));
        }
        if !(r.weight_power >= 0.0) || !r.weight_power.is_finite() {
            return Err(CliError::Config(format!("run.weight_power must be ≥ 0, got {}", r.weight_power)));
        }
        for s in &r.samples {
            finite("run.samples.t", s.t)?;
            finite("run.samples.tp", s.tp)?;
        }
        if let Some(b) = r.reference_beta {
            positive("run.reference_beta", b)?;
        }
        Ok(())
    }

    /// SHA-256 prefix of the canonical config, excluding the output location.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output = None;
        let text = serde_json::to_string(&canonical).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Removes repeated values while keeping first occurrences; returns the duplicates.
pub fn dedup_axis(values: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut kept: Vec<f64> = Vec::new();
    let mut dropped = Vec::new();
    for &v in values {
        if kept.iter().any(|k| k.to_bits() == v.to_bits()) {
            dropped.push(v);
        } else {
            kept.push(v);
        }
    }
    (kept, dropped)
}
