//! Grid expansion and per-kind jobs.

use rayon::prelude::*;
use serde::Serialize;
use wickbench_core::equilibrium::QuadratureControls;
use wickbench_core::fit::loglog_fit;
use wickbench_core::freefermion::{assumption1_integral, translates_of, CumulantSource};
use wickbench_core::realtime::{duhamel_partial_sum, duhamel_report, DuhamelControls};
use wickbench_core::wick::{adiabatic_row, kubo_check, main_expansion, AdiabaticModel, AdiabaticPoint, WickControls};
use wickbench_core::{
    evolve_gibbs, two_point, verify_wick_rotation, DrivenHamiltonian, GibbsEnsemble, PropagationControls, SwitchSource,
    SwitchSpec, TwoPointCache,
};

use crate::config::{dedup_axis, ExperimentConfig, GapConfig, PathConfig, RunKind, SourceConfig, TwoPointSample};
use crate::error::CliError;
use crate::model::Model;

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    F(f64),
    I(usize),
    S(String),
}

impl Value {
    pub fn render(&self) -> String {
        match self {
            Value::F(v) => format!("{v:e}"),
            Value::I(v) => v.to_string(),
            Value::S(s) => s.clone(),
        }
    }
}

/// One emitted row before the grid index and status are attached.
#[derive(Debug, Clone)]
pub struct Record {
    pub anchor: String,
    pub values: Vec<Value>,
}

#[derive(Debug, Clone)]
pub struct Row {
    pub grid_index: usize,
    pub anchor: String,
    pub values: Option<Vec<Value>>,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Verdict {
    pub grid_index: usize,
    pub anchor: String,
    pub discrepancy: f64,
    pub budget: f64,
    pub verdict: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitSummary {
    pub anchor: String,
    pub group: String,
    pub x: &'static str,
    pub y: &'static str,
    pub points: usize,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub index: usize,
    pub beta: f64,
    pub eta: f64,
    pub epsilon: f64,
    pub t: f64,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Row>,
    pub verdicts: Vec<Verdict>,
    pub fits: Vec<FitSummary>,
    pub warnings: Vec<String>,
    /// Errors of failed rows, in row order.
    pub failures: Vec<CliError>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Axis {
    Beta,
    Eta,
    Epsilon,
    T,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::Beta => "beta",
            Axis::Eta => "eta",
            Axis::Epsilon => "epsilon",
            Axis::T => "t",
        }
    }
}

fn axes(kind: RunKind) -> &'static [Axis] {
    match kind {
        RunKind::Spectrum => &[],
        RunKind::Gibbs | RunKind::Assumption1 | RunKind::Twopoint => &[Axis::Beta],
        RunKind::WickCheck => &[Axis::Beta, Axis::Eta, Axis::T],
        RunKind::Evolve | RunKind::Duhamel | RunKind::AdiabaticSweep | RunKind::ImprovedSweep | RunKind::Kubo => {
            &[Axis::Beta, Axis::Eta, Axis::Epsilon, Axis::T]
        }
    }
}

/// Cartesian grid with β outermost and t innermost.
pub fn expand_grid(cfg: &ExperimentConfig, kind: RunKind, warnings: &mut Vec<String>) -> Result<Vec<GridPoint>, CliError> {
    let used = axes(kind);
    let mut axis = |a: Axis, values: &[f64], default: f64| -> Vec<f64> {
        if values.is_empty() {
            return vec![default];
        }
        if !used.contains(&a) {
            warnings.push(format!("sweep.{} is ignored by {kind}", a.name()));
            return vec![default];
        }
        let (kept, dropped) = dedup_axis(values);
        if !dropped.is_empty() {
            warnings.push(format!("sweep.{}: removed duplicate grid values {dropped:?}", a.name()));
        }
        kept
    };
    let betas = axis(Axis::Beta, &cfg.sweep.beta, cfg.state.beta);
    let etas = axis(Axis::Eta, &cfg.sweep.eta, cfg.drive.eta);
    let epsilons = axis(Axis::Epsilon, &cfg.sweep.epsilon, cfg.drive.epsilon);
    let ts = axis(Axis::T, &cfg.sweep.t, cfg.drive.t);
    let size = betas.len() * etas.len() * epsilons.len() * ts.len();
    if size > cfg.controls.max_jobs {
        return Err(CliError::Config(format!("grid has {size} points, above controls.max_jobs = {}", cfg.controls.max_jobs)));
    }
    let mut points = Vec::with_capacity(size);
    for &beta in &betas {
        for &eta in &etas {
            for &epsilon in &epsilons {
                for &t in &ts {
                    points.push(GridPoint { index: points.len(), beta, eta, epsilon, t });
                }
            }
        }
    }
    Ok(points)
}

pub fn columns(kind: RunKind) -> Vec<&'static str> {
    match kind {
        RunKind::Spectrum => vec!["level", "energy", "particle_number"],
        RunKind::Gibbs => {
            vec!["beta", "mu", "log_partition", "observable_re", "observable_im", "normalization_residual", "kms_residual"]
        }
        RunKind::Evolve => vec![
            "beta",
            "eta",
            "epsilon",
            "t",
            "source",
            "value_re",
            "value_im",
            "equilibrium",
            "trace_defect",
            "hermiticity_defect",
            "min_eigenvalue",
            "steps",
        ],
        RunKind::WickCheck => vec![
            "beta",
            "eta",
            "t",
            "n",
            "real_re",
            "real_im",
            "euclid_re",
            "euclid_im",
            "abs_discrepancy",
            "rel_discrepancy",
            "budget",
            "verdict",
        ],
        RunKind::Duhamel => vec![
            "beta",
            "eta",
            "epsilon",
            "t",
            "n",
            "source",
            "value_re",
            "value_im",
            "quadrature_estimate",
            "truncation_bound",
            "nodes",
            "partial_sum_re",
            "partial_sum_im",
        ],
        RunKind::AdiabaticSweep | RunKind::ImprovedSweep => vec![
            "beta",
            "eta",
            "epsilon",
            "t",
            "evolved",
            "instantaneous",
            "gap",
            "periodized_evolved",
            "periodized_reference",
            "periodized_gap",
            "imaginary_residue",
        ],
        RunKind::Kubo => vec![
            "beta",
            "eta",
            "epsilon",
            "t",
            "euclidean_re",
            "euclidean_im",
            "real_time_re",
            "real_time_im",
            "gap",
            "budget",
            "periodized_evolved",
            "prediction",
            "remainder",
        ],
        RunKind::Assumption1 => vec!["beta", "n", "weight_power", "path", "value", "implied_constant", "nodes"],
        RunKind::Twopoint => vec!["beta", "t", "x", "tp", "y", "value_re", "value_im"],
    }
}

/// Shared, read-only inputs of every job.
struct Context<'a> {
    cfg: &'a ExperimentConfig,
    model: &'a Model,
}

impl Context<'_> {
    fn quad(&self) -> QuadratureControls {
        let mut q = QuadratureControls::default();
        if let Some(w) = self.cfg.controls.panel_width {
            q.panel_width = w;
        }
        q.order = self.cfg.controls.order;
        q
    }

    fn driven(&self, p: &GridPoint, switch: SwitchSpec) -> Result<DrivenHamiltonian, CliError> {
        Ok(DrivenHamiltonian::new(self.model.hamiltonian.clone(), self.model.perturbation.clone(), p.epsilon, switch, p.eta)?)
    }

    fn ensemble(&self, beta: f64) -> Result<GibbsEnsemble, CliError> {
        Ok(GibbsEnsemble::new(&self.model.hamiltonian, beta, self.cfg.state.mu)?)
    }

    fn source(&self, p: &GridPoint) -> Result<SwitchSource, CliError> {
        Ok(match self.cfg.controls.source {
            SourceConfig::True => SwitchSource::True,
            SourceConfig::Periodized => SwitchSource::Periodized(self.model.switch.periodize(p.beta, p.eta)?),
        })
    }

    fn propagation(&self, driven: &DrivenHamiltonian, t: f64, source: SwitchSource) -> Result<PropagationControls, CliError> {
        let mut ctl = PropagationControls::new(driven, t, source)?;
        if let Some(step) = self.cfg.controls.step {
            ctl.step = step;
        }
        if let Some(cut) = self.cfg.controls.t_cutoff {
            ctl.t_start = -cut;
        }
        Ok(ctl)
    }

    fn duhamel(&self, driven: &DrivenHamiltonian, source: SwitchSource) -> Result<DuhamelControls, CliError> {
        let c = &self.cfg.controls;
        let mut ctl = DuhamelControls::new(driven, source)?;
        if let Some(w) = c.panel_width {
            ctl.panel_width = w;
        }
        ctl.order = c.order;
        if let Some(n) = c.node_budget {
            ctl.node_budget = n;
        }
        if let Some(cut) = c.t_cutoff {
            ctl.t_start = -cut;
        }
        Ok(ctl)
    }
}

fn f(v: f64) -> Value {
    Value::F(v)
}

fn record(anchor: impl Into<String>, values: Vec<Value>) -> Record {
    Record { anchor: anchor.into(), values }
}

fn base_anchor(kind: RunKind, cfg: &ExperimentConfig) -> String {
    match kind {
        RunKind::Spectrum => "spectrum(H)".into(),
        RunKind::Gibbs => "gibbs-average".into(),
        RunKind::Evolve => "TrO-rho(t)".into(),
        RunKind::WickCheck => "wick-identity".into(),
        RunKind::Duhamel => "duhamel-coefficient".into(),
        RunKind::AdiabaticSweep => "adiabatic-gap".into(),
        RunKind::ImprovedSweep => format!("improved-gap(m={})", cfg.run.m),
        RunKind::Kubo => "kubo-response".into(),
        RunKind::Assumption1 => format!("integrability(n={})", cfg.run.n),
        RunKind::Twopoint => "two-point".into(),
    }
}

fn spectrum(ctx: &Context, p: &GridPoint) -> Result<Vec<Record>, CliError> {
    let ens = ctx.ensemble(p.beta)?;
    let mut levels: Vec<(f64, f64)> = ens.h_values().iter().copied().zip(ens.particle_numbers().iter().copied()).collect();
    levels.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    Ok(levels.into_iter().enumerate().map(|(i, (e, n))| record("spectrum(H)", vec![Value::I(i), f(e), f(n)])).collect())
}

fn gibbs(ctx: &Context, p: &GridPoint) -> Result<Vec<Record>, CliError> {
    let ens = ctx.ensemble(p.beta)?;
    let o = &ctx.model.observable;
    let value = ens.expectation(o);
    let norm = (ens.density_matrix().trace() - wickbench_core::linalg::c(1.0)).norm();
    let kms = ens.kms_residual(o, &ctx.model.perturbation, -0.2 * p.beta, -0.7 * p.beta)?;
    Ok(vec![record(
        "gibbs-average",
        vec![f(p.beta), f(ctx.cfg.state.mu), f(ens.log_partition()), f(value.re), f(value.im), f(norm), f(kms)],
    )])
}

fn evolve(ctx: &Context, p: &GridPoint) -> Result<Vec<Record>, CliError> {
    let driven = ctx.driven(p, ctx.model.switch.clone())?;
    let ens = ctx.ensemble(p.beta)?;
    let source = ctx.source(p)?;
    let label = source.label();
    let ctl = ctx.propagation(&driven, p.t, source)?;
    let state = evolve_gibbs(&driven, &ens, p.t, &ctl)?;
    let value = state.expectation(&ctx.model.observable);
    let (tr, herm, min_eig) = state.invariants()?;
    let anchor = if label == "true" { "TrO-rho(t)" } else { "TrO-rho-periodized(t)" };
    Ok(vec![record(
        anchor,
        vec![
            f(p.beta),
            f(p.eta),
            f(p.epsilon),
            f(p.t),
            Value::S(label.into()),
            f(value.re),
            f(value.im),
            f(ens.expectation(&ctx.model.observable).re),
            f(tr),
            f(herm),
            f(min_eig),
            Value::I(state.steps),
        ],
    )])
}

fn wick_check(ctx: &Context, p: &GridPoint, verdicts: &mut Vec<(String, f64, f64, bool)>) -> Result<Vec<Record>, CliError> {
    let driven = ctx.driven(p, ctx.model.switch.clone())?;
    let ens = ctx.ensemble(p.beta)?;
    let c = &ctx.cfg.controls;
    let mut ctl = WickControls::new(&driven, &ens)?;
    if let Some(cut) = c.t_cutoff {
        ctl = ctl.with_t_start(-cut);
    }
    if let Some(w) = c.panel_width {
        ctl.panel_width = w;
        ctl.euclid.panel_width = w;
    }
    ctl.order = c.order;
    ctl.euclid.order = c.order;
    if let Some(n) = c.node_budget {
        ctl.node_budget = n;
    }
    if let Some(tol) = c.tolerance {
        ctl = ctl.with_tolerance(tol);
    }
    let mut out = Vec::new();
    for &n in &ctx.cfg.run.orders {
        let r = verify_wick_rotation(&driven, &ens, &ctx.model.observable, n, p.t, &ctl)?;
        let allowed = c.budget_multiplier * r.budget;
        let pass = r.abs_discrepancy <= allowed;
        let anchor = format!("wick-identity(n={n})");
        verdicts.push((anchor.clone(), r.abs_discrepancy, allowed, pass));
        out.push(record(
            anchor,
            vec![
                f(p.beta),
                f(p.eta),
                f(p.t),
                Value::I(n),
                f(r.real.re),
                f(r.real.im),
                f(r.euclid.re),
                f(r.euclid.im),
                f(r.abs_discrepancy),
                f(r.rel_discrepancy),
                f(allowed),
                Value::S(if pass { "pass" } else { "fail" }.into()),
            ],
        ));
    }
    Ok(out)
}

fn duhamel(ctx: &Context, p: &GridPoint) -> Result<Vec<Record>, CliError> {
    let driven = ctx.driven(p, ctx.model.switch.clone())?;
    let ens = ctx.ensemble(p.beta)?;
    let source = ctx.source(p)?;
    let label = source.label();
    let ctl = ctx.duhamel(&driven, source)?;
    let mut orders = ctx.cfg.run.orders.clone();
    orders.sort_unstable();
    orders.dedup();
    let max = *orders.last().expect("validated non-empty");
    let mut coefficients = Vec::with_capacity(max);
    let mut out = Vec::new();
    for n in 1..=max {
        let r = duhamel_report(&driven, &ens, &ctx.model.observable, n, p.t, &ctl)?;
        coefficients.push(r.value);
        if !orders.contains(&n) {
            continue;
        }
        let partial = duhamel_partial_sum(&ens, &ctx.model.observable, p.epsilon, &coefficients);
        out.push(record(
            format!("D(n={n})"),
            vec![
                f(p.beta),
                f(p.eta),
                f(p.epsilon),
                f(p.t),
                Value::I(n),
                Value::S(label.into()),
                f(r.value.re),
                f(r.value.im),
                f(r.quadrature_estimate),
                f(r.truncation_bound),
                Value::I(r.nodes),
                f(partial.re),
                f(partial.im),
            ],
        ));
    }
    Ok(out)
}

fn adiabatic(ctx: &Context, p: &GridPoint, switch: &SwitchSpec, anchor: &str) -> Result<Vec<Record>, CliError> {
    let model = AdiabaticModel {
        base: ctx.model.hamiltonian.clone(),
        perturbation: ctx.model.perturbation.clone(),
        observable: ctx.model.observable.clone(),
        mu: ctx.cfg.state.mu,
        switch: switch.clone(),
    };
    let mut point = AdiabaticPoint::new(p.eta, p.beta, p.epsilon, p.t);
    point.reference_beta = ctx.cfg.run.reference_beta;
    let r = adiabatic_row(&model, &point)?;
    Ok(vec![record(
        anchor,
        vec![
            f(r.beta),
            f(r.eta),
            f(r.epsilon),
            f(r.t),
            f(r.evolved),
            f(r.instantaneous),
            f(r.gap),
            f(r.periodized_evolved),
            f(r.periodized_reference),
            f(r.periodized_gap),
            f(r.imaginary_residue),
        ],
    )])
}

fn kubo(ctx: &Context, p: &GridPoint) -> Result<Vec<Record>, CliError> {
    let driven = ctx.driven(p, ctx.model.switch.clone())?;
    let ens = ctx.ensemble(p.beta)?;
    let o = &ctx.model.observable;
    let ctl = ctx.duhamel(&driven, SwitchSource::True)?;
    let k = kubo_check(&driven, &ens, o, p.t, &ctl, ctx.quad())?;
    let ps = ctx.model.switch.periodize(p.beta, p.eta)?;
    let prop = ctx.propagation(&driven, p.t, SwitchSource::Periodized(ps))?;
    let evolved = evolve_gibbs(&driven, &ens, p.t, &prop)?.expectation(o);
    let prediction = main_expansion(&ens, o, p.epsilon, &[k.euclidean]);
    Ok(vec![record(
        "kubo-response",
        vec![
            f(p.beta),
            f(p.eta),
            f(p.epsilon),
            f(p.t),
            f(k.euclidean.re),
            f(k.euclidean.im),
            f(k.real_time.re),
            f(k.real_time.im),
            f(k.gap),
            f(k.budget),
            f(evolved.re),
            f(prediction.re),
            f((evolved - prediction).norm()),
        ],
    )])
}

fn assumption1(ctx: &Context, p: &GridPoint) -> Result<Vec<Record>, CliError> {
    let run = &ctx.cfg.run;
    let basis = &ctx.model.basis;
    let translates = translates_of(basis, &ctx.model.perturbation)?;
    let q = ctx.quad();
    let grid = wickbench_core::equilibrium::euclidean_grid(p.beta, q.panel_width, q.order)?;
    let report = match run.path {
        PathConfig::Exact => {
            let ens = ctx.ensemble(p.beta)?.with_max_cumulant_order(run.n + 1);
            assumption1_integral(CumulantSource::Exact(&ens), &translates, &ctx.model.observable, run.n, run.weight_power, &grid)?
        }
        PathConfig::Ring => {
            require_quadratic(ctx, "assumption1 with path = ring")?;
            let cache = TwoPointCache::new(ctx.model.kernel.matrix(), p.beta, ctx.cfg.state.mu)?;
            assumption1_integral(
                CumulantSource::Ring(&cache, basis),
                &translates,
                &ctx.model.observable,
                run.n,
                run.weight_power,
                &grid,
            )?
        }
    };
    let path = match run.path {
        PathConfig::Exact => "exact",
        PathConfig::Ring => "ring",
    };
    Ok(vec![record(
        format!("integrability(n={})", run.n),
        vec![
            f(p.beta),
            Value::I(run.n),
            f(run.weight_power),
            Value::S(path.into()),
            f(report.value),
            f(report.implied_constant),
            Value::I(report.nodes),
        ],
    )])
}

fn require_quadratic(ctx: &Context, what: &str) -> Result<(), CliError> {
    if ctx.model.interacting {
        return Err(CliError::Config(format!("{what} needs a quadratic model; remove model.interaction")));
    }
    Ok(())
}

fn twopoint(ctx: &Context, p: &GridPoint) -> Result<Vec<Record>, CliError> {
    require_quadratic(ctx, "twopoint")?;
    let cache = TwoPointCache::new(ctx.model.kernel.matrix(), p.beta, ctx.cfg.state.mu)?;
    let modes = ctx.model.basis.modes();
    let samples: Vec<TwoPointSample> = if ctx.cfg.run.samples.is_empty() {
        (0..modes).map(|y| TwoPointSample { t: 0.0, x: 0, tp: 0.0, y }).collect()
    } else {
        ctx.cfg.run.samples.clone()
    };
    samples
        .iter()
        .map(|s| {
            for site in [s.x, s.y] {
                if site >= modes {
                    return Err(CliError::Config(format!(
                        "two-point sample site {site} is outside the lattice of {modes} modes"
                    )));
                }
            }
            let v = two_point(&cache, s.t, s.x, s.tp, s.y);
            Ok(record("two-point", vec![f(p.beta), f(s.t), Value::I(s.x), f(s.tp), Value::I(s.y), f(v.re), f(v.im)]))
        })
        .collect()
}

struct PointOutput {
    records: Result<Vec<Record>, CliError>,
    verdicts: Vec<(String, f64, f64, bool)>,
}

fn job(ctx: &Context, kind: RunKind, p: &GridPoint, improved: &SwitchSpec) -> PointOutput {
    let mut verdicts = Vec::new();
    let records = match kind {
        RunKind::Spectrum => spectrum(ctx, p),
        RunKind::Gibbs => gibbs(ctx, p),
        RunKind::Evolve => evolve(ctx, p),
        RunKind::WickCheck => wick_check(ctx, p, &mut verdicts),
        RunKind::Duhamel => duhamel(ctx, p),
        RunKind::AdiabaticSweep => adiabatic(ctx, p, &ctx.model.switch, "adiabatic-gap"),
        RunKind::ImprovedSweep => adiabatic(ctx, p, improved, &format!("improved-gap(m={})", ctx.cfg.run.m)),
        RunKind::Kubo => kubo(ctx, p),
        RunKind::Assumption1 => assumption1(ctx, p),
        RunKind::Twopoint => twopoint(ctx, p),
    };
    PointOutput { records, verdicts }
}

fn group_key(p: &GridPoint, skip: Axis) -> (String, Vec<u64>) {
    let mut label = Vec::new();
    let mut bits = Vec::new();
    for (axis, v) in [(Axis::Beta, p.beta), (Axis::Eta, p.eta), (Axis::Epsilon, p.epsilon), (Axis::T, p.t)] {
        if axis != skip {
            label.push(format!("{}={v}", axis.name()));
            bits.push(v.to_bits());
        }
    }
    (label.join(","), bits)
}

/// Log-log fits of column `y` against axis `x`, one per group of the other axes.
fn fit_groups(
    points: &[GridPoint],
    ys: &[Option<f64>],
    x: Axis,
    y: &'static str,
    anchor: &str,
    fits: &mut Vec<FitSummary>,
    warnings: &mut Vec<String>,
) {
    let mut groups: Vec<(String, Vec<u64>, Vec<(f64, f64)>)> = Vec::new();
    for (p, v) in points.iter().zip(ys) {
        let Some(v) = *v else { continue };
        let xv = match x {
            Axis::Beta => p.beta,
            Axis::Eta => p.eta,
            Axis::Epsilon => p.epsilon.abs(),
            Axis::T => p.t.abs(),
        };
        let (label, bits) = group_key(p, x);
        match groups.iter_mut().find(|g| g.1 == bits) {
            Some(g) => g.2.push((xv, v)),
            None => groups.push((label, bits, vec![(xv, v)])),
        }
    }
    for (label, _, data) in groups {
        if data.len() < 2 {
            continue;
        }
        let xs: Vec<f64> = data.iter().map(|d| d.0).collect();
        let vs: Vec<f64> = data.iter().map(|d| d.1).collect();
        match loglog_fit(&xs, &vs) {
            Ok(fit) => fits.push(FitSummary {
                anchor: format!("{anchor}:slope({})", x.name()),
                group: label,
                x: x.name(),
                y,
                points: data.len(),
                slope: fit.slope,
                intercept: fit.intercept,
                r_squared: fit.r_squared,
            }),
            Err(e) => warnings.push(format!("{anchor} fit of {y} against {} for {label} skipped: {e}", x.name())),
        }
    }
}

fn column_values(kind: RunKind, rows: &[Row], points: &[GridPoint], name: &str) -> Vec<Option<f64>> {
    let idx = columns(kind).iter().position(|c| *c == name).expect("known column");
    points
        .iter()
        .map(|p| {
            rows.iter().find(|r| r.grid_index == p.index).and_then(|r| match r.values.as_ref().map(|v| &v[idx]) {
                Some(Value::F(v)) => Some(*v),
                _ => None,
            })
        })
        .collect()
}

fn summarize(
    kind: RunKind,
    cfg: &ExperimentConfig,
    rows: &[Row],
    points: &[GridPoint],
    fits: &mut Vec<FitSummary>,
    warnings: &mut Vec<String>,
) {
    let mut fit = |x: Axis, y: &'static str, anchor: &str| {
        let ys = column_values(kind, rows, points, y);
        fit_groups(points, &ys, x, y, anchor, fits, warnings);
    };
    match kind {
        RunKind::AdiabaticSweep => {
            fit(Axis::Eta, "gap", "adiabatic-gap");
            fit(Axis::Eta, "periodized_gap", "adiabatic-gap");
        }
        RunKind::ImprovedSweep => {
            let anchor = format!("improved-gap(m={})", cfg.run.m);
            let (first, second) = match cfg.run.gap {
                GapConfig::True => ("gap", "periodized_gap"),
                GapConfig::Periodized => ("periodized_gap", "gap"),
            };
            fit(Axis::Eta, first, &anchor);
            fit(Axis::Eta, second, &anchor);
        }
        RunKind::Kubo => {
            fit(Axis::Beta, "gap", "kubo-response");
            fit(Axis::Epsilon, "remainder", "kubo-response");
        }
        RunKind::Assumption1 => fit(Axis::Beta, "implied_constant", &format!("integrability(n={})", cfg.run.n)),
        _ => {}
    }
}

/// Runs every grid point on the current rayon pool and gathers rows in grid order.
pub fn execute(cfg: &ExperimentConfig, kind: RunKind, model: &Model) -> Result<Outcome, CliError> {
    let mut warnings = Vec::new();
    let points = if kind == RunKind::Spectrum {
        if !(cfg.sweep.beta.is_empty() && cfg.sweep.eta.is_empty() && cfg.sweep.epsilon.is_empty() && cfg.sweep.t.is_empty()) {
            warnings.push("sweep grids are ignored by spectrum".into());
        }
        vec![GridPoint { index: 0, beta: cfg.state.beta, eta: cfg.drive.eta, epsilon: cfg.drive.epsilon, t: cfg.drive.t }]
    } else {
        expand_grid(cfg, kind, &mut warnings)?
    };
    let ctx = Context { cfg, model };
    let improved = SwitchSpec::poly_flat(cfg.run.m);
    let outputs: Vec<PointOutput> = points.par_iter().map(|p| job(&ctx, kind, p, &improved)).collect();

    let anchor = base_anchor(kind, cfg);
    let mut rows = Vec::new();
    let mut verdicts = Vec::new();
    let mut failures = Vec::new();
    for (p, out) in points.iter().zip(outputs) {
        match out.records {
            Ok(records) => rows.extend(records.into_iter().map(|r| Row {
                grid_index: p.index,
                anchor: r.anchor,
                values: Some(r.values),
                message: String::new(),
            })),
            Err(e) => {
                rows.push(Row { grid_index: p.index, anchor: anchor.clone(), values: None, message: e.to_string() });
                failures.push(e);
            }
        }
        verdicts.extend(out.verdicts.into_iter().map(|(anchor, discrepancy, budget, pass)| Verdict {
            grid_index: p.index,
            anchor,
            discrepancy,
            budget,
            verdict: if pass { "pass" } else { "fail" },
        }));
    }
    let mut fits = Vec::new();
    summarize(kind, cfg, &rows, &points, &mut fits, &mut warnings);
    Ok(Outcome { columns: columns(kind), rows, verdicts, fits, warnings, failures })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(sweep: &str) -> ExperimentConfig {
        ExperimentConfig::from_json(&format!(
            r#"{{"schema": 1, "model": {{"lattice": {{"side": 2}}, "kernel": {{"type": "chain", "hopping": -1.0}}}},
                "state": {{"beta": 2.0}}, "sweep": {sweep}}}"#
        ))
        .unwrap()
    }

    #[test]
    fn grid_order_is_beta_major() {
        let c = cfg(r#"{"beta": [1.0, 2.0], "eta": [0.4, 0.2]}"#);
        let mut w = Vec::new();
        let g = expand_grid(&c, RunKind::Evolve, &mut w).unwrap();
        let pairs: Vec<(f64, f64)> = g.iter().map(|p| (p.beta, p.eta)).collect();
        assert_eq!(pairs, vec![(1.0, 0.4), (1.0, 0.2), (2.0, 0.4), (2.0, 0.2)]);
        assert!(w.is_empty());
    }

    #[test]
    fn duplicates_and_ignored_axes_warn() {
        let c = cfg(r#"{"beta": [1.0, 1.0], "eta": [0.4]}"#);
        let mut w = Vec::new();
        let g = expand_grid(&c, RunKind::Gibbs, &mut w).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(w.len(), 2);
    }

    #[test]
    fn job_budget_is_enforced() {
        let mut c = cfg(r#"{"beta": [1.0, 2.0, 3.0]}"#);
        c.controls.max_jobs = 2;
        assert!(matches!(expand_grid(&c, RunKind::Gibbs, &mut Vec::new()), Err(CliError::Config(_))));
    }

    #[test]
    fn every_row_matches_its_header() {
        let c = cfg(r#"{"beta": [1.0, 2.0]}"#);
        let model = Model::build(&c, 4096).unwrap();
        for kind in [RunKind::Spectrum, RunKind::Gibbs, RunKind::Twopoint] {
            let out = execute(&c, kind, &model).unwrap();
            for r in &out.rows {
                assert_eq!(r.values.as_ref().unwrap().len(), out.columns.len(), "{kind}");
            }
        }
    }
}
