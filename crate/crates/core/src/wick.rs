//! Wick-rotated expansion: Euclidean coefficients `I^(n)`, order-by-order
//! comparison with the real-time Duhamel series, and the adiabatic and
//! linear-response experiments built on top of them.

use rayon::prelude::*;

use crate::equilibrium::{
    cumulant_from_moments, euclidean_grid, instantaneous_gibbs_expectation, GibbsEnsemble, InstantaneousMode,
    PerturbationCumulant, Prepared, QuadratureControls,
};
use crate::error::{Error, Result};
use crate::fit::{loglog_fit, LinearFit};
use crate::hamiltonian::DrivenHamiltonian;
use crate::lattice::FockOperator;
use crate::linalg::{c, operator_norm, C64};
use crate::quadrature::{PanelGrid, DEFAULT_NODE_BUDGET};
use crate::realtime::{duhamel_report, evolve_gibbs, DuhamelControls, DuhamelReport, PropagationControls, SwitchSource};
use crate::switch::{PeriodizedSwitch, SwitchSpec};

const I: C64 = C64 { re: 0.0, im: 1.0 };

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

fn roundoff_floor(values: &[C64]) -> f64 {
    1e-12 * values.iter().fold(1.0f64, |m, v| m.max(v.norm()))
}

/// `I^(n)` with its node-doubling estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct EuclideanReport {
    pub order: usize,
    pub value: C64,
    pub coarse_value: C64,
    pub quadrature_estimate: f64,
    pub nodes: usize,
}

fn euclidean_on_grid(
    ps: &PeriodizedSwitch,
    kernel: &PerturbationCumulant<'_>,
    n: usize,
    t: f64,
    grid: &PanelGrid,
    budget: usize,
) -> Result<(C64, usize)> {
    let pts = grid.simplex(n, budget)?;
    let parts: Vec<C64> = pts
        .par_iter()
        .map(|(s, w)| {
            let g: C64 = s.iter().map(|&sj| ps.eval(C64::new(t, -sj))).product();
            kernel.eval(s) * g * *w
        })
        .collect();
    Ok((parts.into_iter().sum::<C64>() * factorial(n), pts.len()))
}

fn check_euclidean_inputs(n: usize, t: f64) -> Result<()> {
    if n == 0 || n > 3 {
        return Err(Error::InvalidParameter(format!("Euclidean order must be 1, 2 or 3, got {n}")));
    }
    if t > 0.0 {
        return Err(Error::PositiveTimeUnsupported { t });
    }
    Ok(())
}

/// `I^(n)(η,t) = ∫_{[0,β)^n} Π g_{β,η}(t − is_j) ⟨T γ_{s1}(𝒫); …; γ_{sn}(𝒫); O⟩ ds`.
pub fn euclidean_coefficient_with(
    ps: &PeriodizedSwitch,
    ens: &GibbsEnsemble,
    p: &FockOperator,
    o: &FockOperator,
    n: usize,
    t: f64,
    quad: QuadratureControls,
) -> Result<EuclideanReport> {
    check_euclidean_inputs(n, t)?;
    let kernel = PerturbationCumulant::new(ens, p, o)?;
    let coarse_grid = euclidean_grid(ens.beta(), quad.panel_width, quad.order)?;
    let fine_grid = coarse_grid.refined();
    let (coarse, _) = euclidean_on_grid(ps, &kernel, n, t, &coarse_grid, DEFAULT_NODE_BUDGET)?;
    let (value, nodes) = euclidean_on_grid(ps, &kernel, n, t, &fine_grid, DEFAULT_NODE_BUDGET)?;
    Ok(EuclideanReport { order: n, value, coarse_value: coarse, quadrature_estimate: (value - coarse).norm(), nodes })
}

/// `I^(n)` for the periodization of the driven switch at the ensemble's β.
pub fn euclidean_coefficient(
    driven: &DrivenHamiltonian,
    ens: &GibbsEnsemble,
    o: &FockOperator,
    n: usize,
    t: f64,
    quad: QuadratureControls,
) -> Result<C64> {
    let ps = driven.switch().periodize(ens.beta(), driven.eta())?;
    Ok(euclidean_coefficient_with(&ps, ens, driven.perturbation(), o, n, t, quad)?.value)
}

/// `I^(n)` integrated over the full torus `[0,β)^n` with a tensor rule.
pub fn euclidean_coefficient_torus(
    ps: &PeriodizedSwitch,
    ens: &GibbsEnsemble,
    p: &FockOperator,
    o: &FockOperator,
    n: usize,
    t: f64,
    quad: QuadratureControls,
) -> Result<C64> {
    check_euclidean_inputs(n, t)?;
    let kernel = PerturbationCumulant::new(ens, p, o)?;
    let grid = euclidean_grid(ens.beta(), quad.panel_width, quad.order)?;
    let pts = grid.cube(n, DEFAULT_NODE_BUDGET)?;
    let parts: Vec<C64> = pts
        .par_iter()
        .map(|(s, w)| {
            let g: C64 = s.iter().map(|&sj| ps.eval(C64::new(t, -sj))).product();
            kernel.eval(s) * g * *w
        })
        .collect();
    Ok(parts.into_iter().sum())
}

/// `⟨O⟩ + Σ_n ((−ε)^n/n!) I^(n)`.
pub fn main_expansion(ens: &GibbsEnsemble, o: &FockOperator, epsilon: f64, coefficients: &[C64]) -> C64 {
    let mut acc = ens.expectation(o);
    let mut factor = 1.0;
    for (k, v) in coefficients.iter().enumerate() {
        factor *= -epsilon / (k + 1) as f64;
        acc += v * factor;
    }
    acc
}

#[derive(Debug, Clone, PartialEq)]
pub struct WickControls {
    pub switch: PeriodizedSwitch,
    pub t_start: f64,
    pub panel_width: f64,
    pub order: usize,
    pub node_budget: usize,
    pub euclid: QuadratureControls,
    /// Requested tolerance; must not lie below the certified budget.
    pub tolerance: Option<f64>,
}

impl WickControls {
    pub fn new(driven: &DrivenHamiltonian, ens: &GibbsEnsemble) -> Result<Self> {
        let switch = driven.switch().periodize(ens.beta(), driven.eta())?;
        let base = DuhamelControls::new(driven, SwitchSource::Periodized(switch.clone()))?;
        Ok(Self {
            switch,
            t_start: base.t_start,
            panel_width: base.panel_width,
            order: base.order,
            node_budget: base.node_budget,
            euclid: QuadratureControls::default(),
            tolerance: None,
        })
    }

    pub fn with_t_start(mut self, t_start: f64) -> Self {
        self.t_start = t_start;
        self
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = Some(tolerance);
        self
    }

    fn duhamel(&self) -> DuhamelControls {
        DuhamelControls {
            t_start: self.t_start,
            panel_width: self.panel_width,
            order: self.order,
            source: SwitchSource::Periodized(self.switch.clone()),
            node_budget: self.node_budget,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WickReport {
    pub order: usize,
    pub real: C64,
    pub euclid: C64,
    pub abs_discrepancy: f64,
    pub rel_discrepancy: f64,
    pub budget: f64,
    pub real_time: DuhamelReport,
    pub euclidean: EuclideanReport,
}

impl WickReport {
    pub fn passed(&self) -> bool {
        self.abs_discrepancy <= self.budget
    }
}

/// Compares the real-time coefficient `D_n` of the periodized dynamics with `((−i)^n/n!) I^(n)`.
pub fn verify_wick_rotation(
    driven: &DrivenHamiltonian,
    ens: &GibbsEnsemble,
    o: &FockOperator,
    n: usize,
    t: f64,
    controls: &WickControls,
) -> Result<WickReport> {
    if n == 0 || n > 2 {
        return Err(Error::InvalidParameter(format!("Wick verification supports n = 1, 2; got {n}")));
    }
    let real_time = duhamel_report(driven, ens, o, n, t, &controls.duhamel())?;
    let euclidean = euclidean_coefficient_with(&controls.switch, ens, driven.perturbation(), o, n, t, controls.euclid)?;
    let prefactor = (-I).powi(n as i32) / factorial(n);
    let euclid = euclidean.value * prefactor;
    let real = real_time.value;
    let budget = real_time.error_budget() + euclidean.quadrature_estimate / factorial(n) + roundoff_floor(&[real, euclid]);
    if let Some(tol) = controls.tolerance {
        if tol < budget {
            return Err(Error::BudgetUnattainable { requested: tol, budget });
        }
    }
    let abs = (real - euclid).norm();
    let scale = real.norm().max(euclid.norm());
    let rel = if scale > 0.0 { abs / scale } else { 0.0 };
    Ok(WickReport {
        order: n,
        real,
        euclid,
        abs_discrepancy: abs,
        rel_discrepancy: rel,
        budget: controls.tolerance.unwrap_or(budget).max(budget),
        real_time,
        euclidean,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformationControls {
    pub t_start: f64,
    pub panel_width: f64,
    pub order: usize,
    pub euclid: QuadratureControls,
}

impl DeformationControls {
    pub fn new(ens: &GibbsEnsemble, ps: &PeriodizedSwitch) -> Self {
        let spread = ens.h_values().iter().fold(f64::NEG_INFINITY, |m, &e| m.max(e))
            - ens.h_values().iter().fold(f64::INFINITY, |m, &e| m.min(e));
        let width = if spread > 0.0 { 0.5f64.min(1.0 / spread) } else { 0.5 };
        Self { t_start: -ps.default_cutoff(1e-12), panel_width: width, order: 8, euclid: QuadratureControls::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformationReport {
    pub lhs: C64,
    pub rhs: C64,
    pub residual: f64,
    pub truncation_bound: f64,
}

/// `∫_{−T}^t a(ir)⟨[τ_r(B), C]⟩ dr` against `i∫₀^β a(it+s)⟨τ_t(γ_s(B)) C⟩ ds` with `a(s) = g_{β,η}(−is)`.
pub fn verify_basic_deformation(
    ens: &GibbsEnsemble,
    ps: &PeriodizedSwitch,
    b: &FockOperator,
    c_op: &FockOperator,
    t: f64,
    controls: &DeformationControls,
) -> Result<DeformationReport> {
    if !b.gauge_invariant() {
        return Err(Error::InvalidParameter("basic deformation needs a gauge-invariant B".into()));
    }
    if t > 0.0 {
        return Err(Error::PositiveTimeUnsupported { t });
    }
    if !(controls.t_start < t) {
        return Err(Error::InvalidParameter(format!("t_start {} must lie below t = {t}", controls.t_start)));
    }
    let be = ens.to_eigen(b.matrix());
    let ce = ens.to_eigen(c_op.matrix());
    let dim = ens.dim();
    let e = ens.h_values();
    let k = ens.k_values();
    let w = ens.weights();
    let mut pairs: Vec<(usize, usize, C64)> = Vec::new();
    for a in 0..dim {
        for bb in 0..dim {
            let v = be[(a, bb)] * ce[(bb, a)];
            if v != c(0.0) {
                pairs.push((a, bb, v));
            }
        }
    }

    let grid = PanelGrid::uniform(controls.t_start, t, controls.panel_width, controls.order)?;
    let lhs_parts: Vec<C64> = grid
        .nodes()
        .par_iter()
        .map(|&(r, wt)| {
            let g = ps.eval_real(r);
            let s: C64 = pairs.iter().map(|&(a, bb, v)| v * (w[a] - w[bb]) * C64::from_polar(1.0, r * (e[a] - e[bb]))).sum();
            s * (g * wt)
        })
        .collect();
    let lhs: C64 = lhs_parts.into_iter().sum();

    let beta = ens.beta();
    let log_z = ens.log_partition();
    let egrid = euclidean_grid(beta, controls.euclid.panel_width, controls.euclid.order)?;
    let rhs_parts: Vec<C64> = egrid
        .nodes()
        .par_iter()
        .map(|&(s, ws)| {
            let g = ps.eval(C64::new(t, -s));
            let sum: C64 = pairs
                .iter()
                .map(|&(a, bb, v)| {
                    let mag = (-(beta - s) * k[a] - s * k[bb] - log_z).exp();
                    v * C64::from_polar(mag, t * (e[a] - e[bb]))
                })
                .sum();
            sum * g * ws
        })
        .collect();
    let rhs: C64 = rhs_parts.into_iter().sum::<C64>() * I;

    let truncation_bound =
        2.0 * operator_norm(b.matrix()) * operator_norm(c_op.matrix()) * ps.tail_integral_bound(-controls.t_start);
    Ok(DeformationReport { lhs, rhs, residual: (lhs - rhs).norm(), truncation_bound })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorizationReport {
    /// `|⟨γ_{s1}(B)⋯γ_{sn}(B)A⟩ − Σ_J ⟨…;A⟩⟨B(rest)⟩|` at the given times.
    pub factorization_residual: f64,
    /// `(k, |∫_{Δ^k_β} Π a(it+s_j)⟨γ_{s1}(B)⋯γ_{sk}(B)⟩ ds|)`.
    pub vanishing: Vec<(usize, f64)>,
}

fn ordered_moment_table(ens: &GibbsEnsemble, items: &[(&Prepared, f64)]) -> Result<Vec<C64>> {
    let n = items.len();
    let mut out = vec![c(1.0); 1 << n];
    for (mask, slot) in out.iter_mut().enumerate().skip(1) {
        let sub: Vec<(&Prepared, f64)> = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| items[i]).collect();
        *slot = ens.ordered_product(&sub)?;
    }
    Ok(out)
}

fn restrict_table(table: &[C64], members: &[usize]) -> Vec<C64> {
    let k = members.len();
    (0..1usize << k)
        .map(|sub| {
            let full = members.iter().enumerate().filter(|(j, _)| sub >> j & 1 == 1).fold(0usize, |m, (_, &i)| m | 1 << i);
            table[full]
        })
        .collect()
}

/// Moment-cumulant factorization of ordered products with `A` last.
pub fn factorization_residual(ens: &GibbsEnsemble, b: &FockOperator, a: &FockOperator, times: &[f64]) -> Result<f64> {
    let n = times.len();
    if n > 3 {
        return Err(Error::InvalidParameter(format!("factorization check supports n ≤ 3, got {n}")));
    }
    let (pb, pa) = (ens.prepare(b), ens.prepare(a));
    let mut items: Vec<(&Prepared, f64)> = times.iter().map(|&s| (&pb, s)).collect();
    items.push((&pa, 0.0));
    let table = ordered_moment_table(ens, &items)?;
    let lhs = table[(1 << (n + 1)) - 1];
    let mut rhs = c(0.0);
    for j in 0..1usize << n {
        let mut members: Vec<usize> = (0..n).filter(|i| j >> i & 1 == 1).collect();
        members.push(n);
        let kappa = cumulant_from_moments(members.len(), &restrict_table(&table, &members));
        let rest = ((1 << n) - 1) & !j;
        rhs += kappa * table[rest];
    }
    Ok((lhs - rhs).norm())
}

/// `∫_{Δ^k_β} Π g_{β,η}(t − is_j) ⟨γ_{s1}(B)⋯γ_{sk}(B)⟩ ds`, which vanishes for `g̃(0) = 0`.
pub fn disconnected_simplex_integral(
    ens: &GibbsEnsemble,
    ps: &PeriodizedSwitch,
    b: &FockOperator,
    k: usize,
    t: f64,
    quad: QuadratureControls,
) -> Result<C64> {
    let pb = ens.prepare(b);
    let grid = euclidean_grid(ens.beta(), quad.panel_width, quad.order)?;
    let pts = grid.simplex(k, DEFAULT_NODE_BUDGET)?;
    let parts = pts
        .par_iter()
        .map(|(s, w)| {
            let g: C64 = s.iter().map(|&sj| ps.eval(C64::new(t, -sj))).product();
            let items: Vec<(&Prepared, f64)> = s.iter().map(|&sj| (&pb, sj)).collect();
            Ok(ens.ordered_product(&items)? * g * *w)
        })
        .collect::<Result<Vec<C64>>>()?;
    Ok(parts.into_iter().sum())
}

pub fn factorization_check(
    ens: &GibbsEnsemble,
    ps: &PeriodizedSwitch,
    b: &FockOperator,
    a: &FockOperator,
    times: &[f64],
    t: f64,
    quad: QuadratureControls,
) -> Result<FactorizationReport> {
    let factorization = factorization_residual(ens, b, a, times)?;
    let vanishing =
        (1..=2).map(|k| Ok((k, disconnected_simplex_integral(ens, ps, b, k, t, quad)?.norm()))).collect::<Result<Vec<_>>>()?;
    Ok(FactorizationReport { factorization_residual: factorization, vanishing })
}

/// Model data shared by every point of an adiabatic sweep.
#[derive(Debug, Clone)]
pub struct AdiabaticModel {
    pub base: FockOperator,
    pub perturbation: FockOperator,
    pub observable: FockOperator,
    pub mu: f64,
    pub switch: SwitchSpec,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdiabaticPoint {
    pub eta: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub t: f64,
    /// Inverse temperature of the reference states; defaults to `beta`.
    pub reference_beta: Option<f64>,
}

impl AdiabaticPoint {
    pub fn new(eta: f64, beta: f64, epsilon: f64, t: f64) -> Self {
        Self { eta, beta, epsilon, t, reference_beta: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdiabaticSweepRow {
    pub eta: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub t: f64,
    /// `Tr Oρ(t)` for `𝓗(ηt)`.
    pub evolved: f64,
    /// `⟨O⟩_t`, Gibbs state of `𝓗 + εg(ηt)𝒫`.
    pub instantaneous: f64,
    pub gap: f64,
    /// `Tr Oρ̃(t)` for `𝓗 + εg_{β,η}(t)𝒫`.
    pub periodized_evolved: f64,
    /// Gibbs state of `𝓗 + εg_{β,η}(t)𝒫`.
    pub periodized_reference: f64,
    pub periodized_gap: f64,
    pub imaginary_residue: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GapKind {
    True,
    Periodized,
}

impl AdiabaticSweepRow {
    pub fn gap_of(&self, kind: GapKind) -> f64 {
        match kind {
            GapKind::True => self.gap,
            GapKind::Periodized => self.periodized_gap,
        }
    }
}

pub fn adiabatic_row(model: &AdiabaticModel, point: &AdiabaticPoint) -> Result<AdiabaticSweepRow> {
    let AdiabaticPoint { eta, beta, epsilon, t, reference_beta } = *point;
    if !(beta > 0.0) || !(eta > 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidParameter(format!("sweep point needs β, η > 0; got β={beta}, η={eta}")));
    }
    let driven = DrivenHamiltonian::new(model.base.clone(), model.perturbation.clone(), epsilon, model.switch.clone(), eta)?;
    let ref_beta = reference_beta.unwrap_or(beta);
    let ens = GibbsEnsemble::new(&model.base, beta, model.mu)?;
    let o = &model.observable;

    let true_ctl = PropagationControls::new(&driven, t, SwitchSource::True)?;
    let evolved = evolve_gibbs(&driven, &ens, t, &true_ctl)?.expectation(o);
    let instantaneous = instantaneous_gibbs_expectation(
        &driven,
        ref_beta,
        model.mu,
        o,
        t,
        InstantaneousMode::Direct,
        QuadratureControls::default(),
    )?;

    let ps = model.switch.periodize(beta, eta)?;
    let gp = ps.eval_real(t);
    let per_ctl = PropagationControls::new(&driven, t, SwitchSource::Periodized(ps))?;
    let periodized_evolved = evolve_gibbs(&driven, &ens, t, &per_ctl)?.expectation(o);
    let h_ref = driven.base().with_matrix(driven.with_switch_value(gp));
    let periodized_reference = GibbsEnsemble::new(&h_ref, ref_beta, model.mu)?.expectation(o);

    let values = [evolved, instantaneous, periodized_evolved, periodized_reference];
    let imaginary_residue = values.iter().fold(0.0f64, |m, v| m.max(v.im.abs()));
    Ok(AdiabaticSweepRow {
        eta,
        beta,
        epsilon,
        t,
        evolved: evolved.re,
        instantaneous: instantaneous.re,
        gap: (evolved.re - instantaneous.re).abs(),
        periodized_evolved: periodized_evolved.re,
        periodized_reference: periodized_reference.re,
        periodized_gap: (periodized_evolved.re - periodized_reference.re).abs(),
        imaginary_residue,
    })
}

/// One result per point, in input order.
pub fn adiabatic_sweep(model: &AdiabaticModel, points: &[AdiabaticPoint]) -> Vec<Result<AdiabaticSweepRow>> {
    points.par_iter().map(|p| adiabatic_row(model, p)).collect()
}

/// Log-log slope of a gap against η.
pub fn eta_slope(rows: &[AdiabaticSweepRow], kind: GapKind) -> Result<LinearFit> {
    let xs: Vec<f64> = rows.iter().map(|r| r.eta).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.gap_of(kind)).collect();
    loglog_fit(&xs, &ys)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImprovedReport {
    pub m: u32,
    pub kind: GapKind,
    pub rows: Vec<AdiabaticSweepRow>,
    pub fit: LinearFit,
}

/// η-sweep with the flat switch `1 − (1 − e^t)^{m+1}` and the fitted gap slope.
pub fn improved_adiabatic_check(
    model: &AdiabaticModel,
    m: u32,
    etas: &[f64],
    beta: f64,
    epsilon: f64,
    t: f64,
    kind: GapKind,
) -> Result<ImprovedReport> {
    let mut flat = model.clone();
    flat.switch = SwitchSpec::poly_flat(m);
    let points: Vec<AdiabaticPoint> = etas.iter().map(|&eta| AdiabaticPoint::new(eta, beta, epsilon, t)).collect();
    let rows = adiabatic_sweep(&flat, &points).into_iter().collect::<Result<Vec<_>>>()?;
    let fit = eta_slope(&rows, kind)?;
    Ok(ImprovedReport { m, kind, rows, fit })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KuboReport {
    /// `∫₀^β g_{β,η}(t − is)⟨γ_s(𝒫); O⟩ ds`.
    pub euclidean: C64,
    /// `i∫_{−∞}^t g(ηs)⟨[τ_t(O), τ_s(𝒫)]⟩ ds`.
    pub real_time: C64,
    pub gap: f64,
    pub budget: f64,
}

pub fn kubo_check(
    driven: &DrivenHamiltonian,
    ens: &GibbsEnsemble,
    o: &FockOperator,
    t: f64,
    controls: &DuhamelControls,
    quad: QuadratureControls,
) -> Result<KuboReport> {
    let ps = driven.switch().periodize(ens.beta(), driven.eta())?;
    let e = euclidean_coefficient_with(&ps, ens, driven.perturbation(), o, 1, t, quad)?;
    let r = duhamel_report(driven, ens, o, 1, t, controls)?;
    let real_time = r.value * I;
    Ok(KuboReport {
        euclidean: e.value,
        real_time,
        gap: (e.value - real_time).norm(),
        budget: e.quadrature_estimate + r.error_budget(),
    })
}

/// Default real-time controls for the true switch.
pub fn kubo_controls(driven: &DrivenHamiltonian) -> Result<DuhamelControls> {
    DuhamelControls::new(driven, SwitchSource::True)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanRow {
    pub epsilon: f64,
    pub evolved: C64,
    pub prediction: C64,
    pub remainder: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionScan {
    pub coefficients: Vec<C64>,
    pub rows: Vec<ScanRow>,
    pub fit: LinearFit,
}

fn periodized_evolution(
    driven: &DrivenHamiltonian,
    ens: &GibbsEnsemble,
    ps: &PeriodizedSwitch,
    o: &FockOperator,
    t: f64,
) -> Result<C64> {
    let ctl = PropagationControls::new(driven, t, SwitchSource::Periodized(ps.clone()))?;
    Ok(evolve_gibbs(driven, ens, t, &ctl)?.expectation(o))
}

/// `Tr Oρ̃(t)` minus the main expansion truncated at `orders`, fitted against ε on a log-log scale.
pub fn main_expansion_scan(
    driven: &DrivenHamiltonian,
    ens: &GibbsEnsemble,
    o: &FockOperator,
    t: f64,
    epsilons: &[f64],
    orders: usize,
    quad: QuadratureControls,
) -> Result<ExpansionScan> {
    let ps = driven.switch().periodize(ens.beta(), driven.eta())?;
    let coefficients = (1..=orders)
        .map(|n| Ok(euclidean_coefficient_with(&ps, ens, driven.perturbation(), o, n, t, quad)?.value))
        .collect::<Result<Vec<C64>>>()?;
    let rows = epsilons
        .iter()
        .map(|&eps| {
            let evolved = periodized_evolution(&driven.with_epsilon(eps), ens, &ps, o, t)?;
            let prediction = main_expansion(ens, o, eps, &coefficients);
            Ok(ScanRow { epsilon: eps, evolved, prediction, remainder: (evolved - prediction).norm() })
        })
        .collect::<Result<Vec<_>>>()?;
    let fit = loglog_fit(
        &rows.iter().map(|r| r.epsilon.abs()).collect::<Vec<_>>(),
        &rows.iter().map(|r| r.remainder).collect::<Vec<_>>(),
    )?;
    Ok(ExpansionScan { coefficients, rows, fit })
}

/// First-order scan: `Tr Oρ̃(t) − ⟨O⟩ + ε·∫₀^β g_{β,η}(t − is)⟨γ_s(𝒫); O⟩ ds`.
pub fn linear_response_scan(
    driven: &DrivenHamiltonian,
    ens: &GibbsEnsemble,
    o: &FockOperator,
    t: f64,
    epsilons: &[f64],
    quad: QuadratureControls,
) -> Result<ExpansionScan> {
    main_expansion_scan(driven, ens, o, t, epsilons, 1, quad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::{bond_current, bond_hopping, build_quadratic, density_modulation, QuadraticKernel};
    use crate::lattice::{FockBasis, LatticeGeometry};
    use crate::linalg::{hermitian_eigen, spectral_map};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chain(l: usize, mu_shift: f64) -> (FockBasis, FockOperator) {
        let g = LatticeGeometry::chain(l);
        let b = FockBasis::with_default_budget(g.clone()).unwrap();
        let k = QuadraticKernel::nearest_neighbor(&g, -1.0, |x| mu_shift * x as f64).unwrap();
        let h = build_quadratic(&b, &k).unwrap();
        (b, h)
    }

    fn local_perturbation(b: &FockBasis) -> FockOperator {
        let d = density_modulation(b, &[(0, 1.0), (1, 0.5)]).unwrap();
        &d + &bond_hopping(b, 0, 1).unwrap()
    }

    fn random_even(b: &FockBasis, rng: &mut ChaCha8Rng) -> FockOperator {
        let mut out = b.zero();
        for x in 0..b.modes() {
            for y in 0..b.modes() {
                let z = C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                out = &out + &b.hopping(x, y).unwrap().scale(z);
            }
        }
        out
    }

    fn setup(
        l: usize,
        beta: f64,
        mu: f64,
        p: impl Fn(&FockBasis) -> FockOperator,
    ) -> (FockBasis, DrivenHamiltonian, GibbsEnsemble) {
        let (b, h) = chain(l, 0.2);
        let driven = DrivenHamiltonian::new(h.clone(), p(&b), 0.1, SwitchSpec::exponential(), 0.5).unwrap();
        let ens = GibbsEnsemble::new(&h, beta, mu).unwrap();
        (b, driven, ens)
    }

    #[test]
    fn conserved_perturbation_has_no_first_order_term() {
        let (b, driven, ens) = setup(3, 4.0, 0.3, |b| b.total_number());
        let o = b.number(1).unwrap();
        let v = euclidean_coefficient(&driven, &ens, &o, 1, -0.4, QuadratureControls::default()).unwrap();
        assert!(v.norm() < 1e-12, "{v}");
    }

    #[test]
    fn single_mode_density_perturbation_vanishes() {
        let g = LatticeGeometry::chain(1);
        let b = FockBasis::with_default_budget(g).unwrap();
        let h = b.number(0).unwrap().scale_real(0.7);
        let driven = DrivenHamiltonian::new(h.clone(), b.number(0).unwrap(), 0.1, SwitchSpec::exponential(), 0.5).unwrap();
        let ens = GibbsEnsemble::new(&h, 2.0, 0.1).unwrap();
        let v = euclidean_coefficient(&driven, &ens, &b.number(0).unwrap(), 1, 0.0, QuadratureControls::default()).unwrap();
        assert!(v.norm() < 1e-12);
    }

    #[test]
    fn first_coefficient_matches_trapezoid_oracle() {
        let (beta, mu, t) = (4.0, 0.3, -0.6);
        let (b, driven, ens) = setup(2, beta, mu, |b| b.number(0).unwrap());
        let o = b.number(1).unwrap();
        let ps = driven.switch().periodize(beta, driven.eta()).unwrap();
        let v = euclidean_coefficient(&driven, &ens, &o, 1, t, QuadratureControls::default()).unwrap();

        let k = driven.base().matrix() - b.total_number().matrix() * c(mu);
        let (vals, vecs) = hermitian_eigen(&k).unwrap();
        let rho = spectral_map(&vals, &vecs, |e| c((-beta * (e - vals[0])).exp()));
        let z = rho.trace();
        let (pm, om) = (driven.perturbation().matrix(), o.matrix());
        let mean = |m: &crate::linalg::CMatrix| (&rho * m).trace() / z;
        let (mp, mo) = (mean(pm), mean(om));
        let steps = 2000;
        let h = beta / steps as f64;
        let mut acc = c(0.0);
        for j in 0..steps {
            let s = j as f64 * h;
            let ep = spectral_map(&vals, &vecs, |e| c((s * e).exp()));
            let em = spectral_map(&vals, &vecs, |e| c((-s * e).exp()));
            let gs = ep * pm * em;
            let conn = mean(&(gs * om)) - mp * mo;
            acc += ps.eval(C64::new(t, -s)) * conn * h;
        }
        assert!((v - acc).norm() < 1e-6, "{v} vs {acc}");
        assert!(v.norm() > 1e-3);
    }

    #[test]
    fn wick_rotation_first_order_small_chain() {
        let beta = 4.0;
        let (b, driven, ens) = setup(2, beta, 0.3, local_perturbation);
        let o = bond_current(&b, 0, 1).unwrap();
        let ctl = WickControls::new(&driven, &ens).unwrap().with_t_start(-12.0 * beta);
        let r = verify_wick_rotation(&driven, &ens, &o, 1, -0.5, &ctl).unwrap();
        assert!(r.abs_discrepancy <= 1e-4 && r.passed(), "{r:?}");
        assert!(r.real.norm() > 1e-4);
    }

    #[test]
    fn wick_rotation_second_order() {
        let beta = 4.0;
        let (b, driven, ens) = setup(3, beta, 0.3, local_perturbation);
        let o = b.number(1).unwrap();
        let ctl = WickControls::new(&driven, &ens).unwrap().with_t_start(-12.0 * beta);
        let r = verify_wick_rotation(&driven, &ens, &o, 2, -0.5, &ctl).unwrap();
        assert!(r.rel_discrepancy <= 1e-3 && r.passed(), "{r:?}");
        assert!(r.real.norm() > 1e-5);
    }

    #[test]
    fn identity_perturbation_gives_zero_on_both_sides() {
        let beta = 3.0;
        let (b, driven, ens) = setup(2, beta, 0.0, |b| b.identity().scale_real(0.7));
        let o = b.number(0).unwrap();
        let ctl = WickControls::new(&driven, &ens).unwrap();
        let r = verify_wick_rotation(&driven, &ens, &o, 1, -0.2, &ctl).unwrap();
        assert!(r.real.norm() < 1e-12 && r.euclid.norm() < 1e-12);
    }

    #[test]
    fn unattainable_tolerance_is_rejected() {
        let (b, driven, ens) = setup(2, 4.0, 0.3, local_perturbation);
        let o = b.number(1).unwrap();
        let ctl = WickControls::new(&driven, &ens).unwrap().with_t_start(-2.0).with_tolerance(1e-9);
        let err = verify_wick_rotation(&driven, &ens, &o, 1, -0.5, &ctl).unwrap_err();
        assert!(matches!(err, Error::BudgetUnattainable { .. }), "{err:?}");
    }

    fn deformation_oracle(ens: &GibbsEnsemble, ps: &PeriodizedSwitch, b: &FockOperator, c_op: &FockOperator, t: f64) -> C64 {
        let be = ens.to_eigen(b.matrix());
        let ce = ens.to_eigen(c_op.matrix());
        let (e, w) = (ens.h_values(), ens.weights());
        let mut acc = c(0.0);
        for &(omega, gw) in ps.coefficients() {
            for a in 0..ens.dim() {
                for bb in 0..ens.dim() {
                    let rate = C64::new(omega, e[a] - e[bb]);
                    acc += be[(a, bb)] * ce[(bb, a)] * (w[a] - w[bb]) * gw * (rate * t).exp() / rate;
                }
            }
        }
        acc
    }

    #[test]
    fn basic_deformation_random_operators() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let beta = 4.0;
        let (b, _, ens) = setup(2, beta, 0.2, |b| b.zero());
        let ps = SwitchSpec::exponential().periodize(beta, 0.5).unwrap();
        let ctl = DeformationControls::new(&ens, &ps);
        for _ in 0..4 {
            let bop = random_even(&b, &mut rng);
            let cop = random_even(&b, &mut rng);
            let t = -rng.random_range(0.0..2.0);
            let r = verify_basic_deformation(&ens, &ps, &bop, &cop, t, &ctl).unwrap();
            let oracle = deformation_oracle(&ens, &ps, &bop, &cop, t);
            assert!(r.residual <= 1e-5, "{r:?}");
            assert!((r.lhs - oracle).norm() < 1e-8, "{} vs {oracle}", r.lhs);
            assert!(r.lhs.norm() > 1e-3);
        }
        let r = verify_basic_deformation(&ens, &ps, &b.identity(), &b.number(0).unwrap(), -0.3, &ctl).unwrap();
        assert!(r.lhs.norm() < 1e-12 && r.rhs.norm() < 1e-12);
    }

    #[test]
    fn factorization_and_disconnected_integrals() {
        let beta = 3.0;
        let (b, _, ens) = setup(3, beta, 0.4, |b| b.zero());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bop = random_even(&b, &mut rng);
        let aop = random_even(&b, &mut rng);
        for times in [vec![2.1, 0.4], vec![0.3, 2.5, 1.0]] {
            let r = factorization_residual(&ens, &bop, &aop, &times).unwrap();
            assert!(r <= 1e-10, "{times:?}: {r}");
        }
        let ps = SwitchSpec::exponential().periodize(beta, 0.5).unwrap();
        let diag = density_modulation(&b, &[(0, 1.0), (2, -0.3)]).unwrap();
        let rep = factorization_check(&ens, &ps, &diag, &aop, &[1.0, 0.5], -0.2, QuadratureControls::default()).unwrap();
        assert!(rep.vanishing[0].1 <= 1e-12, "{rep:?}");
        assert!(rep.vanishing[1].1 <= 1e-6, "{rep:?}");
        let k2 = disconnected_simplex_integral(&ens, &ps, &bop, 2, -0.2, QuadratureControls::default()).unwrap();
        assert!(k2.norm() <= 1e-6, "{k2}");
    }

    #[test]
    fn torus_and_simplex_forms_agree() {
        let beta = 2.0;
        let (b, driven, ens) = setup(2, beta, 0.3, local_perturbation);
        let ps = driven.switch().periodize(beta, driven.eta()).unwrap();
        let o = b.number(1).unwrap();
        let quad = QuadratureControls { panel_width: 0.1, order: 8 };
        let simplex = euclidean_coefficient_with(&ps, &ens, driven.perturbation(), &o, 2, -0.3, quad).unwrap().value;
        let torus = euclidean_coefficient_torus(&ps, &ens, driven.perturbation(), &o, 2, -0.3, quad).unwrap();
        assert!((simplex - torus).norm() <= 1e-4 * simplex.norm().max(1e-3), "{simplex} vs {torus}");
    }

    #[test]
    fn main_expansion_sums_with_factorials() {
        let (b, _, ens) = setup(2, 1.0, 0.0, |b| b.zero());
        let o = b.number(0).unwrap();
        let base = ens.expectation(&o);
        let v = main_expansion(&ens, &o, 0.5, &[c(2.0), c(8.0)]);
        assert!((v - base - c(-1.0 + 1.0)).norm() < 1e-15);
    }

    #[test]
    fn adiabatic_row_without_drive_has_zero_gaps() {
        let (b, h) = chain(2, 0.2);
        let model = AdiabaticModel {
            base: h,
            perturbation: local_perturbation(&b),
            observable: b.number(1).unwrap(),
            mu: 0.1,
            switch: SwitchSpec::exponential(),
        };
        let rows =
            adiabatic_sweep(&model, &[AdiabaticPoint::new(0.5, 5.0, 0.0, 0.0), AdiabaticPoint::new(0.25, 10.0, 0.0, -1.0)]);
        for r in rows {
            let r = r.unwrap();
            assert!(r.gap < 1e-9 && r.periodized_gap < 1e-9, "{r:?}");
            assert!(r.imaginary_residue < 1e-9);
        }
    }

    #[test]
    fn kubo_sides_vanish_for_identity_perturbation() {
        let (b, driven, ens) = setup(2, 5.0, 0.1, |b| b.identity());
        let o = b.number(0).unwrap();
        let r = kubo_check(&driven, &ens, &o, 0.0, &kubo_controls(&driven).unwrap(), QuadratureControls::default()).unwrap();
        assert!(r.euclidean.norm() < 1e-12 && r.real_time.norm() < 1e-12, "{r:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn wick_identity_first_order(t in -2.0f64..0.0, mu in -0.5f64..0.5, beta in 1.0f64..4.0) {
            let (b, h) = chain(2, 0.2);
            let driven = DrivenHamiltonian::new(h.clone(), local_perturbation(&b), 0.1, SwitchSpec::exponential(), 0.5).unwrap();
            let ens = GibbsEnsemble::new(&h, beta, mu).unwrap();
            let ctl = WickControls::new(&driven, &ens).unwrap();
            let r = verify_wick_rotation(&driven, &ens, &bond_current(&b, 0, 1).unwrap(), 1, t, &ctl).unwrap();
            prop_assert!(r.passed(), "{:?}", r);
        }
    }
}
