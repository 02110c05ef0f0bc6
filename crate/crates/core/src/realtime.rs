//! Driven unitary dynamics, evolved Gibbs states, real-time Duhamel
//! coefficients and Lieb-Robinson commutator norms.
//!
//! Everything runs in the eigenbasis of the unperturbed Hamiltonian. The
//! propagator is integrated in the interaction picture, where the generator
//! is `εg(ηt)τ_t(𝒫)`, with the fourth-order commutator-free exponential
//! scheme; the free part is applied exactly on both ends.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::equilibrium::GibbsEnsemble;
use crate::error::{Error, Result};
use crate::fit::linear_fit;
use crate::hamiltonian::DrivenHamiltonian;
use crate::lattice::{FockOperator, LatticeGeometry};
use crate::linalg::{
    c, hermitian_eigen, max_abs, operator_norm, phase_sandwich, polar_unitary, trace_of_product, unitarity_defect, unitary_exp,
    CMatrix, C64, I,
};
use crate::quadrature::{PanelGrid, DEFAULT_NODE_BUDGET};
use crate::switch::PeriodizedSwitch;

pub const DEFAULT_TAIL_FRACTION: f64 = 1e-8;
pub const REUNITARIZE_EVERY: usize = 100;

/// Which switch drives the perturbation.
#[derive(Debug, Clone, PartialEq)]
pub enum SwitchSource {
    /// `g(ηt)`.
    True,
    /// `g_{β,η}(t)`.
    Periodized(PeriodizedSwitch),
}

impl SwitchSource {
    pub fn value(&self, driven: &DrivenHamiltonian, t: f64) -> Result<f64> {
        match self {
            SwitchSource::True => driven.switch().eval(driven.eta() * t),
            SwitchSource::Periodized(ps) => {
                if t > 0.0 {
                    return Err(Error::PositiveTimeUnsupported { t });
                }
                Ok(ps.eval_real(t))
            }
        }
    }

    /// Upper bound on `∫_{−∞}^{−T} |g|`.
    pub fn tail(&self, driven: &DrivenHamiltonian, t_cut: f64) -> f64 {
        match self {
            SwitchSource::True => driven.switch().tail_integral_bound(driven.eta(), t_cut),
            SwitchSource::Periodized(ps) => ps.tail_integral_bound(t_cut),
        }
    }

    /// Smallest `T` whose tail is at most `rel` times the full integral.
    pub fn default_cutoff(&self, driven: &DrivenHamiltonian, rel: f64) -> f64 {
        match self {
            SwitchSource::True => driven.switch().default_cutoff(driven.eta(), rel),
            SwitchSource::Periodized(ps) => ps.default_cutoff(rel),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            SwitchSource::True => "true",
            SwitchSource::Periodized(_) => "periodized",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropagationControls {
    pub t_start: f64,
    pub t_end: f64,
    pub step: f64,
    pub order: u32,
    pub unitarity_tolerance: f64,
    pub source: SwitchSource,
    pub error_estimate: bool,
}

/// Largest absolute eigenvalue of the base Hamiltonian.
pub fn hamiltonian_norm(driven: &DrivenHamiltonian) -> Result<f64> {
    let (vals, _) = hermitian_eigen(driven.base().matrix())?;
    Ok(vals.iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

pub fn default_step(h_norm: f64) -> f64 {
    if h_norm > 0.0 {
        0.05f64.min(0.05 / h_norm)
    } else {
        0.05
    }
}

impl PropagationControls {
    /// Defaults: `t_start = −T` from the switch tail, `step = min(0.05, 0.05/‖𝓗‖)`.
    pub fn new(driven: &DrivenHamiltonian, t_end: f64, source: SwitchSource) -> Result<Self> {
        let t_cut = source.default_cutoff(driven, DEFAULT_TAIL_FRACTION);
        let step = default_step(hamiltonian_norm(driven)?);
        Ok(Self { t_start: -t_cut, t_end, step, order: 4, unitarity_tolerance: 1e-9, source, error_estimate: false })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(Error::InvalidParameter(format!("step must be positive, got {}", self.step)));
        }
        if !(self.t_start <= self.t_end) || self.t_end > 0.0 {
            return Err(Error::InvalidParameter(format!("need t_start ≤ t_end ≤ 0, got {} and {}", self.t_start, self.t_end)));
        }
        if self.order != 4 {
            return Err(Error::InvalidParameter(format!("only the fourth-order scheme is available, got {}", self.order)));
        }
        if !(self.unitarity_tolerance > 0.0) {
            return Err(Error::InvalidParameter("unitarity tolerance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PropagationResult {
    pub unitary: FockOperator,
    pub unitary_eig: CMatrix,
    pub steps: usize,
    pub unitarity_defect: f64,
    pub local_error_estimate: Option<f64>,
}

/// Eigendata of the unperturbed Hamiltonian shared by all dynamics routines.
#[derive(Debug, Clone)]
pub struct Dynamics {
    energies: Vec<f64>,
    vectors: CMatrix,
    p_eig: CMatrix,
}

impl Dynamics {
    pub fn new(driven: &DrivenHamiltonian) -> Result<Self> {
        let ens = GibbsEnsemble::new(driven.base(), 1.0, 0.0)?;
        Ok(Self::from_ensemble(driven, &ens))
    }

    /// Reuse the eigenbasis of a Gibbs ensemble built from the same base Hamiltonian.
    pub fn from_ensemble(driven: &DrivenHamiltonian, ens: &GibbsEnsemble) -> Self {
        Self {
            energies: ens.h_values().to_vec(),
            vectors: ens.vectors().clone(),
            p_eig: ens.to_eigen(driven.perturbation().matrix()),
        }
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn to_eigen(&self, m: &CMatrix) -> CMatrix {
        self.vectors.adjoint() * m * &self.vectors
    }

    pub fn from_eigen(&self, m: &CMatrix) -> CMatrix {
        &self.vectors * m * self.vectors.adjoint()
    }

    fn heisenberg(&self, m: &CMatrix, t: f64) -> CMatrix {
        let e = &self.energies;
        CMatrix::from_fn(m.nrows(), m.ncols(), |a, b| m[(a, b)] * C64::from_polar(1.0, t * (e[a] - e[b])))
    }

    fn generator(&self, driven: &DrivenHamiltonian, source: &SwitchSource, t: f64) -> Result<CMatrix> {
        let g = source.value(driven, t)?;
        Ok(self.heisenberg(&self.p_eig, t) * c(driven.epsilon() * g))
    }

    fn interaction_propagator(
        &self,
        driven: &DrivenHamiltonian,
        controls: &PropagationControls,
        steps: usize,
    ) -> Result<(CMatrix, f64)> {
        let dim = self.energies.len();
        let mut u = CMatrix::identity(dim, dim);
        let span = controls.t_end - controls.t_start;
        if steps == 0 || span == 0.0 || driven.epsilon() == 0.0 {
            return Ok((u, 0.0));
        }
        let h = span / steps as f64;
        let r3 = 3f64.sqrt();
        let (a1, a2) = (0.25 - r3 / 6.0, 0.25 + r3 / 6.0);
        let (c1, c2) = (0.5 - r3 / 6.0, 0.5 + r3 / 6.0);
        let mut defect = 0.0;
        for k in 0..steps {
            let t = controls.t_start + k as f64 * h;
            let g1 = self.generator(driven, &controls.source, t + c1 * h)?;
            let g2 = self.generator(driven, &controls.source, t + c2 * h)?;
            let first = unitary_exp(&(&g1 * c(a2) + &g2 * c(a1)), h)?;
            let second = unitary_exp(&(&g1 * c(a1) + &g2 * c(a2)), h)?;
            u = second * (first * u);
            if (k + 1) % REUNITARIZE_EVERY == 0 || k + 1 == steps {
                u = polar_unitary(&u);
                defect = unitarity_defect(&u);
                if defect > controls.unitarity_tolerance {
                    return Err(Error::UnitarityLost { defect, tolerance: controls.unitarity_tolerance });
                }
            }
        }
        Ok((u, defect))
    }

    fn steps_for(controls: &PropagationControls) -> usize {
        ((controls.t_end - controls.t_start) / controls.step).ceil().max(0.0) as usize
    }

    /// `𝒰(t_end; t_start)` in the eigenbasis.
    pub fn propagate_eig(&self, driven: &DrivenHamiltonian, controls: &PropagationControls) -> Result<PropagationResult> {
        controls.validate()?;
        let steps = Self::steps_for(controls);
        let (ui, defect) = self.interaction_propagator(driven, controls, steps)?;
        let estimate = if controls.error_estimate && driven.epsilon() != 0.0 {
            let (fine, _) = self.interaction_propagator(driven, controls, 2 * steps.max(1))?;
            Some(max_abs(&(&fine - &ui)) / 15.0)
        } else if controls.error_estimate {
            Some(0.0)
        } else {
            None
        };
        let e = &self.energies;
        let u = CMatrix::from_fn(ui.nrows(), ui.ncols(), |a, b| {
            ui[(a, b)] * C64::from_polar(1.0, -e[a] * controls.t_end + e[b] * controls.t_start)
        });
        let occ = self.from_eigen(&u);
        Ok(PropagationResult {
            unitary: driven.base().with_matrix(occ),
            unitary_eig: u,
            steps,
            unitarity_defect: defect,
            local_error_estimate: estimate,
        })
    }
}

/// `𝒰(t_end; t_start)` for `i∂_t𝒰 = 𝓗(ηt)𝒰`.
pub fn propagate(driven: &DrivenHamiltonian, controls: &PropagationControls) -> Result<PropagationResult> {
    Dynamics::new(driven)?.propagate_eig(driven, controls)
}

#[derive(Debug, Clone)]
pub struct EvolvedState {
    pub rho: CMatrix,
    pub time: f64,
    pub controls: PropagationControls,
    pub steps: usize,
    pub local_error_estimate: Option<f64>,
    pub config_hash: Option<String>,
}

impl EvolvedState {
    pub fn expectation(&self, op: &FockOperator) -> C64 {
        trace_of_product(&self.rho, op.matrix())
    }

    pub fn with_config_hash(mut self, hash: impl Into<String>) -> Self {
        self.config_hash = Some(hash.into());
        self
    }

    /// `(|Tr ρ − 1|, ‖ρ − ρ*‖, smallest eigenvalue)`.
    pub fn invariants(&self) -> Result<(f64, f64, f64)> {
        let tr = (self.rho.trace() - c(1.0)).norm();
        let herm = max_abs(&(&self.rho - self.rho.adjoint()));
        let (vals, _) = hermitian_eigen(&self.rho)?;
        Ok((tr, herm, vals[0]))
    }
}

/// `ρ(t) = 𝒰(t; t_start) ρ_{β,μ,L} 𝒰(t; t_start)*`.
pub fn evolve_gibbs(
    driven: &DrivenHamiltonian,
    ens: &GibbsEnsemble,
    t: f64,
    controls: &PropagationControls,
) -> Result<EvolvedState> {
    let dyns = Dynamics::from_ensemble(driven, ens);
    let mut ctl = controls.clone();
    ctl.t_end = t;
    let res = dyns.propagate_eig(driven, &ctl)?;
    let u = &res.unitary_eig;
    let mut ud = u.clone();
    for (b, &p) in ens.weights().iter().enumerate() {
        for v in ud.column_mut(b).iter_mut() {
            *v *= p;
        }
    }
    let rho_eig = ud * u.adjoint();
    Ok(EvolvedState {
        rho: dyns.from_eigen(&rho_eig),
        time: t,
        controls: ctl,
        steps: res.steps,
        local_error_estimate: res.local_error_estimate,
        config_hash: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DuhamelControls {
    pub t_start: f64,
    pub panel_width: f64,
    pub order: usize,
    pub source: SwitchSource,
    pub node_budget: usize,
}

impl DuhamelControls {
    /// Defaults: `−T` from the switch tail, 8-point panels of width `min(0.5, 1/‖𝓗‖)`.
    pub fn new(driven: &DrivenHamiltonian, source: SwitchSource) -> Result<Self> {
        let t_cut = source.default_cutoff(driven, DEFAULT_TAIL_FRACTION);
        let h = hamiltonian_norm(driven)?;
        let width = if h > 0.0 { 0.5f64.min(1.0 / h) } else { 0.5 };
        Ok(Self { t_start: -t_cut, panel_width: width, order: 8, source, node_budget: DEFAULT_NODE_BUDGET })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DuhamelReport {
    pub order: usize,
    pub value: C64,
    pub coarse_value: C64,
    pub quadrature_estimate: f64,
    pub truncation_bound: f64,
    pub nodes: usize,
}

impl DuhamelReport {
    pub fn error_budget(&self) -> f64 {
        self.quadrature_estimate + self.truncation_bound
    }
}

struct DuhamelKernel<'a> {
    driven: &'a DrivenHamiltonian,
    source: &'a SwitchSource,
    energies: &'a [f64],
    weights: &'a [f64],
    p: CMatrix,
    grid: PanelGrid,
}

impl DuhamelKernel<'_> {
    fn phases(&self, s: f64) -> Vec<C64> {
        self.energies.iter().map(|&e| C64::from_polar(1.0, -s * e)).collect()
    }

    fn heisenberg_p(&self, s: f64) -> CMatrix {
        let e = self.energies;
        CMatrix::from_fn(self.p.nrows(), self.p.ncols(), |a, b| self.p[(a, b)] * C64::from_polar(1.0, s * (e[a] - e[b])))
    }

    /// `Σ_ab (p_a − p_b) C_ab 𝒫_ba`, whose phase sandwich gives `⟨[C, τ_s(𝒫)]⟩`.
    fn last_level_matrix(&self, cm: &CMatrix) -> CMatrix {
        let w = self.weights;
        CMatrix::from_fn(cm.nrows(), cm.ncols(), |a, b| cm[(a, b)] * self.p[(b, a)] * (w[a] - w[b]))
    }

    fn nested(&self, remaining: usize, cap: f64, cm: &CMatrix) -> Result<C64> {
        let nodes = self.grid.nodes_below(cap);
        if remaining == 1 {
            let y = self.last_level_matrix(cm);
            let mut acc = c(0.0);
            for (s, w) in nodes {
                let g = self.source.value(self.driven, s)?;
                if g == 0.0 {
                    continue;
                }
                acc += phase_sandwich(&y, &self.phases(s)) * (w * g);
            }
            return Ok(acc);
        }
        let mut acc = c(0.0);
        for (s, w) in nodes {
            let g = self.source.value(self.driven, s)?;
            if g == 0.0 {
                continue;
            }
            let ps = self.heisenberg_p(s);
            let next = cm * &ps - &ps * cm;
            acc += self.nested(remaining - 1, s, &next)? * (w * g);
        }
        Ok(acc)
    }

    fn evaluate(&self, n: usize, t: f64, o_t: &CMatrix) -> Result<C64> {
        if n == 1 {
            return self.nested(1, t, o_t);
        }
        let outer = self.grid.nodes_below(t);
        let parts = outer
            .par_iter()
            .map(|&(s, w)| {
                let g = self.source.value(self.driven, s)?;
                if g == 0.0 {
                    return Ok(c(0.0));
                }
                let ps = self.heisenberg_p(s);
                let next = o_t * &ps - &ps * o_t;
                Ok(self.nested(n - 1, s, &next)? * (w * g))
            })
            .collect::<Result<Vec<C64>>>()?;
        Ok(parts.into_iter().sum())
    }
}

fn simplex_count(per_axis: usize, n: usize) -> f64 {
    (0..n).map(|k| (per_axis + k) as f64 / (k + 1) as f64).product()
}

fn duhamel_on_grid(
    driven: &DrivenHamiltonian,
    ens: &GibbsEnsemble,
    o: &FockOperator,
    n: usize,
    t: f64,
    controls: &DuhamelControls,
    grid: PanelGrid,
) -> Result<(C64, usize)> {
    let per_axis = grid.panel_count() * grid.order();
    let count = simplex_count(per_axis, n);
    if count > controls.node_budget as f64 {
        return Err(Error::QuadratureBudgetExceeded { nodes: count as usize, budget: controls.node_budget });
    }
    let kernel = DuhamelKernel {
        driven,
        source: &controls.source,
        energies: ens.h_values(),
        weights: ens.weights(),
        p: ens.to_eigen(driven.perturbation().matrix()),
        grid,
    };
    let o_eig = ens.to_eigen(o.matrix());
    let e = ens.h_values();
    let o_t = CMatrix::from_fn(o_eig.nrows(), o_eig.ncols(), |a, b| o_eig[(a, b)] * C64::from_polar(1.0, t * (e[a] - e[b])));
    Ok((kernel.evaluate(n, t, &o_t)?, count as usize))
}

fn check_duhamel_inputs(n: usize, t: f64, controls: &DuhamelControls) -> Result<()> {
    if n == 0 || n > 3 {
        return Err(Error::InvalidParameter(format!("Duhamel order must be 1, 2 or 3, got {n}")));
    }
    if t > 0.0 {
        return Err(Error::PositiveTimeUnsupported { t });
    }
    if !(controls.t_start < t) {
        return Err(Error::InvalidParameter(format!("t_start {} must lie below t = {t}", controls.t_start)));
    }
    if !(controls.panel_width > 0.0) || controls.order == 0 {
        return Err(Error::InvalidParameter("panel width and order must be positive".into()));
    }
    Ok(())
}

/// `∫_{−T≤s_n≤…≤s_1≤t} Π g(ηs_j) ⟨[…[τ_t(O), τ_{s1}(𝒫)], …, τ_{sn}(𝒫)]⟩ ds`.
pub fn duhamel_coefficient_real(
    driven: &DrivenHamiltonian,
    ens: &GibbsEnsemble,
    o: &FockOperator,
    n: usize,
    t: f64,
    controls: &DuhamelControls,
) -> Result<C64> {
    check_duhamel_inputs(n, t, controls)?;
    let grid = PanelGrid::uniform(controls.t_start, t, controls.panel_width, controls.order)?;
    Ok(duhamel_on_grid(driven, ens, o, n, t, controls, grid)?.0)
}

/// Duhamel coefficient on a refined grid with node-doubling and tail estimates.
pub fn duhamel_report(
    driven: &DrivenHamiltonian,
    ens: &GibbsEnsemble,
    o: &FockOperator,
    n: usize,
    t: f64,
    controls: &DuhamelControls,
) -> Result<DuhamelReport> {
    check_duhamel_inputs(n, t, controls)?;
    let coarse_grid = PanelGrid::uniform(controls.t_start, t, controls.panel_width, controls.order)?;
    let fine_grid = coarse_grid.refined();
    let (coarse, _) = duhamel_on_grid(driven, ens, o, n, t, controls, coarse_grid)?;
    let (fine, nodes) = duhamel_on_grid(driven, ens, o, n, t, controls, fine_grid)?;
    let o_norm = operator_norm(o.matrix());
    let p_norm = operator_norm(driven.perturbation().matrix());
    let total = controls.source.tail(driven, 0.0);
    let tail = controls.source.tail(driven, -controls.t_start);
    let fact: f64 = (1..n).map(|k| k as f64).product();
    let truncation = 2f64.powi(n as i32) * o_norm * p_norm.powi(n as i32) * total.powi(n as i32 - 1) * tail / fact;
    Ok(DuhamelReport {
        order: n,
        value: fine,
        coarse_value: coarse,
        quadrature_estimate: (fine - coarse).norm(),
        truncation_bound: truncation,
        nodes,
    })
}

/// `Σ_{n≤n_max} (−iε)^n D_n(t)` added to `⟨O⟩`.
pub fn duhamel_partial_sum(ens: &GibbsEnsemble, o: &FockOperator, epsilon: f64, coefficients: &[C64]) -> C64 {
    let mut acc = ens.expectation(o);
    let mut factor = c(1.0);
    for d in coefficients {
        factor *= -I * epsilon;
        acc += factor * d;
    }
    acc
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiebRobinsonRow {
    pub y_index: usize,
    pub distance: f64,
    pub t: f64,
    pub s: f64,
    pub norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiebRobinsonFit {
    pub elapsed: f64,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiebRobinsonTable {
    pub rows: Vec<LiebRobinsonRow>,
    pub fits: Vec<LiebRobinsonFit>,
}

fn set_distance(geometry: &LatticeGeometry, a: &FockOperator, b: &FockOperator) -> Result<f64> {
    let mut d = f64::INFINITY;
    for &x in a.support() {
        for &y in b.support() {
            d = d.min(geometry.distance(x, y)?);
        }
    }
    Ok(if d.is_finite() { d } else { 0.0 })
}

/// `‖[𝒫_Y, 𝒰*(t;s) O_X 𝒰(t;s)]‖` for every `Y` and `(t, s)`, with exponential fits in the distance.
pub fn lieb_robinson_probe(
    driven: &DrivenHamiltonian,
    geometry: &LatticeGeometry,
    o_x: &FockOperator,
    y_ops: &[FockOperator],
    times: &[(f64, f64)],
    template: &PropagationControls,
) -> Result<LiebRobinsonTable> {
    let dyns = Dynamics::new(driven)?;
    let distances = y_ops.iter().map(|y| set_distance(geometry, o_x, y)).collect::<Result<Vec<f64>>>()?;
    let mut rows = Vec::new();
    for &(t, s) in times {
        let mut ctl = template.clone();
        ctl.t_start = s;
        ctl.t_end = t;
        let u = dyns.propagate_eig(driven, &ctl)?.unitary;
        let heis = u.matrix().adjoint() * o_x.matrix() * u.matrix();
        let norms: Vec<f64> = y_ops.par_iter().map(|y| operator_norm(&(y.matrix() * &heis - &heis * y.matrix()))).collect();
        for (k, norm) in norms.into_iter().enumerate() {
            rows.push(LiebRobinsonRow { y_index: k, distance: distances[k], t, s, norm });
        }
    }
    let mut groups: BTreeMap<u64, Vec<&LiebRobinsonRow>> = BTreeMap::new();
    for r in &rows {
        groups.entry((r.t - r.s).to_bits()).or_default().push(r);
    }
    let mut fits = Vec::new();
    for (bits, group) in groups {
        let pts: Vec<(f64, f64)> = group.iter().filter(|r| r.norm > 1e-300).map(|r| (r.distance, r.norm.ln())).collect();
        let (xs, ys): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        if let Ok(f) = linear_fit(&xs, &ys) {
            fits.push(LiebRobinsonFit {
                elapsed: f64::from_bits(bits),
                slope: f.slope,
                intercept: f.intercept,
                r_squared: f.r_squared,
            });
        }
    }
    Ok(LiebRobinsonTable { rows, fits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::gibbs_state;
    use crate::hamiltonian::{bond_current, build_quadratic, density_modulation, QuadraticKernel};
    use crate::lattice::FockBasis;
    use crate::linalg::spectral_map;
    use crate::switch::SwitchSpec;

    fn model(l: usize) -> (FockBasis, FockOperator, FockOperator) {
        let g = LatticeGeometry::chain(l);
        let b = FockBasis::with_default_budget(g.clone()).unwrap();
        let k = QuadraticKernel::nearest_neighbor(&g, -1.0, |x| 0.3 * x as f64).unwrap();
        let h = build_quadratic(&b, &k).unwrap();
        let p = density_modulation(&b, &[(0, 1.0), (1, -0.4)]).unwrap();
        (b, h, p)
    }

    #[test]
    fn free_propagation_is_exact() {
        let (_, h, p) = model(3);
        let d = DrivenHamiltonian::new(h.clone(), p, 0.0, SwitchSpec::exponential(), 0.5).unwrap();
        let mut ctl = PropagationControls::new(&d, -0.5, SwitchSource::True).unwrap();
        ctl.t_start = -3.2;
        let u = propagate(&d, &ctl).unwrap().unitary;
        let (vals, vecs) = hermitian_eigen(h.matrix()).unwrap();
        let exact = spectral_map(&vals, &vecs, |e| C64::from_polar(1.0, -e * 2.7));
        assert!(max_abs(&(u.matrix() - exact)) < 1e-9);
    }

    #[test]
    fn driven_propagation_stays_unitary_and_is_fourth_order() {
        let (_, h, p) = model(3);
        let d = DrivenHamiltonian::new(h, p, 0.6, SwitchSpec::exponential(), 0.5).unwrap();
        let mut ctl = PropagationControls::new(&d, 0.0, SwitchSource::True).unwrap();
        ctl.t_start = -6.0;
        let fine = propagate(&d, &ctl).unwrap();
        assert!(fine.unitarity_defect <= 1e-9);
        assert!(unitarity_defect(fine.unitary.matrix()) <= 1e-9);
        let run = |step: f64| {
            let mut c2 = ctl.clone();
            c2.step = step;
            propagate(&d, &c2).unwrap().unitary_eig
        };
        let (u1, u2, u4) = (run(0.4), run(0.2), run(0.1));
        let d1 = max_abs(&(&u1 - &u2));
        let d2 = max_abs(&(&u2 - &u4));
        assert!(d1 <= 16.0 * d2 * 1.1 && d1 >= 10.0 * d2, "ratio {}", d1 / d2);
    }

    #[test]
    fn step_halving_estimate_is_attached() {
        let (_, h, p) = model(2);
        let d = DrivenHamiltonian::new(h, p, 0.3, SwitchSpec::exponential(), 1.0).unwrap();
        let mut ctl = PropagationControls::new(&d, 0.0, SwitchSource::True).unwrap();
        ctl.error_estimate = true;
        let r = propagate(&d, &ctl).unwrap();
        let est = r.local_error_estimate.unwrap();
        assert!((0.0..1e-8).contains(&est));
    }

    #[test]
    fn invalid_controls_rejected() {
        let (_, h, p) = model(2);
        let d = DrivenHamiltonian::new(h, p, 0.3, SwitchSpec::exponential(), 1.0).unwrap();
        let mut ctl = PropagationControls::new(&d, 0.0, SwitchSource::True).unwrap();
        ctl.step = 0.0;
        assert!(propagate(&d, &ctl).is_err());
        ctl.step = 0.01;
        ctl.t_end = 0.5;
        assert!(propagate(&d, &ctl).is_err());
    }

    #[test]
    fn default_cutoff_for_exponential_switch() {
        let (_, h, p) = model(2);
        let d = DrivenHamiltonian::new(h, p, 0.3, SwitchSpec::exponential(), 0.5).unwrap();
        let ctl = PropagationControls::new(&d, 0.0, SwitchSource::True).unwrap();
        assert!((ctl.t_start + 1e8f64.ln() / 0.5).abs() < 1e-6);
    }

    #[test]
    fn unperturbed_gibbs_is_stationary() {
        let (b, h, p) = model(3);
        let d = DrivenHamiltonian::new(h.clone(), p, 0.0, SwitchSpec::exponential(), 0.5).unwrap();
        let ens = gibbs_state(&h, 2.0, 0.1).unwrap();
        let ctl = PropagationControls::new(&d, 0.0, SwitchSource::True).unwrap();
        let st = evolve_gibbs(&d, &ens, -1.0, &ctl).unwrap();
        assert!(max_abs(&(&st.rho - ens.density_matrix())) < 1e-12);
        let _ = b;
    }

    #[test]
    fn evolved_state_invariants_and_real_expectations() {
        let (b, h, p) = model(3);
        let d = DrivenHamiltonian::new(h.clone(), p, 0.2, SwitchSpec::exponential(), 0.5).unwrap();
        let ens = gibbs_state(&h, 2.0, 0.1).unwrap();
        let ctl = PropagationControls::new(&d, 0.0, SwitchSource::True).unwrap();
        let st = evolve_gibbs(&d, &ens, 0.0, &ctl).unwrap();
        let (tr, herm, low) = st.invariants().unwrap();
        assert!(tr < 1e-10 && herm < 1e-12 && low > -1e-10);
        let j = bond_current(&b, 0, 1).unwrap();
        assert!(st.expectation(&j).im.abs() < 1e-12);
    }

    #[test]
    fn duhamel_vanishes_for_commuting_perturbation() {
        let (b, h, _) = model(3);
        let n = b.total_number();
        let d = DrivenHamiltonian::new(h.clone(), n, 0.1, SwitchSpec::exponential(), 0.5).unwrap();
        let ens = gibbs_state(&h, 2.0, 0.0).unwrap();
        let o = b.number(1).unwrap();
        let ctl = DuhamelControls::new(&d, SwitchSource::True).unwrap();
        assert!(duhamel_coefficient_real(&d, &ens, &o, 1, 0.0, &ctl).unwrap().norm() < 1e-13);
    }

    #[test]
    fn first_order_matches_direct_commutator_integral() {
        let (b, h, p) = model(2);
        let d = DrivenHamiltonian::new(h.clone(), p.clone(), 0.1, SwitchSpec::exponential(), 1.0).unwrap();
        let ens = gibbs_state(&h, 1.5, 0.0).unwrap();
        let o = bond_current(&b, 0, 1).unwrap();
        let mut ctl = DuhamelControls::new(&d, SwitchSource::True).unwrap();
        ctl.t_start = -8.0;
        let t = -0.3;
        let value = duhamel_coefficient_real(&d, &ens, &o, 1, t, &ctl).unwrap();
        // Oracle: dense operators on a fine trapezoid grid.
        let ot = ens.real_time_evolve(&o, t);
        let m = 16000;
        let hstep = (t - ctl.t_start) / m as f64;
        let mut acc = c(0.0);
        for k in 0..=m {
            let s = ctl.t_start + k as f64 * hstep;
            let ps = ens.real_time_evolve(&p, s);
            let w = if k == 0 || k == m { 0.5 } else { 1.0 };
            acc += ens.expectation(&ot.commutator(&ps)) * (w * hstep * s.exp());
        }
        assert!((value - acc).norm() < 1e-6, "{value} vs {acc}");
    }

    #[test]
    fn duhamel_series_reproduces_dynamics() {
        let (b, h, p) = model(3);
        let ens = gibbs_state(&h, 2.0, 0.1).unwrap();
        let o = bond_current(&b, 0, 1).unwrap();
        let base = DrivenHamiltonian::new(h.clone(), p, 1.0, SwitchSpec::exponential(), 1.0).unwrap();
        let mut dctl = DuhamelControls::new(&base, SwitchSource::True).unwrap();
        dctl.t_start = -22.0;
        let coeffs: Vec<C64> = (1..=2).map(|n| duhamel_coefficient_real(&base, &ens, &o, n, 0.0, &dctl).unwrap()).collect();
        let eps = [0.02, 0.04, 0.08];
        let rem: Vec<f64> = eps
            .iter()
            .map(|&e| {
                let d = base.with_epsilon(e);
                let mut ctl = PropagationControls::new(&d, 0.0, SwitchSource::True).unwrap();
                ctl.t_start = -22.0;
                let st = evolve_gibbs(&d, &ens, 0.0, &ctl).unwrap();
                (st.expectation(&o) - duhamel_partial_sum(&ens, &o, e, &coeffs)).norm()
            })
            .collect();
        let slope = crate::fit::loglog_fit(&eps, &rem).unwrap().slope;
        assert!(slope >= 2.7, "slope {slope}, remainders {rem:?}");
    }

    #[test]
    fn report_budgets_are_finite() {
        let (b, h, p) = model(2);
        let d = DrivenHamiltonian::new(h.clone(), p, 0.1, SwitchSpec::exponential(), 1.0).unwrap();
        let ens = gibbs_state(&h, 1.5, 0.0).unwrap();
        let ctl = DuhamelControls::new(&d, SwitchSource::True).unwrap();
        let r = duhamel_report(&d, &ens, &bond_current(&b, 0, 1).unwrap(), 2, 0.0, &ctl).unwrap();
        assert!(r.quadrature_estimate < 1e-8 && r.truncation_bound < 1e-6);
        let mut tight = ctl.clone();
        tight.node_budget = 10;
        assert!(matches!(
            duhamel_coefficient_real(&d, &ens, &b.number(0).unwrap(), 2, 0.0, &tight),
            Err(Error::QuadratureBudgetExceeded { .. })
        ));
    }

    #[test]
    fn lieb_robinson_examples() {
        let g = LatticeGeometry::chain(8);
        let b = FockBasis::with_default_budget(g.clone()).unwrap();
        let k = QuadraticKernel::nearest_neighbor(&g, -1.0, |_| 0.0).unwrap();
        let h = build_quadratic(&b, &k).unwrap();
        let p = b.number(0).unwrap();
        let d = DrivenHamiltonian::new(h, p, 0.0, SwitchSpec::exponential(), 1.0).unwrap();
        let o = b.number(0).unwrap();
        let ys: Vec<FockOperator> = (0..=4).map(|y| b.hopping(y, y).unwrap()).collect();
        let ctl = PropagationControls::new(&d, 0.0, SwitchSource::True).unwrap();
        let table = lieb_robinson_probe(&d, &g, &o, &ys, &[(0.0, 0.0), (0.0, -0.5)], &ctl).unwrap();
        for r in table.rows.iter().filter(|r| r.t == r.s) {
            if r.distance > 0.0 {
                assert!(r.norm < 1e-12);
            }
            assert!(r.norm <= 2.0 + 1e-12);
        }
        let fit = table.fits.iter().find(|f| f.elapsed == 0.5).unwrap();
        assert!(fit.slope < 0.0 && fit.r_squared >= 0.9, "{fit:?}");
    }
}
