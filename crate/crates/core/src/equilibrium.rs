//! Gibbs states, Euclidean evolution, time-ordered moments and cumulants.
//!
//! All traces are evaluated in the eigenbasis of `K = 𝓗 − μ𝒩`. `K` is
//! diagonalized sector by sector in the particle number, so every eigenvector
//! also diagonalizes `𝓗` and `𝒩` and real and imaginary time evolutions
//! share one basis. Boltzmann factors are shifted by the smallest eigenvalue
//! of `K`, so every factor in a time-ordered chain lies in `[0, 1]`.

use std::sync::OnceLock;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hamiltonian::DrivenHamiltonian;
use crate::lattice::FockOperator;
use crate::linalg::{c, hermitian_eigen, trace_of_product, CMatrix, C64};
use crate::quadrature::{PanelGrid, DEFAULT_NODE_BUDGET};

pub const DEFAULT_EXPONENT_BUDGET: f64 = 700.0;
pub const DEFAULT_MAX_CUMULANT_ORDER: usize = 4;

#[derive(Debug, Clone)]
pub struct TimedObservable {
    pub operator: FockOperator,
    pub time: f64,
}

impl TimedObservable {
    pub fn new(operator: FockOperator, time: f64) -> Self {
        Self { operator, time }
    }
}

/// Operator already rotated into the ensemble eigenbasis.
#[derive(Debug, Clone)]
pub struct Prepared {
    eig: CMatrix,
}

impl Prepared {
    pub fn matrix(&self) -> &CMatrix {
        &self.eig
    }
}

#[derive(Debug, Clone)]
pub struct GibbsEnsemble {
    beta: f64,
    mu: f64,
    k_values: Vec<f64>,
    h_values: Vec<f64>,
    numbers: Vec<f64>,
    vectors: CMatrix,
    weights: Vec<f64>,
    log_z: f64,
    exponent_budget: f64,
    max_cumulant_order: usize,
    rho: OnceLock<CMatrix>,
}

/// `ρ = e^{−β(𝓗−μ𝒩)}/𝒵`.
pub fn gibbs_state(h: &FockOperator, beta: f64, mu: f64) -> Result<GibbsEnsemble> {
    GibbsEnsemble::new(h, beta, mu)
}

impl GibbsEnsemble {
    pub fn new(h: &FockOperator, beta: f64, mu: f64) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() || !mu.is_finite() {
            return Err(Error::InvalidParameter(format!("Gibbs state needs beta > 0 and finite mu, got {beta}, {mu}")));
        }
        if !h.gauge_invariant() {
            return Err(Error::InvalidParameter("Hamiltonian does not commute with the number operator".into()));
        }
        if !h.is_self_adjoint(1e-12) {
            return Err(Error::InvalidParameter("Hamiltonian is not self-adjoint".into()));
        }
        let dim = h.dim();
        let modes = dim.trailing_zeros() as usize;
        let mut sectors = vec![Vec::new(); modes + 1];
        for s in 0..dim {
            sectors[s.count_ones() as usize].push(s);
        }
        let blocks: Vec<(usize, Vec<f64>, CMatrix)> = sectors
            .par_iter()
            .enumerate()
            .map(|(n, idx)| {
                let block = CMatrix::from_fn(idx.len(), idx.len(), |i, j| h.matrix()[(idx[i], idx[j])]);
                hermitian_eigen(&block).map(|(v, w)| (n, v, w))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut entries: Vec<(f64, f64, usize, usize)> = Vec::with_capacity(dim);
        for (n, vals, _) in &blocks {
            for (k, &e) in vals.iter().enumerate() {
                entries.push((e - mu * *n as f64, e, *n, k));
            }
        }
        entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3)));
        let mut vectors = CMatrix::zeros(dim, dim);
        for (col, &(_, _, n, k)) in entries.iter().enumerate() {
            let idx = &sectors[n];
            let w = &blocks[n].2;
            for (i, &s) in idx.iter().enumerate() {
                vectors[(s, col)] = w[(i, k)];
            }
        }
        let k_values: Vec<f64> = entries.iter().map(|e| e.0).collect();
        let h_values: Vec<f64> = entries.iter().map(|e| e.1).collect();
        let numbers: Vec<f64> = entries.iter().map(|e| e.2 as f64).collect();
        let k_min = k_values[0];
        let boltz: Vec<f64> = k_values.iter().map(|k| (-beta * (k - k_min)).exp()).collect();
        let z_shift: f64 = boltz.iter().sum();
        let weights = boltz.iter().map(|b| b / z_shift).collect();
        let log_z = z_shift.ln() - beta * k_min;
        Ok(Self {
            beta,
            mu,
            k_values,
            h_values,
            numbers,
            vectors,
            weights,
            log_z,
            exponent_budget: DEFAULT_EXPONENT_BUDGET,
            max_cumulant_order: DEFAULT_MAX_CUMULANT_ORDER,
            rho: OnceLock::new(),
        })
    }

    pub fn with_exponent_budget(mut self, budget: f64) -> Self {
        self.exponent_budget = budget;
        self
    }

    pub fn with_max_cumulant_order(mut self, order: usize) -> Self {
        self.max_cumulant_order = order;
        self
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn dim(&self) -> usize {
        self.k_values.len()
    }

    /// Eigenvalues of `K` in ascending order.
    pub fn k_values(&self) -> &[f64] {
        &self.k_values
    }

    /// Eigenvalues of `𝓗` on the same eigenvectors.
    pub fn h_values(&self) -> &[f64] {
        &self.h_values
    }

    pub fn particle_numbers(&self) -> &[f64] {
        &self.numbers
    }

    pub fn vectors(&self) -> &CMatrix {
        &self.vectors
    }

    /// Boltzmann probabilities of the eigenvectors.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_partition(&self) -> f64 {
        self.log_z
    }

    pub fn spread(&self) -> f64 {
        self.k_values.last().unwrap() - self.k_values[0]
    }

    pub fn max_cumulant_order(&self) -> usize {
        self.max_cumulant_order
    }

    pub fn density_matrix(&self) -> &CMatrix {
        self.rho.get_or_init(|| {
            let mut scaled = self.vectors.clone();
            for (k, &p) in self.weights.iter().enumerate() {
                for x in scaled.column_mut(k).iter_mut() {
                    *x *= p;
                }
            }
            scaled * self.vectors.adjoint()
        })
    }

    pub fn to_eigen(&self, m: &CMatrix) -> CMatrix {
        self.vectors.adjoint() * m * &self.vectors
    }

    pub fn from_eigen(&self, m: &CMatrix) -> CMatrix {
        &self.vectors * m * self.vectors.adjoint()
    }

    pub fn prepare(&self, op: &FockOperator) -> Prepared {
        Prepared { eig: self.to_eigen(op.matrix()) }
    }

    pub fn expectation(&self, op: &FockOperator) -> C64 {
        self.expectation_matrix(op.matrix())
    }

    pub fn expectation_matrix(&self, m: &CMatrix) -> C64 {
        trace_of_product(self.density_matrix(), m)
    }

    fn check_exponent(&self, t: f64) -> Result<()> {
        let exponent = t.abs() * self.spread();
        if exponent > self.exponent_budget {
            return Err(Error::OverflowRisk { exponent, budget: self.exponent_budget });
        }
        Ok(())
    }

    /// `γ_t(O) = e^{tK} O e^{−tK}`.
    pub fn euclidean_evolve(&self, op: &FockOperator, t: f64) -> Result<FockOperator> {
        self.check_exponent(t)?;
        let e = self.to_eigen(op.matrix());
        let k = &self.k_values;
        let evolved = CMatrix::from_fn(e.nrows(), e.ncols(), |a, b| e[(a, b)] * (t * (k[a] - k[b])).exp());
        Ok(op.with_matrix(self.from_eigen(&evolved)))
    }

    /// `τ_t(O) = e^{i𝓗t} O e^{−i𝓗t}`.
    pub fn real_time_evolve(&self, op: &FockOperator, t: f64) -> FockOperator {
        let e = self.to_eigen(op.matrix());
        let h = &self.h_values;
        let evolved = CMatrix::from_fn(e.nrows(), e.ncols(), |a, b| e[(a, b)] * C64::from_polar(1.0, t * (h[a] - h[b])));
        op.with_matrix(self.from_eigen(&evolved))
    }

    /// `⟨γ_{t1}(O1) ⋯ γ_{tk}(Ok)⟩` in the given order, for arbitrary real times.
    pub fn ordered_product(&self, items: &[(&Prepared, f64)]) -> Result<C64> {
        if items.is_empty() {
            return Ok(c(1.0));
        }
        let first = items[0].1;
        let last = items[items.len() - 1].1;
        let mut gaps = vec![self.beta - first + last];
        gaps.extend(items.windows(2).map(|w| w[0].1 - w[1].1));
        for &g in &gaps {
            if g < 0.0 {
                self.check_exponent(g)?;
            }
        }
        Ok(self.chain(items, &gaps))
    }

    fn boltzmann(&self, tau: f64) -> Vec<f64> {
        let k0 = self.k_values[0];
        self.k_values.iter().map(|k| (-tau * (k - k0)).exp()).collect()
    }

    /// Tr[D(g0) O1 D(g1) O2 ⋯ D(g_{k−1}) Ok] / Z̃ with D(τ) = e^{−τ(K−K_min)}.
    fn chain(&self, items: &[(&Prepared, f64)], gaps: &[f64]) -> C64 {
        let z: f64 = self.boltzmann(self.beta).iter().sum();
        let w0 = self.boltzmann(gaps[0]);
        let n = self.dim();
        if items.len() == 1 {
            let o = &items[0].0.eig;
            return (0..n).map(|a| o[(a, a)] * w0[a]).sum::<C64>() / z;
        }
        let mut x = CMatrix::from_fn(n, n, |a, b| items[0].0.eig[(a, b)] * w0[a]);
        for (i, item) in items.iter().enumerate().skip(1) {
            let d = self.boltzmann(gaps[i]);
            for (b, &db) in d.iter().enumerate() {
                for v in x.column_mut(b).iter_mut() {
                    *v *= db;
                }
            }
            if i + 1 == items.len() {
                return trace_of_product(&x, &item.0.eig) / z;
            }
            x = &x * &item.0.eig;
        }
        unreachable!("loop returns on the last item")
    }

    /// |⟨γ_{t1}(O1)γ_{t2}(O2)⟩ − ⟨γ_{t2+β}(O2)γ_{t1}(O1)⟩| / (1 + |⟨γ_{t1}(O1)γ_{t2}(O2)⟩|).
    pub fn kms_residual(&self, o1: &FockOperator, o2: &FockOperator, t1: f64, t2: f64) -> Result<f64> {
        let (p1, p2) = (self.prepare(o1), self.prepare(o2));
        let lhs = self.ordered_product(&[(&p1, t1), (&p2, t2)])?;
        let rhs = self.ordered_product(&[(&p2, t2 + self.beta), (&p1, t1)])?;
        Ok((lhs - rhs).norm() / (1.0 + lhs.norm()))
    }

    fn reduce(&self, t: f64) -> f64 {
        let r = t.rem_euclid(self.beta);
        if r >= self.beta {
            0.0
        } else {
            r
        }
    }

    fn check_even(items: &[TimedObservable]) -> Result<()> {
        for (index, it) in items.iter().enumerate() {
            if !it.operator.is_even() {
                return Err(Error::OddOperatorUnsupported { index });
            }
        }
        Ok(())
    }

    /// `⟨T γ_{t1}(O1) ⋯ γ_{tn}(On)⟩` for even operators with β-periodic extension.
    pub fn time_ordered_expectation(&self, items: &[TimedObservable]) -> Result<C64> {
        Self::check_even(items)?;
        let prepared: Vec<Prepared> = items.iter().map(|it| self.prepare(&it.operator)).collect();
        let timed: Vec<(&Prepared, f64)> = prepared.iter().zip(items).map(|(p, it)| (p, it.time)).collect();
        Ok(self.time_ordered_prepared(&timed))
    }

    /// Time-ordered moment of prepared even operators; ties keep input order.
    pub fn time_ordered_prepared(&self, items: &[(&Prepared, f64)]) -> C64 {
        if items.is_empty() {
            return c(1.0);
        }
        let mut order: Vec<(usize, f64)> = items.iter().enumerate().map(|(i, it)| (i, self.reduce(it.1))).collect();
        order.sort_by(|a, b| b.1.total_cmp(&a.1));
        let sorted: Vec<(&Prepared, f64)> = order.iter().map(|&(i, t)| (items[i].0, t)).collect();
        let mut gaps = vec![self.beta - sorted[0].1 + sorted[sorted.len() - 1].1];
        gaps.extend(sorted.windows(2).map(|w| w[0].1 - w[1].1));
        self.chain(&sorted, &gaps)
    }

    /// Connected time-ordered correlation by partition inversion.
    pub fn time_ordered_cumulant(&self, items: &[TimedObservable]) -> Result<C64> {
        if items.len() > self.max_cumulant_order {
            return Err(Error::CumulantOrderExceeded { order: items.len(), max: self.max_cumulant_order });
        }
        Self::check_even(items)?;
        let prepared: Vec<Prepared> = items.iter().map(|it| self.prepare(&it.operator)).collect();
        let timed: Vec<(&Prepared, f64)> = prepared.iter().zip(items).map(|(p, it)| (p, it.time)).collect();
        Ok(self.cumulant_prepared(&timed))
    }

    /// Time-ordered moments of every non-empty subset, indexed by bitmask.
    pub fn subset_moments(&self, items: &[(&Prepared, f64)]) -> Vec<C64> {
        let n = items.len();
        let mut out = vec![c(1.0); 1 << n];
        for (mask, slot) in out.iter_mut().enumerate().skip(1) {
            let sub: Vec<(&Prepared, f64)> = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| items[i]).collect();
            *slot = self.time_ordered_prepared(&sub);
        }
        out
    }

    pub fn cumulant_prepared(&self, items: &[(&Prepared, f64)]) -> C64 {
        let moments = self.subset_moments(items);
        cumulant_from_moments(items.len(), &moments)
    }

    /// `Σ_i min_m |t_i − mβ|`.
    pub fn beta_seminorm(&self, times: &[f64]) -> f64 {
        beta_seminorm(times, self.beta)
    }
}

/// `Σ_i min_{m∈ℤ} |t_i − mβ|`.
pub fn beta_seminorm(times: &[f64], beta: f64) -> f64 {
    times
        .iter()
        .map(|t| {
            let r = t.rem_euclid(beta);
            r.min(beta - r)
        })
        .sum()
}

/// All set partitions of `{0, …, n−1}` as lists of bitmasks.
pub fn set_partitions(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut labels = vec![0usize; n];
    fn rec(i: usize, blocks: usize, labels: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        let n = labels.len();
        if i == n {
            let mut masks = vec![0usize; blocks];
            for (k, &b) in labels.iter().enumerate() {
                masks[b] |= 1 << k;
            }
            out.push(masks);
            return;
        }
        for b in 0..=blocks {
            labels[i] = b;
            rec(i + 1, blocks.max(b + 1), labels, out);
        }
    }
    if n == 0 {
        return vec![Vec::new()];
    }
    rec(0, 0, &mut labels, &mut out);
    out
}

/// `Σ_P (−1)^{|P|−1}(|P|−1)! Π_{J∈P} m(J)`.
pub fn cumulant_from_moments(n: usize, moments: &[C64]) -> C64 {
    let full = (1usize << n) - 1;
    let mut acc = c(0.0);
    for p in set_partitions(n) {
        let k = p.len();
        let coeff = if k % 2 == 1 { 1.0 } else { -1.0 } * (1..k).map(|j| j as f64).product::<f64>();
        let prod: C64 = p.iter().map(|&m| moments[m & full]).product();
        acc += prod * coeff;
    }
    acc
}

/// `Σ_P Π_{J∈P} κ(J)` from a table of cumulants of every subset.
pub fn moments_from_cumulants(n: usize, cumulants: &[C64]) -> C64 {
    set_partitions(n).iter().map(|p| p.iter().map(|&m| cumulants[m]).product::<C64>()).sum()
}

/// Integrand `κ(γ_{s1}(P); …; γ_{sn}(P); O)` with `O` at Euclidean time 0.
#[derive(Debug, Clone)]
pub struct PerturbationCumulant<'a> {
    ens: &'a GibbsEnsemble,
    p: Prepared,
    o: Prepared,
}

impl<'a> PerturbationCumulant<'a> {
    pub fn new(ens: &'a GibbsEnsemble, p: &FockOperator, o: &FockOperator) -> Result<Self> {
        if !p.is_even() {
            return Err(Error::OddOperatorUnsupported { index: 0 });
        }
        if !o.is_even() {
            return Err(Error::OddOperatorUnsupported { index: 1 });
        }
        Ok(Self { ens, p: ens.prepare(p), o: ens.prepare(o) })
    }

    pub fn ensemble(&self) -> &GibbsEnsemble {
        self.ens
    }

    pub fn eval(&self, s: &[f64]) -> C64 {
        let mut items: Vec<(&Prepared, f64)> = s.iter().map(|&t| (&self.p, t)).collect();
        items.push((&self.o, 0.0));
        self.ens.cumulant_prepared(&items)
    }

    /// Cumulant of the perturbations alone (no observable).
    pub fn eval_vacuum(&self, s: &[f64]) -> C64 {
        let items: Vec<(&Prepared, f64)> = s.iter().map(|&t| (&self.p, t)).collect();
        self.ens.cumulant_prepared(&items)
    }
}

/// Per-axis panel width used for Euclidean simplex integrals.
pub fn euclidean_grid(beta: f64, panel_width: f64, order: usize) -> Result<PanelGrid> {
    PanelGrid::uniform(0.0, beta, panel_width.min(beta), order)
}

/// `∫_{[0,β)^n} κ(γ_{s1}(P); …; γ_{sn}(P); O) ds` as `n!` times the ordered simplex.
pub fn euclidean_cumulant_integral(kernel: &PerturbationCumulant<'_>, n: usize, grid: &PanelGrid) -> Result<C64> {
    let pts = grid.simplex(n, DEFAULT_NODE_BUDGET)?;
    let partial: Vec<C64> = pts.par_iter().map(|(s, w)| kernel.eval(s) * *w).collect();
    let fact: f64 = (1..=n).map(|k| k as f64).product();
    Ok(partial.into_iter().sum::<C64>() * fact)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstantaneousMode {
    Direct,
    Series { n_max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureControls {
    pub panel_width: f64,
    pub order: usize,
}

impl Default for QuadratureControls {
    fn default() -> Self {
        Self { panel_width: 0.5, order: 8 }
    }
}

/// `⟨O⟩_t` in the Gibbs state of `𝓗 + εg(ηt)𝒫` at the same β, μ.
pub fn instantaneous_gibbs_expectation(
    driven: &DrivenHamiltonian,
    beta: f64,
    mu: f64,
    o: &FockOperator,
    t: f64,
    mode: InstantaneousMode,
    quad: QuadratureControls,
) -> Result<C64> {
    let g = driven.switch().eval(driven.eta() * t)?;
    match mode {
        InstantaneousMode::Direct => {
            let h = driven.base().with_matrix(driven.with_switch_value(g));
            Ok(GibbsEnsemble::new(&h, beta, mu)?.expectation(o))
        }
        InstantaneousMode::Series { n_max } => {
            let ens = GibbsEnsemble::new(driven.base(), beta, mu)?.with_max_cumulant_order(n_max + 1);
            let mut value = ens.expectation(o);
            let x = -driven.epsilon() * g;
            if x == 0.0 {
                return Ok(value);
            }
            let kernel = PerturbationCumulant::new(&ens, driven.perturbation(), o)?;
            let grid = euclidean_grid(beta, quad.panel_width, quad.order)?;
            let mut fact = 1.0;
            let mut growth = 0;
            let mut prev = f64::INFINITY;
            for n in 1..=n_max {
                fact *= n as f64;
                let term = euclidean_cumulant_integral(&kernel, n, &grid)? * (x.powi(n as i32) / fact);
                if term.norm() > prev {
                    growth += 1;
                    if growth >= 3 {
                        return Err(Error::SeriesDivergenceSuspected { order: n });
                    }
                } else {
                    growth = 0;
                }
                prev = term.norm();
                value += term;
            }
            Ok(value)
        }
    }
}
