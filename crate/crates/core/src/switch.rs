//! Switch functions `g(t) = ∫ e^{ξt} h(ξ) dξ`, their β-periodic approximants
//! and the inverse-Laplace construction of `h`.
//!
//! A sampled density is interpreted as the piecewise-linear interpolant of its
//! samples (zero outside the grid). Masses, bin integrals and `g(t)` are exact
//! integrals of that interpolant; moments with powers of ξ use the trapezoid rule.
//! The rational switch uses its gamma density in closed form.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::C64;
use crate::quadrature::{GaussRule, PanelGrid};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Atom {
    pub rate: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledDensity {
    grid: Vec<f64>,
    values: Vec<f64>,
}

impl SampledDensity {
    pub fn new(grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if grid.len() != values.len() || grid.len() < 2 {
            return Err(Error::InvalidParameter("density needs at least two paired samples".into()));
        }
        if grid[0] < 0.0 || grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter("density grid must be non-negative and increasing".into()));
        }
        if values.iter().chain(&grid).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("density samples must be finite".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Interpolated value, zero outside the grid.
    pub fn value(&self, xi: f64) -> f64 {
        if xi < self.grid[0] || xi > *self.grid.last().unwrap() {
            return 0.0;
        }
        let k = self.grid.partition_point(|&g| g <= xi).clamp(1, self.grid.len() - 1);
        let (x0, x1) = (self.grid[k - 1], self.grid[k]);
        let (h0, h1) = (self.values[k - 1], self.values[k]);
        h0 + (h1 - h0) * (xi - x0) / (x1 - x0)
    }

    fn segments(&self) -> impl Iterator<Item = (f64, f64, f64, f64)> + '_ {
        self.grid.windows(2).zip(self.values.windows(2)).map(|(x, h)| (x[0], x[1], h[0], h[1]))
    }

    /// ∫_a^b h and ∫_a^b |h| of the interpolant.
    fn masses_between(&self, a: f64, b: f64) -> (f64, f64) {
        let mut signed = 0.0;
        let mut abs = 0.0;
        for (x0, x1, h0, h1) in self.segments() {
            let lo = x0.max(a);
            let hi = x1.min(b);
            if hi <= lo {
                continue;
            }
            let slope = (h1 - h0) / (x1 - x0);
            let va = h0 + slope * (lo - x0);
            let vb = h0 + slope * (hi - x0);
            signed += 0.5 * (va + vb) * (hi - lo);
            abs += abs_linear_integral(va, vb, hi - lo);
        }
        (signed, abs)
    }

    /// ∫ e^{ξt} h(ξ) dξ of the interpolant.
    fn laplace(&self, t: f64) -> f64 {
        self.segments()
            .map(|(x0, x1, h0, h1)| {
                let d = x1 - x0;
                let u = t * d;
                (t * x0).exp() * d * (h0 * phi1(u) + (h1 - h0) * phi2(u))
            })
            .sum()
    }

    fn abs_laplace(&self, t: f64) -> f64 {
        self.segments()
            .map(|(x0, x1, h0, h1)| {
                let d = x1 - x0;
                if h0 * h1 >= 0.0 {
                    let u = t * d;
                    ((t * x0).exp() * d * (h0 * phi1(u) + (h1 - h0) * phi2(u))).abs()
                } else {
                    let xc = x0 + d * h0 / (h0 - h1);
                    let left = (t * x0).exp() * (xc - x0) * (h0 * phi1(t * (xc - x0)) - h0 * phi2(t * (xc - x0)));
                    let right = (t * xc).exp() * (x1 - xc) * h1 * phi2(t * (x1 - xc));
                    left.abs() + right.abs()
                }
            })
            .sum()
    }

    /// Trapezoid estimate of ∫ ξ^p |h(ξ)| over the positive grid nodes.
    fn abs_moment(&self, p: f64, lo: f64, hi: f64) -> f64 {
        let mut acc = 0.0;
        for (x0, x1, h0, h1) in self.segments() {
            if x0 <= 0.0 || x1 <= lo || x0 >= hi {
                continue;
            }
            acc += 0.5 * (x1 - x0) * (x0.powf(p) * h0.abs() + x1.powf(p) * h1.abs());
        }
        acc
    }
}

fn abs_linear_integral(va: f64, vb: f64, len: f64) -> f64 {
    if va * vb >= 0.0 {
        0.5 * (va + vb).abs() * len
    } else {
        let frac = va.abs() / (va.abs() + vb.abs());
        0.5 * len * (va.abs() * frac + vb.abs() * (1.0 - frac))
    }
}

/// ∫_0^1 e^{us} ds.
fn phi1(u: f64) -> f64 {
    if u.abs() < 0.5 {
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..20 {
            term *= u / (k + 1) as f64;
            sum += term;
        }
        sum
    } else {
        u.exp_m1() / u
    }
}

/// ∫_0^1 s e^{us} ds.
fn phi2(u: f64) -> f64 {
    if u.abs() < 0.5 {
        let mut fact = 1.0;
        let mut pow = 1.0;
        let mut sum = 0.5;
        for k in 1..20 {
            fact *= k as f64;
            pow *= u;
            sum += pow / (fact * (k + 2) as f64);
        }
        sum
    } else {
        (u.exp() * (u - 1.0) + 1.0) / (u * u)
    }
}

/// Continuous part of `h`: sampled, or the analytic gamma density
/// `a^n ξ^{n−1} e^{−aξ}/(n−1)!` of the normalized rational switch.
#[derive(Debug, Clone, PartialEq)]
pub enum Density {
    Sampled(SampledDensity),
    Gamma { a: f64, n: u32 },
}

/// `e^{−x} Σ_{k<n} x^k/k!`, the upper regularized incomplete gamma for integer n.
fn gamma_upper(n: u32, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..n {
        term *= x / k as f64;
        sum += term;
    }
    sum * (-x).exp()
}

/// Γ(n+p)/Γ(n) for integer p, infinite when n+p ≤ 0.
fn gamma_ratio(n: u32, p: i32) -> f64 {
    let np = n as i32 + p;
    if np <= 0 {
        return f64::INFINITY;
    }
    let mut r = 1.0;
    if p >= 0 {
        for k in 0..p {
            r *= (n as i32 + k) as f64;
        }
    } else {
        for k in np..n as i32 {
            r /= k as f64;
        }
    }
    r
}

impl Density {
    fn masses_between(&self, lo: f64, hi: f64) -> (f64, f64) {
        match self {
            Density::Sampled(d) => d.masses_between(lo, hi),
            Density::Gamma { a, n } => {
                let m = (gamma_upper(*n, a * lo.max(0.0)) - gamma_upper(*n, a * hi)).max(0.0);
                (m, m)
            }
        }
    }

    fn laplace(&self, t: f64) -> f64 {
        match self {
            Density::Sampled(d) => d.laplace(t),
            Density::Gamma { a, n } => (a / (a - t)).powi(*n as i32),
        }
    }

    fn abs_laplace(&self, t: f64) -> f64 {
        match self {
            Density::Sampled(d) => d.abs_laplace(t),
            Density::Gamma { .. } => self.laplace(t),
        }
    }

    fn abs_moment(&self, p: i32, lo: f64, hi: f64) -> f64 {
        match self {
            Density::Sampled(d) => d.abs_moment(p as f64, lo, hi),
            Density::Gamma { a, n } => {
                let full = gamma_ratio(*n, p) / a.powi(p);
                if !full.is_finite() {
                    return full;
                }
                let np = (*n as i32 + p) as u32;
                full * (gamma_upper(np, a * lo) - gamma_upper(np, a * hi))
            }
        }
    }

    fn signed_moment(&self, j: u32) -> f64 {
        match self {
            Density::Sampled(d) => {
                d.segments().map(|(x0, x1, h0, h1)| 0.5 * (x1 - x0) * (x0.powi(j as i32) * h0 + x1.powi(j as i32) * h1)).sum()
            }
            Density::Gamma { .. } => self.abs_moment(j as i32, 0.0, f64::INFINITY),
        }
    }

    fn tail_integral_bound(&self, eta: f64, t_cut: f64) -> f64 {
        match self {
            Density::Sampled(d) => d
                .segments()
                .filter(|s| s.0 > 0.0)
                .map(|(x0, x1, h0, h1)| {
                    let f = |x: f64, h: f64| h.abs() * (-x * eta * t_cut).exp() / (x * eta);
                    0.5 * (x1 - x0) * (f(x0, h0) + f(x1, h1))
                })
                .sum(),
            // ∫ h(ξ) e^{−ξηT}/(ξη) dξ = (a/(a+ηT))^{n−1}·a/((n−1)η) for n ≥ 2
            Density::Gamma { a, n } => {
                if *n < 2 {
                    return f64::INFINITY;
                }
                let r = a / (a + eta * t_cut);
                r.powi(*n as i32 - 1) * a / ((*n - 1) as f64 * eta)
            }
        }
    }

    fn upper_edge(&self) -> f64 {
        match self {
            Density::Sampled(d) => *d.grid.last().unwrap(),
            Density::Gamma { .. } => f64::INFINITY,
        }
    }

    /// ∫|h|/ξ^{d+2} over (0,1], ∫ξ|h| over [1,∞), and the weight left unresolved near ξ = 0.
    fn assumption_integrals(&self, d: usize) -> (f64, f64, f64) {
        let p = -(d as i32 + 2);
        let unresolved = match self {
            Density::Sampled(den) => den.grid.iter().position(|&x| x > 0.0).map_or(0.0, |k| {
                let x = den.grid[k];
                den.values[k].abs() * x.powi(p + 1)
            }),
            Density::Gamma { .. } => 0.0,
        };
        (self.abs_moment(p, 0.0, 1.0), self.abs_moment(1, 1.0, f64::INFINITY), unresolved)
    }
}

/// The Laplace data `h` of a switch function.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchSpec {
    atoms: Vec<Atom>,
    density: Option<Density>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwitchMoments {
    /// ‖h‖₁
    pub l1: f64,
    /// ‖h/ξ‖₁
    pub inv_xi: f64,
    /// ‖ξh‖₁
    pub xi: f64,
    /// ‖h/ξ^{d+2}‖₁
    pub inv_xi_d2: f64,
    /// ‖ξ^{m+1}h‖₁
    pub xi_m1: f64,
}

impl SwitchSpec {
    pub fn new(atoms: Vec<Atom>, density: Option<Density>) -> Result<Self> {
        for a in &atoms {
            if !(a.rate > 0.0) || !a.rate.is_finite() || !a.weight.is_finite() {
                return Err(Error::InvalidParameter(format!("atom ({}, {}) needs a positive finite rate", a.rate, a.weight)));
            }
        }
        Ok(Self { atoms, density })
    }

    /// `g(t) = e^t`.
    pub fn exponential() -> Self {
        Self { atoms: vec![Atom { rate: 1.0, weight: 1.0 }], density: None }
    }

    pub fn from_atoms(list: &[(f64, f64)]) -> Result<Self> {
        Self::new(list.iter().map(|&(rate, weight)| Atom { rate, weight }).collect(), None)
    }

    /// `g(t) = 1 − (1 − e^t)^{m+1}`, whose first `m` derivatives vanish at 0.
    pub fn poly_flat(m: u32) -> Self {
        let p = m + 1;
        let mut atoms = Vec::new();
        let mut binom = 1.0;
        for k in 1..=p {
            binom = binom * (p - k + 1) as f64 / k as f64;
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            atoms.push(Atom { rate: k as f64, weight: sign * binom });
        }
        Self { atoms, density: None }
    }

    /// `g(t) = (a/(a − t))^n`, i.e. `h(ξ) = a^n ξ^{n−1} e^{−aξ}/(n−1)!`.
    pub fn rational(a: f64, n: u32) -> Result<Self> {
        if !(a > 0.0) || !a.is_finite() || n == 0 {
            return Err(Error::InvalidParameter(format!("rational switch needs a > 0 and n ≥ 1, got a={a}, n={n}")));
        }
        Ok(Self { atoms: Vec::new(), density: Some(Density::Gamma { a, n }) })
    }

    pub fn from_sampled(atoms: Vec<Atom>, density: SampledDensity) -> Result<Self> {
        Self::new(atoms, Some(Density::Sampled(density)))
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn density(&self) -> Option<&Density> {
        self.density.as_ref()
    }

    /// `g(t)` for `t ≤ 0`.
    pub fn eval(&self, t: f64) -> Result<f64> {
        if t > 0.0 {
            return Err(Error::PositiveTimeUnsupported { t });
        }
        Ok(self.eval_unchecked(t))
    }

    fn eval_unchecked(&self, t: f64) -> f64 {
        let atoms: f64 = self.atoms.iter().map(|a| a.weight * (a.rate * t).exp()).sum();
        atoms + self.density.as_ref().map_or(0.0, |d| d.laplace(t))
    }

    /// ∫ |h(ξ)| e^{ξs} dξ.
    pub fn abs_laplace(&self, s: f64) -> f64 {
        let atoms: f64 = self.atoms.iter().map(|a| a.weight.abs() * (a.rate * s).exp()).sum();
        atoms + self.density.as_ref().map_or(0.0, |d| d.abs_laplace(s))
    }

    /// ∫ h, which equals `g(0)`.
    pub fn signed_mass(&self) -> f64 {
        let atoms: f64 = self.atoms.iter().map(|a| a.weight).sum();
        atoms + self.density.as_ref().map_or(0.0, |d| d.masses_between(0.0, f64::INFINITY).0)
    }

    pub fn l1_norm(&self) -> f64 {
        let atoms: f64 = self.atoms.iter().map(|a| a.weight.abs()).sum();
        atoms + self.density.as_ref().map_or(0.0, |d| d.masses_between(0.0, f64::INFINITY).1)
    }

    /// Mass carried by the negative part of h.
    pub fn negative_mass(&self) -> f64 {
        0.5 * (self.l1_norm() - self.signed_mass())
    }

    /// ∫ ξ^p |h(ξ)| dξ.
    pub fn abs_moment(&self, p: i32) -> f64 {
        let atoms: f64 = self.atoms.iter().map(|a| a.weight.abs() * a.rate.powi(p)).sum();
        atoms + self.density.as_ref().map_or(0.0, |d| d.abs_moment(p, 0.0, f64::INFINITY))
    }

    /// `∂_t^j g(0) = ∫ ξ^j h`.
    pub fn derivative_at_zero(&self, j: u32) -> f64 {
        let atoms: f64 = self.atoms.iter().map(|a| a.weight * a.rate.powi(j as i32)).sum();
        atoms + self.density.as_ref().map_or(0.0, |d| d.signed_moment(j))
    }

    pub fn moments(&self, d: usize, m: u32) -> SwitchMoments {
        SwitchMoments {
            l1: self.l1_norm(),
            inv_xi: self.abs_moment(-1),
            xi: self.abs_moment(1),
            inv_xi_d2: self.abs_moment(-(d as i32 + 2)),
            xi_m1: self.abs_moment(m as i32 + 1),
        }
    }

    /// Numerical check of ∫₀¹|h|/ξ^{d+2} < ∞ and ∫₁^∞ ξ|h| < ∞ on the grid.
    ///
    /// A density must also be negligible at its first positive node, where the
    /// unresolved segment towards ξ = 0 would otherwise dominate.
    pub fn satisfies_assumption(&self, d: usize) -> bool {
        let atoms_ok = self.atoms.iter().all(|a| a.rate > 0.0);
        let dens_ok = self.density.as_ref().is_none_or(|den| {
            let (small, large, unresolved) = den.assumption_integrals(d);
            small.is_finite() && large.is_finite() && unresolved <= 1e-6 * (1.0 + small)
        });
        atoms_ok && dens_ok
    }

    /// Upper bound on ∫_{−∞}^{−T} |g(ηs)| ds.
    pub fn tail_integral_bound(&self, eta: f64, t_cut: f64) -> f64 {
        let atoms: f64 = self.atoms.iter().map(|a| a.weight.abs() * (-a.rate * eta * t_cut).exp() / (a.rate * eta)).sum();
        atoms + self.density.as_ref().map_or(0.0, |d| d.tail_integral_bound(eta, t_cut))
    }

    /// Smallest T (on a geometric search) with tail ≤ `rel`·∫_{−∞}^0 |g(ηs)| ds.
    pub fn default_cutoff(&self, eta: f64, rel: f64) -> f64 {
        let total = self.tail_integral_bound(eta, 0.0);
        if total == 0.0 {
            return 0.0;
        }
        let mut hi = 1.0 / eta;
        while self.tail_integral_bound(eta, hi) > rel * total {
            hi *= 2.0;
            if hi > 1e9 {
                break;
            }
        }
        let mut lo = 0.0;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if self.tail_integral_bound(eta, mid) > rel * total {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    }

    pub fn periodize(&self, beta: f64, eta: f64) -> Result<PeriodizedSwitch> {
        PeriodizedSwitch::new(self, beta, eta)
    }
}

fn gamma_density(a: f64, n: u32, x: f64) -> f64 {
    if x <= 0.0 {
        return if n == 1 { a } else { 0.0 };
    }
    let log_fact: f64 = (1..n).map(|k| (k as f64).ln()).sum();
    ((n as f64) * a.ln() + (n as f64 - 1.0) * x.ln() - a * x - log_fact).exp()
}

/// `g_{β,η}(t) = Σ_ω g̃(ω) e^{ωt}` on `ω ∈ (2π/β)ℕ₊`.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodizedSwitch {
    beta: f64,
    eta: f64,
    coefficients: Vec<(f64, f64)>,
    discarded_tail: f64,
}

impl PeriodizedSwitch {
    pub fn new(spec: &SwitchSpec, beta: f64, eta: f64) -> Result<Self> {
        if !(beta > 0.0) || !(eta > 0.0) || !beta.is_finite() || !eta.is_finite() {
            return Err(Error::InvalidParameter(format!("periodize needs positive beta, eta; got {beta}, {eta}")));
        }
        let base = 2.0 * PI / beta;
        let width = base / eta;
        let mut bins: std::collections::BTreeMap<u64, f64> = std::collections::BTreeMap::new();
        for a in &spec.atoms {
            let m = (a.rate / width).floor() as u64;
            *bins.entry(m).or_insert(0.0) += a.weight;
        }
        let mut discarded_tail = 0.0;
        if let Some(d) = &spec.density {
            let total_abs = spec.l1_norm();
            let end = d.upper_edge();
            let mut m = 0u64;
            loop {
                let lo = m as f64 * width;
                let hi = lo + width;
                let (signed, _) = d.masses_between(lo, hi);
                *bins.entry(m).or_insert(0.0) += signed;
                let remaining = d.masses_between(hi, f64::INFINITY).1;
                if hi >= end || remaining < 1e-12 * total_abs {
                    discarded_tail = remaining;
                    break;
                }
                m += 1;
            }
        }
        let coefficients = bins.into_iter().filter(|(_, w)| *w != 0.0).map(|(m, w)| (base * (m + 1) as f64, w)).collect();
        Ok(Self { beta, eta, coefficients, discarded_tail })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// `(ω, g̃(ω))` in increasing ω; `g̃(0) = 0` is implicit.
    pub fn coefficients(&self) -> &[(f64, f64)] {
        &self.coefficients
    }

    pub fn coefficient_at_zero(&self) -> f64 {
        0.0
    }

    pub fn discarded_tail(&self) -> f64 {
        self.discarded_tail
    }

    pub fn coefficient_l1(&self) -> f64 {
        self.coefficients.iter().map(|(_, w)| w.abs()).sum()
    }

    pub fn eval(&self, z: C64) -> C64 {
        self.coefficients.iter().map(|&(w, g)| (z * w).exp() * g).sum()
    }

    pub fn eval_real(&self, t: f64) -> f64 {
        self.coefficients.iter().map(|&(w, g)| g * (w * t).exp()).sum()
    }

    /// `∂_t^j g_{β,η}(0) = Σ g̃(ω) ω^j`.
    pub fn derivative_at_zero(&self, j: u32) -> f64 {
        self.coefficients.iter().map(|&(w, g)| g * w.powi(j as i32)).sum()
    }

    /// Upper bound on ∫_{−∞}^{−T} |g_{β,η}(s)| ds.
    pub fn tail_integral_bound(&self, t_cut: f64) -> f64 {
        self.coefficients.iter().map(|&(w, g)| g.abs() * (-w * t_cut).exp() / w).sum()
    }

    /// Smallest T with tail ≤ `rel`·∫_{−∞}^0 |g_{β,η}|.
    pub fn default_cutoff(&self, rel: f64) -> f64 {
        let total = self.tail_integral_bound(0.0);
        if total == 0.0 {
            return 0.0;
        }
        let mut lo = 0.0;
        let mut hi = self.beta;
        while self.tail_integral_bound(hi) > rel * total {
            hi *= 2.0;
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if self.tail_integral_bound(mid) > rel * total {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapReport {
    pub gap: f64,
    /// (2π/(eβη))‖h/ξ‖₁
    pub uniform_bound: f64,
    /// (2π|t|/β)∫|h|e^{ξηt}
    pub pointwise_bound: f64,
}

/// `|g_{β,η}(t) − g(ηt)|` with the two available bounds.
pub fn approximation_gap(spec: &SwitchSpec, ps: &PeriodizedSwitch, t: f64) -> Result<GapReport> {
    if t > 0.0 {
        return Err(Error::PositiveTimeUnsupported { t });
    }
    let (beta, eta) = (ps.beta, ps.eta);
    let gap = (ps.eval_real(t) - spec.eval(eta * t)?).abs();
    Ok(GapReport {
        gap,
        uniform_bound: 2.0 * PI / (std::f64::consts::E * beta * eta) * spec.abs_moment(-1),
        pointwise_bound: 2.0 * PI * t.abs() / beta * spec.abs_laplace(eta * t),
    })
}

/// `g(z) = 1/(z − a)^n`, analytic for `Re z < a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RationalPole {
    pub a: f64,
    pub n: u32,
}

impl RationalPole {
    pub fn eval(&self, z: C64) -> C64 {
        (z - self.a).powi(-(self.n as i32))
    }

    /// Closed-form transform `(−1)^n ξ^{n−1} e^{−aξ}/(n−1)!`.
    pub fn exact_density(&self, xi: f64) -> f64 {
        let sign = if self.n % 2 == 0 { 1.0 } else { -1.0 };
        sign * gamma_density(self.a, self.n, xi) / self.a.powi(self.n as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseLaplaceControls {
    pub abscissa: f64,
    pub imag_cutoff: f64,
    pub node_count: usize,
}

impl Default for InverseLaplaceControls {
    fn default() -> Self {
        Self { abscissa: 0.5, imag_cutoff: 1e3, node_count: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseLaplaceValue {
    pub value: f64,
    pub tail_estimate: f64,
    /// Set when the truncated contour tail exceeds 1e-8.
    pub truncation_warning: bool,
}

/// `h(ξ) = (1/2πi)∫ e^{−zξ} g(z) dz` along `Re z = abscissa`, oriented upward.
pub fn inverse_laplace(g: &RationalPole, xi: f64, controls: &InverseLaplaceControls) -> Result<InverseLaplaceValue> {
    let c0 = controls.abscissa;
    if !(g.a > c0) {
        return Err(Error::InvalidParameter(format!("pole {} must lie right of the abscissa {c0}", g.a)));
    }
    if xi < 0.0 || !(controls.imag_cutoff > 0.0) {
        return Err(Error::InvalidParameter("inverse Laplace needs xi ≥ 0 and a positive cutoff".into()));
    }
    let width = if xi > 0.0 { (1.0 / xi).min(0.5) } else { 0.5 };
    let rule = GaussRule::new(controls.node_count)?;
    let panels = (controls.imag_cutoff / width).ceil() as usize;
    let h = controls.imag_cutoff / panels as f64;
    let integral: f64 = (0..panels)
        .into_par_iter()
        .map(|k| {
            let a = k as f64 * h;
            rule.mapped(a, a + h)
                .map(|(y, w)| {
                    let z = C64::new(c0, y);
                    let phase = C64::from_polar(1.0, -y * xi);
                    w * (phase * g.eval(z)).re
                })
                .sum::<f64>()
        })
        .collect::<Vec<f64>>()
        .into_iter()
        .sum();
    let scale = (-c0 * xi).exp() / PI;
    let edge = g.eval(C64::new(c0, controls.imag_cutoff)).norm();
    let tail_estimate = if xi > 0.0 {
        scale * edge / xi
    } else if g.n > 1 {
        scale * controls.imag_cutoff.powi(1 - g.n as i32) / (g.n - 1) as f64
    } else {
        f64::INFINITY
    };
    Ok(InverseLaplaceValue { value: scale * integral, tail_estimate, truncation_warning: tail_estimate > 1e-8 })
}

/// Builds a switch density by numerical inversion on `[0, xi_max]`.
pub fn density_from_inverse_laplace(
    g: &RationalPole,
    xi_max: f64,
    panels: usize,
    controls: &InverseLaplaceControls,
) -> Result<SampledDensity> {
    let grid = PanelGrid::uniform(0.0, xi_max, xi_max / panels.max(1) as f64, 2)?;
    let mut xs: Vec<f64> = vec![0.0];
    xs.extend(grid.nodes().into_iter().map(|(x, _)| x));
    xs.push(xi_max);
    let values = xs.par_iter().map(|&x| inverse_laplace(g, x, controls).map(|v| v.value)).collect::<Result<Vec<f64>>>()?;
    SampledDensity::new(xs, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exponential_switch() {
        let s = SwitchSpec::exponential();
        assert_eq!(s.eval(0.0).unwrap(), 1.0);
        assert!((s.eval(-2.0).unwrap() - (-2f64).exp()).abs() < 1e-16);
        assert!(matches!(s.eval(0.1), Err(Error::PositiveTimeUnsupported { .. })));
        let mut prev = 1.0;
        for k in 1..50 {
            let v = s.eval(-0.5 * k as f64).unwrap();
            assert!(v < prev && v > 0.0);
            prev = v;
        }
    }

    #[test]
    fn poly_flat_atoms_and_closed_form() {
        let s = SwitchSpec::poly_flat(1);
        assert_eq!(s.atoms(), &[Atom { rate: 1.0, weight: 2.0 }, Atom { rate: 2.0, weight: -1.0 }]);
        assert_eq!(SwitchSpec::poly_flat(0), SwitchSpec::exponential());
        for m in 0..4u32 {
            let s = SwitchSpec::poly_flat(m);
            for k in 0..20 {
                let t = -0.3 * k as f64;
                let closed = 1.0 - (1.0 - t.exp()).powi(m as i32 + 1);
                assert!((s.eval(t).unwrap() - closed).abs() < 1e-13);
            }
            for j in 1..=m {
                assert!(s.derivative_at_zero(j).abs() < 1e-12);
            }
            assert!(s.derivative_at_zero(m + 1).abs() > 0.5);
        }
    }

    #[test]
    fn rational_switch_matches_closed_form() {
        let s = SwitchSpec::rational(1.5, 5).unwrap();
        assert!((s.signed_mass() - 1.0).abs() < 1e-14);
        assert!(s.satisfies_assumption(1));
        assert!(!SwitchSpec::rational(1.5, 3).unwrap().satisfies_assumption(1));
        assert!(s.negative_mass().abs() < 1e-15);
        // ∫ξ h = n/a
        assert!((s.derivative_at_zero(1) - 5.0 / 1.5).abs() < 1e-13);
        assert!((s.abs_moment(-1) - 1.5 / 4.0).abs() < 1e-13);
        // Sampled interpolant of the same density reproduces g within the grid error.
        let a = 1.5;
        let grid: Vec<f64> = (0..=40000).map(|k| 60.0 * k as f64 / 40000.0).collect();
        let values: Vec<f64> = grid.iter().map(|&x| gamma_density(a, 5, x)).collect();
        let sampled = SwitchSpec::from_sampled(Vec::new(), SampledDensity::new(grid, values).unwrap()).unwrap();
        for &t in &[0.0, -0.3, -1.0, -4.0, -20.0] {
            let closed = (a / (a - t)).powi(5);
            assert!((s.eval(t).unwrap() - closed).abs() < 1e-14);
            assert!((sampled.eval(t).unwrap() - closed).abs() < 1e-6, "t={t}");
        }
    }

    #[test]
    fn periodize_single_atom() {
        let beta = 10.0;
        let eta = 2.0 * PI * 2.5 / beta;
        let ps = SwitchSpec::exponential().periodize(beta, eta).unwrap();
        assert_eq!(ps.coefficients().len(), 1);
        let (w, g) = ps.coefficients()[0];
        assert!((w - 2.0 * PI / beta * 3.0).abs() < 1e-14);
        assert_eq!(g, 1.0);
        let z = C64::new(-0.7, 0.2);
        assert!((ps.eval(z) - (z * w).exp()).norm() < 1e-15);
        let gap = approximation_gap(&SwitchSpec::exponential(), &ps, 0.0).unwrap();
        assert!(gap.gap < 1e-15);
    }

    #[test]
    fn periodized_mass_and_l1_bound() {
        let specs = [SwitchSpec::exponential(), SwitchSpec::poly_flat(2), SwitchSpec::rational(2.0, 4).unwrap()];
        for s in &specs {
            for &(beta, eta) in &[(4.0, 0.5), (20.0, 0.1), (200.0, 0.4), (7.3, 1.7)] {
                let ps = s.periodize(beta, eta).unwrap();
                assert_eq!(ps.coefficient_at_zero(), 0.0);
                assert!(ps.coefficients().iter().all(|(w, _)| *w > 0.0));
                assert!(ps.coefficient_l1() <= s.l1_norm() * (1.0 + 1e-14));
                assert!((ps.eval_real(0.0) - s.signed_mass()).abs() < 1e-10);
                for &(w, _) in ps.coefficients() {
                    let k = w * beta / (2.0 * PI);
                    assert!((k - k.round()).abs() < 1e-9 && k.round() >= 1.0);
                }
            }
        }
    }

    #[test]
    fn flat_switch_periodized_derivatives_obey_bound() {
        // |Σ g̃ ω^j| ≤ Σ|h|((ξη + 2π/β)^j − (ξη)^j) once ∂^j g(0) = 0.
        let s = SwitchSpec::poly_flat(2);
        for &(beta, eta) in &[(50.0, 0.3), (200.0, 0.1), (400.0, 0.05)] {
            let ps = s.periodize(beta, eta).unwrap();
            for j in 1..=2u32 {
                let lhs = ps.derivative_at_zero(j).abs();
                let rhs: f64 = s
                    .atoms()
                    .iter()
                    .map(|a| a.weight.abs() * ((a.rate * eta + 2.0 * PI / beta).powi(j as i32) - (a.rate * eta).powi(j as i32)))
                    .sum();
                assert!(lhs <= rhs + 1e-14, "j={j} beta={beta}: {lhs} > {rhs}");
            }
        }
    }

    #[test]
    fn incomplete_gamma_bins_sum_to_mass() {
        let d = Density::Gamma { a: 2.0, n: 5 };
        let total: f64 = (0..400).map(|k| d.masses_between(0.1 * k as f64, 0.1 * (k + 1) as f64).0).sum();
        assert!((total - 1.0).abs() < 1e-13);
        assert_eq!(gamma_ratio(5, -6), f64::INFINITY);
        assert!((gamma_ratio(5, -2) - 1.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn density_built_by_inversion_round_trips() {
        let g = RationalPole { a: 2.0, n: 5 };
        let den = density_from_inverse_laplace(&g, 30.0, 600, &InverseLaplaceControls::default()).unwrap();
        let spec = SwitchSpec::from_sampled(Vec::new(), den).unwrap();
        for &t in &[-0.1, -1.0, -5.0] {
            let exact = g.eval(C64::new(t, 0.0)).re;
            let err = (spec.eval(t).unwrap() - exact).abs();
            assert!(err <= 1e-6, "t={t} err={err}");
        }
    }

    #[test]
    fn gap_shrinks_with_beta() {
        let s = SwitchSpec::rational(1.0, 4).unwrap();
        let eta = 0.5;
        let max_gap = |beta: f64| {
            let ps = s.periodize(beta, eta).unwrap();
            (0..200).map(|k| approximation_gap(&s, &ps, -0.1 * k as f64).unwrap().gap).fold(0.0, f64::max)
        };
        assert!(max_gap(20.0) / max_gap(200.0) >= 5.0);
    }

    #[test]
    fn inverse_laplace_matches_transform_pair() {
        let g = RationalPole { a: 2.0, n: 5 };
        let ctl = InverseLaplaceControls::default();
        for &xi in &[0.0, 0.3, 1.0, 2.5, 6.0] {
            let v = inverse_laplace(&g, xi, &ctl).unwrap();
            assert!((v.value - g.exact_density(xi)).abs() <= 1e-6, "xi={xi}: {} vs {}", v.value, g.exact_density(xi));
            assert!(!v.truncation_warning);
        }
        assert!(inverse_laplace(&g, 0.0, &ctl).unwrap().value.abs() < 1e-9);
        assert!(inverse_laplace(&RationalPole { a: 0.2, n: 2 }, 1.0, &ctl).is_err());
    }

    #[test]
    fn cutoff_for_exponential_switch() {
        let s = SwitchSpec::exponential();
        let t = s.default_cutoff(0.5, 1e-8);
        assert!((t - 1e8f64.ln() / 0.5).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn periodized_switch_is_beta_periodic(t in -30.0f64..0.0, beta in 1.0f64..50.0, eta in 0.05f64..2.0) {
            let ps = SwitchSpec::poly_flat(1).periodize(beta, eta).unwrap();
            let a = ps.eval(C64::new(t, 0.0));
            let b = ps.eval(C64::new(t, -beta));
            prop_assert!((a - b).norm() <= 1e-12 * (1.0 + a.norm()));
        }

        #[test]
        fn gap_respects_bounds(t in -40.0f64..0.0, beta in 2.0f64..100.0, eta in 0.05f64..1.0) {
            let s = SwitchSpec::exponential();
            let ps = s.periodize(beta, eta).unwrap();
            let r = approximation_gap(&s, &ps, t).unwrap();
            prop_assert!(r.gap <= r.pointwise_bound * (1.0 + 1e-12) + 1e-15);
            prop_assert!(r.gap <= r.uniform_bound * (1.0 + 1e-12));
        }
    }
}
