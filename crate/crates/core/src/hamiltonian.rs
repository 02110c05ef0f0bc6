//! Second-quantized quadratic and quartic Hamiltonians, perturbations and observables.

use std::collections::BTreeSet;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::lattice::{FockBasis, FockOperator, LatticeGeometry};
use crate::linalg::{c, hermitian_eigen, CMatrix, I};
use crate::switch::SwitchSpec;

const KERNEL_TOL: f64 = 1e-12;

/// One-body kernel `H(x;y)` with its range and entry bound.
#[derive(Debug, Clone)]
pub struct QuadraticKernel {
    matrix: CMatrix,
    range: f64,
    bound: f64,
}

impl QuadraticKernel {
    pub fn new(geometry: &LatticeGeometry, matrix: CMatrix, range: f64) -> Result<Self> {
        let n = geometry.mode_count();
        if matrix.nrows() != n || matrix.ncols() != n {
            return Err(Error::InvalidParameter(format!("kernel must be {n}x{n}")));
        }
        let mut bound: f64 = 0.0;
        for x in 0..n {
            for y in 0..n {
                let h = matrix[(x, y)];
                let residual = (h - matrix[(y, x)].conj()).norm();
                if residual > KERNEL_TOL {
                    return Err(Error::KernelNotHermitian { x, y, residual });
                }
                if h.norm() > 0.0 {
                    let distance = geometry.distance(x, y)?;
                    if distance > range + KERNEL_TOL {
                        return Err(Error::RangeViolation { x, y, distance, range });
                    }
                }
                bound = bound.max(h.norm());
            }
        }
        Ok(Self { matrix, range, bound })
    }

    /// Nearest-neighbour amplitude `t` on every axis plus on-site energies.
    ///
    /// Wrapped bonds that coincide on small tori are set once, not summed.
    pub fn nearest_neighbor(geometry: &LatticeGeometry, t: f64, onsite: impl Fn(usize) -> f64) -> Result<Self> {
        let n = geometry.mode_count();
        let mut m = CMatrix::zeros(n, n);
        for x in 0..n {
            m[(x, x)] = c(onsite(x));
            let site = geometry.site(x)?;
            for axis in 0..geometry.dim() {
                let mut coords = site.coords.clone();
                coords[axis] = (coords[axis] + 1) % geometry.side();
                let y = geometry.index(&coords, site.label)?;
                if y != x {
                    m[(x, y)] = c(t);
                    m[(y, x)] = c(t);
                }
            }
        }
        Self::new(geometry, m, 1.0)
    }

    /// Chain with hopping `t` and on-site energies `(-1)^x·delta`.
    pub fn staggered_chain(geometry: &LatticeGeometry, t: f64, delta: f64) -> Result<Self> {
        Self::nearest_neighbor(geometry, t, |x| if x % 2 == 0 { delta } else { -delta })
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn range(&self) -> f64 {
        self.range
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn modes(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn one_particle_spectrum(&self) -> Result<Vec<f64>> {
        Ok(hermitian_eigen(&self.matrix)?.0)
    }
}

/// Density-density kernel `v(x;y)` with coupling `λ`.
#[derive(Debug, Clone)]
pub struct InteractionKernel {
    matrix: DMatrix<f64>,
    range: f64,
    bound: f64,
    coupling: f64,
}

impl InteractionKernel {
    pub fn new(geometry: &LatticeGeometry, matrix: DMatrix<f64>, range: f64, coupling: f64) -> Result<Self> {
        let n = geometry.mode_count();
        if matrix.nrows() != n || matrix.ncols() != n {
            return Err(Error::InvalidParameter(format!("interaction kernel must be {n}x{n}")));
        }
        let mut bound: f64 = 0.0;
        for x in 0..n {
            for y in 0..n {
                let v = matrix[(x, y)];
                if (v - matrix[(y, x)]).abs() > KERNEL_TOL {
                    return Err(Error::InvalidParameter(format!("interaction kernel not symmetric at ({x}, {y})")));
                }
                if v != 0.0 {
                    let distance = geometry.distance(x, y)?;
                    if distance > range + KERNEL_TOL {
                        return Err(Error::RangeViolation { x, y, distance, range });
                    }
                }
                bound = bound.max(v.abs());
            }
        }
        Ok(Self { matrix, range, bound, coupling })
    }

    /// `v(x;y) = u` on distinct nearest-neighbour pairs.
    pub fn nearest_neighbor(geometry: &LatticeGeometry, u: f64, coupling: f64) -> Result<Self> {
        let n = geometry.mode_count();
        let m = DMatrix::from_fn(n, n, |x, y| {
            if x != y && (geometry.distance(x, y).unwrap_or(f64::INFINITY) - 1.0).abs() < 1e-12 {
                u
            } else {
                0.0
            }
        });
        Self::new(geometry, m, 1.0, coupling)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn range(&self) -> f64 {
        self.range
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn coupling(&self) -> f64 {
        self.coupling
    }
}

/// `a*_x a_y |s⟩ = sign |s'⟩`, or `None` when the result vanishes.
pub fn apply_hop(basis: &FockBasis, s: usize, x: usize, y: usize) -> Option<(usize, f64)> {
    if !basis.is_occupied(s, y) {
        return None;
    }
    let sign1 = basis.jw_sign(s, y);
    let s1 = s ^ (1 << y);
    if basis.is_occupied(s1, x) {
        return None;
    }
    let sign2 = basis.jw_sign(s1, x);
    Some((s1 | (1 << x), sign1 * sign2))
}

/// `Σ_{x,y} H(x;y) a*_x a_y`.
pub fn build_quadratic(basis: &FockBasis, kernel: &QuadraticKernel) -> Result<FockOperator> {
    let n = basis.modes();
    if kernel.modes() != n {
        return Err(Error::InvalidParameter("kernel and basis mode counts differ".into()));
    }
    let dim = basis.dim();
    let mut m = CMatrix::zeros(dim, dim);
    let mut support = BTreeSet::new();
    for x in 0..n {
        for y in 0..n {
            let h = kernel.matrix()[(x, y)];
            if h.norm() == 0.0 {
                continue;
            }
            support.insert(x);
            support.insert(y);
            for s in 0..dim {
                if let Some((t, sign)) = apply_hop(basis, s, x, y) {
                    m[(t, s)] += h * sign;
                }
            }
        }
    }
    FockOperator::from_matrix(basis, m, support)
}

/// `Σ_{x,y} v(x;y) a*_x a*_y a_y a_x`, which equals `Σ_{x≠y} v(x;y) n_x n_y`.
/// The coupling λ is not applied here.
pub fn build_quartic(basis: &FockBasis, kernel: &InteractionKernel) -> Result<FockOperator> {
    let n = basis.modes();
    if kernel.matrix().nrows() != n {
        return Err(Error::InvalidParameter("kernel and basis mode counts differ".into()));
    }
    let dim = basis.dim();
    let mut m = CMatrix::zeros(dim, dim);
    let mut support = BTreeSet::new();
    for x in 0..n {
        for y in 0..n {
            let v = kernel.matrix()[(x, y)];
            if x == y || v == 0.0 {
                continue;
            }
            support.insert(x);
            support.insert(y);
            for s in 0..dim {
                if basis.is_occupied(s, x) && basis.is_occupied(s, y) {
                    m[(s, s)] += c(v);
                }
            }
        }
    }
    FockOperator::from_matrix(basis, m, support)
}

/// `𝓗⁰ + λ𝒱`.
pub fn weakly_interacting(
    basis: &FockBasis,
    quadratic: &QuadraticKernel,
    interaction: Option<&InteractionKernel>,
) -> Result<FockOperator> {
    let h0 = build_quadratic(basis, quadratic)?;
    match interaction {
        Some(v) if v.coupling() != 0.0 => Ok(&h0 + &build_quartic(basis, v)?.scale_real(v.coupling())),
        _ => Ok(h0),
    }
}

/// Distance from `μ` to the one-particle spectrum.
pub fn one_body_gap(kernel: &QuadraticKernel, mu: f64) -> Result<f64> {
    let spec = kernel.one_particle_spectrum()?;
    Ok(spec.iter().fold(f64::INFINITY, |acc, e| acc.min((e - mu).abs())))
}

/// Largest Fock-space norm of a local term: on-site `|H(x;x)|`, bond
/// `max(|H(x;y)|, |λ(v(x;y)+v(y;x))|)`.
pub fn local_term_norm_max(quadratic: &QuadraticKernel, interaction: Option<&InteractionKernel>) -> f64 {
    let n = quadratic.modes();
    let mut out: f64 = 0.0;
    for x in 0..n {
        out = out.max(quadratic.matrix()[(x, x)].norm());
        for y in (x + 1)..n {
            let mut w = quadratic.matrix()[(x, y)].norm();
            if let Some(v) = interaction {
                w = w.max((v.coupling() * (v.matrix()[(x, y)] + v.matrix()[(y, x)])).abs());
            }
            out = out.max(w);
        }
    }
    out
}

/// `Σ_x μ(x) n_x`.
pub fn density_modulation(basis: &FockBasis, weights: &[(usize, f64)]) -> Result<FockOperator> {
    let mut out = basis.zero();
    for &(x, w) in weights {
        out = &out + &basis.number(x)?.scale_real(w);
    }
    Ok(out)
}

/// `a*_x a_y + a*_y a_x`.
pub fn bond_hopping(basis: &FockBasis, x: usize, y: usize) -> Result<FockOperator> {
    Ok(&basis.hopping(x, y)? + &basis.hopping(y, x)?)
}

/// `i(a*_x a_y − a*_y a_x)`.
pub fn bond_current(basis: &FockBasis, x: usize, y: usize) -> Result<FockOperator> {
    Ok((&basis.hopping(x, y)? - &basis.hopping(y, x)?).scale(I))
}

/// `𝓗 + ε g(ηt) 𝒫` with its switch data.
#[derive(Debug, Clone)]
pub struct DrivenHamiltonian {
    base: FockOperator,
    perturbation: FockOperator,
    epsilon: f64,
    switch: SwitchSpec,
    eta: f64,
}

impl DrivenHamiltonian {
    pub fn new(base: FockOperator, perturbation: FockOperator, epsilon: f64, switch: SwitchSpec, eta: f64) -> Result<Self> {
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(Error::InvalidParameter(format!("eta must be positive, got {eta}")));
        }
        if !epsilon.is_finite() {
            return Err(Error::InvalidParameter("epsilon must be finite".into()));
        }
        if base.dim() != perturbation.dim() {
            return Err(Error::InvalidParameter("Hamiltonian and perturbation dimensions differ".into()));
        }
        for (name, op) in [("Hamiltonian", &base), ("perturbation", &perturbation)] {
            if !op.gauge_invariant() {
                return Err(Error::InvalidParameter(format!("{name} does not commute with the number operator")));
            }
            if !op.is_self_adjoint(1e-12) {
                return Err(Error::InvalidParameter(format!("{name} is not self-adjoint")));
            }
        }
        Ok(Self { base, perturbation, epsilon, switch, eta })
    }

    pub fn base(&self) -> &FockOperator {
        &self.base
    }

    pub fn perturbation(&self) -> &FockOperator {
        &self.perturbation
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn switch(&self) -> &SwitchSpec {
        &self.switch
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self { epsilon, ..self.clone() }
    }

    /// `𝓗 + ε·gt·𝒫` for a given switch value.
    pub fn with_switch_value(&self, gt: f64) -> CMatrix {
        self.base.matrix() + self.perturbation.matrix() * c(self.epsilon * gt)
    }

    /// `𝓗(ηt)` using the true switch.
    pub fn at(&self, t: f64) -> Result<FockOperator> {
        let g = self.switch.eval(self.eta * t)?;
        Ok(self.base.with_matrix(self.with_switch_value(g)))
    }
}
