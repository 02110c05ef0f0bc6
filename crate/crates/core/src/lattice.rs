//! Torus geometry, Fock basis and fermionic operators.
//!
//! Modes are ordered by cell (row-major coordinates, first axis slowest) and
//! then by internal label. Basis state `s` is the integer whose bit `j` is the
//! occupation of mode `j`, so the basis order is lexicographic on bitstrings.
//! Annihilators carry the Jordan-Wigner sign `(-1)^{#occupied modes below j}`.

use std::collections::BTreeSet;
use std::ops::{Add, Mul, Neg, Sub};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{c, max_abs, CMatrix, C64};

pub const DEFAULT_MAX_MODES: usize = 12;
pub const DEFAULT_MAX_DIM: usize = 1 << DEFAULT_MAX_MODES;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LatticeGeometry {
    dim: usize,
    side: usize,
    labels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Site {
    pub coords: Vec<usize>,
    pub label: usize,
}

impl LatticeGeometry {
    pub fn new(dim: usize, side: usize, labels: usize) -> Result<Self> {
        if dim == 0 || side == 0 || labels == 0 {
            return Err(Error::InvalidParameter(format!("lattice needs positive d, L, M; got d={dim}, L={side}, M={labels}")));
        }
        Ok(Self { dim, side, labels })
    }

    pub fn chain(side: usize) -> Self {
        Self::new(1, side.max(1), 1).expect("positive")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn cell_count(&self) -> usize {
        self.side.pow(self.dim as u32)
    }

    pub fn mode_count(&self) -> usize {
        self.labels * self.cell_count()
    }

    fn check(&self, x: usize) -> Result<()> {
        if x >= self.mode_count() {
            return Err(Error::SiteOutOfRange { site: x, modes: self.mode_count() });
        }
        Ok(())
    }

    pub fn site(&self, x: usize) -> Result<Site> {
        self.check(x)?;
        let label = x % self.labels;
        let mut cell = x / self.labels;
        let mut coords = vec![0; self.dim];
        for axis in (0..self.dim).rev() {
            coords[axis] = cell % self.side;
            cell /= self.side;
        }
        Ok(Site { coords, label })
    }

    pub fn index(&self, coords: &[usize], label: usize) -> Result<usize> {
        if coords.len() != self.dim || label >= self.labels || coords.iter().any(|&k| k >= self.side) {
            return Err(Error::InvalidParameter(format!("site {coords:?}/{label} outside the lattice")));
        }
        let cell = coords.iter().fold(0, |acc, &k| acc * self.side + k);
        Ok(cell * self.labels + label)
    }

    /// Euclidean distance on the torus between the cells of two modes.
    pub fn distance(&self, x: usize, y: usize) -> Result<f64> {
        let (sx, sy) = (self.site(x)?, self.site(y)?);
        let sq: f64 = sx
            .coords
            .iter()
            .zip(&sy.coords)
            .map(|(&a, &b)| {
                let d = a.abs_diff(b);
                let w = d.min(self.side - d) as f64;
                w * w
            })
            .sum();
        Ok(sq.sqrt())
    }

    pub fn diameter(&self, set: &BTreeSet<usize>) -> Result<f64> {
        let v: Vec<usize> = set.iter().copied().collect();
        let mut d: f64 = 0.0;
        for (i, &x) in v.iter().enumerate() {
            for &y in &v[i + 1..] {
                d = d.max(self.distance(x, y)?);
            }
        }
        Ok(d)
    }

    /// Translate a mode by a cell shift, keeping its label.
    pub fn translate(&self, x: usize, shift: &[usize]) -> Result<usize> {
        let s = self.site(x)?;
        if shift.len() != self.dim {
            return Err(Error::InvalidParameter("shift dimension mismatch".into()));
        }
        let coords: Vec<usize> = s.coords.iter().zip(shift).map(|(&a, &b)| (a + b) % self.side).collect();
        self.index(&coords, s.label)
    }

    /// All cell shifts of the torus.
    pub fn shifts(&self) -> Vec<Vec<usize>> {
        (0..self.cell_count())
            .map(|mut cell| {
                let mut v = vec![0; self.dim];
                for axis in (0..self.dim).rev() {
                    v[axis] = cell % self.side;
                    cell /= self.side;
                }
                v
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct FockBasis {
    geometry: LatticeGeometry,
    modes: usize,
    dim: usize,
}

impl FockBasis {
    /// Dense Fock basis, refusing dimensions above `max_dim`.
    pub fn new(geometry: LatticeGeometry, max_dim: usize) -> Result<Self> {
        let modes = geometry.mode_count();
        if modes >= usize::BITS as usize - 1 || (1usize << modes) > max_dim {
            return Err(Error::ModeCountExceeded { modes, max_dim });
        }
        Ok(Self { geometry, modes, dim: 1 << modes })
    }

    pub fn with_default_budget(geometry: LatticeGeometry) -> Result<Self> {
        Self::new(geometry, DEFAULT_MAX_DIM)
    }

    pub fn geometry(&self) -> &LatticeGeometry {
        &self.geometry
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn particle_number(&self, state: usize) -> usize {
        state.count_ones() as usize
    }

    pub fn is_occupied(&self, state: usize, x: usize) -> bool {
        state >> x & 1 == 1
    }

    /// Basis indices grouped by particle number `0..=modes`.
    pub fn sectors(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.modes + 1];
        for s in 0..self.dim {
            out[self.particle_number(s)].push(s);
        }
        out
    }

    fn check(&self, x: usize) -> Result<()> {
        if x >= self.modes {
            return Err(Error::SiteOutOfRange { site: x, modes: self.modes });
        }
        Ok(())
    }

    pub fn jw_sign(&self, state: usize, x: usize) -> f64 {
        if (state & ((1usize << x) - 1)).count_ones() % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    pub fn annihilation(&self, x: usize) -> Result<FockOperator> {
        self.check(x)?;
        let mut m = CMatrix::zeros(self.dim, self.dim);
        for s in 0..self.dim {
            if self.is_occupied(s, x) {
                m[(s ^ (1 << x), s)] = c(self.jw_sign(s, x));
            }
        }
        Ok(FockOperator::from_parts(m, [x].into_iter().collect(), Some(-1)))
    }

    pub fn creation(&self, x: usize) -> Result<FockOperator> {
        Ok(self.annihilation(x)?.adjoint())
    }

    pub fn number(&self, x: usize) -> Result<FockOperator> {
        self.check(x)?;
        let m = CMatrix::from_fn(self.dim, self.dim, |i, j| if i == j && self.is_occupied(i, x) { c(1.0) } else { c(0.0) });
        Ok(FockOperator::from_parts(m, [x].into_iter().collect(), Some(0)))
    }

    pub fn total_number(&self) -> FockOperator {
        let m = CMatrix::from_fn(self.dim, self.dim, |i, j| if i == j { c(self.particle_number(i) as f64) } else { c(0.0) });
        FockOperator::from_parts(m, (0..self.modes).collect(), Some(0))
    }

    pub fn identity(&self) -> FockOperator {
        FockOperator::from_parts(CMatrix::identity(self.dim, self.dim), BTreeSet::new(), Some(0))
    }

    pub fn zero(&self) -> FockOperator {
        FockOperator::from_parts(CMatrix::zeros(self.dim, self.dim), BTreeSet::new(), Some(0))
    }

    /// `a*_x a_y`.
    pub fn hopping(&self, x: usize, y: usize) -> Result<FockOperator> {
        Ok(&self.creation(x)? * &self.annihilation(y)?)
    }

    /// Image state and sign of `U|s⟩` for the unitary with `U a_x U* = a_{perm[x]}`.
    pub fn mode_permutation(&self, perm: &[usize]) -> Result<Vec<(usize, f64)>> {
        let mut seen = vec![false; self.modes];
        if perm.len() != self.modes {
            return Err(Error::InvalidParameter("permutation length differs from mode count".into()));
        }
        for &p in perm {
            if p >= self.modes || seen[p] {
                return Err(Error::InvalidParameter("not a permutation of the modes".into()));
            }
            seen[p] = true;
        }
        Ok((0..self.dim)
            .map(|s| {
                let images: Vec<usize> = (0..self.modes).filter(|&x| s >> x & 1 == 1).map(|x| perm[x]).collect();
                let inversions: usize =
                    images.iter().enumerate().map(|(i, a)| images[i + 1..].iter().filter(|b| *b < a).count()).sum();
                let target = images.iter().fold(0usize, |acc, &x| acc | 1 << x);
                (target, if inversions % 2 == 0 { 1.0 } else { -1.0 })
            })
            .collect())
    }

    /// Lattice translation of an operator by a cell shift.
    pub fn translate_operator(&self, op: &FockOperator, shift: &[usize]) -> Result<FockOperator> {
        let perm = (0..self.modes).map(|x| self.geometry.translate(x, shift)).collect::<Result<Vec<_>>>()?;
        let map = self.mode_permutation(&perm)?;
        let m = op.matrix();
        let mut out = CMatrix::zeros(self.dim, self.dim);
        for b in 0..self.dim {
            let (tb, sb) = map[b];
            for a in 0..self.dim {
                let v = m[(a, b)];
                if v.norm() > 0.0 {
                    let (ta, sa) = map[a];
                    out[(ta, tb)] = v * (sa * sb);
                }
            }
        }
        let support = op.support().iter().map(|&x| perm[x]).collect();
        Ok(FockOperator { matrix: Arc::new(out), support, charge: op.charge, even: op.even })
    }
}

/// Dense operator on Fock space with support and charge bookkeeping.
///
/// `charge` is the change in particle number (`Some(0)` means gauge
/// invariant); sums of operators with different charges have `None`.
#[derive(Debug, Clone)]
pub struct FockOperator {
    matrix: Arc<CMatrix>,
    support: BTreeSet<usize>,
    charge: Option<i32>,
    even: Option<bool>,
}

impl FockOperator {
    fn from_parts(matrix: CMatrix, support: BTreeSet<usize>, charge: Option<i32>) -> Self {
        let even = charge.map(|q| q % 2 == 0);
        Self { matrix: Arc::new(matrix), support, charge, even }
    }

    /// Wraps an arbitrary matrix, inferring charge and parity from its entries.
    pub fn from_matrix(basis: &FockBasis, matrix: CMatrix, support: BTreeSet<usize>) -> Result<Self> {
        if matrix.nrows() != basis.dim() || matrix.ncols() != basis.dim() {
            return Err(Error::InvalidParameter(format!(
                "matrix is {}x{}, basis dimension {}",
                matrix.nrows(),
                matrix.ncols(),
                basis.dim()
            )));
        }
        let mut charges = BTreeSet::new();
        for j in 0..basis.dim() {
            for i in 0..basis.dim() {
                if matrix[(i, j)].norm() > 0.0 {
                    charges.insert(basis.particle_number(i) as i32 - basis.particle_number(j) as i32);
                }
            }
        }
        let charge = match charges.len() {
            0 => Some(0),
            1 => charges.first().copied(),
            _ => None,
        };
        let even = if charges.iter().all(|q| q % 2 == 0) {
            Some(true)
        } else if charges.iter().all(|q| q % 2 != 0) {
            Some(false)
        } else {
            None
        };
        Ok(Self { matrix: Arc::new(matrix), support, charge, even })
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn support(&self) -> &BTreeSet<usize> {
        &self.support
    }

    pub fn charge(&self) -> Option<i32> {
        self.charge
    }

    pub fn gauge_invariant(&self) -> bool {
        self.charge == Some(0)
    }

    pub fn is_even(&self) -> bool {
        self.even == Some(true)
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn adjoint(&self) -> Self {
        Self {
            matrix: Arc::new(self.matrix.adjoint()),
            support: self.support.clone(),
            charge: self.charge.map(|q| -q),
            even: self.even,
        }
    }

    pub fn scale(&self, z: C64) -> Self {
        Self { matrix: Arc::new(self.matrix.as_ref() * z), ..self.clone() }
    }

    pub fn scale_real(&self, x: f64) -> Self {
        self.scale(c(x))
    }

    pub fn commutator(&self, other: &Self) -> Self {
        &(self * other) - &(other * self)
    }

    pub fn anticommutator(&self, other: &Self) -> Self {
        &(self * other) + &(other * self)
    }

    /// Same bookkeeping with a replaced matrix (for similarity transforms).
    pub fn with_matrix(&self, matrix: CMatrix) -> Self {
        Self { matrix: Arc::new(matrix), ..self.clone() }
    }

    pub fn is_self_adjoint(&self, tol: f64) -> bool {
        max_abs(&(self.matrix.as_ref() - self.matrix.adjoint())) <= tol
    }

    pub fn distance_to(&self, other: &Self) -> f64 {
        max_abs(&(self.matrix.as_ref() - other.matrix.as_ref()))
    }

    fn combine_sum(&self, other: &Self, matrix: CMatrix) -> Self {
        let charge = if self.charge == other.charge { self.charge } else { None };
        let even = if self.even == other.even { self.even } else { None };
        Self { matrix: Arc::new(matrix), support: &self.support | &other.support, charge, even }
    }
}

impl Add for &FockOperator {
    type Output = FockOperator;
    fn add(self, rhs: &FockOperator) -> FockOperator {
        self.combine_sum(rhs, self.matrix.as_ref() + rhs.matrix.as_ref())
    }
}

impl Sub for &FockOperator {
    type Output = FockOperator;
    fn sub(self, rhs: &FockOperator) -> FockOperator {
        self.combine_sum(rhs, self.matrix.as_ref() - rhs.matrix.as_ref())
    }
}

impl Neg for &FockOperator {
    type Output = FockOperator;
    fn neg(self) -> FockOperator {
        self.scale_real(-1.0)
    }
}

impl Mul for &FockOperator {
    type Output = FockOperator;
    fn mul(self, rhs: &FockOperator) -> FockOperator {
        let charge = self.charge.zip(rhs.charge).map(|(a, b)| a + b);
        let even = self.even.zip(rhs.even).map(|(a, b)| a == b);
        FockOperator {
            matrix: Arc::new(self.matrix.as_ref() * rhs.matrix.as_ref()),
            support: &self.support | &rhs.support,
            charge,
            even,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::hermitian_eigen;
    use proptest::prelude::*;

    #[test]
    fn translation_maps_modes() {
        let b = FockBasis::with_default_budget(LatticeGeometry::chain(4)).unwrap();
        for x in 0..4 {
            for y in 0..4 {
                let h = b.hopping(x, y).unwrap();
                let t = b.translate_operator(&h, &[1]).unwrap();
                assert!(t.distance_to(&b.hopping((x + 1) % 4, (y + 1) % 4).unwrap()) < 1e-15);
            }
        }
        let q = &(&b.hopping(0, 1).unwrap() * &b.hopping(2, 3).unwrap()) + &b.number(3).unwrap();
        let t = b.translate_operator(&q, &[2]).unwrap();
        let expect = &(&b.hopping(2, 3).unwrap() * &b.hopping(0, 1).unwrap()) + &b.number(1).unwrap();
        assert!(t.distance_to(&expect) < 1e-15);
        assert_eq!(t.support().iter().copied().collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    }

    fn basis(d: usize, l: usize, m: usize) -> FockBasis {
        FockBasis::with_default_budget(LatticeGeometry::new(d, l, m).unwrap()).unwrap()
    }

    #[test]
    fn basis_dimensions() {
        assert_eq!(basis(1, 1, 1).dim(), 2);
        assert_eq!(basis(1, 2, 1).dim(), 4);
        assert_eq!(basis(1, 2, 2).dim(), 16);
    }

    #[test]
    fn mode_budget_enforced() {
        let g = LatticeGeometry::new(1, 13, 1).unwrap();
        assert!(matches!(FockBasis::with_default_budget(g.clone()), Err(Error::ModeCountExceeded { modes: 13, .. })));
        assert_eq!(FockBasis::new(g, 1 << 13).unwrap().dim(), 8192);
    }

    #[test]
    fn single_mode_annihilator() {
        let b = basis(1, 1, 1);
        let a = b.annihilation(0).unwrap();
        let expected = CMatrix::from_row_slice(2, 2, &[c(0.0), c(1.0), c(0.0), c(0.0)]);
        assert_eq!(a.matrix(), &expected);
        assert!(matches!(b.annihilation(1), Err(Error::SiteOutOfRange { .. })));
    }

    #[test]
    fn car_exhaustive() {
        for b in [basis(1, 2, 1), basis(1, 3, 1), basis(1, 2, 2)] {
            let id = b.identity();
            for x in 0..b.modes() {
                let ax = b.annihilation(x).unwrap();
                assert!(max_abs((&ax * &ax).matrix()) == 0.0);
                for y in 0..b.modes() {
                    let ay = b.annihilation(y).unwrap();
                    let ayd = b.creation(y).unwrap();
                    let mixed = ax.anticommutator(&ayd);
                    let target = if x == y { id.clone() } else { b.zero() };
                    assert!(mixed.distance_to(&target) <= 1e-12);
                    assert!(max_abs(ax.anticommutator(&ay).matrix()) <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn number_operator_spectrum() {
        let b = basis(1, 4, 1);
        let n = b.total_number();
        let (vals, _) = hermitian_eigen(n.matrix()).unwrap();
        let binom = [1, 4, 6, 4, 1];
        for (k, &mult) in binom.iter().enumerate() {
            assert_eq!(vals.iter().filter(|v| (**v - k as f64).abs() < 1e-12).count(), mult);
        }
        let mut sum = b.zero();
        for x in 0..4 {
            sum = &sum + &b.number(x).unwrap();
        }
        assert!(sum.distance_to(&n) == 0.0);
    }

    #[test]
    fn torus_distances() {
        let g = LatticeGeometry::chain(10);
        assert_eq!(g.distance(0, 9).unwrap(), 1.0);
        assert_eq!(g.distance(4, 4).unwrap(), 0.0);
        let g = LatticeGeometry::new(2, 4, 1).unwrap();
        let x = g.index(&[0, 0], 0).unwrap();
        let y = g.index(&[3, 3], 0).unwrap();
        assert!((g.distance(x, y).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        let g = LatticeGeometry::new(1, 3, 2).unwrap();
        assert_eq!(g.distance(0, 1).unwrap(), 0.0);
    }

    #[test]
    fn site_index_roundtrip() {
        let g = LatticeGeometry::new(2, 3, 2).unwrap();
        for x in 0..g.mode_count() {
            let s = g.site(x).unwrap();
            assert_eq!(g.index(&s.coords, s.label).unwrap(), x);
        }
        assert_eq!(g.translate(0, &[1, 2]).unwrap(), g.index(&[1, 2], 0).unwrap());
    }

    #[test]
    fn charge_bookkeeping() {
        let b = basis(1, 2, 1);
        let hop = b.hopping(0, 1).unwrap();
        assert!(hop.gauge_invariant() && hop.is_even());
        let a = b.annihilation(0).unwrap();
        assert_eq!(a.charge(), Some(-1));
        assert!(!a.is_even());
        let mixed = &a + &b.creation(1).unwrap();
        assert_eq!(mixed.charge(), None);
        assert!(!mixed.is_even());
        let inferred = FockOperator::from_matrix(&b, hop.matrix().clone(), hop.support().clone()).unwrap();
        assert_eq!(inferred.charge(), Some(0));
        let n = b.total_number();
        assert!(max_abs(hop.commutator(&n).matrix()) == 0.0);
    }

    #[test]
    fn even_operator_acts_trivially_off_support() {
        // Even operator on modes {1,2} of a 4-mode chain: matrix elements only
        // connect states agreeing on modes {0,3} and do not depend on them.
        let b = basis(1, 4, 1);
        let op = &(&b.hopping(1, 2).unwrap() + &b.hopping(2, 1).unwrap()) + &b.number(1).unwrap().scale_real(0.3);
        let mask_x = 0b0110usize;
        for i in 0..b.dim() {
            for j in 0..b.dim() {
                let v = op.matrix()[(i, j)];
                if (i & !mask_x) != (j & !mask_x) {
                    assert_eq!(v, c(0.0));
                } else {
                    let reduced = op.matrix()[(i & mask_x, j & mask_x)];
                    assert!((v - reduced).norm() < 1e-15);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn torus_distance_is_a_metric(l in 1usize..7, d in 1usize..3, seed in 0usize..10_000) {
            let g = LatticeGeometry::new(d, l, 1).unwrap();
            let n = g.mode_count();
            let (x, y, z) = (seed % n, (seed / 7) % n, (seed / 49) % n);
            let dxy = g.distance(x, y).unwrap();
            prop_assert!((dxy - g.distance(y, x).unwrap()).abs() < 1e-15);
            prop_assert!(dxy <= g.distance(x, z).unwrap() + g.distance(z, y).unwrap() + 1e-12);
            prop_assert!(dxy <= (l as f64 / 2.0) * (d as f64).sqrt() + 1e-12);
        }

        #[test]
        fn disjoint_even_operators_commute(x in 0usize..4, y in 0usize..4, u in 0usize..4, v in 0usize..4) {
            let b = basis(1, 4, 1);
            let o1 = b.hopping(x, y).unwrap();
            let o2 = b.hopping(u, v).unwrap();
            let disjoint = o1.support().is_disjoint(o2.support());
            if disjoint {
                prop_assert!(max_abs(o1.commutator(&o2).matrix()) == 0.0);
            }
        }
    }
}
