//! Non-interacting Euclidean two-point function, ring-diagram cumulants and
//! integrability measurements of time-ordered cumulants.

use rayon::prelude::*;

use crate::equilibrium::{beta_seminorm, GibbsEnsemble, Prepared};
use crate::error::{Error, Result};
use crate::fit::{linear_fit, LinearFit};
use crate::lattice::{FockBasis, FockOperator, LatticeGeometry};
use crate::linalg::{c, hermitian_eigen, max_abs, CMatrix, C64};
use crate::quadrature::{PanelGrid, DEFAULT_NODE_BUDGET};

#[derive(Debug, Clone)]
pub struct TwoPointCache {
    beta: f64,
    mu: f64,
    levels: Vec<f64>,
    vectors: CMatrix,
}

impl TwoPointCache {
    pub fn new(kernel: &CMatrix, beta: f64, mu: f64) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::InvalidParameter(format!("beta must be positive, got {beta}")));
        }
        let (vals, vectors) = hermitian_eigen(kernel)?;
        Ok(Self { beta, mu, levels: vals.iter().map(|e| e - mu).collect(), vectors })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn modes(&self) -> usize {
        self.levels.len()
    }

    /// Reduce `t` to `[0, β)` and return the antiperiodic sign.
    fn reduce(&self, t: f64) -> (f64, f64) {
        let k = (t / self.beta).floor();
        let mut r = t - k * self.beta;
        let mut k = k as i64;
        if r >= self.beta {
            r -= self.beta;
            k += 1;
        }
        if r < 0.0 {
            r = 0.0;
        }
        (r, if k.rem_euclid(2) == 0 { 1.0 } else { -1.0 })
    }

    /// Matrix `g₂(t, · ; t′, ·)` on the one-particle space.
    pub fn matrix(&self, t: f64, tp: f64) -> CMatrix {
        let (r, s) = self.reduce(t);
        let (rp, sp) = self.reduce(tp);
        let tau = r - rp;
        let beta = self.beta;
        let diag: Vec<f64> = self
            .levels
            .iter()
            .map(|&e| {
                if tau > 0.0 {
                    if e >= 0.0 {
                        (-tau * e).exp() / (1.0 + (-beta * e).exp())
                    } else {
                        ((beta - tau) * e).exp() / ((beta * e).exp() + 1.0)
                    }
                } else if e >= 0.0 {
                    -(-(tau + beta) * e).exp() / ((-beta * e).exp() + 1.0)
                } else {
                    -(-tau * e).exp() / (1.0 + (beta * e).exp())
                }
            })
            .collect();
        let mut scaled = self.vectors.clone();
        for (k, d) in diag.iter().enumerate() {
            for v in scaled.column_mut(k).iter_mut() {
                *v *= d * s * sp;
            }
        }
        scaled * self.vectors.adjoint()
    }

    /// One-particle density matrix `⟨a*_y a_x⟩⁰` as a matrix in `(x, y)`.
    pub fn occupation(&self) -> CMatrix {
        -self.matrix(0.0, 0.0)
    }
}

/// `g₂(t, x; t′, y) = ⟨T γ_t(a_x) γ_{t′}(a*_y)⟩⁰` with the normal-ordered equal-time value.
pub fn two_point(cache: &TwoPointCache, t: f64, x: usize, tp: f64, y: usize) -> C64 {
    cache.matrix(t, tp)[(x, y)]
}

/// Kernel `O(x; y)` and constant `c` with `O = Σ O(x; y) a*_x a_y + c`.
#[derive(Debug, Clone)]
pub struct QuadraticForm {
    pub kernel: CMatrix,
    pub constant: C64,
}

impl QuadraticForm {
    pub fn from_operator(basis: &FockBasis, op: &FockOperator, index: usize) -> Result<Self> {
        let n = basis.modes();
        let m = op.matrix();
        let constant = m[(0, 0)];
        let kernel = CMatrix::from_fn(n, n, |x, y| m[(1 << x, 1 << y)] - if x == y { constant } else { c(0.0) });
        let mut rebuilt = CMatrix::identity(basis.dim(), basis.dim()) * constant;
        for s in 0..basis.dim() {
            for x in 0..n {
                for y in 0..n {
                    let k = kernel[(x, y)];
                    if k.norm() == 0.0 {
                        continue;
                    }
                    if let Some((t, sign)) = crate::hamiltonian::apply_hop(basis, s, x, y) {
                        rebuilt[(t, s)] += k * sign;
                    }
                }
            }
        }
        let scale = 1.0 + max_abs(m);
        if max_abs(&(rebuilt - m)) > 1e-12 * scale {
            return Err(Error::ObservableNotQuadratic { index });
        }
        Ok(Self { kernel, constant })
    }
}

fn for_each_anchored_permutation(k: usize, mut f: impl FnMut(&[usize])) {
    let mut rest: Vec<usize> = (1..k).collect();
    fn heap(n: usize, rest: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
        if n <= 1 {
            let mut p = vec![0];
            p.extend_from_slice(rest);
            f(&p);
            return;
        }
        for i in 0..n - 1 {
            heap(n - 1, rest, f);
            if n % 2 == 0 {
                rest.swap(i, n - 1);
            } else {
                rest.swap(0, n - 1);
            }
        }
        heap(n - 1, rest, f);
    }
    if k == 0 {
        return;
    }
    let n = rest.len();
    heap(n, &mut rest, &mut f);
}

/// Connected time-ordered correlation of quadratic observables by the fermionic Wick rule.
///
/// Each ring carries the closed-loop sign: `−Σ_π Tr[O_{π1} G_{π1π2} O_{π2} ⋯ O_{πk} G_{πkπ1}]`
/// with `G_{ij}(y, x) = g₂(t_i, y; t_j, x)` and permutations anchored at `π(1) = 1`.
pub fn ring_cumulant(cache: &TwoPointCache, forms: &[QuadraticForm], times: &[f64]) -> Result<C64> {
    if forms.len() != times.len() {
        return Err(Error::InvalidParameter("one time per observable required".into()));
    }
    let k = forms.len();
    if k == 0 {
        return Ok(c(0.0));
    }
    if k > 6 {
        return Err(Error::CumulantOrderExceeded { order: k, max: 6 });
    }
    let mut g = vec![vec![CMatrix::zeros(0, 0); k]; k];
    for i in 0..k {
        for j in 0..k {
            if i != j || k == 1 {
                g[i][j] = cache.matrix(times[i], times[j]);
            }
        }
    }
    let mut acc = c(0.0);
    for_each_anchored_permutation(k, |p| {
        let mut m = &forms[p[0]].kernel * &g[p[0]][p[(1) % k]];
        for w in 1..k {
            m = m * &forms[p[w]].kernel * &g[p[w]][p[(w + 1) % k]];
        }
        acc -= m.trace();
    });
    if k == 1 {
        acc += forms[0].constant;
    }
    Ok(acc)
}

/// Quadratic-observable front end for [`ring_cumulant`].
pub fn ring_cumulant_operators(cache: &TwoPointCache, basis: &FockBasis, ops: &[FockOperator], times: &[f64]) -> Result<C64> {
    let forms = ops.iter().enumerate().map(|(i, o)| QuadraticForm::from_operator(basis, o, i)).collect::<Result<Vec<_>>>()?;
    ring_cumulant(cache, &forms, times)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecaySample {
    pub t: f64,
    pub x: usize,
    pub tp: f64,
    pub y: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayFit {
    pub prefactor: f64,
    pub rate: f64,
    pub r_squared: f64,
    pub used: usize,
}

/// Fit `|g₂| ≈ C e^{−c(‖x−y‖_L + |t−t′|_β)}` over the samples above `1e−14`.
pub fn decay_fit(cache: &TwoPointCache, geometry: &LatticeGeometry, samples: &[DecaySample]) -> Result<DecayFit> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for s in samples {
        let v = two_point(cache, s.t, s.x, s.tp, s.y).norm();
        if v <= 1e-14 {
            continue;
        }
        let d = geometry.distance(s.x, s.y)? + beta_seminorm(&[s.t - s.tp], cache.beta());
        xs.push(d);
        ys.push(v.ln());
    }
    if xs.is_empty() {
        return Err(Error::DegenerateFit("every sample is below 1e-14".into()));
    }
    let LinearFit { slope, intercept, r_squared } = linear_fit(&xs, &ys)?;
    Ok(DecayFit { prefactor: intercept.exp(), rate: -slope, r_squared, used: xs.len() })
}

/// How cumulants inside the integrability integral are evaluated.
#[derive(Debug, Clone, Copy)]
pub enum CumulantSource<'a> {
    Exact(&'a GibbsEnsemble),
    Ring(&'a TwoPointCache, &'a FockBasis),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrabilityReport {
    pub value: f64,
    pub implied_constant: f64,
    pub order: usize,
    pub weight_power: f64,
    pub nodes: usize,
}

enum Family {
    Exact { ps: Vec<Prepared>, o: Prepared },
    Ring { ps: Vec<QuadraticForm>, o: QuadraticForm },
}

/// `∫_{[0,β]^n} (1 + |t|_β^p) Σ_{X_1…X_n} |⟨T γ_{t1}(P_{X1}); …; γ_{tn}(P_{Xn}); O⟩| dt`.
///
/// `translates` lists the perturbation terms summed over in every slot.
/// The cube is split into the `n!` ordered simplices so that the absolute
/// value is only non-smooth where the cumulant changes sign.
pub fn assumption1_integral(
    source: CumulantSource<'_>,
    translates: &[FockOperator],
    observable: &FockOperator,
    n: usize,
    weight_power: f64,
    grid: &PanelGrid,
) -> Result<IntegrabilityReport> {
    if n == 0 || n > 3 {
        return Err(Error::InvalidParameter(format!("integrability order must be 1, 2 or 3, got {n}")));
    }
    let beta = match source {
        CumulantSource::Exact(ens) => ens.beta(),
        CumulantSource::Ring(cache, _) => cache.beta(),
    };
    let family = match source {
        CumulantSource::Exact(ens) => {
            for (i, p) in translates.iter().chain(std::iter::once(observable)).enumerate() {
                if !p.is_even() {
                    return Err(Error::OddOperatorUnsupported { index: i });
                }
            }
            Family::Exact { ps: translates.iter().map(|p| ens.prepare(p)).collect(), o: ens.prepare(observable) }
        }
        CumulantSource::Ring(_, basis) => Family::Ring {
            ps: translates
                .iter()
                .enumerate()
                .map(|(i, p)| QuadraticForm::from_operator(basis, p, i))
                .collect::<Result<Vec<_>>>()?,
            o: QuadraticForm::from_operator(basis, observable, translates.len())?,
        },
    };
    let m = translates.len();
    let tuples: Vec<Vec<usize>> = (0..m.pow(n as u32))
        .map(|mut code| {
            (0..n)
                .map(|_| {
                    let d = code % m;
                    code /= m;
                    d
                })
                .collect()
        })
        .collect();
    let simplex = grid.simplex(n, DEFAULT_NODE_BUDGET)?;
    let orderings = permutations(n);
    let total_nodes = simplex.len() * orderings.len();
    let integrand = |s: &[f64]| -> Result<f64> {
        let weight = 1.0 + beta_seminorm(s, beta).powf(weight_power);
        let mut sum = 0.0;
        for tuple in &tuples {
            let v = match (&family, source) {
                (Family::Exact { ps, o }, CumulantSource::Exact(ens)) => {
                    let mut items: Vec<(&Prepared, f64)> = tuple.iter().zip(s).map(|(&i, &t)| (&ps[i], t)).collect();
                    items.push((o, 0.0));
                    ens.cumulant_prepared(&items)
                }
                (Family::Ring { ps, o }, CumulantSource::Ring(cache, _)) => {
                    let mut forms: Vec<QuadraticForm> = tuple.iter().map(|&i| ps[i].clone()).collect();
                    forms.push(o.clone());
                    let mut times = s.to_vec();
                    times.push(0.0);
                    ring_cumulant(cache, &forms, &times)?
                }
                _ => unreachable!("family built from the same source"),
            };
            sum += v.norm();
        }
        Ok(weight * sum)
    };
    let partial = simplex
        .par_iter()
        .map(|(pt, w)| {
            let mut acc = 0.0;
            let mut q = vec![0.0; n];
            for perm in &orderings {
                for (k, &p) in perm.iter().enumerate() {
                    q[p] = pt[k];
                }
                acc += integrand(&q)?;
            }
            Ok(acc * w)
        })
        .collect::<Result<Vec<f64>>>()?;
    let value: f64 = partial.into_iter().sum();
    let fact: f64 = (1..=n).map(|k| k as f64).product();
    Ok(IntegrabilityReport {
        value,
        implied_constant: (value / fact).powf(1.0 / n as f64),
        order: n,
        weight_power,
        nodes: total_nodes,
    })
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// All lattice translates of an operator.
pub fn translates_of(basis: &FockBasis, op: &FockOperator) -> Result<Vec<FockOperator>> {
    basis.geometry().shifts().iter().map(|s| basis.translate_operator(op, s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::{gibbs_state, TimedObservable};
    use crate::hamiltonian::{bond_hopping, build_quadratic, QuadraticKernel};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chain(l: usize, t: f64, onsite: impl Fn(usize) -> f64) -> (FockBasis, QuadraticKernel, FockOperator) {
        let g = LatticeGeometry::chain(l);
        let b = FockBasis::with_default_budget(g.clone()).unwrap();
        let k = QuadraticKernel::nearest_neighbor(&g, t, onsite).unwrap();
        let h = build_quadratic(&b, &k).unwrap();
        (b, k, h)
    }

    #[test]
    fn single_level_examples() {
        let k = CMatrix::from_element(1, 1, c(0.4));
        let cache = TwoPointCache::new(&k, 3.0, 0.4).unwrap();
        assert!((two_point(&cache, 0.7 + 1e-12, 0, 0.7, 0) - c(0.5)).norm() < 1e-11);
        assert!((two_point(&cache, 0.7, 0, 0.7, 0) + c(0.5)).norm() < 1e-15);
        let cache = TwoPointCache::new(&CMatrix::from_element(1, 1, c(0.9)), 2.0, 0.1).unwrap();
        let eq = two_point(&cache, 1.1, 0, 1.1, 0);
        // 2×2 trace oracle: ⟨a*a⟩ = e^{−β(ε−μ)}/(1+e^{−β(ε−μ)}).
        let boltz = (-2.0f64 * 0.8).exp();
        assert!((eq + c(boltz / (1.0 + boltz))).norm() < 1e-15);
    }

    #[test]
    fn antiperiodic_and_zero_hopping() {
        let (_, k, _) = chain(4, -1.0, |x| 0.3 * x as f64);
        let cache = TwoPointCache::new(k.matrix(), 2.5, 0.2).unwrap();
        for &(t, tp) in &[(0.3, 1.2), (2.0, 0.1), (0.5, 0.5)] {
            let a = cache.matrix(t, tp);
            let b = cache.matrix(t + 2.5, tp);
            let c2 = cache.matrix(t, tp - 2.5);
            assert!(max_abs(&(a.clone() + b)) < 1e-12);
            assert!(max_abs(&(a + c2)) < 1e-12);
        }
        let (_, k0, _) = chain(4, 0.0, |x| 0.1 * x as f64);
        let cache = TwoPointCache::new(k0.matrix(), 2.0, 0.0).unwrap();
        for x in 0..4 {
            for y in 0..4 {
                if x != y {
                    assert_eq!(two_point(&cache, 0.7, x, 0.2, y), c(0.0));
                }
            }
        }
    }

    #[test]
    fn two_point_matches_fock_trace() {
        let (b, k, h) = chain(4, -1.0, |x| if x % 2 == 0 { 0.4 } else { -0.4 });
        let (beta, mu) = (2.0, 0.15);
        let cache = TwoPointCache::new(k.matrix(), beta, mu).unwrap();
        let ens = gibbs_state(&h, beta, mu).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x = rng.random_range(0..4);
            let y = rng.random_range(0..4);
            let t: f64 = rng.random_range(0.0..beta);
            let tp: f64 = rng.random_range(0.0..beta);
            let ax = ens.prepare(&b.annihilation(x).unwrap());
            let ay = ens.prepare(&b.creation(y).unwrap());
            let exact = if t > tp {
                ens.ordered_product(&[(&ax, t), (&ay, tp)]).unwrap()
            } else {
                -ens.ordered_product(&[(&ay, tp), (&ax, t)]).unwrap()
            };
            assert!((two_point(&cache, t, x, tp, y) - exact).norm() < 1e-10);
        }
    }

    #[test]
    fn quadratic_form_extraction() {
        let (b, _, h) = chain(3, -1.0, |x| 0.2 * x as f64);
        let f = QuadraticForm::from_operator(&b, &(&h + &b.identity()), 0).unwrap();
        assert!((f.constant - c(1.0)).norm() < 1e-15);
        assert!((f.kernel[(0, 1)] - c(-1.0)).norm() < 1e-15);
        let quartic = &b.number(0).unwrap() * &b.number(1).unwrap();
        assert!(matches!(QuadraticForm::from_operator(&b, &quartic, 2), Err(Error::ObservableNotQuadratic { index: 2 })));
    }

    #[test]
    fn ring_single_observable_is_expectation() {
        let (b, k, h) = chain(3, -1.0, |x| 0.2 * x as f64);
        let cache = TwoPointCache::new(k.matrix(), 1.5, 0.3).unwrap();
        let ens = gibbs_state(&h, 1.5, 0.3).unwrap();
        let o = &bond_hopping(&b, 0, 2).unwrap() + &b.number(1).unwrap().scale_real(0.7);
        let v = ring_cumulant_operators(&cache, &b, std::slice::from_ref(&o), &[0.0]).unwrap();
        assert!((v - ens.expectation(&o)).norm() < 1e-13);
    }

    #[test]
    fn ring_matches_exact_cumulants() {
        let (b, k, h) = chain(3, -1.0, |x| 0.2 * x as f64);
        let (beta, mu) = (2.0, 0.1);
        let cache = TwoPointCache::new(k.matrix(), beta, mu).unwrap();
        let ens = gibbs_state(&h, beta, mu).unwrap();
        let ops = [
            bond_hopping(&b, 0, 1).unwrap(),
            b.number(2).unwrap(),
            &b.hopping(1, 2).unwrap().scale(C64::new(0.3, 0.8)) + &b.number(0).unwrap(),
            bond_hopping(&b, 2, 0).unwrap(),
        ];
        let times = [1.3, 0.4, 1.8, 0.0];
        for k in 2..=4 {
            let chosen = &ops[4 - k..];
            let ts = &times[4 - k..];
            let items: Vec<TimedObservable> = chosen.iter().zip(ts).map(|(o, &t)| TimedObservable::new(o.clone(), t)).collect();
            let exact = ens.time_ordered_cumulant(&items).unwrap();
            let ring = ring_cumulant_operators(&cache, &b, chosen, ts).unwrap();
            assert!((exact - ring).norm() < 1e-9, "k={k}: {exact} vs {ring}");
        }
    }

    #[test]
    fn anchored_permutations_count() {
        let mut n = 0;
        for_each_anchored_permutation(4, |p| {
            assert_eq!(p[0], 0);
            n += 1;
        });
        assert_eq!(n, 6);
        assert_eq!(permutations(3).len(), 6);
    }

    #[test]
    fn gapped_decay_fit() {
        let g = LatticeGeometry::chain(8);
        let k = QuadraticKernel::staggered_chain(&g, 1.0, 1.0).unwrap();
        let cache = TwoPointCache::new(k.matrix(), 20.0, 0.0).unwrap();
        let samples: Vec<DecaySample> = (1..=10).map(|t| DecaySample { t: 5.0 + t as f64, x: 0, tp: 5.0, y: 0 }).collect();
        let fit = decay_fit(&cache, &g, &samples).unwrap();
        assert!(fit.rate > 0.0 && fit.r_squared >= 0.95, "{fit:?}");
        let zero = TwoPointCache::new(&CMatrix::zeros(8, 8), 20.0, 0.0).unwrap();
        let off: Vec<DecaySample> = (1..4).map(|r| DecaySample { t: 0.5, x: 0, tp: 0.0, y: r }).collect();
        assert!(matches!(decay_fit(&zero, &g, &off), Err(Error::DegenerateFit(_))));
    }

    #[test]
    fn gapless_spatial_rate_shrinks_with_beta() {
        let g = LatticeGeometry::chain(8);
        let k = QuadraticKernel::nearest_neighbor(&g, -1.0, |_| 0.0).unwrap();
        let rate = |beta: f64| {
            let cache = TwoPointCache::new(k.matrix(), beta, 0.3).unwrap();
            let samples: Vec<DecaySample> = [1, 3].iter().map(|&r| DecaySample { t: 0.5 * beta, x: 0, tp: 0.0, y: r }).collect();
            decay_fit(&cache, &g, &samples).unwrap().rate
        };
        let (hot, cold) = (rate(1.0), rate(3.0));
        assert!(hot > cold && cold > 0.0, "{hot} {cold}");
    }

    #[test]
    fn integrability_vanishes_for_constant_perturbation() {
        let (b, _, h) = chain(3, -1.0, |_| 0.0);
        let ens = gibbs_state(&h, 2.0, 0.0).unwrap();
        let grid = PanelGrid::uniform(0.0, 2.0, 0.5, 8).unwrap();
        let r = assumption1_integral(CumulantSource::Exact(&ens), &[b.identity()], &b.number(0).unwrap(), 1, 1.0, &grid).unwrap();
        assert!(r.value < 1e-13);
    }

    #[test]
    fn integrability_exact_and_ring_agree() {
        let g = LatticeGeometry::chain(4);
        let b = FockBasis::with_default_budget(g.clone()).unwrap();
        let k = QuadraticKernel::staggered_chain(&g, 1.0, 0.8).unwrap();
        let h = build_quadratic(&b, &k).unwrap();
        let beta = 3.0;
        let ens = gibbs_state(&h, beta, 0.0).unwrap();
        let cache = TwoPointCache::new(k.matrix(), beta, 0.0).unwrap();
        let p = translates_of(&b, &b.number(0).unwrap()).unwrap();
        let o = bond_hopping(&b, 1, 2).unwrap();
        let grid = PanelGrid::uniform(0.0, beta, 0.5, 6).unwrap();
        for n in 1..=2 {
            let a = assumption1_integral(CumulantSource::Exact(&ens), &p, &o, n, 1.0, &grid).unwrap();
            let r = assumption1_integral(CumulantSource::Ring(&cache, &b), &p, &o, n, 1.0, &grid).unwrap();
            assert!((a.value - r.value).abs() <= 1e-7 * (1.0 + a.value), "n={n}: {} vs {}", a.value, r.value);
            assert!(a.value > 0.0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn antiperiodicity(t in -6.0f64..6.0, tp in -6.0f64..6.0, x in 0usize..4, y in 0usize..4) {
            let (_, k, _) = chain(4, -1.0, |s| 0.25 * s as f64);
            let cache = TwoPointCache::new(k.matrix(), 2.0, 0.1).unwrap();
            let a = two_point(&cache, t, x, tp, y);
            let b = two_point(&cache, t + 2.0, x, tp, y);
            prop_assume!(((t - tp) / 2.0).fract().abs() > 1e-9);
            prop_assert!((a + b).norm() <= 1e-12);
        }
    }
}
