//! Turns a validated config into Fock-space operators.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wickbench_core::hamiltonian::{bond_current, bond_hopping, weakly_interacting};
use wickbench_core::lattice::DEFAULT_MAX_DIM;
use wickbench_core::linalg::c;
use wickbench_core::{FockBasis, FockOperator, InteractionKernel, LatticeGeometry, QuadraticKernel, SwitchSpec, C64};

use crate::config::{ExperimentConfig, KernelConfig, SwitchConfig, TermConfig};
use crate::error::CliError;

pub const MAX_DIM_ENV: &str = "WICKBENCH_MAX_DIM";

/// Everything a run needs, built once per invocation.
#[derive(Debug, Clone)]
pub struct Model {
    pub basis: FockBasis,
    pub kernel: QuadraticKernel,
    pub interacting: bool,
    pub hamiltonian: FockOperator,
    pub perturbation: FockOperator,
    pub observable: FockOperator,
    pub switch: SwitchSpec,
}

pub fn max_dim_from_env() -> Result<usize, CliError> {
    match std::env::var(MAX_DIM_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&d| d > 0)
            .ok_or_else(|| CliError::Config(format!("{MAX_DIM_ENV} must be a positive integer, got {v:?}"))),
        Err(_) => Ok(DEFAULT_MAX_DIM),
    }
}

pub fn switch_spec(cfg: &SwitchConfig) -> Result<SwitchSpec, CliError> {
    Ok(match cfg {
        SwitchConfig::Exp => SwitchSpec::exponential(),
        SwitchConfig::PolyFlat { m } => SwitchSpec::poly_flat(*m),
        SwitchConfig::Atoms { atoms } => SwitchSpec::from_atoms(atoms)?,
        SwitchConfig::Rational { a, n } => SwitchSpec::rational(*a, *n)?,
    })
}

fn kernel(geometry: &LatticeGeometry, cfg: &KernelConfig) -> Result<QuadraticKernel, CliError> {
    let modes = geometry.mode_count();
    Ok(match cfg {
        KernelConfig::Chain { hopping, onsite } => {
            let onsite = match onsite.len() {
                0 => vec![0.0; modes],
                1 => vec![onsite[0]; modes],
                n if n == modes => onsite.clone(),
                n => return Err(CliError::Config(format!("kernel.onsite has {n} entries for {modes} modes"))),
            };
            QuadraticKernel::nearest_neighbor(geometry, *hopping, |x| onsite[x])?
        }
        KernelConfig::Staggered { hopping, delta } => QuadraticKernel::staggered_chain(geometry, *hopping, *delta)?,
        KernelConfig::SingleMode { level } => QuadraticKernel::new(geometry, DMatrix::from_element(1, 1, c(*level)), 0.0)?,
    })
}

fn random_quadratic(basis: &FockBasis, sites: &[usize], rng: &mut ChaCha8Rng) -> Result<FockOperator, CliError> {
    let mut acc = basis.zero();
    for (i, &x) in sites.iter().enumerate() {
        let d: f64 = rng.random_range(-1.0..1.0);
        acc = &acc + &basis.number(x)?.scale_real(d);
        for &y in &sites[i + 1..] {
            let z = C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let h = basis.hopping(x, y)?.scale(z);
            acc = &acc + &(&h + &h.adjoint());
        }
    }
    Ok(acc)
}

fn term(basis: &FockBasis, t: &TermConfig, rng: &mut ChaCha8Rng) -> Result<FockOperator, CliError> {
    Ok(match t {
        TermConfig::Density { site, weight } => basis.number(*site)?.scale_real(*weight),
        TermConfig::Hopping { x, y, weight } => bond_hopping(basis, *x, *y)?.scale_real(*weight),
        TermConfig::Current { x, y, weight } => bond_current(basis, *x, *y)?.scale_real(*weight),
        TermConfig::Number { weight } => basis.total_number().scale_real(*weight),
        TermConfig::Identity { weight } => basis.identity().scale_real(*weight),
        TermConfig::Random { sites, weight } => random_quadratic(basis, sites, rng)?.scale_real(*weight),
    })
}

fn operator(basis: &FockBasis, terms: Option<&[TermConfig]>, rng: &mut ChaCha8Rng) -> Result<FockOperator, CliError> {
    let Some(terms) = terms else {
        return Ok(basis.number(0)?);
    };
    let mut acc = basis.zero();
    for t in terms {
        acc = &acc + &term(basis, t, rng)?;
    }
    Ok(acc)
}

impl Model {
    pub fn build(cfg: &ExperimentConfig, max_dim: usize) -> Result<Self, CliError> {
        let l = &cfg.model.lattice;
        let geometry = LatticeGeometry::new(l.dim, l.side, l.labels)?;
        let basis = FockBasis::new(geometry.clone(), max_dim)?;
        let kernel = kernel(&geometry, &cfg.model.kernel)?;
        let interaction = match &cfg.model.interaction {
            Some(i) => Some(InteractionKernel::nearest_neighbor(&geometry, i.u, i.coupling)?),
            None => None,
        };
        let hamiltonian = weakly_interacting(&basis, &kernel, interaction.as_ref())?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let perturbation = operator(&basis, cfg.perturbation.as_deref(), &mut rng)?;
        let observable = operator(&basis, cfg.observable.as_deref(), &mut rng)?;
        let switch = switch_spec(&cfg.drive.switch)?;
        let interacting = interaction.as_ref().is_some_and(|k| k.coupling() != 0.0);
        Ok(Self { basis, kernel, interacting, hamiltonian, perturbation, observable, switch })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> ExperimentConfig {
        ExperimentConfig::from_json(text).unwrap()
    }

    #[test]
    fn random_terms_follow_the_seed() {
        let text = r#"{"schema": 1, "model": {"lattice": {"side": 3}, "kernel": {"type": "chain", "hopping": -1.0}},
            "state": {"beta": 1.0}, "observable": [{"type": "random", "sites": [0, 1, 2]}]}"#;
        let mut a = cfg(text);
        let m1 = Model::build(&a, DEFAULT_MAX_DIM).unwrap();
        let m2 = Model::build(&a, DEFAULT_MAX_DIM).unwrap();
        assert_eq!(m1.observable.matrix(), m2.observable.matrix());
        assert!(m1.observable.is_self_adjoint(1e-14));
        assert!(m1.observable.gauge_invariant());
        a.seed = 5;
        let m3 = Model::build(&a, DEFAULT_MAX_DIM).unwrap();
        assert!(m1.observable.distance_to(&m3.observable) > 1e-3);
    }

    #[test]
    fn onsite_length_must_match() {
        let text = r#"{"schema": 1, "model": {"lattice": {"side": 3}, "kernel": {"type": "chain", "hopping": -1.0, "onsite": [1.0, 2.0]}},
            "state": {"beta": 1.0}}"#;
        assert!(matches!(Model::build(&cfg(text), DEFAULT_MAX_DIM), Err(CliError::Config(_))));
    }

    #[test]
    fn oversized_lattice_is_a_budget_error() {
        let text = r#"{"schema": 1, "model": {"lattice": {"side": 5}, "kernel": {"type": "chain", "hopping": -1.0}},
            "state": {"beta": 1.0}}"#;
        assert!(matches!(Model::build(&cfg(text), 16), Err(CliError::Budget(_))));
    }
}
