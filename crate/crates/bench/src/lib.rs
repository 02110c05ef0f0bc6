//! Shared fixtures for the benchmarks.

use wickbench_core::hamiltonian::{bond_hopping, weakly_interacting, InteractionKernel};
use wickbench_core::{FockBasis, FockOperator, LatticeGeometry, QuadraticKernel};

pub struct Fixture {
    pub basis: FockBasis,
    pub kernel: QuadraticKernel,
    pub hamiltonian: FockOperator,
    pub perturbation: FockOperator,
}

/// Staggered chain of `side` sites with optional nearest-neighbour interaction.
pub fn staggered(side: usize, coupling: f64) -> Fixture {
    let g = LatticeGeometry::new(1, side, 1).expect("geometry");
    let basis = FockBasis::new(g.clone(), 1 << 14).expect("basis");
    let kernel = QuadraticKernel::staggered_chain(&g, 1.0, 0.8).expect("kernel");
    let interaction = (coupling != 0.0).then(|| InteractionKernel::nearest_neighbor(&g, 1.0, coupling).expect("interaction"));
    let hamiltonian = weakly_interacting(&basis, &kernel, interaction.as_ref()).expect("hamiltonian");
    let perturbation = &basis.number(0).expect("n0") + &bond_hopping(&basis, 0, 1).expect("hop");
    Fixture { basis, kernel, hamiltonian, perturbation }
}
