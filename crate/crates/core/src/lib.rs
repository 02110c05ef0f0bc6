//! Finite-volume lattice fermion toolkit: Fock space, Gibbs states,
//! switching functions, real-time dynamics and the Wick-rotated expansion.

pub mod equilibrium;
pub mod error;
pub mod fit;
pub mod freefermion;
pub mod hamiltonian;
pub mod lattice;
pub mod linalg;
pub mod quadrature;
pub mod realtime;
pub mod switch;
pub mod wick;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use equilibrium::{gibbs_state, GibbsEnsemble, TimedObservable};
pub use error::{Error, Result};
pub use freefermion::{two_point, TwoPointCache};
pub use hamiltonian::{DrivenHamiltonian, InteractionKernel, QuadraticKernel};
pub use lattice::{FockBasis, FockOperator, LatticeGeometry};
pub use linalg::{CMatrix, C64};
pub use realtime::{evolve_gibbs, propagate, PropagationControls, SwitchSource};
pub use switch::{PeriodizedSwitch, SwitchSpec};
pub use wick::{verify_wick_rotation, AdiabaticSweepRow, WickReport};
