//! Optimization of mixed p-spin Hamiltonians by incremental approximate
//! message passing driven by a Parisi-type optimizer.

pub mod dynamics;
pub mod error;
pub mod hamiltonian;
pub mod iamp;
pub mod mixture;
pub mod oracle;
pub mod parisi;
pub mod rounding;
pub(crate) mod special;
pub mod variational;

pub use error::{Error, Result};
pub use hamiltonian::{DisorderSample, SpinConfig};
pub use mixture::Mixture;
pub use parisi::{solve_parisi, GammaPath, ParisiSolution, PdeGrid};
