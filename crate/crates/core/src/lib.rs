//! Discretised p-adic scattering equation on truncated ultrametric lattices.
//!
//! The modules build bottom-up:
//!
//! * [`padic`]: the lattice of cells, exact residue arithmetic, Haar quadrature.
//! * [`kernel`]: cross-section families and their sampling.
//! * [`generator`]: the conservative gain/loss operator and its rescaling.
//! * [`dynamics`]: forward, dual and rescaled time integration.
//! * [`spectral`]: steady and dual steady states, the Poincaré constant.
//! * [`entropy`]: relative entropies, their dissipation and decay fitting.
//! * [`cli`]: the configuration-driven experiment runner behind `uscatter`.

pub mod cli;
pub mod dynamics;
pub mod entropy;
pub mod error;
pub mod generator;
pub mod kernel;
pub mod linalg;
pub mod padic;
pub mod rng;
pub mod spectral;

pub use error::{Error, Result};
pub use generator::{KMode, RescaleLevel};
pub use padic::{Grid, LatticeFunction};
