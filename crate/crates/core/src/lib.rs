//! Polynomial chaos expansions for AC power flow under load uncertainty.
//!
//! The crate models a transmission grid with stochastic area loads, propagates
//! the uncertainty through the rectangular power flow equations with a sparse
//! iterative degree-2 chaos expansion, and validates the resulting output
//! distributions against plain Monte-Carlo simulation. A chance-constrained
//! OPF driver tightens operating limits until quantiles of the monitored
//! quantities respect the original bounds.
//!
//! Module map:
//! * [`net`] network model: case parsing, admittance matrices, synthetic grids
//! * [`pf`] deterministic rectangular Newton power flow
//! * [`basis`] orthonormal polynomial bases, multi-indices, product tensors
//! * [`stochastic`] load areas, fluctuation model, reproducible sampling
//! * [`spice`] the staged sparse degree-2 expansion solver
//! * [`uq`] Monte-Carlo runner, histograms, total-variation metrics, moments
//! * [`ccopf`] iterative chance-constrained OPF
//! * [`coeffio`] coefficient file round-trip

pub mod basis;
pub mod ccopf;
pub mod coeffio;
pub mod error;
pub mod linalg;
pub mod net;
pub mod pf;
pub mod spice;
pub mod stochastic;
pub mod uq;

pub use error::{Error, Result};
