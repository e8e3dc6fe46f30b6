//! Origin-destination demand calibration by simulation-based optimization.
//!
//! The calibration objective combines the squared error of path travel times with the
//! variance of the ratios between simulated and sampled segment counts. The latter constrains
//! the spatial shape of the flows even when the sampling rate is unknown. The objective is
//! optimized with a metamodel loop: a physics-based analytical model plus fitted affine
//! corrections is minimized from the incumbent, and each candidate is evaluated in the
//! stochastic [`simulator`].

pub mod analytical;
pub mod eval;
pub mod measurement;
pub mod network;
pub mod scenario;
pub mod simulator;
pub mod solver;
pub mod synthetic;
