//! Simulation and exact evaluation of the joint fluctuations of trace powers
//! `Tr(W_i^p)` for Wishart matrices built from overlapping blocks of one
//! infinite array of time-correlated random entries.
//!
//! The crate has three independent routes to the same covariance:
//!
//! * [`montecarlo::run`] samples the finite-`L` matrix model and estimates the
//!   sample covariance of the trace statistics.
//! * [`theory::covariance_quadrature`] integrates the limiting double contour
//!   integral over semicircles numerically.
//! * [`theory::covariance_exact`] evaluates the same limit as a terminating
//!   residue sum.

pub mod ensemble;
pub mod entry_process;
pub mod montecarlo;
pub mod rng;
pub mod theory;

pub use ensemble::{ExperimentGeometry, ObservableSpec, OverlapStats, ReplicaStatistics};
pub use entry_process::{EntryProcessSpec, ProcessFamily, ScalarField, TimeGrid};

pub use montecarlo::{McConfig, McEstimate, Workers};
pub use rng::StreamSeed;
pub use theory::CovarianceParams;
