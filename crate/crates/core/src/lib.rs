//! Multilevel ensemble Kalman filtering.
//!
//! The crate is organized bottom-up:
//!
//! - [`models`]: hidden-state SDE models and the one-unit-time propagators,
//!   including fine/coarse propagation driven by a shared Brownian path.
//! - [`enkf`]: the plain perturbed-observation ensemble Kalman filter.
//! - [`mlenkf`]: the multilevel estimator built from independent samples of
//!   pairwise-coupled (fine, coarse, coarse) EnKF triples, its parameter
//!   planner, and the experimental four-coupled multi-index difference.
//! - [`reference`]: exact Kalman filtering for linear-Gaussian problems and
//!   the density-based deterministic mean-field EnKF for scalar nonlinear ones.
//! - [`harness`]: observation synthesis, replicated RMSE-versus-runtime
//!   experiments, slope fitting and result emission.
//!
//! All numerical code is generic over [`Real`]; the aliases below fix the
//! common `f64` instantiations.

pub mod enkf;
pub mod error;
pub mod harness;
pub mod mlenkf;
pub mod models;
pub mod reference;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::{round_half_away, Real};

pub type DynamicsModelF64 = models::DynamicsModel<f64>;
pub type NoisePathF64 = models::NoisePath<f64>;
pub type EnsembleStateF64 = enkf::EnsembleState<f64>;
pub type ObservationModelF64 = enkf::ObservationModel<f64>;
pub type ObservableF64 = enkf::Observable<f64>;
pub type CoupledLevelStateF64 = mlenkf::CoupledLevelState<f64>;
pub type GaussianStateF64 = reference::GaussianState<f64>;
pub type LinearModelF64 = reference::LinearModel<f64>;
pub type DensityGridF64 = reference::DensityGrid<f64>;

pub type DynamicsModelF32 = models::DynamicsModel<f32>;
pub type EnsembleStateF32 = enkf::EnsembleState<f32>;
pub type ObservationModelF32 = enkf::ObservationModel<f32>;
