//! Variational inference as Wasserstein gradient flow.
//!
//! Path-derivative gradient estimators for f-divergences over Gaussian,
//! diagonal and mixture families, the Bures-Wasserstein ODEs they
//! discretize, Langevin particle simulation, and the Gaussian optimal
//! transport geometry that ties them together.

pub mod divergences;
pub mod error;
pub mod families;
pub mod flows;
pub mod geometry;
pub mod gradients;
pub mod linalg;
pub mod parallel;
pub mod runner;
pub mod targets;

pub use divergences::FDivergence;
pub use error::{Error, Result};
pub use families::{
    DiagGaussianParams, FamilyParams, GaussianParams, MixtureParams, NoiseBatch,
};
pub use targets::{
    GaussianTarget, LogisticPosterior, MixtureTarget, RosenbrockTarget, TargetDensity,
};
pub use runner::{RunConfig, Trajectory};
