//! Constrained additive noise mechanisms that minimize the Fisher information
//! an adversary can extract from a released response, together with
//! Cramér–Rao, differential-privacy and PDE-residual checks.

pub mod adversary;
pub mod cli;
pub mod densities;
pub mod dynamic;
pub mod error;
pub mod fisher;
pub mod matcore;
pub mod mechanisms;
pub mod pde_verify;
pub mod privacy_analysis;
pub mod quad;
pub mod server;

pub use densities::{
    CosSqDensity, GaussianDensity, Interval, LaplaceDensity, NoiseDensity, NoiseSpec, ProductCosSqDensity,
    ScalarDensity, TiltedCosSqDensity, WeightFunction, WeightSpec,
};
pub use error::{Error, Result};
pub use fisher::{FisherReport, ObjectiveReport};
pub use matcore::{Matrix, SpectralDecomposition};
pub use mechanisms::{Budget, Mechanism, MechanismConfig, NoiseFamily, Query, QuerySpec, Response};
