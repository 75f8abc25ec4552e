//! Bayesian inference for finite mixtures whose components are themselves
//! Dirichlet process mixtures of Gaussians.
//!
//! The crate is organised bottom-up:
//!
//! * [`rngdist`]: counter-based random streams and the samplers/densities the
//!   model needs (truncated normals, inverse-gamma, inverse-Wishart, ...).
//! * [`geometry`]: connected-region distances and the separation checks used
//!   to decide whether a set of mixing measures is identifiable.
//! * [`hermite`]: the Hermite-function component-splitting estimator.
//! * [`model`]: hyperparameters, chain state and density evaluation.
//! * [`sampler`]: the slice sampler with repulsive region priors.
//! * [`summary`]: posterior density bands, weight tables and CDF grids.
//! * [`synthgen`]: synthetic truths used by tests and experiments.

pub mod error;
pub mod geometry;
pub mod hermite;
pub mod model;
pub mod quad;
pub mod rngdist;
pub mod sampler;
pub mod stats;
pub mod summary;
pub mod synthgen;

pub use error::{Error, Result};
