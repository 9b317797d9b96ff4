//! Joint Bayesian models for mixed-type multivariate spatial responses.
//!
//! Responses of different exponential-family types share a latent matrix-normal
//! field with a separable Matérn cross-covariance. The spatial precision is
//! approximated by a sparse Vecchia factor, the posterior is sampled by
//! Metropolis-within-Gibbs with elliptical slice updates for the latent field,
//! and predictions at new sites use the precision blocks of a joint factor.
//!
//! ```
//! use mixspat::simulate::{simulate_dataset, SimulationScenario};
//! use mixspat::study::{config_for_scenario, fit};
//!
//! let scn = SimulationScenario::gaussian_poisson(50, 0.1, true, 1);
//! let sim = simulate_dataset(&scn, 0).unwrap();
//! let mut cfg = config_for_scenario(&scn);
//! cfg.mcmc.iterations = 100;
//! cfg.mcmc.burn_in = 50;
//! let chain = fit(&sim.train, &cfg.prior_for(&sim.train).unwrap(), &cfg).unwrap();
//! assert_eq!(chain.len(), 50);
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod data;
pub mod error;
pub mod evaluate;
pub mod families;
pub mod geometry;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod matrixvariate;
pub mod mcmc;
pub mod predict;
pub mod rng;
pub mod simulate;
pub mod stats;
pub mod study;
pub mod vecchia;

pub use error::{Error, Result};

/// The guide's chapters, compiled so their snippets run as doctests.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/geometry.md")]
    pub struct Geometry;
    #[doc = include_str!("../../../book/src/kernels.md")]
    pub struct Kernels;
    #[doc = include_str!("../../../book/src/vecchia.md")]
    pub struct Vecchia;
    #[doc = include_str!("../../../book/src/families.md")]
    pub struct Families;
    #[doc = include_str!("../../../book/src/mcmc.md")]
    pub struct Mcmc;
    #[doc = include_str!("../../../book/src/prediction.md")]
    pub struct Prediction;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub struct Evaluation;
    #[doc = include_str!("../../../book/src/simulation.md")]
    pub struct Simulation;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
