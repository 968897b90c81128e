//! Memory-bounded posterior sampling for Bayesian-bootstrap functionals.
//!
//! The crate is organised the way a run flows:
//!
//! * [`rng`]: splittable, reproducible random streams and the variate
//!   generators (Gamma, Dirichlet, Beta, skew-normal, Student-t).
//! * [`data`]: chunked datasets, random partitions, uniform subsamples and
//!   materialisation of subsets into design matrices.
//! * [`functionals`]: weighted regression functionals evaluated at a
//!   discrete weighted measure.
//! * [`engines`]: the samplers: full Bayesian bootstrap, bag of little
//!   Bayesian bootstraps, subsampled double Bayesian bootstrap, lossless
//!   Gamma accumulation and the Dirichlet-process variants.
//! * [`summaries`]: posterior summaries, their combination and error metrics.
//! * [`baselines`]: asymptotic-normal comparators.
//! * [`simlab`]: simulation designs and the experiment harness.

pub mod baselines;
pub mod data;
pub mod diagnostics;
pub mod engines;
pub mod error;
pub mod exec;
pub mod functionals;
mod linalg;
pub mod rng;
pub mod simlab;
pub mod summaries;

pub use error::{Error, Result};

/// Crate version embedded in every exported artifact.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
