//! In-context uncertainty quantification for linear-Gaussian regression
//! tasks: a small transformer with a mean/scale readout, the conjugate
//! Bayes oracle it is compared against, and the experiment suites.

pub mod baselines;
pub mod bayes;
pub mod error;
pub mod experiments;
pub mod io;
pub mod linalg;
pub mod montecarlo;
pub mod par;
pub mod predict;
pub mod rng;
pub mod taskgen;
pub mod trainer;
pub mod transformer;

pub use error::{Error, Result};
