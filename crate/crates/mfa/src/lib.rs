//! Mixture of factor analyzers: training, sampling, and outlier scoring.
//!
//! Each mixture component models its covariance as a low-rank loading matrix
//! plus a diagonal, so high-dimensional data can be fit without ever storing
//! or inverting a dense D x D matrix. Two trainers are provided:
//!
//! * [`em::fit_em`] - batch expectation-maximization in the covariance
//!   parameterization, initialized by k-means and per-cluster PPCA.
//! * [`sgd::fit_sgd`] - constrained mini-batch gradient ascent in the
//!   precision parameterization, from random initial conditions, with a
//!   diagonalization/eigenvalue-floor constraint pass after every step.
//!
//! Trained models support density evaluation, responsibilities, sampling,
//! outlier scoring with ROC-AUC, text-format persistence, and PGM image-grid
//! export. See the `examples/` directory for runnable walkthroughs of each
//! capability and `src/bin/mfa.rs` for the command-line front end.

pub mod dataio;
pub mod em;
pub mod error;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod score;
pub mod sgd;

pub mod cli;

pub use error::{MfaError, Result};
pub use model::{MfaComponent, MfaModel, PrecisionComponent, PrecisionModel, PsiMode};
