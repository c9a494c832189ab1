//! Iterative-regularization ensemble methods for Bayesian inverse problems.
//!
//! The crate bundles the inversion algorithms (IR-enLM, IR-ES), their
//! unregularized baselines (RML via Levenberg–Marquardt, the ensemble
//! smoother), a two-phase incompressible reservoir simulator that serves as
//! the nonlinear forward map, and a pCN MCMC pipeline that produces the
//! reference posterior moments the ensembles are scored against.

pub mod baselines;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod field;
pub mod forward;
pub mod io;
pub mod ir_enlm;
pub mod ir_es;
pub mod linalg;
pub mod mcmc;
pub mod metrics;
pub mod observations;
pub mod reservoir;
pub mod rng;

pub use error::{Error, Result};
