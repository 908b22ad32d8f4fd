//! Estimation of additive and multiplicative local average treatment
//! effects with a binary instrument, treatment and outcome.
//!
//! The effect curve `theta(X)` is modelled together with
//! variation-independent nuisance curves, so every fitted model implies a
//! valid observed-data law. Estimators:
//!
//! - joint maximum likelihood ([`proposed::fit_mle`]);
//! - doubly robust g-estimation with identity or optimal weights
//!   ([`proposed::fit_dr`], [`proposed::fit_dr_simple`]);
//! - the comparison estimators in [`comparators`].
//!
//! [`estimator::Estimator`] names each one by tag, and
//! [`estimator::fit_batch`] shares first-stage fits between them.
//! [`inference`] holds the bootstrap and the Monte Carlo harness, and
//! [`simulation`] holds the data-generating design.

// negated comparisons double as NaN guards; index loops mirror the formulas
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod param;
pub mod data;
pub mod models;
pub mod numopt;
pub mod proposed;
pub mod comparators;
pub mod estimator;
pub mod simulation;
pub mod inference;
pub mod io;
pub mod cli;

pub use data::Dataset;
pub use error::{IvError, Result};
pub use estimator::{fit_batch, fit_estimator, Estimator, FitSettings};
pub use models::{Design, ModelSet};
pub use param::{Scale, StructuralPoint};
pub use proposed::FitResult;
pub use simulation::{DgpSpec, Scenario};
