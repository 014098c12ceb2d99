//! Single-index models for clustered data.
//!
//! Estimation uses bias-corrected generalized estimating equations with a
//! local-linear kernel smoother for the unknown link; variable selection uses
//! smooth-threshold estimating equations tuned by a BIC-type criterion.
//! The [`sim`] module reproduces the Monte Carlo design used to study the
//! estimators.

// `!(x > 0.0)` is used deliberately so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod correlation;
pub mod data;
pub mod error;
pub mod gee;
pub mod geometry;
pub mod sgee;
pub mod sim;
pub mod smoother;

pub use data::{Cluster, ClusteredDataset, CsvSchema};
pub use error::{Error, Result};
pub use geometry::IndexParam;
