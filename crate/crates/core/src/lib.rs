//! Risk-factor discovery and outcome prediction from longitudinal patient
//! event streams.
//!
//! The pipeline runs in stages, each usable on its own:
//!
//! 1. [`emr_store`] ingests coded events and assembles patient histories.
//! 2. [`cohort`] admits patients by diagnosis, lab and encounter criteria
//!    and labels right-censored outcomes.
//! 3. [`features`] aggregates labs into a survival covariate matrix and
//!    rolling observation/prediction windows.
//! 4. [`cox`] fits an L1-penalized Cox model (Efron ties) and ranks factors.
//! 5. [`logit`] fits an L1-penalized logistic classifier on window features.
//! 6. [`eval`] runs the cross-validated comparison of feature sets and
//!    observation periods.
//!
//! [`synth`] generates event streams with a planted hazard structure, and
//! [`pipeline`] wires the stages to on-disk artifacts for the CLI.

pub mod cohort;
pub mod cox;
pub mod emr_store;
pub mod error;
pub mod eval;
pub mod features;
pub mod folds;
pub mod logit;
pub mod pipeline;
pub mod prox;
pub mod synth;

pub use error::{HazardError, Result};
