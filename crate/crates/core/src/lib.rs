//! Stepwise pseudo-likelihood estimation of latent class mixture models.
//!
//! A model links a latent categorical class to observed indicators (the
//! measurement model) and to covariates and distal outcomes (the structural
//! model). Estimators fit both jointly (one-step), the structural part with
//! the measurement part held fixed (two-step), or the structural part from
//! imputed class weights with optional BCH or ML bias correction (three-step).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bootstrap;
pub mod covariate;
pub mod data;
pub mod em;
pub mod emission;
pub mod error;
pub mod inference;
pub mod math;
pub mod report;
pub mod simulation;
pub mod stepwise;

pub use data::{load_csv, read_csv, Block, Dataset, Family, ModelDescriptor, Role};
pub use em::{
    e_step, fit_em, EmConfig, FitMeta, FittedBlock, MixtureModel, ModelInput, ModelSpec,
    Responsibilities,
};
pub use emission::{Covariance, EmissionParams};
pub use error::{Error, Result};
pub use stepwise::{Assignment, Correction, StepwiseConfig};
