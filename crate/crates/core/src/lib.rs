//! Polynomial NARX/NARMAX identification: data preparation, structure
//! selection, unconstrained/constrained/multi-objective estimation,
//! steady-state analysis and validation.

pub mod dataset;
pub mod dynamics;
pub mod error;
pub mod estimators;
pub mod greybox;
pub mod linalg;
pub mod optim;
pub mod pipeline;
pub mod selection;
pub mod structure;
pub mod validation;

pub use error::{NarxError, Result};
