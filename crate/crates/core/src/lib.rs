//! Multi-source domain generalization for pedestrian trajectory prediction.
//!
//! A recurrent encoder–decoder predictor is extended with domain-invariant
//! and domain-specific feature extractors, trained in three stages over
//! several labeled source domains and evaluated on an unseen target domain.

pub mod backbone;
pub mod batch;
pub mod checkpoint;
pub mod data;
pub mod disentangle;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod nn;
pub mod training;
pub mod types;

pub use error::{Error, Result};
pub use types::*;
