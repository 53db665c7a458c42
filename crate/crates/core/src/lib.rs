//! Anchor-free Siamese tracking: label assignment, a CPU model with manual
//! backward passes, training, inference and OTB-style evaluation.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod labels;
pub mod loss;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod track;
pub mod train;

pub use error::{Error, Result};
