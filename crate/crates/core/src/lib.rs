//! Structure-adaptive conformal q-values for outlier detection with
//! false discovery rate control, plus pseudo-score model selection.

pub mod bench;
pub mod cli;
pub mod conformal;
pub mod datamodel;
pub mod error;
pub mod kernel;
pub mod modelselect;
pub mod pipeline;
pub mod scoring;
pub mod seeding;
pub mod weights;

pub use error::{Error, Result};
