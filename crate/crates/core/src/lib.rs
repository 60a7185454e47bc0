//! Dataset-geometry toolkit: transfer-predictive distances between labeled
//! embedding datasets, contrastive refinement of a metric head, and
//! dataset-level decision protocols scored against transfer matrices.

pub mod align;
pub mod cde;
pub mod cli;
pub mod data;
pub mod directed;
pub mod distance;
pub mod encoder;
pub mod error;
pub mod protocols;
pub mod robustness;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
