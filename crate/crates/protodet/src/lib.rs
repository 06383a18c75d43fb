//! Few-shot object detection on procedurally generated scenes.
//!
//! The pipeline classifies region proposals by correlating their embeddings
//! against class prototypes built from a handful of support crops, after a
//! short inner-loop adaptation of the embedding head on those same supports.
//! Everything is driven by explicit seeds and plain f64 math so runs are
//! reproducible bit for bit.

pub mod cli;
pub mod episodic;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod meta;
pub mod metric;
pub mod model;
pub mod par;
pub mod rng;
pub mod toydata;
pub mod tensor;

pub use error::{Error, Result};
