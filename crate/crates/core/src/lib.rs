//! Training-free open-vocabulary semantic segmentation by repeated normalized
//! cuts over self-supervised patch features, grounded with text embeddings.

pub mod affinity;
pub mod cli;
pub mod error;
pub mod eval;
pub mod grounding;
pub mod panoptic;
pub mod pipeline;
pub mod refine;
pub mod spectral;
pub mod tensor_io;

pub use error::{Error, Result};
