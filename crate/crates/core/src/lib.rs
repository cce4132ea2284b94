//! Preference-conditioned multimodal scoring.
//!
//! A prompt, an image, and a preference condition (a set of attribute words)
//! are encoded by small transformer encoders. A condition mask selects the
//! prompt tokens relevant to the condition, masked cross-attention fuses the
//! image with the surviving tokens, and a learned scale turns the fused
//! features into a scalar score. Models are trained on pairwise soft
//! preference labels.

pub mod autodiff;
pub mod cli;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod head;
pub mod io_util;
pub mod mask;
pub mod model;
pub mod optim;
pub mod params;
pub mod scoring;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
