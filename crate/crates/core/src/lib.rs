//! Few-shot segmentation by similarity propagation: a shared encoder, dual
//! foreground/background probes, attentive fusion and a shared decoder that
//! predicts both the query and the support mask.

pub mod data;
pub mod error;
pub mod eval;
pub mod mask;
pub mod model;
pub mod selfcheck;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use mask::Mask;
