//! Desk-scale meta representation transformation for cross-lingual transfer.
//!
//! A small transformer encoder is fine-tuned on a high-resource source
//! language while a bottlenecked feed-forward network rewrites the source
//! representations at one layer. The transformation is trained with a
//! one-step lookahead so that source updates reduce the target-language
//! loss, then thrown away before evaluation.

pub mod autodiff;
pub mod bilevel;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod rtn;

pub use error::{Error, Result};
