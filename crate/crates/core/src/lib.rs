//! Desk-scale generative visual instruction tuning.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod image;
pub mod infer;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
