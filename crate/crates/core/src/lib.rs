//! Multi-task transformer training with ensemble knowledge distillation.
//!
//! A shared encoder (embeddings plus a post-norm transformer stack) feeds one
//! output head per task. [`mtl`] trains all tasks jointly from single-task
//! mini-batches; [`distill`] trains per-task teacher ensembles and distils
//! their averaged predictions back into one multi-task student.

pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod heads;
pub mod model;
pub mod mtl;
pub mod encoder;
pub mod numerics;

pub use error::{Error, Result};
