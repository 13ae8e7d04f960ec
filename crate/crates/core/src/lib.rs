//! Desk-scale laboratory for length generalization of causal transformers
//! without position encoding: tiny NoPE/RoPE byte-level language models, an
//! attention-entropy probe, and attention-temperature scaling (uniform grid
//! sweep and constrained per-head tuning).

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod probe;
pub mod report;
pub mod scale;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
