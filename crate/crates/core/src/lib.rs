//! Cascaded selective-mask fine-tuning for multi-objective embedding
//! retrieval.
//!
//! One two-tower model is trained in three cascaded stages (exposure, click,
//! conversion). After each of the first two stages the stage's parameters are
//! magnitude-pruned, the survivors are briefly re-tuned and frozen, and the
//! pruned capacity is handed to the next stage. Because later stages can only
//! write into their own output blocks, the user and item vectors decompose
//! into exposure / click / conversion segments, and any weighted blend of the
//! three objectives is a single inner product at serving time.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod objectives;
pub mod pipeline;
pub mod pruning;
pub mod stagenet;
pub mod towers;

pub use error::{CsmfError, Result};
