//! Multi-stage policy learning over natural-language actions.
//!
//! Per-stage text classifiers act as Q-functions over the encoder space of a
//! small "Repeat" encoder–decoder. Actions are improved by gradient ascent on
//! their embedding rows and decoded back to text, and stages are fitted by
//! backward induction on pseudo-outcomes.

pub mod error;
pub mod eval;
pub mod nn;
pub mod numerics;
pub mod optimize;
pub mod par;
pub mod pipeline;
pub mod qlearn;
pub mod repeat;
pub mod text;
pub mod train;

pub use error::{Error, Result};
