//! Train a small decoder-only transformer to continue affine recurrences
//! `a_n = c·a_{n-1} + d` in-context, then dissect the trained weights:
//! attention patterns, direct logit attribution, OV/QK circuits, ablations,
//! eigenvalue scores and causal interventions.

pub mod error;
pub mod cli;
pub mod interp;
pub mod model;
pub mod numerics;
pub mod recurrence;
pub mod training;

pub use error::{Error, Result};
