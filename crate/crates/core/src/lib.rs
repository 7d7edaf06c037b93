//! Dual-head extreme multi-label text classification over a small
//! transformer encoder, with everything needed to train, evaluate, and
//! dissect it: tensors with reverse-mode differentiation, a deterministic
//! data pipeline, per-layer ablation, and distribution diagnostics.

pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod heads;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod train;

pub use error::{Error, Result};
