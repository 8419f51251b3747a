//! Residual-stream decomposition of in-context learning in small decoder-only
//! transformers: per-component direct logit contributions, reweighting,
//! agreement and transfer analyses, and training-dynamics sweeps.

pub mod analysis;
pub mod cli;
pub mod container;
pub mod decomposition;
pub mod dynamics;
pub mod error;
pub mod model;
pub mod numerics;
pub mod par;
pub mod reweighting;
pub mod seed;
pub mod tasks;

pub use error::{Error, Result};
