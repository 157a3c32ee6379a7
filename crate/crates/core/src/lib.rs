//! Boundary-aware recurrent video encoder with a GRU caption decoder.
pub mod cells;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
