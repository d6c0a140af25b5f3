//! Dual-encoder empathetic response generation: an autodiff tensor engine,
//! transformer blocks, the disentangling model, data handling, training and
//! evaluation.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod params;
pub mod probe;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
