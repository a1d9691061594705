//! Fine-grained latent editing driven by dialog.

pub mod backend;
pub mod checkpoint;
pub mod dialog;
pub mod error;
pub mod eval;
pub mod field;
pub mod language;
pub mod math;
pub mod nn;
pub mod predictor;

pub use error::{Error, Result};
