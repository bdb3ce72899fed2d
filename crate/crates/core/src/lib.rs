//! Time-domain target speech extraction.

pub mod autodiff;
pub mod corpus;
pub mod dsp;
pub mod loss;
pub mod model;
pub mod nn;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod trainer;

pub use error::{Error, Result};
