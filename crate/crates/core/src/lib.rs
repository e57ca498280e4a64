//! Desk-scale laboratory for attention-projection mixing with exogenous anchors.

pub mod analysis;
pub mod attention;
pub mod complexity;
pub mod error;
pub mod mixing;
pub mod model;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
