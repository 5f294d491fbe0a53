//! Spatially extended Lee-Carter mortality model.

pub mod data;
pub mod error;
pub mod graph;
pub mod inference;
pub mod linalg;
pub mod model;
pub mod outputs;
pub mod priors;
pub mod simulate;

pub use error::{Error, Result};
