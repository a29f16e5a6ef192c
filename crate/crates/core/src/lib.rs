//! Independent inference units over layered memory graphs.

pub mod error;
pub mod graph;
pub mod inference;
pub mod layers;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod predictor;
pub mod trainer;
pub mod variants;

pub use error::{Error, Result};
pub use model::Model;
