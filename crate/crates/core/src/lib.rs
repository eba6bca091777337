pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod model;
pub mod nn;
pub mod inference;
pub mod data;
pub mod eval;
pub mod train;
pub mod complexity;
pub mod verify;
