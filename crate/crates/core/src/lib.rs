//! Open-world continual representation learning with dynamically generated
//! prompts on a small Vision Transformer.

pub mod adapt;
pub mod data;
pub mod dpg;
pub mod driver;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod nn;
pub mod seeds;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
