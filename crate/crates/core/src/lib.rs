pub mod channel;
pub mod codec;
pub mod complexity;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod layers;
pub mod link;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor, TensorView};
