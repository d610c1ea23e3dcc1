pub mod augment;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod models;
pub mod seed;
pub mod tensor;
pub mod train;

pub use autograd::{grad_check, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
