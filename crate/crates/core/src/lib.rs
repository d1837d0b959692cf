pub mod data;
pub mod harness;
pub mod info;
pub mod nn;
pub mod optim;
pub mod par;
pub mod regularizers;
pub mod tensor;

pub use tensor::{Tensor, TensorError};
