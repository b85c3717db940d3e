pub mod autograd;
pub mod commands;
pub mod config;
pub mod datagen;
pub mod error;
pub mod fgfe;
pub mod frequency;
pub mod fslr;
pub mod fusion;
pub mod gradcheck;
pub mod inspect;
pub mod model;
pub mod nn;
pub mod selfcheck;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
