pub mod attention;
pub mod autodiff;
pub mod complexity;
pub mod encoder;
pub mod error;
pub mod greab;
pub mod harness;
mod kernels;
mod params;
pub mod patching;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use encoder::{GreatModel, InteractionKind, ModelConfig};
pub use error::{Error, Result};
pub use tensor::Tensor;
