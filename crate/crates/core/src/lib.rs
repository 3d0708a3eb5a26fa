pub mod autodiff;
pub mod backbone;
pub mod bench;
pub mod cost;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod local;
pub mod manifest;
pub mod nn;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod ssa;
pub mod tensor;

pub use autodiff::{Gradients, Mode, Tape, Var};
pub use error::{Error, Result};
pub use params::{Builder, Ctx, ParamId, ParamStore};
pub use rng::RngStream;
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
