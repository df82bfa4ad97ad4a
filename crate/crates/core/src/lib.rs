#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod autograd;
pub mod dataset;
pub mod diffusion;
pub mod encoder;
pub mod model;
pub mod error;
pub mod evaluation;
pub mod math;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod training;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use rng::NoiseRng;
pub use tensor::Tensor;
