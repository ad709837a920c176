//! A deliberately small CPU neural-network engine: 4-D tensors, the layers
//! the image models need, explicit per-layer backward passes and Adam.
//!
//! Everything is generic over [`Float`] so the same networks run in `f32`
//! for training and in `f64` for finite-difference gradient checks.

pub mod activation;
pub mod adam;
pub mod conv;
mod float;
pub mod gradcheck;
pub mod norm;
mod param;
mod tensor;

pub use adam::{Adam, AdamState};
pub use conv::{Conv2d, ConvGeometry, ConvTranspose2d};
pub use float::{matmul, Float, Trans};
pub use norm::InstanceNorm;
pub use param::{Param, Parameters};
pub use tensor::Tensor;
