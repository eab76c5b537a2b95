//! Low-light image enhancement trained by troublemaker learning, with global
//! dynamic convolution (GDC) blocks inside a U-Net.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the single-precision build used for training.

pub mod autograd;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod data;
pub mod error;
pub mod gdc;
pub mod gradcheck;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use autograd::{Gradients, Tape, Var};
pub use conv::ConvSpec;
pub use error::{CheckpointError, Error, Result};
pub use gdc::{GdcConfig, GdcParams};
pub use image::ImageBuffer;
pub use model::{EmMode, Model, Role, UgdcConfig};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
