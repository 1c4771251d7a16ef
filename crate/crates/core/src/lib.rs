//! Pedestrian detection with a reciprocating feature pyramid: shared
//! top-down and bottom-up pathways run for several circles, and training
//! instances are split across circles by how occluded they are.
//!
//! Numeric code is generic over [`Scalar`]; training uses `f32` and the
//! gradient checks use `f64`.

pub mod app;
pub mod backbone;
pub mod boxes;
pub mod checkpoint;
pub mod circle;
pub mod config;
pub mod decompose;
pub mod detector;
pub mod error;
pub mod eval;
pub mod heads;
pub mod init;
pub mod io;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Detector32 = detector::Detector<f32>;
pub type Detector64 = detector::Detector<f64>;
pub type Checkpoint32 = checkpoint::Checkpoint<f32>;
