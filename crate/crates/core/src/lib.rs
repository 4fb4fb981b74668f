//! Domain-siamese patch matching for sparse RGB-LWIR disparity estimation.
//!
//! Two convolutional towers with independent weights embed an RGB patch
//! and an LWIR patch; correlation and concatenation heads classify the pair
//! as matching or not. At inference the LWIR patch is widened so a single
//! fully convolutional pass scores every candidate disparity.

pub mod checks;
pub mod config;
pub mod data;
pub mod error;
pub mod layers;
pub mod net;
pub mod predict;
pub mod scalar;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape32 = tensor::Tape<f32>;
pub type Model32 = net::SiameseNet<f32>;
pub type Checkpoint32 = net::Checkpoint<f32>;
