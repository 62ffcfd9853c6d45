//! Reference-based image super-resolution with a texture transformer:
//! learnable texture extraction, patch-level relevance embedding, hard/soft
//! attention texture transfer, cross-scale feature integration, the full
//! loss/training stack, and Y-channel PSNR/SSIM evaluation.

pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod network;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use tensor::{Dtype, Element, Parameter, Tensor, TensorError};
