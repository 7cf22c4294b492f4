//! Dual sparse selection attention (DSSA) and the DSSAU-Net encoder-decoder
//! for 2-D segmentation, built from scratch on a small reverse-mode tensor
//! kernel set.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] — dense n-d tensors with reverse-mode differentiation and the
//!   kernel set (matmul, softmax, top-k, gather, conv2d, pooling, bilinear
//!   resize, layer norm) plus an Adam optimizer.
//! - [`attention`] — the DSSA mechanism: region-level top-k₁ routing followed
//!   by pixel-level top-k₂ selection over the gathered tokens, with a local
//!   context enhancement branch.
//! - [`blocks`] — overlapped patch embedding, patch merging, the DSSA block
//!   and the pyramid pooling module.
//! - [`net`] — the full U-shaped network: four encoder stages, PPM bottleneck,
//!   four decoder stages with convolutional skips, multiscale fusion head.
//! - [`loss`] / [`metrics`] — hybrid dice/cross-entropy training loss and the
//!   DSC/HD/ASD evaluation metrics on label masks.
//! - [`biometry`] — ellipse fits and the angle-of-progression /
//!   head-symphysis-distance geometry computed from PS/FH masks.
//! - [`oracle`] — dense attention reference and finite-difference gradient
//!   checker used to verify the mechanism.
//! - [`cost`] — analytic parameter/FLOP accounting.
//! - [`synth`], [`weights`], [`config`], [`imageio`], [`augment`],
//!   [`trainer`] — synthetic dataset generation, weight container I/O, run
//!   configuration, image I/O, augmentations and the training loop.

pub mod attention;
pub mod augment;
pub mod biometry;
pub mod blocks;
pub mod config;
pub mod cost;
pub mod imageio;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod oracle;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod weights;

pub use tensor::{IndexTensor, Scalar, Tensor, TensorError};
