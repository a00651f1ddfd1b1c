//! Next-day fire prediction framed as semantic segmentation.
//!
//! Daily multi-channel rasters are tiled into 32×32 patches, the no-fire
//! majority is subsampled, fire labels are optionally dilated, and a small
//! U-Net is trained with class-weighted cross-entropy under k-fold early
//! stopping on the `shybrid_l` score. Holdout days are evaluated pixel-wise
//! without sampling or augmentation.
//!
//! The crate is `no_std` (with `alloc`); file formats, the CLI and thread
//! pools live in `fireseg-cli`.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod dataset;
pub mod error;
pub mod exec;
pub mod metrics;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::Tensor;
