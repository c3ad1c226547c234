//! CLMorph: contrastive registration for unsupervised segmentation of 3-D
//! volumes.
//!
//! A siamese weight-shared convolutional encoder with a projection head and
//! a single decoder predicts a probabilistic displacement field between an
//! unaligned volume and a reference (atlas). Training minimizes a
//! reconstruction loss on the warped volume, a KL smoothness penalty on the
//! field, and a temperature-scaled contrastive loss on the projections.
//! Segmentation of an unaligned volume is obtained by warping the atlas
//! label map through the learned transformation.
//!
//! Everything runs on the CPU in f64 on top of the small reverse-mode
//! autodiff engine in [`ndtensor`].

pub mod error;
pub mod losses;
pub mod metrics;
pub mod ndtensor;
pub mod network;
pub mod synthdata;
pub mod trainer;
pub mod verify;
pub mod warp;

pub use error::{Error, Result};
