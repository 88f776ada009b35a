//! Spectral reflectance reconstruction and multi-class segmentation.
//!
//! The crate is organised bottom-up:
//!
//! * [`spectral`] – the 36-band wavelength grid, camera forward model and
//!   Wiener-estimation reconstruction of reflectance from RGB.
//! * [`scene`] – seeded synthetic labelled scenes with imaging degradations.
//! * [`patch`] – patch extraction, PCA and baseline classifiers.
//! * [`nn`] – a small dense tensor library with hand-written backward passes
//!   hosting the dilated UNet, the weighted cross-entropy loss and optimizers.
//! * [`train`] – class weights, augmentation, the training loop and IoU.
//! * [`io`] – the binary and text file formats shared by all of the above.

pub mod error;
pub mod io;
pub mod nn;
pub mod patch;
pub mod rng;
pub mod scene;
pub mod spectral;
pub mod train;

pub use error::{Error, Result};
