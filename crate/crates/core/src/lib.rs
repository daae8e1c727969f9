//! Unpaired low-light image enhancement.
//!
//! An attention-guided U-Net generator is trained against a global
//! relativistic least-squares critic and a local patch critic, regularized by
//! a self feature preserving perceptual loss. The crate also ships a NIQE
//! no-reference quality evaluator and an adaptive histogram equalization
//! baseline.

pub mod attention;
pub mod baselines;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod losses;
pub mod niqe;
pub mod nn;
pub mod raster;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
pub use raster::{Image, Plane, ValueRange};
