//! Multi-task cross-task semi-supervised segmentation of 3D volumes.
//!
//! A shared encoder feeds a segmentation decoder and a signed-distance decoder.
//! The two are tied together through a logistic transform of the distance
//! output, filtered by Monte Carlo dropout uncertainty, while an adversarial
//! discriminator compares predicted distance maps on unlabeled volumes with
//! ground-truth maps on labeled ones.

pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod par;
pub mod seed;
pub mod tensor;
pub mod trainer;
pub mod transforms;
pub mod uncertainty;
pub mod volumes;

pub use error::{Error, Result};
