//! Reconfigure a trained transformer into a Gaussian probability path,
//! distill the path into one timestep-conditioned transition kernel, and
//! score the result with calibration, failure-prediction and OOD metrics.

pub mod error;
pub mod rng;
pub mod backbone;
pub mod calibrate;
pub mod config;
pub mod data;
pub mod distill;
pub mod kernelnet;
pub mod pipeline;
pub mod pathify;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
