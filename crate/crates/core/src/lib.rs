//! Guided thermal super-resolution with shifted-window transformers and
//! cross-domain attention fusion, trained with random guide dropout.

pub mod attention;
pub mod data;
pub mod checkpoint;
pub mod error;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod resample;
pub mod training;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use model::{count_params, ModelConfig, ModelParams};
pub use numerics::{Scalar, Tape, Tensor, Var};
pub use resample::Image;
