//! A small decoder-only transformer for exercising attention masks.
//!
//! Everything runs on the CPU with explicit backpropagation, so models are
//! deterministic per seed and gradients can be checked against finite
//! differences. Generic over `f32` (fast training) and `f64` (gradient checks).

pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod train;

pub use attention::attention_map;
pub use error::{ModelError, Result};
pub use gradcheck::{grad_check, GradCheckReport};
pub use loss::{loss_masked, loss_masked_grad};
pub use model::{Logits, Transformer};
pub use optim::OptimizerKind;
pub use params::{ModelConfig, Params, Positions, Scalar};
pub use train::{evaluate, train, Schedule, TaskAccuracy, TrainReport};
