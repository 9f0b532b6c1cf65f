//! Knowledge-distillation laboratory: a small reverse-mode autodiff core,
//! MLP teachers and students, the KD and linear-region KD objectives,
//! region/noise samplers, datasets, the training loop and its metrics.

pub mod config;
pub mod data;
pub mod derivation;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod sampling;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Mlp, MlpSpec};
pub use objectives::{DistillConfig, Method};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use train::TrainConfig;
