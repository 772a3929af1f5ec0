//! Multi-scene radiance fields with hypernetwork-generated, low-rank factorized
//! encoder weights, trained scene by scene with surface-restricted distillation
//! from a frozen teacher.

pub mod distillation;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod persistence;
pub mod rendering;
pub mod scenes;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{FactorizedModel, ModelConfig, SceneRecord, SceneSetup};
pub use numerics::{Prng, Scalar, Tape, Tensor};
pub use trainer::{train_stage, StageReport, TrainConfig};

/// Model in the default 64-bit precision.
pub type Model = FactorizedModel<f64>;
/// Model in 32-bit precision.
pub type Model32 = FactorizedModel<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Teacher = distillation::TeacherSnapshot<f64>;
