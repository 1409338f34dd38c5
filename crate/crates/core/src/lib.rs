//! Small-image classifier lab for logit-regularization defenses and
//! gradient-based / gradient-free L∞ attacks.

pub mod attacks;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod nn;
pub mod objectives;
pub mod scalar;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use attacks::{AttackConfig, AttackResult, SpsaConfig, TargetMode};
pub use autodiff::{finite_diff_check, GradCheck, Gradients, Graph, Var};
pub use data::{Dataset, SynthSpec};
pub use error::{CheckpointError, Error, IdxError, Result};
pub use harness::{Attack, EvalReport, EvalSlice};
pub use nn::{LayerSpec, Model};
pub use objectives::{ObjectiveKind, TrainObjective};
pub use scalar::Scalar;
pub use tensor::{ReduceKind, Tensor};
pub use trainer::{train, AdamConfig, TrainRun};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
