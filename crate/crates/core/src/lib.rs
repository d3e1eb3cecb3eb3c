//! Budgeted probabilistic token retention for transformer encoders.
//!
//! Per-token keep/drop gates are scored from hidden states, relaxed with the
//! Hard-Concrete distribution during training, held to an expected-token
//! budget by a Lagrange multiplier updated with projected ascent, and turned
//! into exact top-M selections at inference.

pub mod budget;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod encoder;
pub mod error;
pub mod estimator;
pub mod gate;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod train;
pub mod verify;

pub use budget::{Budget, BudgetConfig, LagrangeState};
pub use checkpoint::Checkpoint;
pub use config::{DataConfig, RunConfig, Strategy};
pub use encoder::{AttentionMode, EncoderConfig, EncoderParams};
pub use error::{Error, Result};
pub use gate::HardConcreteParams;
pub use metrics::MetricsRecord;
pub use tasks::{LabeledExample, NeedleConfig};
pub use tensor::{Activation, Gradients, Tape, Tensor, Var};
