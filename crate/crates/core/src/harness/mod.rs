//! Training, evaluation and verification built on the network and the loss.

pub mod eval;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod train;

pub use eval::{evaluate, reconstruct, EvalReport, FrameEval};
pub use gradcheck::{run_gradcheck, GradcheckOptions, GradcheckReport};
pub use metrics::{eval_with_reflection, mpjpe, normalized_error};
pub use optim::{adam_step, lr_at, AdamState};
pub use train::{train, LogEntry, TrainConfig, TrainOutcome};
