//! Losses, optimizer, schedules and the adaptation training loop.

pub mod loss;
pub mod optim;
pub mod run;
pub mod schedule;
pub mod step;

pub use loss::{ce_loss, kd_loss};
pub use optim::{clip_global_norm, AdamWConfig, OptimizerState};
pub use run::{run_adaptation, MetricsLog, MetricsRow, RunData, RunOutcome};
pub use schedule::{Objective, TrainSchedule};
pub use step::{batch_logits, batch_loss, eval_loss, freeze_steps, train_step, StepStats};
