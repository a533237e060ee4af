//! Three-stage training of the split classifier and its link, plus top-k
//! evaluation.

pub mod loss;
pub mod pipeline;
pub mod schedule;
pub mod stage;

pub use loss::{cross_entropy, softmax, top_k, topk_hits};
pub use pipeline::{through_channel, transmit_backward, transmit_forward, Pipeline, TransmitProbe};
pub use schedule::{lr_at_epoch, Scope, Stage, TrainingSchedule};
pub use stage::{evaluate_topk, metrics_csv, run_stage, train_step, EvalPath, MetricsRow, RunOptions, METRICS_HEADER};
