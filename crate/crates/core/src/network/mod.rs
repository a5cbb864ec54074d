//! Visually gated ST-GCN classifier, its joint loss, schedules and training loop.

pub mod config;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod model;
pub mod schedule;
pub mod train;

pub use config::{Ablation, LossConfig, ModelConfig, RunConfig, TrainConfig};
pub use loss::{loss_total, topology_loss, LossTerms};
pub use model::{graph_conv_fused, visual_gate, ForwardOutput, Mode, Model, Sample};
pub use schedule::{lambda, lr_schedule};
pub use train::{build_dataset, build_sample, evaluate, predict, predict_sequence, train_epoch, EpochMetrics};
