//! Data generation, training, evaluation, persistence and the gradient and
//! benchmark runners behind the command-line tool.

pub mod bench;
pub mod container;
pub mod data;
pub mod gradcheck;
pub mod metrics;
pub mod train;

pub use data::{gen_synthetic, SyntheticDataset};
pub use metrics::{evaluate, MetricsRecord};
pub use train::{
    load_checkpoint, load_dataset, predict, save_checkpoint, save_dataset, train, TrainConfig, TrainOutcome,
};
