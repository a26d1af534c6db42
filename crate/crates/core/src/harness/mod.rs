//! Synthetic data, training, evaluation and the file formats behind the CLI.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod model;
pub mod optim;
pub mod sweep;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{lr_at, CamSource, TrainConfig};
pub use data::{generate_dataset, SyntheticSample};
pub use eval::{evaluate, Confusion, EvalReport, MiouReport};
pub use model::{Decoder, ImageTargets, Model, Objective, Prediction};
pub use optim::AdamW;
pub use sweep::{mask_sweep, SweepRow};
pub use train::{datasets, LogRecord, Trainer};
pub mod render;
