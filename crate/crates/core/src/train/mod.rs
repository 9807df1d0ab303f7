//! Optimization, configuration, checkpoints and the training loop.

mod checkpoint;
mod config;
mod optim;
mod trainer;

pub use checkpoint::{Checkpoint, OptimizerState, MDFZ_MAGIC, MDFZ_VERSION};
pub use config::TrainConfig;
pub use optim::{poly_lr, Adam};
pub use trainer::{checkpoint_name, load_cases, train, IterationLog, TrainSummary, Trainer, LOG_HEADER};

#[cfg(test)]
mod tests;
