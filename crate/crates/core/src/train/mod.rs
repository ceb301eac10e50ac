//! Training: optimiser, data sources and the staged-sparsification loop.

pub mod data;
pub mod optim;
pub mod trainer;

pub use data::{Augment, Dataset, DatasetSource};
pub use optim::{cosine_lr, Sgd, SgdConfig};
pub use trainer::{evaluate, metrics_csv, train, train_on, EpochMetrics, TrainConfig, TrainReport};
