//! Augmentations, the staged warm-restart schedule, a synthetic dataset,
//! the toy trainer and AP evaluation.

pub mod augment;
pub mod dataset;
pub mod eval;
pub mod loss;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use augment::{hflip, mixup, mosaic, random_affine, random_scale, Augment, Sample};
pub use dataset::{generate_dataset, ToyDataset, ToyDatasetConfig};
pub use eval::{evaluate_ap, ApResult, GtBox};
pub use optim::Sgd;
pub use schedule::{advance_stage, build_recwr_schedule, flat_schedule, RecWRSchedule, StageConfig, TrainState};
pub use trainer::{train_toy, MetricsLog, TrainConfig, TrainOutcome};
