//! Epoch loop, batch sampling, Adam and checkpointing for both models.

mod config;
mod data;
mod optim;
mod trainer;

pub use config::{NetworkPreset, TrainConfig};
pub use data::{
    labels_path, step_rng, volume_path, Batch, Case, Dataset, SliceBank, Stream, WeightScheme,
    SPLIT_FILE,
};
pub use optim::Adam;
pub use trainer::{
    train_model, write_epoch_csv, EpochReport, Progress, TrainOutcome, Trainer, BEST_CHECKPOINT,
    EPOCHS_CSV, FINAL_CHECKPOINT,
};
