//! Run configuration, tensor archives, checkpoints and the training loop.

mod archive;
mod config;
mod trainer;

pub use archive::{Archive, MAGIC};
pub use config::{DataConfig, DistillMode, EvalConfig, RunConfig, SyntheticKind, TrainConfig, SEED_ENV};
pub use trainer::{
    checkpoint_config, load_model, load_params, load_records, synth_config, synthesize_teacher_archive,
    teacher_from_archive, StepLog, Trainer, CHECKPOINT_VERSION, CSV_HEADER,
};
