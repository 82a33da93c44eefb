//! Model assembly, optimization, checkpoints and evaluation.

mod checkpoint;
mod config;
mod gradsuite;
mod model;
mod optim;
mod train;

pub use checkpoint::{
    config_fingerprint, load_checkpoint, save_checkpoint, Checkpoint, EpochRecord, Progress, RngState, MAGIC, VERSION,
};
pub use config::{Ablation, ModelConfig, Preset, TrainConfig};
pub use gradsuite::{run_grad_suite, ModuleCheck, SuiteReport};
pub use model::{BatchLoss, Model, SampleForward};
pub use optim::AdamW;
pub use train::{
    evaluate, evaluate_checkpoint, resume, train, Evaluation, History, SelectionRow, TrainOutcome, TRAIN_SPLIT,
    VAL_SPLIT,
};
