//! Training, evaluation, checkpoints and the ablation grid.

mod ablate;
mod checkpoint;
mod config;
mod gradcheck;
mod optim;
mod train;

pub use ablate::{ablate, AblationReport, AblationRow, REPORT_COLUMNS};
pub use checkpoint::{load_checkpoint, load_model, save_checkpoint, save_model, sidecar_paths, CHECKPOINT_MAGIC};
pub use gradcheck::{gradcheck_configs, model_gradchecks, op_gradchecks, GRADCHECK_EPS};
pub use config::{GridConfig, RunConfig, TrainConfig};
pub use optim::{global_grad_norm, AdamW, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use train::{build_vocab, copy_vision_tower, evaluate, evaluate_encoded, train, train_with, EpochMetrics, TrainOutcome};
