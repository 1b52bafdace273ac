//! Losses, optimizer, schedule, freeze masks, checkpoints and the experiment runner.

pub mod checkpoint;
pub mod experiment;
pub mod loss;
pub mod optim;

pub use checkpoint::{load_predictor, save_oracle_fixture, Checkpoint, LoadedPredictor};
pub use experiment::{
    build_freeze_mask, clip_grad_norm, mtl_batch_sampler, run_experiment, ExperimentResult, ExperimentSpec, Method, MtlSampler, Origin,
    PreparedData, StageLog, TrainConfig,
};
pub use loss::{nearest_intention, training_loss, LossBreakdown};
pub use optim::{adamw_step, lr_at, scale_lr, AdamWConfig, LrSchedule, OptimizerState, REFERENCE_LR};
