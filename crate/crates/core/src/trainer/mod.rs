//! Siamese training loop: AdamW with warmup and cosine decay, global-norm
//! clipping, optional sharpness-aware updates, and resumable checkpoints.

mod config;
mod optim;
mod run;

pub use config::{TrainConfig, DESK_LR, DESK_STEM};
pub use optim::{adamw_step, clip_global_norm, global_norm, lr_schedule, sam_step, AdamHyper, AdamState};
pub use run::{
    continue_run, describe_pairs, epoch_batches, resume, split_indices, train, train_on, validation_recall, CheckpointMeta,
    EpochRecord, Split, TrainOutcome, TrainState, ABORT_CHECKPOINT, BEST_CHECKPOINT, LAST_CHECKPOINT, METRICS_LOG,
    VALIDATION_SHARE,
};
