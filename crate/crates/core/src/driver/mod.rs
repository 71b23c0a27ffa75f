//! Stage-by-stage training, evaluation and checkpointing.

mod ablation;
mod checkpoint;
mod config;
mod experiment;
mod optim;
mod schedule;

pub use ablation::{ablation_variants, rank_sweep, AblationKind};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointEntry, CheckpointRecord, EntryValue};
pub use config::{
    EvalConfig, ExperimentConfig, ExperimentMode, MappingConfig, PretrainConfig, PromptConfig, QueueConfig,
    SplitConfig, StageRounding,
};
pub use experiment::{
    build_bundle, load_tensors, pretrain_backbone, pretrained_backbone, Experiment, RunSummary, StageAccess,
    StageLoader, StageOutcome, PRETRAIN_FIRST_CLASS, STAGE_TOKEN_STD,
};
pub use optim::{adam_step, adam_update, AdamState};
pub use schedule::{lr_schedule, shuffle_classes, split_classes, stage_sizes, StageSchedule};
