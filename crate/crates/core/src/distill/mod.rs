//! Self-distillation: teacher training on hard labels, soft-label
//! generation and smoothing, student training and the per-fold protocol.

mod protocol;
mod soft;
mod store;
mod train;

pub use self::protocol::{
    run_fold, run_fold_protocol, CheckpointRecord, DistillConfig, FoldArtifacts, ProtocolManifest,
    ProtocolSeeds,
};
pub use self::soft::{check_soft_coverage, generate_soft_labels, smooth_soft_labels, SoftLabelSet};
pub use self::store::{predict_images, predict_triplets, FrameStore};
pub use self::train::{
    select_epoch, train_baseline, train_student, train_teacher, Selection, SoftTargetScope, SoftTargets,
    TrainConfig,
};
