//! Pluggable backbone, multi-task heads, losses, optimizer and schedule.

mod backbone;
mod checkpoint;
mod loss;
mod net;
mod optim;
mod scalar;

pub use self::backbone::{
    build_backbone, registry_names, Backbone, BackboneCache, BackboneSpec, RegistryEntry, REGISTRY,
};
pub use self::checkpoint::{
    file_hash, sha256_hex, Checkpoint, CheckpointMeta, EpochLog, Role, TrainSeeds,
};
pub use self::loss::{
    multilabel_bce_loss, multitask_loss, phase_ce_loss, sigmoid, sigmoid_probs, HeadTargets,
    MultitaskLoss,
};
pub use self::net::{ForwardCache, ForwardOutput, Head, HeadConfig, HeadDims, Model};
pub use self::optim::{cosine_lr, Adam, OptimizerConfig};
pub use self::scalar::Scalar;
