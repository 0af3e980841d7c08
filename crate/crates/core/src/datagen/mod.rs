//! Dataset model, synthetic data generation, label noise, augmentation and
//! video-level cross-validation splits.

mod augment;
mod folds;
mod image;
mod manifest;
mod noise;
mod synth;

pub use self::augment::{augment_frame, resize, AugmentationConfig};
pub use self::folds::{load_folds, make_fold_splits, save_folds, FoldSplit};
pub use self::image::FloatImage;
pub use self::manifest::{DatasetManifest, FrameKey, FrameRecord, ImageSource, LabelSource};
pub use self::noise::{inject_label_noise, NoiseConfig, NoiseMode, NoiseReport};
pub use self::synth::{generate_synthetic_dataset, render_frame, SyntheticSpec};
