//! Per-fold teacher → soft labels → student runs with persisted artifacts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{AugmentationConfig, FoldSplit, LabelSource};
use crate::error::{Error, Result};
use crate::metrics::MapMode;
use crate::model::{BackboneSpec, Checkpoint, HeadConfig, OptimizerConfig, Role, TrainSeeds};

use super::soft::{generate_soft_labels, smooth_soft_labels};
use super::store::FrameStore;
use super::train::{train_student, train_teacher, Selection, SoftTargetScope, SoftTargets, TrainConfig};

/// Seeds of one protocol run. Teachers of every fold share `teacher_init`,
/// students share `student_init`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolSeeds {
    pub teacher_init: u64,
    pub student_init: u64,
    pub data: u64,
    pub augment: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub backbone: BackboneSpec,
    pub heads: HeadConfig,
    pub teacher_optimizer: OptimizerConfig,
    pub student_optimizer: OptimizerConfig,
    pub augment: AugmentationConfig,
    /// Label smoothing ε applied to the soft labels, in `[0, 1)`.
    pub smoothing: f64,
    pub soft_target_scope: SoftTargetScope,
    /// Soft-label weight α in `[0, 1]`.
    pub alpha: f64,
    pub teacher_selection: Selection,
    pub student_selection: Selection,
    pub val_labels: LabelSource,
    pub val_map_mode: MapMode,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            backbone: BackboneSpec::named("tiny-conv", (224, 224)).expect("registered"),
            heads: HeadConfig::triplet_only(),
            teacher_optimizer: OptimizerConfig::teacher(),
            student_optimizer: OptimizerConfig::student(),
            augment: AugmentationConfig::default(),
            smoothing: 0.0,
            soft_target_scope: SoftTargetScope::TripletOnly,
            alpha: 1.0,
            teacher_selection: Selection::FinalEpoch,
            student_selection: Selection::BestValMap,
            val_labels: LabelSource::Annotated,
            val_map_mode: MapMode::Global,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::validation("smoothing", format!("{} not in [0, 1)", self.smoothing)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::validation("alpha", format!("{} not in [0, 1]", self.alpha)));
        }
        self.teacher_config(&seeds_placeholder()).validate()?;
        self.student_config(&seeds_placeholder()).validate()
    }

    fn train_config(&self, optimizer: &OptimizerConfig, selection: Selection, seeds: TrainSeeds) -> TrainConfig {
        TrainConfig {
            backbone: self.backbone.clone(),
            heads: self.heads.clone(),
            optimizer: optimizer.clone(),
            augment: self.augment.clone(),
            selection,
            val_labels: self.val_labels,
            val_map_mode: self.val_map_mode,
            seeds,
        }
    }

    pub fn teacher_config(&self, seeds: &ProtocolSeeds) -> TrainConfig {
        self.train_config(
            &self.teacher_optimizer,
            self.teacher_selection,
            TrainSeeds {
                init: seeds.teacher_init,
                data: seeds.data,
                augment: seeds.augment,
            },
        )
    }

    pub fn student_config(&self, seeds: &ProtocolSeeds) -> TrainConfig {
        self.train_config(
            &self.student_optimizer,
            self.student_selection,
            TrainSeeds {
                init: seeds.student_init,
                data: seeds.data,
                augment: seeds.augment,
            },
        )
    }
}

fn seeds_placeholder() -> ProtocolSeeds {
    ProtocolSeeds {
        teacher_init: 0,
        student_init: 0,
        data: 0,
        augment: 0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub role: Role,
    pub fold_id: usize,
    /// Selected epoch, 1-based.
    pub epoch: usize,
    /// Validation triplet mAP of the selected epoch.
    pub val_map: Option<f64>,
    pub path: PathBuf,
    pub sha256: String,
}

impl CheckpointRecord {
    fn of(checkpoint: &Checkpoint, fold_id: usize, path: PathBuf, sha256: String) -> Self {
        CheckpointRecord {
            role: checkpoint.meta.role,
            fold_id,
            epoch: checkpoint.meta.epoch,
            val_map: checkpoint.meta.val_map,
            path,
            sha256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldArtifacts {
    pub fold_id: usize,
    pub teacher: CheckpointRecord,
    pub soft_labels: PathBuf,
    pub student: CheckpointRecord,
}

/// Written to `protocol.json` after every fold, so a failed run leaves a
/// record of what completed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProtocolManifest {
    pub folds: Vec<FoldArtifacts>,
    pub failed: Option<(usize, String)>,
}

impl ProtocolManifest {
    fn map_paths(&self, f: impl Fn(&Path) -> PathBuf) -> Self {
        let mut out = self.clone();
        for a in &mut out.folds {
            a.teacher.path = f(&a.teacher.path);
            a.soft_labels = f(&a.soft_labels);
            a.student.path = f(&a.student.path);
        }
        out
    }

    /// Writes the manifest with artifact paths relative to its directory.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().unwrap_or(Path::new(""));
        let rel = self.map_paths(|p| p.strip_prefix(dir).unwrap_or(p).to_path_buf());
        let json = serde_json::to_string_pretty(&rel).expect("serializable");
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rel: Self = serde_json::from_str(&text)
            .map_err(|e| Error::parse(path.display().to_string(), e.line(), e.to_string()))?;
        let dir = path.parent().unwrap_or(Path::new(""));
        Ok(rel.map_paths(|p| dir.join(p)))
    }
}

/// Runs teacher, soft-label generation and student for one fold, writing
/// `teacher.ckpt`, `soft_labels.txt` and `student.ckpt` under
/// `out_dir/fold<k>`.
pub fn run_fold(
    store: &FrameStore,
    fold: &FoldSplit,
    config: &DistillConfig,
    seeds: &ProtocolSeeds,
    out_dir: &Path,
) -> Result<FoldArtifacts> {
    config.validate()?;
    let dir = out_dir.join(format!("fold{}", fold.fold_id));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let teacher = train_teacher(store, fold, &config.teacher_config(seeds))?;
    let teacher_path = dir.join("teacher.ckpt");
    let teacher_hash = teacher.save(&teacher_path)?;

    let all_heads = config.soft_target_scope == SoftTargetScope::AllHeads;
    let soft = generate_soft_labels(&teacher, &teacher_hash, store, fold, all_heads)?;
    let soft = smooth_soft_labels(&soft, config.smoothing)?;
    let soft_path = dir.join("soft_labels.txt");
    soft.save(&soft_path)?;

    let student = train_student(
        store,
        fold,
        SoftTargets {
            labels: &soft,
            alpha: config.alpha,
            scope: config.soft_target_scope,
        },
        &config.student_config(seeds),
    )?;
    let student_path = dir.join("student.ckpt");
    let student_hash = student.save(&student_path)?;

    Ok(FoldArtifacts {
        fold_id: fold.fold_id,
        teacher: CheckpointRecord::of(&teacher, fold.fold_id, teacher_path, teacher_hash),
        soft_labels: soft_path,
        student: CheckpointRecord::of(&student, fold.fold_id, student_path, student_hash),
    })
}

/// Runs every fold. `workers > 1` trains folds concurrently; results do not
/// depend on the worker count.
pub fn run_fold_protocol(
    store: &FrameStore,
    folds: &[FoldSplit],
    config: &DistillConfig,
    seeds: &ProtocolSeeds,
    out_dir: &Path,
    workers: usize,
) -> Result<ProtocolManifest> {
    config.validate()?;
    if folds.is_empty() {
        return Err(Error::EmptyInput("folds"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest_path = out_dir.join("protocol.json");
    let results: Vec<Result<FoldArtifacts>> = if workers > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| {
            folds
                .par_iter()
                .map(|f| run_fold(store, f, config, seeds, out_dir))
                .collect()
        })
    } else {
        let mut out = Vec::new();
        for f in folds {
            let r = run_fold(store, f, config, seeds, out_dir);
            let failed = r.is_err();
            out.push(r);
            if failed {
                break;
            }
        }
        out
    };
    let mut record = ProtocolManifest::default();
    for (fold, result) in folds.iter().zip(results) {
        match result {
            Ok(a) => record.folds.push(a),
            Err(e) => {
                record.failed = Some((fold.fold_id, e.to_string()));
                record.save(&manifest_path)?;
                return Err(Error::FoldFailed {
                    fold: fold.fold_id,
                    partial: manifest_path,
                    source: Box::new(e),
                });
            }
        }
    }
    record.save(&manifest_path)?;
    Ok(record)
}
