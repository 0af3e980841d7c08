//! The training loop shared by teachers, students and baselines.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{augment_frame, AugmentationConfig, FloatImage, FoldSplit, LabelSource};
use crate::error::{Error, Result};
use crate::metrics::{map_from_rows, MapMode, UndefinedPolicy};
use crate::model::{
    cosine_lr, multitask_loss, Adam, BackboneSpec, Checkpoint, EpochLog, Head, HeadConfig, HeadDims,
    HeadTargets, Model, OptimizerConfig, Role, TrainSeeds,
};

use super::soft::{check_soft_coverage, SoftLabelSet};
use super::store::{predict_images, FrameStore};

/// Which epoch's parameters a run returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    FinalEpoch,
    /// Highest validation triplet mAP, earliest epoch on ties.
    BestValMap,
}

/// Heads that take teacher soft targets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftTargetScope {
    #[default]
    TripletOnly,
    /// Triplet plus the instrument, verb and target heads. Phase always
    /// stays on hard labels.
    AllHeads,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub backbone: BackboneSpec,
    pub heads: HeadConfig,
    pub optimizer: OptimizerConfig,
    /// `resize_hw` must equal the backbone input size; the seed is taken
    /// from `seeds.augment`.
    pub augment: AugmentationConfig,
    pub selection: Selection,
    pub val_labels: LabelSource,
    pub val_map_mode: MapMode,
    pub seeds: TrainSeeds,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.heads.validate()?;
        self.optimizer.validate()?;
        self.augment.validate()?;
        if self.augment.resize_hw != self.backbone.input_hw {
            return Err(Error::validation(
                "augment.resize_hw",
                format!(
                    "{:?} differs from the backbone input {:?}",
                    self.augment.resize_hw, self.backbone.input_hw
                ),
            ));
        }
        Ok(())
    }
}

/// Teacher soft targets for a student run.
#[derive(Clone, Copy, Debug)]
pub struct SoftTargets<'a> {
    pub labels: &'a SoftLabelSet,
    /// Weight of the soft label in the target blend `α·soft + (1−α)·hard`.
    pub alpha: f64,
    pub scope: SoftTargetScope,
}

/// Index of the selected epoch (0-based) in `curve`.
pub fn select_epoch(curve: &[EpochLog], selection: Selection) -> Option<usize> {
    if curve.is_empty() {
        return None;
    }
    match selection {
        Selection::FinalEpoch => Some(curve.len() - 1),
        Selection::BestValMap => {
            let mut best = 0;
            for (i, log) in curve.iter().enumerate().skip(1) {
                let better = match (log.val_map, curve[best].val_map) {
                    (Some(a), Some(b)) => a > b,
                    (Some(_), None) => true,
                    _ => false,
                };
                if better {
                    best = i;
                }
            }
            Some(best)
        }
    }
}

pub fn train_teacher(store: &FrameStore, fold: &FoldSplit, config: &TrainConfig) -> Result<Checkpoint> {
    train(store, fold, config, Role::Teacher, None)
}

/// Hard-label model reported on its own (the non-distilled rungs).
pub fn train_baseline(store: &FrameStore, fold: &FoldSplit, config: &TrainConfig) -> Result<Checkpoint> {
    train(store, fold, config, Role::Baseline, None)
}

pub fn train_student(
    store: &FrameStore,
    fold: &FoldSplit,
    soft: SoftTargets<'_>,
    config: &TrainConfig,
) -> Result<Checkpoint> {
    train(store, fold, config, Role::Student, Some(soft))
}

/// Per-frame training targets, flattened per head.
struct Targets {
    sigmoid: BTreeMap<Head, (usize, Vec<f32>)>,
    phase: Vec<usize>,
}

impl Targets {
    fn batch(&self, rows: &[usize]) -> HeadTargets<f32> {
        let gather = |head: Head| {
            self.sigmoid.get(&head).map(|(w, flat)| {
                let mut out = Vec::with_capacity(rows.len() * w);
                for &r in rows {
                    out.extend_from_slice(&flat[r * w..(r + 1) * w]);
                }
                out
            })
        };
        HeadTargets {
            triplet: gather(Head::Triplet),
            instrument: gather(Head::Instrument),
            verb: gather(Head::Verb),
            target: gather(Head::Target),
            phase: Some(rows.iter().map(|&r| self.phase[r]).collect()),
        }
    }
}

fn build_targets(
    store: &FrameStore,
    indices: &[usize],
    heads: &HeadConfig,
    dims: HeadDims,
    soft: Option<SoftTargets<'_>>,
) -> Result<Targets> {
    let manifest = store.manifest();
    let vocab = manifest.vocab();
    let mut sigmoid = BTreeMap::new();
    for head in heads.enabled().filter(|&h| h != Head::Phase) {
        let w = dims.width(head);
        let mut flat = Vec::with_capacity(indices.len() * w);
        let use_soft = soft.filter(|s| head == Head::Triplet || s.scope == SoftTargetScope::AllHeads);
        for &i in indices {
            let frame = &manifest.frames()[i];
            let labels = frame.labels(LabelSource::Annotated);
            let hard: Vec<u8> = match head {
                Head::Triplet => frame.multihot(w, LabelSource::Annotated),
                _ => {
                    let comps = vocab.component_labels(labels)?;
                    match head {
                        Head::Instrument => comps.instrument,
                        Head::Verb => comps.verb,
                        _ => comps.target,
                    }
                }
            };
            match use_soft {
                None => flat.extend(hard.iter().map(|&h| f32::from(h))),
                Some(s) => {
                    let key = frame.key();
                    let values = s.labels.head(&key, head).ok_or_else(|| Error::Coverage {
                        what: "soft labels",
                        detail: format!("no {} values for frame {key}", head.name()),
                    })?;
                    if values.len() != w {
                        return Err(Error::Shape {
                            what: "soft label head width",
                            expected: w,
                            actual: values.len(),
                        });
                    }
                    flat.extend(
                        values
                            .iter()
                            .zip(&hard)
                            .map(|(&sv, &hv)| (s.alpha * sv + (1.0 - s.alpha) * f64::from(hv)) as f32),
                    );
                }
            }
        }
        sigmoid.insert(head, (w, flat));
    }
    let phase = indices.iter().map(|&i| manifest.frames()[i].phase).collect();
    Ok(Targets { sigmoid, phase })
}

fn validate_fold(store: &FrameStore, fold: &FoldSplit) -> Result<()> {
    if let Some(v) = fold.train_videos.intersection(&fold.val_videos).next() {
        return Err(Error::validation("fold", format!("video {v} is in both train and validation")));
    }
    let known: std::collections::BTreeSet<String> = store.manifest().videos().into_iter().collect();
    if let Some(v) = fold.train_videos.iter().chain(&fold.val_videos).find(|v| !known.contains(*v)) {
        return Err(Error::validation("fold", format!("video {v} is not in the manifest")));
    }
    Ok(())
}

/// Validation mAP of the triplet head on pre-resized images.
struct Validator {
    images: Vec<FloatImage>,
    labels: Vec<Vec<usize>>,
    groups: Vec<usize>,
    num_classes: usize,
    mode: MapMode,
}

impl Validator {
    fn new(store: &FrameStore, indices: &[usize], config: &TrainConfig) -> Self {
        let frames = store.manifest().frames();
        let mut video_ids: BTreeMap<&str, usize> = BTreeMap::new();
        let groups = indices
            .iter()
            .map(|&i| {
                let n = video_ids.len();
                *video_ids.entry(frames[i].video_id.as_str()).or_insert(n)
            })
            .collect();
        Validator {
            images: store.resized(indices, config.backbone.input_hw),
            labels: indices.iter().map(|&i| frames[i].labels(config.val_labels).to_vec()).collect(),
            groups,
            num_classes: store.manifest().vocab().num_classes(),
            mode: config.val_map_mode,
        }
    }

    fn map(&self, model: &Model<f32>) -> Result<Option<f64>> {
        if self.images.is_empty() {
            return Ok(None);
        }
        let probs = predict_images(model, &self.images, &[Head::Triplet])?;
        let rows: Vec<&[f64]> = probs.iter().map(Vec::as_slice).collect();
        let labels: Vec<&[usize]> = self.labels.iter().map(Vec::as_slice).collect();
        Ok(map_from_rows(&rows, &labels, &self.groups, self.num_classes, self.mode, UndefinedPolicy::Exclude)?.map)
    }
}

fn train(
    store: &FrameStore,
    fold: &FoldSplit,
    config: &TrainConfig,
    role: Role,
    soft: Option<SoftTargets<'_>>,
) -> Result<Checkpoint> {
    config.validate()?;
    validate_fold(store, fold)?;
    let train_idx = store.indices_of(&fold.train_videos);
    if train_idx.is_empty() {
        return Err(Error::validation("fold", format!("fold {} has no training frames", fold.fold_id)));
    }
    if let Some(s) = soft {
        if !(0.0..=1.0).contains(&s.alpha) {
            return Err(Error::validation("alpha", format!("{} not in [0, 1]", s.alpha)));
        }
        if s.labels.fold_id.is_some_and(|f| f != fold.fold_id) {
            return Err(Error::validation(
                "soft labels",
                format!("generated for fold {:?}, training fold {}", s.labels.fold_id, fold.fold_id),
            ));
        }
        check_soft_coverage(s.labels, store, fold)?;
    }
    let manifest = store.manifest();
    let dims = HeadDims::from_vocab(manifest.vocab(), manifest.num_phases());
    let targets = build_targets(store, &train_idx, &config.heads, dims, soft)?;
    let validator = Validator::new(store, &store.indices_of(&fold.val_videos), config);

    let mut model = Model::<f32>::new(&config.backbone, config.heads.clone(), dims, config.seeds.init)?;
    let opt = &config.optimizer;
    let mut adam = Adam::new(model.num_params(), opt);
    let augment = AugmentationConfig {
        seed: config.seeds.augment,
        ..config.augment.clone()
    };
    let steps_per_epoch = train_idx.len().div_ceil(opt.batch_size);
    let total_steps = steps_per_epoch * opt.epochs;
    let mut data_rng = ChaCha8Rng::seed_from_u64(config.seeds.data);
    // positions into train_idx / targets
    let mut order: Vec<usize> = (0..train_idx.len()).collect();
    let mut curve = Vec::with_capacity(opt.epochs);
    let mut best: Option<(usize, Vec<f32>)> = None;
    let mut step = 0;

    for epoch in 0..opt.epochs {
        order.shuffle(&mut data_rng);
        let mut loss_sum = 0.0f64;
        for batch in order.chunks(opt.batch_size) {
            let images = batch
                .iter()
                .map(|&r| {
                    let frame = train_idx[r];
                    augment_frame(&store.images()[frame], &augment, &mut augment.rng_for(epoch, frame))
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&FloatImage> = images.iter().collect();
            let (out, cache) = model.forward_train(&refs)?;
            let loss = multitask_loss(&out, &targets.batch(batch), &config.heads)?;
            if !loss.total.is_finite() {
                return Err(Error::Numeric("training loss"));
            }
            loss_sum += f64::from(loss.total) * batch.len() as f64;
            let grads = model.backward(&cache, &loss.grad);
            let lr = cosine_lr(step, total_steps, opt.lr_max, opt.lr_min)?;
            adam.step(model.params_mut(), &grads, lr);
            step += 1;
        }
        let val_map = validator.map(&model)?;
        curve.push(EpochLog {
            epoch: epoch + 1,
            train_loss: loss_sum / train_idx.len() as f64,
            val_map,
        });
        if config.selection == Selection::BestValMap && select_epoch(&curve, Selection::BestValMap) == Some(epoch) {
            best = Some((epoch, model.params().to_vec()));
        }
    }

    let chosen = select_epoch(&curve, config.selection).expect("at least one epoch");
    if let Some((epoch, params)) = best {
        debug_assert_eq!(epoch, chosen);
        model.params_mut().copy_from_slice(&params);
    }
    Ok(Checkpoint::from_model(
        &model,
        role,
        Some(fold.fold_id),
        chosen + 1,
        curve[chosen].val_map,
        config.seeds,
        curve,
    ))
}
