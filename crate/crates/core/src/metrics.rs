//! Evaluation: per-class average precision, triplet and component mAP,
//! top-K accuracy and per-video tables.
//!
//! Ranking ties are always broken by ascending original index (frames) or
//! class id (top-K), so every score is deterministic.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::{DatasetManifest, LabelSource};
use crate::ensemble::PredictionSet;
use crate::error::{Error, Result};
use crate::vocab::Component;

/// How per-class APs are aggregated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapMode {
    /// Pool all frames, one AP per class.
    #[default]
    Global,
    /// AP per (video, class) cell, averaged over a class's defined cells.
    PerVideo,
}

/// Treatment of classes without any positive frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UndefinedPolicy {
    #[default]
    Exclude,
    CountAsZero,
}

/// When a frame counts as a top-K hit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopKRule {
    /// At least one ground-truth class is among the K best.
    #[default]
    Any,
    /// Every ground-truth class is among the K best.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub map_mode: MapMode,
    pub undefined: UndefinedPolicy,
    pub top_k: usize,
    pub top_k_rule: TopKRule,
    pub labels: LabelSource,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            map_mode: MapMode::Global,
            undefined: UndefinedPolicy::Exclude,
            top_k: 5,
            top_k_rule: TopKRule::Any,
            labels: LabelSource::Clean,
        }
    }
}

/// Average precision of one class. `None` when there is no positive.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            what: "average precision labels",
            expected: scores.len(),
            actual: labels.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("average precision scores"));
    }
    let positives = labels.iter().filter(|&&l| l != 0).count();
    if positives == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] != 0 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(Some(sum / positives as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub map: Option<f64>,
    pub per_class: Vec<Option<f64>>,
    /// Classes left out of the mean because no frame was positive.
    pub excluded: Vec<usize>,
}

/// mAP over a dense score matrix.
///
/// `scores[f]` holds the class scores of frame `f`, `labels[f]` its active
/// classes and `groups[f]` its video index (used by [`MapMode::PerVideo`]).
pub fn map_from_rows(
    scores: &[&[f64]],
    labels: &[&[usize]],
    groups: &[usize],
    num_classes: usize,
    mode: MapMode,
    undefined: UndefinedPolicy,
) -> Result<MapResult> {
    if scores.len() != labels.len() || scores.len() != groups.len() {
        return Err(Error::Shape {
            what: "mAP inputs",
            expected: scores.len(),
            actual: labels.len().min(groups.len()),
        });
    }
    if let Some(row) = scores.iter().find(|r| r.len() != num_classes) {
        return Err(Error::Shape {
            what: "score row",
            expected: num_classes,
            actual: row.len(),
        });
    }
    let mut dense = vec![vec![0u8; scores.len()]; num_classes];
    for (f, active) in labels.iter().enumerate() {
        for &c in active.iter() {
            if c >= num_classes {
                return Err(Error::Index {
                    what: "triplet class",
                    index: c,
                    len: num_classes,
                });
            }
            dense[c][f] = 1;
        }
    }
    let mut per_class = Vec::with_capacity(num_classes);
    match mode {
        MapMode::Global => {
            for (c, class_labels) in dense.iter().enumerate() {
                let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
                per_class.push(average_precision(&col, class_labels)?);
            }
        }
        MapMode::PerVideo => {
            let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (f, &g) in groups.iter().enumerate() {
                members.entry(g).or_default().push(f);
            }
            for (c, class_labels) in dense.iter().enumerate() {
                let mut cells = Vec::new();
                for frames in members.values() {
                    let col: Vec<f64> = frames.iter().map(|&f| scores[f][c]).collect();
                    let lab: Vec<u8> = frames.iter().map(|&f| class_labels[f]).collect();
                    if let Some(ap) = average_precision(&col, &lab)? {
                        cells.push(ap);
                    }
                }
                per_class.push(
                    (!cells.is_empty()).then(|| cells.iter().sum::<f64>() / cells.len() as f64),
                );
            }
        }
    }
    let excluded: Vec<usize> = (0..num_classes).filter(|&c| per_class[c].is_none()).collect();
    let included: Vec<f64> = match undefined {
        UndefinedPolicy::Exclude => per_class.iter().flatten().copied().collect(),
        UndefinedPolicy::CountAsZero => per_class.iter().map(|ap| ap.unwrap_or(0.0)).collect(),
    };
    let map = (!included.is_empty()).then(|| included.iter().sum::<f64>() / included.len() as f64);
    Ok(MapResult {
        map,
        per_class,
        excluded,
    })
}

/// Score rows, label lists and video indices of a manifest, in manifest order.
struct Aligned<'a> {
    scores: Vec<&'a [f64]>,
    labels: Vec<&'a [usize]>,
    groups: Vec<usize>,
}

fn align<'a>(pred: &'a PredictionSet, manifest: &'a DatasetManifest, labels: LabelSource) -> Result<Aligned<'a>> {
    if pred.num_classes() != manifest.vocab().num_classes() {
        return Err(Error::Shape {
            what: "prediction width",
            expected: manifest.vocab().num_classes(),
            actual: pred.num_classes(),
        });
    }
    let scores = pred.aligned_rows(manifest)?;
    let mut video_index: BTreeMap<&str, usize> = BTreeMap::new();
    let groups = manifest
        .frames()
        .iter()
        .map(|f| {
            let n = video_index.len();
            *video_index.entry(f.video_id.as_str()).or_insert(n)
        })
        .collect();
    Ok(Aligned {
        scores,
        labels: manifest.frames().iter().map(|f| f.labels(labels)).collect(),
        groups,
    })
}

pub fn triplet_map(
    pred: &PredictionSet,
    manifest: &DatasetManifest,
    labels: LabelSource,
    mode: MapMode,
    undefined: UndefinedPolicy,
) -> Result<MapResult> {
    let a = align(pred, manifest, labels)?;
    map_from_rows(
        &a.scores,
        &a.labels,
        &a.groups,
        pred.num_classes(),
        mode,
        undefined,
    )
}

/// Projects triplet scores onto one component: the score of component value
/// `k` is the maximum score over triplets containing `k` (0 when none does).
pub fn project_scores(triplet_scores: &[f64], class_components: &[usize], width: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; width];
    let mut seen = vec![false; width];
    for (&s, &k) in triplet_scores.iter().zip(class_components) {
        if !seen[k] || s > out[k] {
            out[k] = s;
            seen[k] = true;
        }
    }
    out
}

pub fn disentangled_component_map(
    pred: &PredictionSet,
    manifest: &DatasetManifest,
    component: Component,
    labels: LabelSource,
    mode: MapMode,
    undefined: UndefinedPolicy,
) -> Result<MapResult> {
    let a = align(pred, manifest, labels)?;
    let vocab = manifest.vocab();
    let width = vocab.components().len(component);
    let class_components: Vec<usize> = vocab.triplets().iter().map(|t| t.get(component)).collect();
    let projected: Vec<Vec<f64>> = a
        .scores
        .iter()
        .map(|row| project_scores(row, &class_components, width))
        .collect();
    let comp_labels: Vec<Vec<usize>> = a
        .labels
        .iter()
        .map(|active| {
            let mut ks: Vec<usize> = active.iter().map(|&c| class_components[c]).collect();
            ks.sort_unstable();
            ks.dedup();
            ks
        })
        .collect();
    let rows: Vec<&[f64]> = projected.iter().map(Vec::as_slice).collect();
    let lab: Vec<&[usize]> = comp_labels.iter().map(Vec::as_slice).collect();
    map_from_rows(&rows, &lab, &a.groups, width, mode, undefined)
}

/// The `k` best classes of a score row, ties by ascending class id.
pub fn top_k_classes(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(k);
    order
}

/// Top-K accuracy over frames with at least one ground-truth class.
/// `None` when no frame qualifies.
pub fn topk_from_rows(
    scores: &[&[f64]],
    labels: &[&[usize]],
    k: usize,
    rule: TopKRule,
) -> Result<Option<f64>> {
    let num_classes = scores.first().map_or(0, |r| r.len());
    if k == 0 || (num_classes > 0 && k > num_classes) {
        return Err(Error::Range {
            what: "top-K",
            value: k.to_string(),
            range: format!("[1, {num_classes}]"),
        });
    }
    let mut scored = 0usize;
    let mut hits = 0usize;
    for (row, active) in scores.iter().zip(labels) {
        if active.is_empty() {
            continue;
        }
        scored += 1;
        let top = top_k_classes(row, k);
        let hit = match rule {
            TopKRule::Any => active.iter().any(|c| top.contains(c)),
            TopKRule::All => active.iter().all(|c| top.contains(c)),
        };
        hits += usize::from(hit);
    }
    Ok((scored > 0).then(|| hits as f64 / scored as f64))
}

pub fn topk_accuracy(
    pred: &PredictionSet,
    manifest: &DatasetManifest,
    k: usize,
    rule: TopKRule,
    labels: LabelSource,
) -> Result<Option<f64>> {
    let a = align(pred, manifest, labels)?;
    topk_from_rows(&a.scores, &a.labels, k, rule)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoMap {
    pub video_id: String,
    pub map: Option<f64>,
}

/// Global-mode mAP of each video's frames, sorted by descending mAP
/// (undefined entries last, then by video id).
pub fn per_video_report(
    pred: &PredictionSet,
    manifest: &DatasetManifest,
    labels: LabelSource,
    undefined: UndefinedPolicy,
) -> Result<Vec<VideoMap>> {
    let a = align(pred, manifest, labels)?;
    let mut by_video: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (f, &g) in a.groups.iter().enumerate() {
        by_video.entry(g).or_default().push(f);
    }
    let mut table = Vec::new();
    for frames in by_video.values() {
        let rows: Vec<&[f64]> = frames.iter().map(|&f| a.scores[f]).collect();
        let lab: Vec<&[usize]> = frames.iter().map(|&f| a.labels[f]).collect();
        let groups = vec![0; frames.len()];
        let result = map_from_rows(&rows, &lab, &groups, pred.num_classes(), MapMode::Global, undefined)?;
        table.push(VideoMap {
            video_id: manifest.frames()[frames[0]].video_id.clone(),
            map: result.map,
        });
    }
    table.sort_by(|a, b| match (a.map, b.map) {
        (Some(x), Some(y)) => y.total_cmp(&x).then_with(|| a.video_id.cmp(&b.video_id)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.video_id.cmp(&b.video_id),
    });
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub triplet_map: Option<f64>,
    pub per_class_ap: Vec<Option<f64>>,
    pub excluded_classes: usize,
    pub instrument_map: Option<f64>,
    pub verb_map: Option<f64>,
    pub target_map: Option<f64>,
    pub top_k: usize,
    pub top_k_accuracy: Option<f64>,
    pub per_video: Vec<VideoMap>,
    pub options: EvalOptions,
}

pub fn evaluate(pred: &PredictionSet, manifest: &DatasetManifest, options: &EvalOptions) -> Result<EvalReport> {
    let trip = triplet_map(pred, manifest, options.labels, options.map_mode, options.undefined)?;
    let comp = |c| {
        disentangled_component_map(pred, manifest, c, options.labels, options.map_mode, options.undefined)
            .map(|r| r.map)
    };
    Ok(EvalReport {
        triplet_map: trip.map,
        excluded_classes: trip.excluded.len(),
        per_class_ap: trip.per_class,
        instrument_map: comp(Component::Instrument)?,
        verb_map: comp(Component::Verb)?,
        target_map: comp(Component::Target)?,
        top_k: options.top_k,
        top_k_accuracy: topk_accuracy(pred, manifest, options.top_k, options.top_k_rule, options.labels)?,
        per_video: per_video_report(pred, manifest, options.labels, options.undefined)?,
        options: options.clone(),
    })
}
