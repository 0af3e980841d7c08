//! Probability averaging over fold students and over configurations,
//! ensemble inference and prediction files.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{DatasetManifest, FrameKey};
use crate::distill::{predict_triplets, FrameStore};
use crate::error::{Error, Result};
use crate::model::Checkpoint;

/// Triplet probabilities per frame, ordered by `(video_id, frame_idx)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    num_classes: usize,
    rows: BTreeMap<FrameKey, Vec<f64>>,
}

fn check_row(row: &[f64], num_classes: usize) -> Result<()> {
    if row.len() != num_classes {
        return Err(Error::Shape {
            what: "prediction row",
            expected: num_classes,
            actual: row.len(),
        });
    }
    if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Range {
            what: "probability",
            value: v.to_string(),
            range: "[0, 1]".into(),
        });
    }
    Ok(())
}

fn list_keys<'a>(keys: impl Iterator<Item = &'a FrameKey>) -> String {
    const SHOWN: usize = 10;
    let all: Vec<String> = keys.map(ToString::to_string).collect();
    let mut text = all.iter().take(SHOWN).cloned().collect::<Vec<_>>().join(", ");
    if all.len() > SHOWN {
        text.push_str(&format!(" and {} more", all.len() - SHOWN));
    }
    text
}

impl PredictionSet {
    pub fn new(num_classes: usize) -> Self {
        PredictionSet {
            num_classes,
            rows: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: FrameKey, row: Vec<f64>) -> Result<()> {
        check_row(&row, self.num_classes)?;
        self.rows.insert(key, row);
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, key: &FrameKey) -> Option<&[f64]> {
        self.rows.get(key).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&FrameKey, &[f64])> {
        self.rows.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn keys(&self) -> impl Iterator<Item = &FrameKey> {
        self.rows.keys()
    }

    /// Rows in manifest order; every manifest frame must be present.
    pub fn aligned_rows<'a>(&'a self, manifest: &DatasetManifest) -> Result<Vec<&'a [f64]>> {
        let mut rows = Vec::with_capacity(manifest.len());
        let mut missing = Vec::new();
        for frame in manifest.frames() {
            let key = frame.key();
            match self.rows.get(&key) {
                Some(r) => rows.push(r.as_slice()),
                None => missing.push(key),
            }
        }
        if !missing.is_empty() {
            return Err(Error::Coverage {
                what: "predictions",
                detail: format!("{} frame(s) without prediction: {}", missing.len(), list_keys(missing.iter())),
            });
        }
        Ok(rows)
    }
}

/// Weighted elementwise mean of prediction sets with identical coverage.
pub fn weighted_average(sets: &[&PredictionSet], weights: &[f64]) -> Result<PredictionSet> {
    let first = *sets.first().ok_or(Error::EmptyInput("prediction sets to average"))?;
    if weights.len() != sets.len() {
        return Err(Error::Shape {
            what: "ensemble weights",
            expected: sets.len(),
            actual: weights.len(),
        });
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::validation("weights", "need non-negative weights with a positive sum"));
    }
    for (i, set) in sets.iter().enumerate().skip(1) {
        if set.num_classes != first.num_classes {
            return Err(Error::Shape {
                what: "prediction width",
                expected: first.num_classes,
                actual: set.num_classes,
            });
        }
        if set.rows.len() != first.rows.len() || !set.rows.keys().eq(first.rows.keys()) {
            let only_first = first.rows.keys().filter(|k| !set.rows.contains_key(k));
            let only_other = set.rows.keys().filter(|k| !first.rows.contains_key(k));
            return Err(Error::Coverage {
                what: "prediction sets",
                detail: format!(
                    "set 0 vs set {i}: only in set 0 [{}]; only in set {i} [{}]",
                    list_keys(only_first),
                    list_keys(only_other)
                ),
            });
        }
    }
    let total: f64 = weights.iter().sum();
    let mut out = PredictionSet::new(first.num_classes);
    for key in first.rows.keys() {
        let mut acc = vec![0.0f64; first.num_classes];
        for (set, &w) in sets.iter().zip(weights) {
            for (a, v) in acc.iter_mut().zip(&set.rows[key]) {
                *a += w * v;
            }
        }
        for a in &mut acc {
            // guard against rounding just outside [0, 1]
            *a = (*a / total).clamp(0.0, 1.0);
        }
        out.rows.insert(key.clone(), acc);
    }
    Ok(out)
}

/// Uniform mean of fold predictions.
pub fn average_fold_predictions(sets: &[PredictionSet]) -> Result<PredictionSet> {
    let refs: Vec<&PredictionSet> = sets.iter().collect();
    weighted_average(&refs, &vec![1.0; sets.len()])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointRef {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleMember {
    pub name: String,
    #[serde(default = "unit_weight")]
    pub weight: f64,
    pub checkpoints: Vec<CheckpointRef>,
}

fn unit_weight() -> f64 {
    1.0
}

fn default_folds() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    #[serde(default = "default_folds")]
    pub folds_per_member: usize,
    pub members: Vec<EnsembleMember>,
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::validation("members", "an ensemble needs at least one member"));
        }
        for (i, m) in self.members.iter().enumerate() {
            if m.checkpoints.len() != self.folds_per_member {
                return Err(Error::validation(
                    format!("members[{i}].checkpoints"),
                    format!(
                        "member `{}` has {} checkpoints, expected {}",
                        m.name,
                        m.checkpoints.len(),
                        self.folds_per_member
                    ),
                ));
            }
            if !(m.weight.is_finite() && m.weight >= 0.0) {
                return Err(Error::validation(format!("members[{i}].weight"), "must be >= 0"));
            }
        }
        Ok(())
    }

    /// Reads a TOML spec; relative checkpoint paths resolve against the
    /// spec file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec: EnsembleSpec = toml::from_str(&text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start].matches('\n').count() + 1)
                .unwrap_or(0);
            Error::parse(path.display().to_string(), line, e.message())
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for m in &mut spec.members {
            for c in &mut m.checkpoints {
                if c.path.is_relative() {
                    c.path = base.join(&c.path);
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Triplet probabilities of one checkpoint on every frame of `store`.
pub fn checkpoint_predictions(checkpoint: &Checkpoint, store: &FrameStore) -> Result<PredictionSet> {
    let model = checkpoint.model()?;
    let all: Vec<usize> = (0..store.manifest().len()).collect();
    let probs = predict_triplets(&model, store, &all)?;
    let mut set = PredictionSet::new(checkpoint.meta.dims.triplet);
    for (frame, row) in store.manifest().frames().iter().zip(probs) {
        set.insert(frame.key(), row)?;
    }
    Ok(set)
}

/// Fold average per member, then the weighted mean over members.
pub fn ensemble_predict(spec: &EnsembleSpec, store: &FrameStore) -> Result<PredictionSet> {
    let (_, combined) = ensemble_predict_members(spec, store)?;
    Ok(combined)
}

/// As [`ensemble_predict`], also returning each member's fold average.
pub fn ensemble_predict_members(
    spec: &EnsembleSpec,
    store: &FrameStore,
) -> Result<(Vec<PredictionSet>, PredictionSet)> {
    spec.validate()?;
    let mut members = Vec::with_capacity(spec.members.len());
    for m in &spec.members {
        let mut folds = Vec::with_capacity(m.checkpoints.len());
        for c in &m.checkpoints {
            let ckpt = Checkpoint::load(&c.path, Some(&c.sha256))?;
            folds.push(checkpoint_predictions(&ckpt, store)?);
        }
        members.push(average_fold_predictions(&folds)?);
    }
    let refs: Vec<&PredictionSet> = members.iter().collect();
    let weights: Vec<f64> = spec.members.iter().map(|m| m.weight).collect();
    let combined = weighted_average(&refs, &weights)?;
    Ok((members, combined))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    Csv,
    Jsonl,
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "jsonl" => Ok(ExportFormat::Jsonl),
            other => Err(Error::validation("format", format!("`{other}` is not csv or jsonl"))),
        }
    }
}

impl ExportFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") => ExportFormat::Jsonl,
            _ => ExportFormat::Csv,
        }
    }
}

const DIGITS: usize = 9;

/// Writes one row per frame in key order, probabilities with 9 decimals.
pub fn export_predictions(pred: &PredictionSet, path: &Path, format: ExportFormat) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::EmptyInput("prediction set to export"));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    match format {
        ExportFormat::Csv => {
            let header: Vec<String> = (0..pred.num_classes).map(|c| format!("p{c}")).collect();
            writeln!(w, "video_id,frame_idx,{}", header.join(",")).map_err(io)?;
            for (key, row) in &pred.rows {
                write!(w, "{},{}", key.video_id, key.frame_idx).map_err(io)?;
                for v in row {
                    write!(w, ",{v:.DIGITS$}").map_err(io)?;
                }
                writeln!(w).map_err(io)?;
            }
        }
        ExportFormat::Jsonl => {
            for (key, row) in &pred.rows {
                let probs: Vec<String> = row.iter().map(|v| format!("{v:.DIGITS$}")).collect();
                writeln!(
                    w,
                    "{{\"video_id\":{},\"frame_idx\":{},\"probs\":[{}]}}",
                    serde_json::to_string(&key.video_id).expect("string"),
                    key.frame_idx,
                    probs.join(",")
                )
                .map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

#[derive(Deserialize)]
struct JsonRow {
    video_id: String,
    frame_idx: u32,
    probs: Vec<f64>,
}

pub fn import_predictions(path: &Path, format: ExportFormat) -> Result<PredictionSet> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let src = path.display().to_string();
    let mut set: Option<PredictionSet> = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (key, row) = match format {
            ExportFormat::Csv => {
                if i == 0 {
                    let width = line.split(',').count().saturating_sub(2);
                    set = Some(PredictionSet::new(width));
                    continue;
                }
                let mut fields = line.split(',');
                let video = fields.next().unwrap_or_default().to_string();
                let frame = fields
                    .next()
                    .and_then(|f| f.parse::<u32>().ok())
                    .ok_or_else(|| Error::parse(&src, lineno, "bad frame index"))?;
                let row = fields
                    .map(|f| f.parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::parse(&src, lineno, e.to_string()))?;
                (FrameKey::new(video, frame), row)
            }
            ExportFormat::Jsonl => {
                let r: JsonRow =
                    serde_json::from_str(&line).map_err(|e| Error::parse(&src, lineno, e.to_string()))?;
                if set.is_none() {
                    set = Some(PredictionSet::new(r.probs.len()));
                }
                (FrameKey::new(r.video_id, r.frame_idx), r.probs)
            }
        };
        let set = set.as_mut().ok_or_else(|| Error::parse(&src, lineno, "missing header"))?;
        if set.rows.contains_key(&key) {
            return Err(Error::parse(&src, lineno, format!("duplicate frame {key}")));
        }
        set.insert(key, row)
            .map_err(|e| Error::parse(&src, lineno, e.to_string()))?;
    }
    set.filter(|s| !s.is_empty())
        .ok_or(Error::EmptyInput("prediction file"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(values: &[(&str, u32, [f64; 2])]) -> PredictionSet {
        let mut s = PredictionSet::new(2);
        for (v, f, row) in values {
            s.insert(FrameKey::new(*v, *f), row.to_vec()).unwrap();
        }
        s
    }

    #[test]
    fn two_frame_mean() {
        let a = set(&[("A", 0, [0.2, 0.0]), ("A", 1, [1.0, 0.5])]);
        let b = set(&[("A", 0, [0.4, 1.0]), ("A", 1, [0.0, 0.5])]);
        let m = average_fold_predictions(&[a, b]).unwrap();
        assert!((m.get(&FrameKey::new("A", 0)).unwrap()[0] - 0.3).abs() < 1e-15);
        assert_eq!(m.get(&FrameKey::new("A", 1)).unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn coverage_mismatch_names_frames() {
        let a = set(&[("A", 0, [0.2, 0.0]), ("A", 1, [1.0, 0.5])]);
        let b = set(&[("A", 0, [0.4, 1.0]), ("B", 3, [0.0, 0.5])]);
        let err = average_fold_predictions(&[a, b]).unwrap_err().to_string();
        assert!(err.contains("A#1") && err.contains("B#3"), "{err}");
    }

    #[test]
    fn rejects_out_of_range() {
        let mut s = PredictionSet::new(2);
        assert!(s.insert(FrameKey::new("A", 0), vec![0.1, 1.5]).is_err());
        assert!(s.insert(FrameKey::new("A", 0), vec![0.1]).is_err());
    }

    #[test]
    fn export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = set(&[("B", 2, [0.123456789123, 0.0]), ("A", 10, [1.0, 0.5]), ("A", 9, [0.3, 0.7])]);
        for fmt in [ExportFormat::Csv, ExportFormat::Jsonl] {
            let path = dir.path().join(format!("p.{fmt:?}"));
            export_predictions(&s, &path, fmt).unwrap();
            let back = import_predictions(&path, fmt).unwrap();
            assert_eq!(back.len(), 3);
            for (k, row) in s.iter() {
                for (a, b) in row.iter().zip(back.get(k).unwrap()) {
                    assert!((a - b).abs() <= 1e-9);
                }
            }
        }
        let text = std::fs::read_to_string(dir.path().join("p.Csv")).unwrap();
        let firsts: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(firsts, ["A", "A", "B"]);
        assert!(text.contains("A,9,"));
    }

    #[test]
    fn empty_export_creates_no_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        assert!(export_predictions(&PredictionSet::new(3), &path, ExportFormat::Csv).is_err());
        assert!(!path.exists());
    }
}
