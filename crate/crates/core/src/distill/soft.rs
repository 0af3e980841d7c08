//! Teacher soft labels and their file format.
//!
//! ```text
//! # selfdistill soft labels v1
//! teacher: <checkpoint sha256>
//! fold: <id or ->
//! smoothing: <epsilon>
//! heads: triplet:20,instrument:3
//! video_id,frame_idx,values...
//! VID01,0,0.91,0.002,...
//! ```
//! Values are written in shortest round-trip form, so a reload is bitwise
//! equal to the saved set.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::datagen::{FoldSplit, FrameKey};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Head};

use super::store::{predict_images, FrameStore};

const MAGIC: &str = "# selfdistill soft labels v1";

#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabelSet {
    pub teacher_hash: String,
    pub fold_id: Option<usize>,
    /// Total smoothing applied so far.
    pub smoothing: f64,
    heads: Vec<(Head, usize)>,
    rows: BTreeMap<FrameKey, Vec<f64>>,
}

impl SoftLabelSet {
    /// `heads` lists the stored heads with their widths; the triplet head
    /// comes first and the phase head is not stored.
    pub fn new(teacher_hash: impl Into<String>, fold_id: Option<usize>, heads: Vec<(Head, usize)>) -> Result<Self> {
        if heads.first().map(|h| h.0) != Some(Head::Triplet) {
            return Err(Error::validation("soft label heads", "the triplet head must come first"));
        }
        let mut seen = BTreeSet::new();
        for &(h, w) in &heads {
            if h == Head::Phase || w == 0 || !seen.insert(h) {
                return Err(Error::validation(
                    "soft label heads",
                    format!("bad or repeated head {}:{w}", h.name()),
                ));
            }
        }
        Ok(SoftLabelSet {
            teacher_hash: teacher_hash.into(),
            fold_id,
            smoothing: 0.0,
            heads,
            rows: BTreeMap::new(),
        })
    }

    pub fn heads(&self) -> &[(Head, usize)] {
        &self.heads
    }

    pub fn row_width(&self) -> usize {
        self.heads.iter().map(|h| h.1).sum()
    }

    pub fn insert(&mut self, key: FrameKey, row: Vec<f64>) -> Result<()> {
        if row.len() != self.row_width() {
            return Err(Error::Shape {
                what: "soft label row",
                expected: self.row_width(),
                actual: row.len(),
            });
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Range {
                what: "soft label",
                value: v.to_string(),
                range: "[0, 1]".into(),
            });
        }
        self.rows.insert(key, row);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn contains(&self, key: &FrameKey) -> bool {
        self.rows.contains_key(key)
    }

    pub fn row(&self, key: &FrameKey) -> Option<&[f64]> {
        self.rows.get(key).map(Vec::as_slice)
    }

    /// The stored values of one head for one frame.
    pub fn head(&self, key: &FrameKey, head: Head) -> Option<&[f64]> {
        let row = self.rows.get(key)?;
        let mut offset = 0;
        for &(h, w) in &self.heads {
            if h == head {
                return Some(&row[offset..offset + w]);
            }
            offset += w;
        }
        None
    }

    pub fn triplet(&self, key: &FrameKey) -> Option<&[f64]> {
        self.head(key, Head::Triplet)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&FrameKey, &[f64])> {
        self.rows.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn keys(&self) -> impl Iterator<Item = &FrameKey> {
        self.rows.keys()
    }

    pub fn videos(&self) -> BTreeSet<String> {
        self.rows.keys().map(|k| k.video_id.clone()).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let fold = self.fold_id.map_or("-".to_string(), |f| f.to_string());
        let heads: Vec<String> = self.heads.iter().map(|(h, w)| format!("{}:{w}", h.name())).collect();
        let _ = writeln!(out, "{MAGIC}");
        let _ = writeln!(out, "teacher: {}", self.teacher_hash);
        let _ = writeln!(out, "fold: {fold}");
        let _ = writeln!(out, "smoothing: {}", self.smoothing);
        let _ = writeln!(out, "heads: {}", heads.join(","));
        let _ = writeln!(out, "video_id,frame_idx,values...");
        for (key, row) in &self.rows {
            let _ = write!(out, "{},{}", key.video_id, key.frame_idx);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let mut next = |want: &str| -> Result<(usize, String)> {
            let (i, line) = lines
                .next()
                .ok_or_else(|| Error::parse(source, 0, format!("missing {want} line")))?;
            Ok((i + 1, line.to_string()))
        };
        let (n, magic) = next("header")?;
        if magic != MAGIC {
            return Err(Error::parse(source, n, "not a soft-label file"));
        }
        let field = |n: usize, line: &str, name: &str| -> Result<String> {
            line.strip_prefix(&format!("{name}: "))
                .map(str::to_string)
                .ok_or_else(|| Error::parse(source, n, format!("expected `{name}: ...`")))
        };
        let (n, l) = next("teacher")?;
        let teacher = field(n, &l, "teacher")?;
        let (n, l) = next("fold")?;
        let fold = field(n, &l, "fold")?;
        let fold_id = if fold == "-" {
            None
        } else {
            Some(fold.parse().map_err(|_| Error::parse(source, n, "bad fold id"))?)
        };
        let (n, l) = next("smoothing")?;
        let smoothing: f64 = field(n, &l, "smoothing")?
            .parse()
            .map_err(|_| Error::parse(source, n, "bad smoothing value"))?;
        let (n, l) = next("heads")?;
        let mut heads = Vec::new();
        for item in field(n, &l, "heads")?.split(',') {
            let (name, width) = item
                .split_once(':')
                .ok_or_else(|| Error::parse(source, n, format!("bad head entry `{item}`")))?;
            let head = Head::ALL
                .into_iter()
                .find(|h| h.name() == name)
                .ok_or_else(|| Error::parse(source, n, format!("unknown head `{name}`")))?;
            let width = width
                .parse()
                .map_err(|_| Error::parse(source, n, format!("bad width `{width}`")))?;
            heads.push((head, width));
        }
        next("column")?;
        let mut set = SoftLabelSet::new(teacher, fold_id, heads).map_err(|e| Error::parse(source, n, e.to_string()))?;
        set.smoothing = smoothing;
        for (i, line) in lines {
            let n = i + 1;
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let video = fields.next().unwrap_or_default().to_string();
            let frame: u32 = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| Error::parse(source, n, "bad frame index"))?;
            let row = fields
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::parse(source, n, e.to_string()))?;
            let key = FrameKey::new(video, frame);
            if set.contains(&key) {
                return Err(Error::parse(source, n, format!("duplicate frame {key}")));
            }
            set.insert(key, row).map_err(|e| Error::parse(source, n, e.to_string()))?;
        }
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// Eval-mode teacher probabilities on the fold's training videos.
///
/// The triplet head is always stored; with `all_heads` the enabled
/// instrument, verb and target heads are stored as well.
pub fn generate_soft_labels(
    teacher: &Checkpoint,
    teacher_hash: &str,
    store: &FrameStore,
    fold: &FoldSplit,
    all_heads: bool,
) -> Result<SoftLabelSet> {
    if teacher.meta.fold_id != Some(fold.fold_id) {
        return Err(Error::validation(
            "fold",
            format!(
                "checkpoint belongs to fold {:?}, requested fold {}",
                teacher.meta.fold_id, fold.fold_id
            ),
        ));
    }
    let model = teacher.model()?;
    let mut heads = vec![Head::Triplet];
    if all_heads {
        heads.extend(
            [Head::Instrument, Head::Verb, Head::Target]
                .into_iter()
                .filter(|&h| teacher.meta.heads.is_enabled(h)),
        );
    }
    let widths = heads.iter().map(|&h| (h, teacher.meta.dims.width(h))).collect();
    let mut set = SoftLabelSet::new(teacher_hash, Some(fold.fold_id), widths)?;
    let indices = store.indices_of(&fold.train_videos);
    let images = store.resized(&indices, teacher.meta.backbone.input_hw);
    let probs = predict_images(&model, &images, &heads)?;
    for (&i, row) in indices.iter().zip(probs) {
        set.insert(store.manifest().frames()[i].key(), row)?;
    }
    check_soft_coverage(&set, store, fold)?;
    Ok(set)
}

/// `s' = (1 − ε)·s + ε/2` elementwise.
pub fn smooth_soft_labels(soft: &SoftLabelSet, epsilon: f64) -> Result<SoftLabelSet> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::validation("smoothing", format!("epsilon {epsilon} not in [0, 1)")));
    }
    let mut out = soft.clone();
    if epsilon == 0.0 {
        return Ok(out);
    }
    for row in out.rows.values_mut() {
        for v in row {
            *v = ((1.0 - epsilon) * *v + 0.5 * epsilon).clamp(0.0, 1.0);
        }
    }
    // Same as 1 - (1 - a)(1 - b), but exact when nothing was applied yet.
    out.smoothing = soft.smoothing + epsilon - soft.smoothing * epsilon;
    Ok(out)
}

/// The soft labels must cover every training frame of `fold` and hold
/// nothing from its validation videos.
pub fn check_soft_coverage(soft: &SoftLabelSet, store: &FrameStore, fold: &FoldSplit) -> Result<()> {
    let leaked: Vec<String> = soft.videos().into_iter().filter(|v| fold.val_videos.contains(v)).collect();
    if !leaked.is_empty() {
        return Err(Error::Coverage {
            what: "soft labels",
            detail: format!("validation videos present: {leaked:?}"),
        });
    }
    let frames = store.manifest().frames();
    let missing: Vec<String> = store
        .indices_of(&fold.train_videos)
        .into_iter()
        .map(|i| frames[i].key())
        .filter(|k| !soft.contains(k))
        .map(|k| k.to_string())
        .collect();
    if !missing.is_empty() {
        let shown: Vec<&String> = missing.iter().take(10).collect();
        return Err(Error::Coverage {
            what: "soft labels",
            detail: format!("{} training frame(s) missing, e.g. {shown:?}", missing.len()),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn soft() -> SoftLabelSet {
        let mut s = SoftLabelSet::new("abc", Some(1), vec![(Head::Triplet, 3), (Head::Verb, 2)]).unwrap();
        s.insert(FrameKey::new("V1", 0), vec![1.0, 0.0, 0.1 + 0.2, 0.25, 1.0 / 3.0]).unwrap();
        s.insert(FrameKey::new("V0", 4), vec![0.5, 0.7, 0.9, 0.0, 1.0]).unwrap();
        s
    }

    #[test]
    fn text_round_trip_is_exact() {
        let s = soft();
        let back = SoftLabelSet::parse(&s.to_text(), "mem").unwrap();
        assert_eq!(back, s);
        assert_eq!(back.head(&FrameKey::new("V1", 0), Head::Verb).unwrap(), &[0.25, 1.0 / 3.0]);
    }

    #[test]
    fn smoothing_formula() {
        let s = smooth_soft_labels(&soft(), 0.1).unwrap();
        let row = s.triplet(&FrameKey::new("V1", 0)).unwrap();
        assert!((row[0] - 0.95).abs() < 1e-15);
        assert!((row[1] - 0.05).abs() < 1e-15);
        assert_eq!(smooth_soft_labels(&soft(), 0.0).unwrap(), soft());
        assert!(smooth_soft_labels(&soft(), 1.0).is_err());
        assert!(smooth_soft_labels(&soft(), -0.1).is_err());
    }

    #[test]
    fn rejects_bad_rows() {
        let mut s = soft();
        assert!(s.insert(FrameKey::new("V2", 0), vec![0.0; 4]).is_err());
        assert!(s.insert(FrameKey::new("V2", 0), vec![0.0, 0.0, 1.1, 0.0, 0.0]).is_err());
        assert!(SoftLabelSet::new("x", None, vec![(Head::Verb, 2)]).is_err());
    }
}
