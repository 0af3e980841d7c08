//! Frame records and the manifest file.
//!
//! File layout:
//!
//! ```text
//! # selfdistill manifest v1
//! vocab: vocab.txt
//! phases: 7
//! video_id,frame_idx,image,triplets,phase,clean
//! VID01,0,frames/VID01/000000.png,3;7,0,-
//! VID01,1,frames/VID01/000001.png,5,0,4
//! ```
//!
//! `triplets` and `clean` are `;`-separated class ids (possibly empty).
//! `clean` is `-` when the annotated labels are the clean ones.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::image::FloatImage;
use crate::error::{Error, Result};
use crate::vocab::TripletVocabulary;

const MAGIC: &str = "# selfdistill manifest v1";
const COLUMNS: &str = "video_id,frame_idx,image,triplets,phase,clean";

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FrameKey {
    pub video_id: String,
    pub frame_idx: u32,
}

impl FrameKey {
    pub fn new(video_id: impl Into<String>, frame_idx: u32) -> Self {
        FrameKey {
            video_id: video_id.into(),
            frame_idx,
        }
    }
}

impl fmt::Display for FrameKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.video_id, self.frame_idx)
    }
}

#[derive(Clone, Debug)]
pub enum ImageSource {
    Path(PathBuf),
    Pixels(Arc<RgbImage>),
}

impl ImageSource {
    pub fn load(&self) -> Result<Arc<RgbImage>> {
        match self {
            ImageSource::Pixels(p) => Ok(Arc::clone(p)),
            ImageSource::Path(path) => {
                let img = image::open(path)
                    .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
                Ok(Arc::new(img.to_rgb8()))
            }
        }
    }
}

/// Which label set of a frame to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// Labels as annotated, possibly carrying injected noise.
    Annotated,
    /// Labels before noise injection; equal to the annotated ones when no
    /// clean copy is stored.
    Clean,
}

#[derive(Clone, Debug)]
pub struct FrameRecord {
    pub video_id: String,
    pub frame_idx: u32,
    pub image: ImageSource,
    /// Active triplet classes, sorted and unique.
    pub triplets: Vec<usize>,
    pub phase: usize,
    pub clean_triplets: Option<Vec<usize>>,
}

impl FrameRecord {
    pub fn key(&self) -> FrameKey {
        FrameKey::new(self.video_id.clone(), self.frame_idx)
    }

    pub fn labels(&self, source: LabelSource) -> &[usize] {
        match source {
            LabelSource::Annotated => &self.triplets,
            LabelSource::Clean => self.clean_triplets.as_deref().unwrap_or(&self.triplets),
        }
    }

    pub fn multihot(&self, num_classes: usize, source: LabelSource) -> Vec<u8> {
        let mut v = vec![0u8; num_classes];
        for &id in self.labels(source) {
            v[id] = 1;
        }
        v
    }
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    vocab: Arc<TripletVocabulary>,
    vocab_path: Option<PathBuf>,
    num_phases: usize,
    frames: Vec<FrameRecord>,
}

fn normalize_labels(mut ids: Vec<usize>) -> Vec<usize> {
    ids.sort_unstable();
    ids.dedup();
    ids
}

impl DatasetManifest {
    pub fn new(
        vocab: Arc<TripletVocabulary>,
        num_phases: usize,
        frames: Vec<FrameRecord>,
    ) -> Result<Self> {
        let mut m = DatasetManifest {
            vocab,
            vocab_path: None,
            num_phases,
            frames,
        };
        for f in &mut m.frames {
            f.triplets = normalize_labels(std::mem::take(&mut f.triplets));
            if let Some(clean) = f.clean_triplets.take() {
                f.clean_triplets = Some(normalize_labels(clean));
            }
        }
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        if self.num_phases == 0 {
            return Err(Error::validation("phases", "must be at least 1"));
        }
        let c = self.vocab.num_classes();
        let mut seen = HashSet::new();
        let mut per_video: BTreeMap<&str, Vec<u32>> = BTreeMap::new();
        for f in &self.frames {
            if f.video_id.is_empty() || f.video_id.contains([',', '\n', '#']) {
                return Err(Error::validation(
                    "video_id",
                    format!("`{}` is empty or contains a reserved character", f.video_id),
                ));
            }
            if !seen.insert((f.video_id.as_str(), f.frame_idx)) {
                return Err(Error::validation(
                    "frames",
                    format!("duplicate frame {}#{}", f.video_id, f.frame_idx),
                ));
            }
            if f.phase >= self.num_phases {
                return Err(Error::Index {
                    what: "phase",
                    index: f.phase,
                    len: self.num_phases,
                });
            }
            for &id in f.triplets.iter().chain(f.clean_triplets.iter().flatten()) {
                if id >= c {
                    return Err(Error::Index {
                        what: "triplet class",
                        index: id,
                        len: c,
                    });
                }
            }
            per_video.entry(&f.video_id).or_default().push(f.frame_idx);
        }
        for (video, mut idx) in per_video {
            idx.sort_unstable();
            if idx.windows(2).any(|w| w[1] != w[0] + 1) {
                return Err(Error::validation(
                    "frames",
                    format!("frame indices of video {video} are not contiguous"),
                ));
            }
        }
        Ok(())
    }

    pub fn vocab(&self) -> &TripletVocabulary {
        &self.vocab
    }

    pub fn vocab_arc(&self) -> Arc<TripletVocabulary> {
        Arc::clone(&self.vocab)
    }

    pub fn num_phases(&self) -> usize {
        self.num_phases
    }

    pub fn frames(&self) -> &[FrameRecord] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Video ids in order of first appearance.
    pub fn videos(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.frames
            .iter()
            .filter(|f| seen.insert(f.video_id.as_str()))
            .map(|f| f.video_id.clone())
            .collect()
    }

    pub fn frames_per_video(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for f in &self.frames {
            *counts.entry(f.video_id.clone()).or_insert(0) += 1;
        }
        counts
    }

    /// Indices of the frames belonging to any of `videos`.
    pub fn frame_indices_in<'a, I>(&self, videos: I) -> Vec<usize>
    where
        I: IntoIterator<Item = &'a String>,
    {
        let set: HashSet<&str> = videos.into_iter().map(String::as_str).collect();
        (0..self.frames.len())
            .filter(|&i| set.contains(self.frames[i].video_id.as_str()))
            .collect()
    }

    /// A manifest holding only the frames of `videos`.
    pub fn subset<'a, I>(&self, videos: I) -> Self
    where
        I: IntoIterator<Item = &'a String>,
    {
        let frames = self
            .frame_indices_in(videos)
            .into_iter()
            .map(|i| self.frames[i].clone())
            .collect();
        DatasetManifest {
            vocab: Arc::clone(&self.vocab),
            vocab_path: self.vocab_path.clone(),
            num_phases: self.num_phases,
            frames,
        }
    }

    pub fn with_frames(&self, frames: Vec<FrameRecord>) -> Result<Self> {
        let mut m = DatasetManifest::new(Arc::clone(&self.vocab), self.num_phases, frames)?;
        m.vocab_path = self.vocab_path.clone();
        Ok(m)
    }

    /// Decodes every image into memory.
    pub fn materialize(&self) -> Result<Self> {
        let mut m = self.clone();
        for f in &mut m.frames {
            if let ImageSource::Path(_) = f.image {
                f.image = ImageSource::Pixels(f.image.load()?);
            }
        }
        Ok(m)
    }

    pub fn load_float_images(&self) -> Result<Vec<FloatImage>> {
        self.frames
            .iter()
            .map(|f| f.image.load().map(|img| FloatImage::from_rgb8(&img)))
            .collect()
    }

    pub fn index_by_key(&self) -> HashMap<FrameKey, usize> {
        self.frames
            .iter()
            .enumerate()
            .map(|(i, f)| (f.key(), i))
            .collect()
    }

    /// Writes the manifest, its vocabulary and any in-memory images.
    ///
    /// In-memory images go to `frames/<video>/<frame>.png` next to the
    /// manifest; the vocabulary is written to `vocab.txt` unless the manifest
    /// was loaded from a file that names one.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let vocab_file = match &self.vocab_path {
            Some(p) if p.exists() => relative_to(&dir, p),
            _ => {
                let p = dir.join("vocab.txt");
                self.vocab.save(&p)?;
                PathBuf::from("vocab.txt")
            }
        };

        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC}");
        let _ = writeln!(out, "vocab: {}", vocab_file.display());
        let _ = writeln!(out, "phases: {}", self.num_phases);
        let _ = writeln!(out, "{COLUMNS}");
        for f in &self.frames {
            let image_path = match &f.image {
                ImageSource::Path(p) => relative_to(&dir, p),
                ImageSource::Pixels(px) => {
                    let rel = PathBuf::from("frames")
                        .join(&f.video_id)
                        .join(format!("{:06}.png", f.frame_idx));
                    let abs = dir.join(&rel);
                    if let Some(parent) = abs.parent() {
                        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                    }
                    px.save(&abs)
                        .map_err(|e| Error::Format(format!("{}: {e}", abs.display())))?;
                    rel
                }
            };
            let clean = match &f.clean_triplets {
                None => "-".to_string(),
                Some(c) => join_ids(c),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                f.video_id,
                f.frame_idx,
                image_path.display(),
                join_ids(&f.triplets),
                f.phase,
                clean
            );
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let src = path.display().to_string();
        let mut lines = text.lines().enumerate().map(|(n, l)| (n + 1, l));

        let mut header = |expect: &str| -> Result<(usize, String)> {
            let (n, line) = lines
                .next()
                .ok_or_else(|| Error::parse(&src, 0, "truncated header"))?;
            if expect.is_empty() {
                return Ok((n, line.to_string()));
            }
            line.strip_prefix(expect)
                .map(|rest| (n, rest.trim().to_string()))
                .ok_or_else(|| Error::parse(&src, n, format!("expected `{expect}`")))
        };
        let (n, magic) = header("")?;
        if magic.trim() != MAGIC {
            return Err(Error::parse(&src, n, "not a selfdistill manifest"));
        }
        let (_, vocab_rel) = header("vocab:")?;
        let (n, phases) = header("phases:")?;
        let num_phases: usize = phases
            .parse()
            .map_err(|_| Error::parse(&src, n, format!("bad phase count `{phases}`")))?;
        let (n, cols) = header("")?;
        if cols.trim() != COLUMNS {
            return Err(Error::parse(&src, n, format!("expected columns `{COLUMNS}`")));
        }

        let vocab_path = dir.join(&vocab_rel);
        let vocab = Arc::new(TripletVocabulary::load(&vocab_path)?);
        let c = vocab.num_classes();

        let mut frames = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let [video, frame, image, triplets, phase, clean] = fields.as_slice() else {
                return Err(Error::parse(&src, n, format!("expected 6 fields, found {}", fields.len())));
            };
            let frame_idx: u32 = frame
                .parse()
                .map_err(|_| Error::parse(&src, n, format!("bad frame index `{frame}`")))?;
            if !seen.insert((video.to_string(), frame_idx)) {
                return Err(Error::parse(
                    &src,
                    n,
                    format!("duplicate frame {video}#{frame_idx}"),
                ));
            }
            let parse_ids = |s: &str| -> Result<Vec<usize>> {
                if s.is_empty() {
                    return Ok(Vec::new());
                }
                s.split(';')
                    .map(|t| {
                        let id: usize = t
                            .parse()
                            .map_err(|_| Error::parse(&src, n, format!("bad class id `{t}`")))?;
                        if id >= c {
                            return Err(Error::parse(
                                &src,
                                n,
                                format!("class id {id} out of range (C = {c})"),
                            ));
                        }
                        Ok(id)
                    })
                    .collect()
            };
            let phase: usize = phase
                .parse()
                .map_err(|_| Error::parse(&src, n, format!("bad phase `{phase}`")))?;
            if phase >= num_phases {
                return Err(Error::parse(&src, n, format!("phase {phase} >= {num_phases}")));
            }
            let clean_triplets = if *clean == "-" {
                None
            } else {
                Some(parse_ids(clean)?)
            };
            frames.push(FrameRecord {
                video_id: video.to_string(),
                frame_idx,
                image: ImageSource::Path(dir.join(image)),
                triplets: parse_ids(triplets)?,
                phase,
                clean_triplets,
            });
        }
        let mut m = DatasetManifest::new(vocab, num_phases, frames)
            .map_err(|e| Error::parse(&src, 0, e.to_string()))?;
        m.vocab_path = Some(vocab_path);
        Ok(m)
    }

    /// Label-level equality, ignoring where images live.
    pub fn same_labels(&self, other: &DatasetManifest) -> bool {
        self.vocab == other.vocab
            && self.num_phases == other.num_phases
            && self.frames.len() == other.frames.len()
            && self.frames.iter().zip(&other.frames).all(|(a, b)| {
                a.video_id == b.video_id
                    && a.frame_idx == b.frame_idx
                    && a.triplets == b.triplets
                    && a.phase == b.phase
                    && a.clean_triplets == b.clean_triplets
            })
    }
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter()
        .map(|id| id.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

fn relative_to(dir: &Path, p: &Path) -> PathBuf {
    p.strip_prefix(dir).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_synthetic_dataset, SyntheticSpec};

    fn tiny() -> DatasetManifest {
        let spec = SyntheticSpec {
            n_videos: 3,
            frames_per_video: 4,
            ..SyntheticSpec::default()
        };
        generate_synthetic_dataset(&spec).unwrap()
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut m = tiny();
        let mut frames = m.frames().to_vec();
        frames[2].clean_triplets = Some(vec![0, 1]);
        frames[3].clean_triplets = Some(vec![]);
        m = m.with_frames(frames).unwrap();
        m.save(&path).unwrap();
        let loaded = DatasetManifest::load(&path).unwrap();
        assert!(loaded.same_labels(&m));
        let a = m.load_float_images().unwrap();
        let b = loaded.load_float_images().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn load_rejects_duplicate_frames_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        tiny().save(&path).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        let first_row = text.lines().nth(4).unwrap().to_string();
        text.push_str(&first_row);
        text.push('\n');
        std::fs::write(&path, &text).unwrap();
        let err = DatasetManifest::load(&path).unwrap_err();
        match err {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, text.lines().count());
                assert!(message.contains("duplicate"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn new_rejects_gaps_and_bad_ids() {
        let m = tiny();
        let mut frames = m.frames().to_vec();
        frames[1].frame_idx = 17;
        assert!(m.with_frames(frames).is_err());
        let mut frames = m.frames().to_vec();
        frames[0].triplets = vec![10_000];
        assert!(m.with_frames(frames).is_err());
    }

    #[test]
    fn clean_falls_back_to_annotated() {
        let m = tiny();
        let f = &m.frames()[0];
        assert_eq!(f.labels(LabelSource::Clean), f.labels(LabelSource::Annotated));
    }
}
