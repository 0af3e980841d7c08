//! Procedural long-tailed multi-label dataset.
//!
//! Each active triplet is drawn as a 4x4 glyph whose centre, corners and
//! border carry one hue each for the instrument, verb and target. Glyphs of
//! invalid tuples act as distractors and the background tint encodes the
//! phase. Class
//! frequencies follow a power law over a seeded random ranking of the valid
//! triplets.

use std::sync::Arc;

use image::RgbImage;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::FloatImage;
use super::manifest::{DatasetManifest, FrameRecord, ImageSource};
use crate::error::{Error, Result};
use crate::vocab::{Component, ComponentVocabulary, Triplet, TripletVocabulary};

const GLYPH: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_videos: usize,
    pub frames_per_video: usize,
    pub instruments: usize,
    pub verbs: usize,
    pub targets: usize,
    pub n_valid_triplets: usize,
    /// Exponent `s` of the class weights `rank^-s`; 0 gives uniform classes.
    pub imbalance_exponent: f64,
    pub max_triplets_per_frame: usize,
    pub n_phases: usize,
    /// Side length of the square rendered frames, a multiple of 4.
    pub image_size: usize,
    /// Standard deviation of additive pixel noise.
    pub pixel_noise: f64,
    /// Relative glyph brightness jitter, uniform in `[1 - j, 1 + j]`.
    pub intensity_jitter: f64,
    /// Glyphs of non-valid tuples drawn per frame.
    pub distractors_per_frame: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_videos: 25,
            frames_per_video: 600,
            instruments: 3,
            verbs: 4,
            targets: 5,
            n_valid_triplets: 20,
            imbalance_exponent: 1.8,
            max_triplets_per_frame: 2,
            n_phases: 7,
            image_size: 16,
            pixel_noise: 0.08,
            intensity_jitter: 0.15,
            distractors_per_frame: 0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("instruments", self.instruments),
            ("verbs", self.verbs),
            ("targets", self.targets),
            ("n_videos", self.n_videos),
            ("frames_per_video", self.frames_per_video),
            ("n_valid_triplets", self.n_valid_triplets),
            ("max_triplets_per_frame", self.max_triplets_per_frame),
            ("n_phases", self.n_phases),
        ];
        for (field, v) in dims {
            if v == 0 {
                return Err(Error::validation(field, "must be at least 1"));
            }
        }
        let product = self.instruments * self.verbs * self.targets;
        if self.n_valid_triplets > product {
            return Err(Error::validation(
                "n_valid_triplets",
                format!("{} exceeds I*V*T = {product}", self.n_valid_triplets),
            ));
        }
        if self.max_triplets_per_frame > self.n_valid_triplets {
            return Err(Error::validation(
                "max_triplets_per_frame",
                "exceeds the number of valid triplets",
            ));
        }
        if self.image_size < GLYPH || self.image_size % GLYPH != 0 {
            return Err(Error::validation("image_size", "must be a positive multiple of 4"));
        }
        let cells = (self.image_size / GLYPH).pow(2);
        if self.max_triplets_per_frame + self.distractors_per_frame > cells {
            return Err(Error::validation(
                "image_size",
                format!("{cells} glyph cells cannot hold all glyphs of a frame"),
            ));
        }
        if !(self.imbalance_exponent >= 0.0 && self.imbalance_exponent.is_finite()) {
            return Err(Error::validation("imbalance_exponent", "must be finite and >= 0"));
        }
        if !(self.pixel_noise >= 0.0) || !(0.0..1.0).contains(&self.intensity_jitter) {
            return Err(Error::validation("pixel_noise", "noise parameters out of range"));
        }
        Ok(())
    }

    pub fn total_frames(&self) -> usize {
        self.n_videos * self.frames_per_video
    }
}

/// Fully saturated colour `k` of `n` hues evenly spaced on the colour wheel.
fn hue(k: usize, n: usize) -> [f32; 3] {
    let h = 6.0 * k as f32 / n as f32;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

fn phase_tint(phase: usize) -> [f32; 3] {
    [
        0.05 + 0.08 * (phase % 3) as f32,
        0.05 + 0.08 * ((phase / 3) % 3) as f32,
        0.12,
    ]
}

/// Which component colours a glyph pixel: the centre holds the instrument,
/// the corners the verb and the remaining border the target. The layout is
/// unchanged by flips and quarter turns.
fn glyph_part(y: usize, x: usize) -> Component {
    let edge = |v: usize| v == 0 || v == GLYPH - 1;
    match (edge(y), edge(x)) {
        (false, false) => Component::Instrument,
        (true, true) => Component::Verb,
        _ => Component::Target,
    }
}

/// Renders one frame for the given triplets, distractor tuples and phase.
pub fn render_frame(
    spec: &SyntheticSpec,
    triplets: &[Triplet],
    distractors: &[Triplet],
    phase: usize,
    rng: &mut impl Rng,
) -> RgbImage {
    let size = spec.image_size;
    let mut img = FloatImage::zeros(size, size);
    let tint = phase_tint(phase);
    for px in img.data.chunks_exact_mut(3) {
        px.copy_from_slice(&tint);
    }
    let cells_per_row = size / GLYPH;
    let n_glyphs = triplets.len() + distractors.len();
    let cells = index::sample(rng, cells_per_row * cells_per_row, n_glyphs).into_vec();
    for (t, &cell) in triplets.iter().chain(distractors).zip(&cells) {
        let j = spec.intensity_jitter as f32;
        let scale = 0.85 * (1.0 + rng.gen_range(-j..=j));
        let colors = [
            hue(t.instrument, spec.instruments),
            hue(t.verb, spec.verbs),
            hue(t.target, spec.targets),
        ];
        let (cy, cx) = ((cell / cells_per_row) * GLYPH, (cell % cells_per_row) * GLYPH);
        for y in 0..GLYPH {
            for x in 0..GLYPH {
                let color = match glyph_part(y, x) {
                    Component::Instrument => colors[0],
                    Component::Verb => colors[1],
                    Component::Target => colors[2],
                };
                for (c, &v) in color.iter().enumerate() {
                    img.set(cy + y, cx + x, c, v * scale);
                }
            }
        }
    }
    if spec.pixel_noise > 0.0 {
        let noise = Normal::new(0.0, spec.pixel_noise as f32).expect("valid sigma");
        for v in &mut img.data {
            *v += noise.sample(rng);
        }
    }
    img.to_rgb8()
}

/// Generates a dataset and its vocabulary from `spec`. Deterministic in
/// `spec.seed`.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (ni, nv, nt) = (spec.instruments, spec.verbs, spec.targets);
    let product = ni * nv * nt;

    let mut chosen = index::sample(&mut rng, product, spec.n_valid_triplets).into_vec();
    chosen.sort_unstable();
    let decode = |k: usize| Triplet::new(k / (nv * nt), (k / nt) % nv, k % nt);
    let triplets: Vec<Triplet> = chosen.iter().map(|&k| decode(k)).collect();
    let vocab = Arc::new(TripletVocabulary::new(
        ComponentVocabulary::with_dims(ni, nv, nt)?,
        triplets.clone(),
    )?);
    let invalid: Vec<Triplet> = (0..product)
        .filter(|k| chosen.binary_search(k).is_err())
        .map(decode)
        .collect();

    let mut ranks: Vec<usize> = (0..spec.n_valid_triplets).collect();
    ranks.shuffle(&mut rng);
    let weights: Vec<f64> = ranks
        .iter()
        .map(|&r| ((r + 1) as f64).powf(-spec.imbalance_exponent))
        .collect();

    let digits = spec.n_videos.to_string().len().max(2);
    let mut frames = Vec::with_capacity(spec.total_frames());
    for v in 0..spec.n_videos {
        let video_id = format!("VID{:0digits$}", v + 1);
        for f in 0..spec.frames_per_video {
            let k = rng.gen_range(1..=spec.max_triplets_per_frame);
            let active = weighted_sample_without_replacement(&mut rng, &weights, k);
            let n_distractors = if invalid.is_empty() {
                0
            } else {
                spec.distractors_per_frame
            };
            let distractors: Vec<Triplet> = (0..n_distractors)
                .map(|_| invalid[rng.gen_range(0..invalid.len())])
                .collect();
            let phase = f * spec.n_phases / spec.frames_per_video;
            let glyphs: Vec<Triplet> = active.iter().map(|&id| triplets[id]).collect();
            let image = render_frame(spec, &glyphs, &distractors, phase, &mut rng);
            frames.push(FrameRecord {
                video_id: video_id.clone(),
                frame_idx: f as u32,
                image: ImageSource::Pixels(Arc::new(image)),
                triplets: active,
                phase,
                clean_triplets: None,
            });
        }
    }
    DatasetManifest::new(vocab, spec.n_phases, frames)
}

fn weighted_sample_without_replacement(rng: &mut impl Rng, weights: &[f64], k: usize) -> Vec<usize> {
    let mut remaining = weights.to_vec();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = remaining.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        let mut pick = remaining.len() - 1;
        for (i, &w) in remaining.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            if u < w {
                pick = i;
                break;
            }
            u -= w;
        }
        while remaining[pick] <= 0.0 {
            pick -= 1;
        }
        remaining[pick] = 0.0;
        out.push(pick);
    }
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::prevalence;

    #[test]
    fn same_seed_same_dataset() {
        let spec = SyntheticSpec {
            n_videos: 4,
            frames_per_video: 10,
            seed: 9,
            ..SyntheticSpec::default()
        };
        let a = generate_synthetic_dataset(&spec).unwrap();
        let b = generate_synthetic_dataset(&spec).unwrap();
        assert!(a.same_labels(&b));
        assert_eq!(a.load_float_images().unwrap(), b.load_float_images().unwrap());

        let dir = tempfile::tempdir().unwrap();
        a.save(&dir.path().join("a.csv")).unwrap();
        b.save(&dir.path().join("b.csv")).unwrap();
        assert_eq!(
            std::fs::read(dir.path().join("a.csv")).unwrap(),
            std::fs::read(dir.path().join("b.csv")).unwrap()
        );
    }

    #[test]
    fn zero_exponent_is_near_uniform() {
        let spec = SyntheticSpec {
            n_videos: 20,
            frames_per_video: 250,
            imbalance_exponent: 0.0,
            max_triplets_per_frame: 1,
            ..SyntheticSpec::default()
        };
        let m = generate_synthetic_dataset(&spec).unwrap();
        let p = prevalence(&m).unwrap();
        for &f in &p.fractions {
            assert!((f - 0.05).abs() < 0.015, "{f}");
        }
    }

    #[test]
    fn default_exponent_is_long_tailed() {
        let spec = SyntheticSpec {
            seed: 3,
            ..SyntheticSpec::default()
        };
        let m = generate_synthetic_dataset(&spec).unwrap();
        let p = prevalence(&m).unwrap();
        assert!(p.fractions.iter().all(|&f| f > 0.0));
        assert!(p.imbalance_ratio() >= 100.0, "{}", p.imbalance_ratio());
    }

    #[test]
    fn infeasible_specs_rejected() {
        let spec = SyntheticSpec {
            n_valid_triplets: 61,
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic_dataset(&spec).is_err());
        let spec = SyntheticSpec {
            verbs: 0,
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic_dataset(&spec).is_err());
    }

    #[test]
    fn phases_are_contiguous_segments() {
        let spec = SyntheticSpec {
            n_videos: 2,
            frames_per_video: 70,
            ..SyntheticSpec::default()
        };
        let m = generate_synthetic_dataset(&spec).unwrap();
        for video in m.videos() {
            let phases: Vec<usize> = m
                .frames()
                .iter()
                .filter(|f| f.video_id == video)
                .map(|f| f.phase)
                .collect();
            assert!(phases.windows(2).all(|w| w[0] <= w[1]));
            assert_eq!(phases[0], 0);
            assert_eq!(*phases.last().unwrap(), 6);
        }
    }
}
