//! Semantic similarity of soft labels.
//!
//! For frames annotated with a single triplet, the five highest-scored other
//! classes of the soft label are compared with the reference by counting
//! shared components. A random draw that follows class prevalence gives the
//! chance level.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{DatasetManifest, FrameKey, LabelSource};
use crate::distill::SoftLabelSet;
use crate::error::{Error, Result};
use crate::vocab::{PrevalenceTable, TripletVocabulary};

/// Number of compared classes per frame.
pub const TOP: usize = 5;

/// Indices of frames carrying exactly one triplet label.
pub fn select_single_triplet_frames(
    manifest: &DatasetManifest,
    labels: LabelSource,
) -> Result<Vec<usize>> {
    if manifest.is_empty() {
        return Err(Error::EmptyInput("manifest has no frames"));
    }
    Ok(manifest
        .frames()
        .iter()
        .enumerate()
        .filter(|(_, f)| f.labels(labels).len() == 1)
        .map(|(i, _)| i)
        .collect())
}

/// The `k` highest-scored classes other than `reference`, ties broken by
/// ascending class id.
pub fn top_k_excluding_reference(scores: &[f64], reference: usize, k: usize) -> Result<Vec<usize>> {
    if scores.len() < k + 1 {
        return Err(Error::Range {
            what: "number of classes",
            value: scores.len().to_string(),
            range: format!(">= {}", k + 1),
        });
    }
    if reference >= scores.len() {
        return Err(Error::Index {
            what: "reference class",
            index: reference,
            len: scores.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("soft label scores"));
    }
    let mut order: Vec<usize> = (0..scores.len()).filter(|&c| c != reference).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(k);
    Ok(order)
}

pub fn top5_excluding_reference(scores: &[f64], reference: usize) -> Result<[usize; TOP]> {
    let top = top_k_excluding_reference(scores, reference, TOP)?;
    Ok(top.try_into().expect("exactly five classes"))
}

/// Mean and standard error (sample standard deviation over `sqrt(n)`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl MeanSe {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        let n = values.len();
        if n == 0 {
            return Err(Error::EmptyInput("no frames to average"));
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Ok(MeanSe { mean, se, n })
    }
}

/// One row of the per-frame comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameDetail {
    pub key: FrameKey,
    pub reference: usize,
    pub top: [usize; TOP],
    pub scores: [f64; TOP],
    pub matches: [u8; TOP],
    pub mean_match: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservedMatch {
    pub stats: MeanSe,
    pub details: Vec<FrameDetail>,
}

fn single_reference(manifest: &DatasetManifest, index: usize, labels: LabelSource) -> Result<usize> {
    let frame = manifest.frames().get(index).ok_or(Error::Index {
        what: "frame",
        index,
        len: manifest.len(),
    })?;
    match frame.labels(labels) {
        [only] => Ok(*only),
        other => Err(Error::validation(
            "frames",
            format!("{} has {} labels, expected exactly one", frame.key(), other.len()),
        )),
    }
}

/// Component agreement between each frame's reference and the top five
/// soft-label classes.
pub fn mean_component_match(
    frames: &[usize],
    manifest: &DatasetManifest,
    soft: &SoftLabelSet,
    labels: LabelSource,
) -> Result<ObservedMatch> {
    let vocab = manifest.vocab();
    let missing: Vec<String> = frames
        .iter()
        .filter_map(|&i| manifest.frames().get(i))
        .map(|f| f.key())
        .filter(|k| !soft.contains(k))
        .map(|k| k.to_string())
        .collect();
    if !missing.is_empty() {
        let shown = missing.iter().take(10).cloned().collect::<Vec<_>>().join(", ");
        let more = missing.len().saturating_sub(10);
        return Err(Error::Coverage {
            what: "soft labels",
            detail: if more > 0 {
                format!("missing {shown} and {more} more")
            } else {
                format!("missing {shown}")
            },
        });
    }
    let details = frames
        .par_iter()
        .map(|&i| {
            let reference = single_reference(manifest, i, labels)?;
            let key = manifest.frames()[i].key();
            let row = soft.triplet(&key).expect("coverage checked");
            let top = top5_excluding_reference(row, reference)?;
            let mut matches = [0u8; TOP];
            for (m, &c) in matches.iter_mut().zip(&top) {
                *m = vocab.component_match_count(reference, c)?;
            }
            Ok(FrameDetail {
                key,
                reference,
                top,
                scores: top.map(|c| row[c]),
                matches,
                mean_match: matches.iter().map(|&m| f64::from(m)).sum::<f64>() / TOP as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let means: Vec<f64> = details.iter().map(|d| d.mean_match).collect();
    Ok(ObservedMatch {
        stats: MeanSe::from_values(&means)?,
        details,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    #[default]
    WithoutReplacement,
    WithReplacement,
}

fn draw(rng: &mut ChaCha8Rng, weights: &mut [f64], n: usize, sampling: Sampling) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let total: f64 = weights.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        let mut pick = weights.iter().rposition(|&w| w > 0.0).expect("positive weight");
        for (c, &w) in weights.iter().enumerate() {
            if w > 0.0 && u < w {
                pick = c;
                break;
            }
            u -= w;
        }
        if sampling == Sampling::WithoutReplacement {
            weights[pick] = 0.0;
        }
        out.push(pick);
    }
    out
}

/// Chance-level component agreement: per frame, `n_draws` classes other
/// than the reference are drawn with probability proportional to
/// prevalence. Frame `i` of `frames` uses stream `i` of the seeded
/// generator, so the result does not depend on thread scheduling.
pub fn prevalence_random_baseline(
    frames: &[usize],
    manifest: &DatasetManifest,
    prevalence: &PrevalenceTable,
    labels: LabelSource,
    n_draws: usize,
    sampling: Sampling,
    seed: u64,
) -> Result<MeanSe> {
    let vocab = manifest.vocab();
    let c = vocab.num_classes();
    if prevalence.fractions.len() != c {
        return Err(Error::Shape {
            what: "prevalence table",
            expected: c,
            actual: prevalence.fractions.len(),
        });
    }
    if prevalence.fractions.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::validation("prevalence", "fractions must be finite and >= 0"));
    }
    let positive = prevalence.fractions.iter().filter(|&&p| p > 0.0).count();
    if positive < n_draws + 1 {
        return Err(Error::validation(
            "prevalence",
            format!("{positive} classes with positive prevalence, need at least {}", n_draws + 1),
        ));
    }
    if n_draws == 0 {
        return Err(Error::validation("n_draws", "must be at least 1"));
    }
    let means = frames
        .par_iter()
        .enumerate()
        .map(|(stream, &i)| {
            let reference = single_reference(manifest, i, labels)?;
            let mut weights = prevalence.fractions.clone();
            weights[reference] = 0.0;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream as u64);
            let mut total = 0u32;
            for class in draw(&mut rng, &mut weights, n_draws, sampling) {
                total += u32::from(vocab.component_match_count(reference, class)?);
            }
            Ok(f64::from(total) / n_draws as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    MeanSe::from_values(&means)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisOptions {
    pub labels: LabelSource,
    pub n_draws: usize,
    pub sampling: Sampling,
    pub seed: u64,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            labels: LabelSource::Annotated,
            n_draws: TOP,
            sampling: Sampling::WithoutReplacement,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub observed: MeanSe,
    pub baseline: MeanSe,
    pub frames: usize,
    pub options: AnalysisOptions,
    pub details: Vec<FrameDetail>,
}

impl SimilarityReport {
    /// Observed minus baseline mean, in units of the combined standard
    /// error `sqrt(se_obs^2 + se_base^2)`.
    pub fn separation(&self) -> f64 {
        let se = self.observed.se.hypot(self.baseline.se);
        (self.observed.mean - self.baseline.mean) / se
    }

    pub fn summary(&self) -> String {
        format!(
            "frames: {}\nobserved: {:.4} +- {:.4}\nbaseline: {:.4} +- {:.4}\nseparation: {:.1} SE\n",
            self.frames,
            self.observed.mean,
            self.observed.se,
            self.baseline.mean,
            self.baseline.se,
            self.separation()
        )
    }

    /// Tab-separated per-frame table with class names.
    pub fn detail_table(&self, vocab: &TripletVocabulary) -> Result<String> {
        let mut out = String::from("video_id\tframe_idx\treference");
        for r in 1..=TOP {
            let _ = write!(out, "\ttop{r}\tscore{r}\tmatch{r}");
        }
        out.push_str("\tmean_match\n");
        for d in &self.details {
            let _ = write!(
                out,
                "{}\t{}\t{}",
                d.key.video_id,
                d.key.frame_idx,
                vocab.class_name(d.reference)?
            );
            for r in 0..TOP {
                let _ = write!(
                    out,
                    "\t{}\t{:.6}\t{}",
                    vocab.class_name(d.top[r])?,
                    d.scores[r],
                    d.matches[r]
                );
            }
            let _ = writeln!(out, "\t{}", d.mean_match);
        }
        Ok(out)
    }

    pub fn save(&self, report_path: &Path, detail_path: &Path, vocab: &TripletVocabulary) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("serializable");
        std::fs::write(report_path, json).map_err(|e| Error::io(report_path, e))?;
        std::fs::write(detail_path, self.detail_table(vocab)?).map_err(|e| Error::io(detail_path, e))
    }
}

/// Runs both halves of the study on the single-triplet frames covered by
/// `soft`. Prevalence comes from the same frames' videos.
pub fn analyze_soft_labels(
    manifest: &DatasetManifest,
    soft: &SoftLabelSet,
    options: &AnalysisOptions,
) -> Result<SimilarityReport> {
    let covered = manifest.subset(soft.videos().iter());
    let prevalence = PrevalenceTable::from_labels(
        covered.vocab().num_classes(),
        covered.frames().iter().map(|f| f.labels(options.labels)),
    )?;
    let frames = select_single_triplet_frames(&covered, options.labels)?;
    let observed = mean_component_match(&frames, &covered, soft, options.labels)?;
    let baseline = prevalence_random_baseline(
        &frames,
        &covered,
        &prevalence,
        options.labels,
        options.n_draws,
        options.sampling,
        options.seed,
    )?;
    Ok(SimilarityReport {
        observed: observed.stats,
        baseline,
        frames: frames.len(),
        options: options.clone(),
        details: observed.details,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::datagen::{FrameRecord, ImageSource};
    use crate::model::Head;
    use crate::vocab::{ComponentVocabulary, VERB_NAMES, INSTRUMENT_NAMES, TARGET_NAMES};

    fn full_vocab(i: usize, v: usize, t: usize) -> Arc<TripletVocabulary> {
        Arc::new(TripletVocabulary::full(ComponentVocabulary::with_dims(i, v, t).unwrap()).unwrap())
    }

    fn frame(video: &str, idx: u32, triplets: Vec<usize>) -> FrameRecord {
        FrameRecord {
            video_id: video.into(),
            frame_idx: idx,
            image: ImageSource::Path("unused.png".into()),
            triplets,
            phase: 0,
            clean_triplets: None,
        }
    }

    fn soft_for(manifest: &DatasetManifest, rows: impl Fn(usize) -> Vec<f64>) -> SoftLabelSet {
        let c = manifest.vocab().num_classes();
        let mut soft = SoftLabelSet::new("h", None, vec![(Head::Triplet, c)]).unwrap();
        for (i, f) in manifest.frames().iter().enumerate() {
            soft.insert(f.key(), rows(i)).unwrap();
        }
        soft
    }

    #[test]
    fn single_label_selection() {
        let vocab = full_vocab(2, 2, 2);
        let m = DatasetManifest::new(
            vocab,
            1,
            vec![frame("a", 0, vec![1]), frame("a", 1, vec![1, 2]), frame("a", 2, vec![])],
        )
        .unwrap();
        assert_eq!(select_single_triplet_frames(&m, LabelSource::Annotated).unwrap(), vec![0]);
    }

    #[test]
    fn top5_skips_reference_and_breaks_ties_by_id() {
        let scores = [0.9, 0.1, 0.5, 0.5, 0.2, 0.5, 0.0, 0.3];
        assert_eq!(top5_excluding_reference(&scores, 0).unwrap(), [2, 3, 5, 7, 4]);
        assert_eq!(top5_excluding_reference(&scores, 3).unwrap(), [0, 2, 5, 7, 4]);
        assert!(matches!(
            top5_excluding_reference(&scores[..5], 0),
            Err(Error::Range { .. })
        ));
    }

    #[test]
    fn worked_example_averages_one_point_six() {
        let names = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let vocab = Arc::new(
            TripletVocabulary::full(
                ComponentVocabulary::new(
                    names(&INSTRUMENT_NAMES),
                    names(&VERB_NAMES),
                    names(&TARGET_NAMES),
                )
                .unwrap(),
            )
            .unwrap(),
        );
        let id = |i, v, t| vocab.class_by_names(i, v, t).unwrap();
        let reference = id("bipolar", "dissect", "cystic_plate");
        let ranked = [
            (id("bipolar", "coagulate", "cystic_plate"), 0.6),
            (id("hook", "dissect", "cystic_plate"), 0.5),
            (id("bipolar", "dissect", "gallbladder"), 0.4),
            (id("grasper", "retract", "cystic_plate"), 0.3),
            (id("bipolar", "coagulate", "liver"), 0.2),
        ];
        let m = DatasetManifest::new(vocab.clone(), 1, vec![frame("v", 0, vec![reference])]).unwrap();
        let soft = soft_for(&m, |_| {
            let mut row = vec![0.01; vocab.num_classes()];
            row[reference] = 0.9;
            for &(c, s) in &ranked {
                row[c] = s;
            }
            row
        });
        let obs = mean_component_match(&[0], &m, &soft, LabelSource::Annotated).unwrap();
        assert_eq!(obs.details[0].top, ranked.map(|(c, _)| c));
        assert_eq!(obs.details[0].matches, [2, 2, 2, 1, 1]);
        assert!((obs.stats.mean - 1.6).abs() < 1e-12);
    }

    #[test]
    fn constant_two_matches() {
        // Reference (0,0,0) in a 2x2x5 vocabulary; its top five are all
        // one-component neighbours.
        let vocab = full_vocab(2, 2, 5);
        let m = DatasetManifest::new(vocab.clone(), 1, vec![frame("v", 0, vec![0])]).unwrap();
        let neighbours = vocab.one_component_neighbors(0).unwrap();
        let soft = soft_for(&m, |_| {
            let mut row = vec![0.0; vocab.num_classes()];
            for &n in &neighbours {
                row[n] = 0.5;
            }
            row
        });
        let obs = mean_component_match(&[0], &m, &soft, LabelSource::Annotated).unwrap();
        assert_eq!(obs.stats.mean, 2.0);
    }

    #[test]
    fn coverage_gap_is_an_error() {
        let vocab = full_vocab(2, 2, 2);
        let m = DatasetManifest::new(vocab, 1, vec![frame("v", 0, vec![0]), frame("v", 1, vec![1])]).unwrap();
        let mut soft = SoftLabelSet::new("h", None, vec![(Head::Triplet, 8)]).unwrap();
        soft.insert(FrameKey::new("v", 0), vec![0.0; 8]).unwrap();
        let err = mean_component_match(&[0, 1], &m, &soft, LabelSource::Annotated).unwrap_err();
        assert!(matches!(err, Error::Coverage { .. }));
        assert!(err.to_string().contains("v#1"));
    }

    fn uniform_manifest(n: usize) -> DatasetManifest {
        let vocab = full_vocab(3, 4, 5);
        let c = vocab.num_classes();
        let frames = (0..n).map(|i| frame("v", i as u32, vec![i % c])).collect();
        DatasetManifest::new(vocab, 1, frames).unwrap()
    }

    #[test]
    fn uniform_baseline_matches_exhaustive_expectation() {
        let m = uniform_manifest(3000);
        let vocab = m.vocab();
        let c = vocab.num_classes();
        let prevalence = PrevalenceTable {
            fractions: vec![1.0 / c as f64; c],
            num_frames: 1,
        };
        // Under uniform weights every other class is equally likely to be
        // among the draws, so the expectation is the mean over all others.
        let mut expected = 0.0;
        for r in 0..c {
            let others: f64 = (0..c)
                .filter(|&o| o != r)
                .map(|o| f64::from(vocab.component_match_count(r, o).unwrap()))
                .sum();
            expected += others / (c - 1) as f64;
        }
        expected /= c as f64;
        let frames: Vec<usize> = (0..m.len()).collect();
        for sampling in [Sampling::WithoutReplacement, Sampling::WithReplacement] {
            let got = prevalence_random_baseline(
                &frames,
                &m,
                &prevalence,
                LabelSource::Annotated,
                5,
                sampling,
                9,
            )
            .unwrap();
            assert!((got.mean - expected).abs() < 3.0 * got.se, "{got:?} vs {expected}");
        }
    }

    #[test]
    fn baseline_is_seeded_and_reaches_constructed_limit() {
        let m = uniform_manifest(60);
        let frames: Vec<usize> = (0..m.len()).filter(|&i| m.frames()[i].triplets == [0]).collect();
        let mut fractions = vec![0.0; 60];
        fractions[0] = 0.5;
        for n in m.vocab().one_component_neighbors(0).unwrap() {
            fractions[n] = 0.1;
        }
        let prevalence = PrevalenceTable {
            fractions,
            num_frames: 60,
        };
        let run = |seed| {
            prevalence_random_baseline(
                &frames,
                &m,
                &prevalence,
                LabelSource::Annotated,
                5,
                Sampling::WithoutReplacement,
                seed,
            )
            .unwrap()
        };
        assert_eq!(run(3), run(3));
        assert_eq!(run(3).mean, 2.0);
    }

    #[test]
    fn too_few_positive_classes() {
        let m = uniform_manifest(10);
        let mut fractions = vec![0.0; 60];
        for f in fractions.iter_mut().take(5) {
            *f = 0.2;
        }
        let prevalence = PrevalenceTable {
            fractions,
            num_frames: 10,
        };
        let err = prevalence_random_baseline(
            &[0],
            &m,
            &prevalence,
            LabelSource::Annotated,
            5,
            Sampling::WithoutReplacement,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation { .. }));
    }

    #[test]
    fn report_round_trips_and_tabulates() {
        let m = uniform_manifest(120);
        let soft = soft_for(&m, |i| (0..60).map(|c| ((c * 7 + i) % 60) as f64 / 60.0).collect());
        let report = analyze_soft_labels(&m, &soft, &AnalysisOptions::default()).unwrap();
        assert_eq!(report.frames, 120);
        assert!((0.0..=3.0).contains(&report.observed.mean));
        assert!((0.0..=3.0).contains(&report.baseline.mean));
        for d in &report.details {
            assert!(!d.top.contains(&d.reference));
        }
        let json = serde_json::to_string(&report).unwrap();
        assert_eq!(serde_json::from_str::<SimilarityReport>(&json).unwrap(), report);
        let table = report.detail_table(m.vocab()).unwrap();
        assert_eq!(table.lines().count(), 121);
    }
}
