//! Semantically-close label corruption.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::DatasetManifest;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Replace a label by a valid triplet differing in exactly one component.
    SwapOneComponent,
    /// Remove the label.
    DropTriplet,
    /// Keep the label and add a one-component neighbour next to it.
    AddTriplet,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub rate: f64,
    pub mode: NoiseMode,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::Range {
                what: "noise rate",
                value: self.rate.to_string(),
                range: "[0, 1]".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseReport {
    /// Labels visited.
    pub examined: usize,
    /// Labels that were swapped, dropped or spawned a neighbour.
    pub changed: usize,
    /// Corruptions that were drawn but had no eligible neighbour.
    pub skipped: usize,
    /// Original class and its replacement for every swap.
    pub swaps: Vec<(usize, usize)>,
}

/// Corrupts the annotated labels of `manifest`. Frames whose labels change
/// keep their previous labels as the clean copy (an existing clean copy is
/// never overwritten).
pub fn inject_label_noise(
    manifest: &DatasetManifest,
    config: &NoiseConfig,
) -> Result<(DatasetManifest, NoiseReport)> {
    config.validate()?;
    let vocab = manifest.vocab();
    let neighbors: Vec<Vec<usize>> = (0..vocab.num_classes())
        .map(|id| vocab.one_component_neighbors(id))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = NoiseReport::default();
    let mut frames = manifest.frames().to_vec();

    for frame in &mut frames {
        let original = frame.triplets.clone();
        let mut labels = original.clone();
        for &id in &original {
            report.examined += 1;
            if !rng.gen_bool(config.rate) {
                continue;
            }
            match config.mode {
                NoiseMode::DropTriplet => {
                    labels.retain(|&x| x != id);
                    report.changed += 1;
                }
                NoiseMode::SwapOneComponent | NoiseMode::AddTriplet => {
                    let eligible: Vec<usize> = neighbors[id]
                        .iter()
                        .copied()
                        .filter(|n| !labels.contains(n))
                        .collect();
                    if eligible.is_empty() {
                        report.skipped += 1;
                        continue;
                    }
                    let pick = eligible[rng.gen_range(0..eligible.len())];
                    if config.mode == NoiseMode::SwapOneComponent {
                        labels.retain(|&x| x != id);
                        report.swaps.push((id, pick));
                    }
                    labels.push(pick);
                    report.changed += 1;
                }
            }
        }
        labels.sort_unstable();
        if labels != original {
            if frame.clean_triplets.is_none() {
                frame.clean_triplets = Some(original);
            }
            frame.triplets = labels;
        }
    }
    Ok((manifest.with_frames(frames)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_synthetic_dataset, LabelSource, SyntheticSpec};
    use crate::vocab::{ComponentVocabulary, TripletVocabulary};
    use std::sync::Arc;

    fn dataset(seed: u64, n_videos: usize) -> DatasetManifest {
        generate_synthetic_dataset(&SyntheticSpec {
            n_videos,
            frames_per_video: 100,
            seed,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_rate_is_identity() {
        let m = dataset(1, 3);
        let (noisy, report) = inject_label_noise(
            &m,
            &NoiseConfig {
                rate: 0.0,
                mode: NoiseMode::SwapOneComponent,
                seed: 5,
            },
        )
        .unwrap();
        assert!(noisy.same_labels(&m));
        assert_eq!(report.changed, 0);
    }

    #[test]
    fn full_rate_swaps_to_one_component_neighbours() {
        let m = dataset(2, 3);
        let full = Arc::new(
            TripletVocabulary::full(ComponentVocabulary::with_dims(3, 4, 5).unwrap()).unwrap(),
        );
        let m = DatasetManifest::new(full, m.num_phases(), m.frames().to_vec()).unwrap();
        let (noisy, report) = inject_label_noise(
            &m,
            &NoiseConfig {
                rate: 1.0,
                mode: NoiseMode::SwapOneComponent,
                seed: 5,
            },
        )
        .unwrap();
        assert_eq!(report.skipped, 0);
        assert_eq!(report.changed, report.examined);
        for &(from, to) in &report.swaps {
            assert_eq!(m.vocab().component_match_count(from, to).unwrap(), 2);
        }
        for (a, b) in m.frames().iter().zip(noisy.frames()) {
            assert_eq!(b.labels(LabelSource::Clean), a.triplets.as_slice());
        }
    }

    #[test]
    fn swap_fraction_concentrates() {
        // A full vocabulary has no skips, so every draw is a swap.
        let m = dataset(3, 120);
        let full = Arc::new(
            TripletVocabulary::full(ComponentVocabulary::with_dims(3, 4, 5).unwrap()).unwrap(),
        );
        let m = DatasetManifest::new(full, m.num_phases(), m.frames().to_vec()).unwrap();
        let (_, report) = inject_label_noise(
            &m,
            &NoiseConfig {
                rate: 0.2,
                mode: NoiseMode::SwapOneComponent,
                seed: 11,
            },
        )
        .unwrap();
        assert!(report.examined >= 10_000, "{}", report.examined);
        assert_eq!(report.skipped, 0);
        let swapped = report.changed as f64 / report.examined as f64;
        assert!((swapped - 0.2).abs() < 0.02, "{swapped}");
    }

    #[test]
    fn drop_and_add_modes() {
        let m = dataset(4, 2);
        let (dropped, _) = inject_label_noise(
            &m,
            &NoiseConfig {
                rate: 1.0,
                mode: NoiseMode::DropTriplet,
                seed: 0,
            },
        )
        .unwrap();
        assert!(dropped.frames().iter().all(|f| f.triplets.is_empty()));
        let (added, report) = inject_label_noise(
            &m,
            &NoiseConfig {
                rate: 1.0,
                mode: NoiseMode::AddTriplet,
                seed: 0,
            },
        )
        .unwrap();
        let before: usize = m.frames().iter().map(|f| f.triplets.len()).sum();
        let after: usize = added.frames().iter().map(|f| f.triplets.len()).sum();
        assert_eq!(after, before + report.changed);
    }

    #[test]
    fn rate_out_of_range() {
        let m = dataset(1, 1);
        assert!(inject_label_noise(
            &m,
            &NoiseConfig {
                rate: 1.5,
                mode: NoiseMode::DropTriplet,
                seed: 0
            }
        )
        .is_err());
    }
}
