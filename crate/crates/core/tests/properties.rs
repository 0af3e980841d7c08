use std::collections::BTreeSet;
use std::sync::Arc;

use proptest::prelude::*;

use selfdistill::analysis::{analyze_soft_labels, top5_excluding_reference, AnalysisOptions};
use selfdistill::datagen::{
    generate_synthetic_dataset, inject_label_noise, make_fold_splits, DatasetManifest, FrameKey, FrameRecord,
    ImageSource, LabelSource, NoiseConfig, NoiseMode, SyntheticSpec,
};
use selfdistill::distill::{smooth_soft_labels, SoftLabelSet};
use selfdistill::ensemble::{weighted_average, PredictionSet};
use selfdistill::metrics::{average_precision, topk_accuracy, triplet_map, MapMode, TopKRule, UndefinedPolicy};
use selfdistill::model::{cosine_lr, Head};
use selfdistill::vocab::{ComponentVocabulary, TripletVocabulary};

fn full_vocab(i: usize, v: usize, t: usize) -> Arc<TripletVocabulary> {
    Arc::new(TripletVocabulary::full(ComponentVocabulary::with_dims(i, v, t).unwrap()).unwrap())
}

/// One frame per `(video, labels)` entry, indices counted per video.
fn manifest(vocab: Arc<TripletVocabulary>, frames: &[(usize, Vec<usize>)]) -> DatasetManifest {
    let mut next = std::collections::BTreeMap::new();
    let records = frames
        .iter()
        .map(|(video, labels)| {
            let idx = next.entry(*video).or_insert(0u32);
            let rec = FrameRecord {
                video_id: format!("v{video}"),
                frame_idx: *idx,
                image: ImageSource::Path("unused.png".into()),
                triplets: labels.clone(),
                phase: 0,
                clean_triplets: None,
            };
            *idx += 1;
            rec
        })
        .collect();
    DatasetManifest::new(vocab, 1, records).unwrap()
}

fn predictions(m: &DatasetManifest, rows: &[Vec<f64>]) -> PredictionSet {
    let mut set = PredictionSet::new(m.vocab().num_classes());
    for (f, row) in m.frames().iter().zip(rows) {
        set.insert(f.key(), row.clone()).unwrap();
    }
    set
}

/// `n` frames over a 2×2×2 vocabulary: labels, video ids and score rows.
fn labelled_frames(n: std::ops::Range<usize>, videos: usize) -> impl Strategy<Value = Vec<(usize, Vec<usize>, Vec<f64>)>> {
    prop::collection::vec(
        (
            0..videos,
            prop::collection::btree_set(0..8usize, 0..4),
            prop::collection::vec(0.0..1.0f64, 8),
        )
            .prop_map(|(v, l, s)| (v, l.into_iter().collect(), s)),
        n,
    )
}

proptest! {
    #[test]
    fn ap_is_a_probability_and_ignores_monotone_rescaling(
        items in prop::collection::vec((0..20u32, any::<bool>()), 1..40)
    ) {
        let scores: Vec<f64> = items.iter().map(|&(s, _)| f64::from(s)).collect();
        let labels: Vec<u8> = items.iter().map(|&(_, l)| u8::from(l)).collect();
        // exact in f64 for these small integers
        let warped: Vec<f64> = scores.iter().map(|x| x * x * x + 2.0 * x + 7.0).collect();
        let ap = average_precision(&scores, &labels).unwrap();
        prop_assert_eq!(ap, average_precision(&warped, &labels).unwrap());
        match ap {
            Some(a) => prop_assert!((0.0..=1.0).contains(&a)),
            None => prop_assert!(labels.iter().all(|&l| l == 0)),
        }
    }

    #[test]
    fn topk_accuracy_grows_with_k(frames in labelled_frames(1..30, 3)) {
        let m = manifest(full_vocab(2, 2, 2), &frames.iter().map(|(v, l, _)| (*v, l.clone())).collect::<Vec<_>>());
        let rows: Vec<Vec<f64>> = frames.iter().map(|f| f.2.clone()).collect();
        let pred = predictions(&m, &rows);
        for rule in [TopKRule::Any, TopKRule::All] {
            let mut prev = 0.0;
            for k in 1..=8 {
                let acc = topk_accuracy(&pred, &m, k, rule, LabelSource::Annotated).unwrap();
                if let Some(a) = acc {
                    prop_assert!(a >= prev);
                    prev = a;
                }
            }
            if let Some(a) = topk_accuracy(&pred, &m, 8, rule, LabelSource::Annotated).unwrap() {
                prop_assert_eq!(a, 1.0);
            }
        }
    }

    #[test]
    fn single_video_modes_agree(frames in labelled_frames(1..30, 1)) {
        let m = manifest(full_vocab(2, 2, 2), &frames.iter().map(|(v, l, _)| (*v, l.clone())).collect::<Vec<_>>());
        let rows: Vec<Vec<f64>> = frames.iter().map(|f| f.2.clone()).collect();
        let pred = predictions(&m, &rows);
        for undefined in [UndefinedPolicy::Exclude, UndefinedPolicy::CountAsZero] {
            let global = triplet_map(&pred, &m, LabelSource::Annotated, MapMode::Global, undefined).unwrap();
            let per_video = triplet_map(&pred, &m, LabelSource::Annotated, MapMode::PerVideo, undefined).unwrap();
            prop_assert_eq!(global.map, per_video.map);
            prop_assert_eq!(global.per_class, per_video.per_class);
        }
    }

    #[test]
    fn ensemble_is_a_monotone_convex_combination(
        members in prop::collection::vec(prop::collection::vec(0.0..1.0f64, 4), 1..6),
        weights in prop::collection::vec(0.1..3.0f64, 6),
        bump in 0.0..0.5f64,
        which in 0..6usize,
    ) {
        let sets: Vec<PredictionSet> = members
            .iter()
            .map(|row| {
                let mut s = PredictionSet::new(4);
                s.insert(FrameKey::new("v", 0), row.clone()).unwrap();
                s
            })
            .collect();
        let w = &weights[..sets.len()];
        let refs: Vec<&PredictionSet> = sets.iter().collect();
        let avg = weighted_average(&refs, w).unwrap();
        let key = FrameKey::new("v", 0);
        let row = avg.get(&key).unwrap();
        for c in 0..4 {
            let lo = members.iter().map(|m| m[c]).fold(f64::INFINITY, f64::min);
            let hi = members.iter().map(|m| m[c]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(row[c] >= lo - 1e-12 && row[c] <= hi + 1e-12);
        }

        let rev_refs: Vec<&PredictionSet> = sets.iter().rev().collect();
        let rev_w: Vec<f64> = w.iter().rev().copied().collect();
        let rev = weighted_average(&rev_refs, &rev_w).unwrap();
        for (a, b) in row.iter().zip(rev.get(&key).unwrap()) {
            prop_assert!((a - b).abs() < 1e-12);
        }

        // raising one member's score never lowers the ensemble score
        let m = which % sets.len();
        let mut raised = members.clone();
        raised[m][0] = (raised[m][0] + bump).min(1.0);
        let mut bumped = sets.clone();
        bumped[m] = PredictionSet::new(4);
        bumped[m].insert(key.clone(), raised[m].clone()).unwrap();
        let refs: Vec<&PredictionSet> = bumped.iter().collect();
        let after = weighted_average(&refs, w).unwrap();
        prop_assert!(after.get(&key).unwrap()[0] >= row[0]);
    }

    #[test]
    fn smoothing_is_affine_order_preserving_and_bounded(
        values in prop::collection::vec(0.0..=1.0f64, 2..20),
        epsilon in 0.0..0.99f64,
    ) {
        let mut soft = SoftLabelSet::new("h", Some(0), vec![(Head::Triplet, values.len())]).unwrap();
        soft.insert(FrameKey::new("v", 0), values.clone()).unwrap();
        let out = smooth_soft_labels(&soft, epsilon).unwrap();
        let row = out.triplet(&FrameKey::new("v", 0)).unwrap();
        for (i, (&s, &t)) in values.iter().zip(row).enumerate() {
            prop_assert!((t - ((1.0 - epsilon) * s + epsilon / 2.0)).abs() < 1e-12);
            prop_assert!(t >= epsilon / 2.0 - 1e-12 && t <= 1.0 - epsilon / 2.0 + 1e-12);
            for (&s2, &t2) in values.iter().zip(row).skip(i + 1) {
                if s < s2 {
                    prop_assert!(t <= t2);
                }
            }
        }
    }

    #[test]
    fn folds_partition_the_videos(videos in 2..40usize, folds in 2..8usize, seed in any::<u64>()) {
        prop_assume!(folds <= videos);
        let frames: Vec<(usize, Vec<usize>)> = (0..videos).map(|v| (v, vec![0])).collect();
        let m = manifest(full_vocab(1, 1, 2), &frames);
        let splits = make_fold_splits(&m, folds, seed).unwrap();
        let all: BTreeSet<String> = m.videos().into_iter().collect();
        let mut seen = BTreeSet::new();
        for s in &splits {
            prop_assert!(s.train_videos.is_disjoint(&s.val_videos));
            let union: BTreeSet<String> = s.train_videos.union(&s.val_videos).cloned().collect();
            prop_assert_eq!(&union, &all);
            for v in &s.val_videos {
                prop_assert!(seen.insert(v.clone()));
            }
        }
        prop_assert_eq!(seen, all);
    }

    #[test]
    fn cosine_schedule_is_monotone_between_its_ends(
        total in 1..5000usize,
        lr_min in 1e-6..1e-3f64,
        span in 0.0..1e-2f64,
    ) {
        let lr_max = lr_min + span;
        let mut prev = cosine_lr(0, total, lr_max, lr_min).unwrap();
        prop_assert_eq!(prev, lr_max);
        for step in 1..=total {
            let lr = cosine_lr(step, total, lr_max, lr_min).unwrap();
            prop_assert!(lr <= prev && lr >= lr_min);
            prev = lr;
        }
        prop_assert_eq!(prev, lr_min);
    }

    #[test]
    fn top5_skips_the_reference_and_sorts(
        scores in prop::collection::vec(0..10u8, 6..20),
        reference in any::<prop::sample::Index>(),
    ) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let r = reference.index(scores.len());
        let top = top5_excluding_reference(&scores, r).unwrap();
        let mut order: Vec<usize> = (0..scores.len()).filter(|&c| c != r).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        prop_assert_eq!(&top[..], &order[..5]);
        prop_assert!(!top.contains(&r));
    }

    #[test]
    fn match_means_lie_in_zero_to_three(
        frames in prop::collection::vec((0..3usize, 0..27usize, prop::collection::vec(0.0..1.0f64, 27)), 6..30),
        seed in any::<u64>(),
    ) {
        let vocab = full_vocab(3, 3, 3);
        let labels: Vec<(usize, Vec<usize>)> = frames.iter().map(|(v, c, _)| (*v, vec![*c])).collect();
        let m = manifest(vocab, &labels);
        let positives: BTreeSet<usize> = frames.iter().map(|f| f.1).collect();
        prop_assume!(positives.len() > 5);
        let mut soft = SoftLabelSet::new("h", Some(0), vec![(Head::Triplet, 27)]).unwrap();
        for (f, (_, _, row)) in m.frames().iter().zip(&frames) {
            soft.insert(f.key(), row.clone()).unwrap();
        }
        let report = analyze_soft_labels(&m, &soft, &AnalysisOptions { seed, ..AnalysisOptions::default() }).unwrap();
        for v in [report.observed.mean, report.baseline.mean] {
            prop_assert!((0.0..=3.0).contains(&v));
        }
    }
}

fn small_dataset(seed: u64) -> DatasetManifest {
    generate_synthetic_dataset(&SyntheticSpec {
        n_videos: 3,
        frames_per_video: 20,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn zero_noise_is_the_identity(seed in any::<u64>(), mode in prop::sample::select(vec![
        NoiseMode::SwapOneComponent, NoiseMode::DropTriplet, NoiseMode::AddTriplet,
    ])) {
        let m = small_dataset(seed);
        let (noisy, report) = inject_label_noise(&m, &NoiseConfig { rate: 0.0, mode, seed }).unwrap();
        prop_assert_eq!(report.changed, 0);
        for (a, b) in m.frames().iter().zip(noisy.frames()) {
            prop_assert_eq!(&a.triplets, &b.triplets);
        }
    }

    #[test]
    fn swaps_change_exactly_one_component(seed in any::<u64>(), rate in 0.05..1.0f64) {
        let m = small_dataset(seed);
        let (_, report) = inject_label_noise(
            &m,
            &NoiseConfig { rate, mode: NoiseMode::SwapOneComponent, seed },
        )
        .unwrap();
        for &(from, to) in &report.swaps {
            prop_assert_eq!(m.vocab().component_match_count(from, to).unwrap(), 2);
        }
    }
}
