//! Brute-force reference implementations, written without sorting so they
//! share no code path with the library.

use std::collections::BTreeSet;

/// AP by rank counting. Item `j` ranks above item `i` when its score is
/// higher, or equal with a smaller index.
pub fn ap_oracle(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let above = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let positives: Vec<usize> = (0..scores.len()).filter(|&i| labels[i]).collect();
    if positives.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for &i in &positives {
        let rank = 1 + (0..scores.len()).filter(|&j| above(j, i)).count();
        let hits = 1 + positives.iter().filter(|&&j| above(j, i)).count();
        total += hits as f64 / rank as f64;
    }
    Some(total / positives.len() as f64)
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Per-class APs and mAP. `videos[f]` names the video of frame `f`; with
/// `per_video` each class averages its defined per-video APs first.
/// `strict` counts undefined classes as 0.
pub fn map_oracle(
    scores: &[Vec<f64>],
    labels: &[BTreeSet<usize>],
    videos: &[String],
    num_classes: usize,
    per_video: bool,
    strict: bool,
) -> (Vec<Option<f64>>, Option<f64>) {
    let video_set: BTreeSet<&String> = videos.iter().collect();
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let ap_on = |frames: &[usize]| {
                let s: Vec<f64> = frames.iter().map(|&f| scores[f][c]).collect();
                let l: Vec<bool> = frames.iter().map(|&f| labels[f].contains(&c)).collect();
                ap_oracle(&s, &l)
            };
            if per_video {
                let cells: Vec<f64> = video_set
                    .iter()
                    .filter_map(|v| {
                        let frames: Vec<usize> = (0..videos.len()).filter(|&f| &videos[f] == *v).collect();
                        ap_on(&frames)
                    })
                    .collect();
                mean(&cells)
            } else {
                let frames: Vec<usize> = (0..scores.len()).collect();
                ap_on(&frames)
            }
        })
        .collect();
    let included: Vec<f64> = if strict {
        per_class.iter().map(|a| a.unwrap_or(0.0)).collect()
    } else {
        per_class.iter().flatten().copied().collect()
    };
    (per_class, mean(&included))
}

/// Membership test for the top `k` of a score row, ties by smaller id.
pub fn in_top_k(row: &[f64], class: usize, k: usize) -> bool {
    let better = (0..row.len())
        .filter(|&j| row[j] > row[class] || (row[j] == row[class] && j < class))
        .count();
    better < k
}

pub fn topk_oracle(scores: &[Vec<f64>], labels: &[BTreeSet<usize>], k: usize, all: bool) -> Option<f64> {
    let mut scored = 0;
    let mut hits = 0;
    for (row, active) in scores.iter().zip(labels) {
        if active.is_empty() {
            continue;
        }
        scored += 1;
        let hit = if all {
            active.iter().all(|&c| in_top_k(row, c, k))
        } else {
            active.iter().any(|&c| in_top_k(row, c, k))
        };
        hits += usize::from(hit);
    }
    (scored > 0).then(|| hits as f64 / scored as f64)
}

/// Max-projection of triplet scores onto component values; `component_of[c]`
/// is the component value of class `c`.
pub fn projection_oracle(row: &[f64], component_of: &[usize], width: usize) -> Vec<f64> {
    (0..width)
        .map(|k| {
            (0..row.len())
                .filter(|&c| component_of[c] == k)
                .map(|c| row[c])
                .fold(None, |best: Option<f64>, s| Some(best.map_or(s, |b| b.max(s))))
                .unwrap_or(0.0)
        })
        .collect()
}

/// Optional values equal within `tol`; two `None`s count as equal.
pub fn close(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() < tol,
        _ => false,
    }
}
