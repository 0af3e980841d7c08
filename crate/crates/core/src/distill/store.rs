use std::collections::BTreeSet;

use crate::datagen::{resize, DatasetManifest, FloatImage};
use crate::error::{Error, Result};
use crate::model::{sigmoid, Head, Model};

/// A manifest with every image decoded once.
#[derive(Clone, Debug)]
pub struct FrameStore {
    manifest: DatasetManifest,
    images: Vec<FloatImage>,
}

impl FrameStore {
    pub fn load(manifest: DatasetManifest) -> Result<Self> {
        let images = manifest.load_float_images()?;
        Ok(FrameStore { manifest, images })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn images(&self) -> &[FloatImage] {
        &self.images
    }

    pub fn indices_of(&self, videos: &BTreeSet<String>) -> Vec<usize> {
        self.manifest.frame_indices_in(videos)
    }

    /// Deterministically resized copies of the selected frames.
    pub fn resized(&self, indices: &[usize], hw: (usize, usize)) -> Vec<FloatImage> {
        indices
            .iter()
            .map(|&i| {
                let img = &self.images[i];
                if (img.height, img.width) == hw {
                    img.clone()
                } else {
                    resize(img, hw)
                }
            })
            .collect()
    }
}

const INFER_BATCH: usize = 64;

/// Eval-mode probabilities of `heads` for already-resized images; each
/// output row concatenates the heads in the given order. Sigmoid heads
/// give independent probabilities, the phase head a softmax.
pub fn predict_images(model: &Model<f32>, images: &[FloatImage], heads: &[Head]) -> Result<Vec<Vec<f64>>> {
    for &h in heads {
        if !model.heads().is_enabled(h) {
            return Err(Error::Config(format!("model has no {} head", h.name())));
        }
    }
    let mut rows = Vec::with_capacity(images.len());
    for chunk in images.chunks(INFER_BATCH) {
        let refs: Vec<&FloatImage> = chunk.iter().collect();
        let out = model.forward(&refs)?;
        for b in 0..chunk.len() {
            let mut row = Vec::new();
            for &h in heads {
                let logits = out.row(h, b).expect("enabled head");
                if h == Head::Phase {
                    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                    let exps: Vec<f64> = logits.iter().map(|&z| (z as f64 - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    row.extend(exps.iter().map(|e| e / sum));
                } else {
                    row.extend(logits.iter().map(|&z| sigmoid(z as f64)));
                }
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Triplet probabilities for the frames `indices` of `store`.
pub fn predict_triplets(model: &Model<f32>, store: &FrameStore, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
    let images = store.resized(indices, model.backbone_spec().input_hw);
    predict_images(model, &images, &[Head::Triplet])
}
