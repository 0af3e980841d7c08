//! Backbone contract, registry and the desk-scale `tiny-conv` network.
//!
//! `tiny-conv` averages the input down to a 16×16 working resolution, runs
//! three 3×3 conv + ReLU blocks (the first two followed by 2×2 max pooling)
//! and global-max-pools the last block into the embedding.

use std::any::Any;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::scalar::{gemm, Layout, Scalar};
use crate::datagen::FloatImage;
use crate::error::{Error, Result};

const WORK_RES: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub name: String,
    pub embedding_dim: usize,
    #[serde(default)]
    pub pretrained: bool,
    /// Model input resolution `(height, width)`.
    pub input_hw: (usize, usize),
}

/// A registered backbone name.
#[derive(Clone, Copy, Debug)]
pub struct RegistryEntry {
    pub name: &'static str,
    pub embedding_dim: usize,
    /// Conv channel widths; `None` for entries without a CPU realization.
    channels: Option<[usize; 3]>,
}

pub const REGISTRY: [RegistryEntry; 4] = [
    RegistryEntry {
        name: "tiny-conv",
        embedding_dim: 128,
        channels: Some([16, 32, 128]),
    },
    RegistryEntry {
        name: "tiny-conv-wide",
        embedding_dim: 192,
        channels: Some([12, 24, 192]),
    },
    RegistryEntry {
        name: "swin-base",
        embedding_dim: 1024,
        channels: None,
    },
    RegistryEntry {
        name: "swin-large",
        embedding_dim: 1536,
        channels: None,
    },
];

pub fn registry_names() -> Vec<&'static str> {
    REGISTRY.iter().map(|e| e.name).collect()
}

impl BackboneSpec {
    /// Spec of a registered backbone at the given input resolution.
    pub fn named(name: &str, input_hw: (usize, usize)) -> Result<Self> {
        let entry = lookup(name)?;
        Ok(BackboneSpec {
            name: entry.name.to_string(),
            embedding_dim: entry.embedding_dim,
            pretrained: false,
            input_hw,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let entry = lookup(&self.name)?;
        if self.embedding_dim == 0 || self.embedding_dim != entry.embedding_dim {
            return Err(Error::validation(
                "backbone.embedding_dim",
                format!(
                    "`{}` has embedding dimension {}, not {}",
                    self.name, entry.embedding_dim, self.embedding_dim
                ),
            ));
        }
        Ok(())
    }
}

fn lookup(name: &str) -> Result<&'static RegistryEntry> {
    REGISTRY.iter().find(|e| e.name == name).ok_or_else(|| {
        Error::validation(
            "backbone.name",
            format!(
                "unknown backbone `{name}`; registered: {}",
                registry_names().join(", ")
            ),
        )
    })
}

/// Opaque per-forward state a backbone keeps for its backward pass.
pub struct BackboneCache(Box<dyn Any + Send>);

/// Feature extractor mapping a batch of images to embeddings.
pub trait Backbone<S: Scalar>: Send + Sync {
    fn spec(&self) -> &BackboneSpec;
    fn num_params(&self) -> usize;
    fn init_params(&self, params: &mut [S], rng: &mut ChaCha8Rng);
    /// Returns the `batch × embedding_dim` embeddings, and the cache when
    /// `keep_cache` is set.
    fn forward(
        &self,
        params: &[S],
        images: &[&FloatImage],
        keep_cache: bool,
    ) -> Result<(Vec<S>, Option<BackboneCache>)>;
    /// Accumulates parameter gradients into `grads`.
    fn backward(&self, params: &[S], cache: &BackboneCache, d_embedding: &[S], grads: &mut [S]);
    /// The discrete choices (ReLU gates, pooling winners) a forward pass
    /// made. Inputs with equal routing lie on the same smooth piece.
    fn routing(&self, _cache: &BackboneCache) -> Vec<u8> {
        Vec::new()
    }
}

/// Instantiates a registered backbone.
pub fn build_backbone<S: Scalar>(spec: &BackboneSpec) -> Result<Box<dyn Backbone<S>>> {
    spec.validate()?;
    let entry = lookup(&spec.name)?;
    if spec.pretrained {
        return Err(Error::BackboneUnavailable {
            name: spec.name.clone(),
            reason: "no pretrained weights ship with this build".into(),
        });
    }
    match entry.channels {
        Some(channels) => Ok(Box::new(TinyConv::new(spec.clone(), channels)?)),
        None => Err(Error::BackboneUnavailable {
            name: spec.name.clone(),
            reason: "requires an external transformer runtime".into(),
        }),
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvShape {
    cin: usize,
    cout: usize,
    /// spatial size of the (square) input of this layer
    res: usize,
    pool: bool,
}

impl ConvShape {
    fn k(&self) -> usize {
        self.cin * 9
    }
    fn weights(&self) -> usize {
        self.cout * self.k()
    }
}

pub struct TinyConv {
    spec: BackboneSpec,
    stem: (usize, usize),
    layers: [ConvShape; 3],
    offsets: [usize; 3],
    total: usize,
}

struct LayerCache<S> {
    cols: Vec<S>,
    /// post-ReLU activations
    act: Vec<S>,
    /// index (0..4) of the max inside each pooling window
    argmax: Vec<u8>,
}

struct TinyConvCache<S> {
    batch: usize,
    layers: Vec<LayerCache<S>>,
    /// position of the maximum of every (channel, sample) plane of the
    /// last block
    global_argmax: Vec<u8>,
}

impl TinyConv {
    fn new(spec: BackboneSpec, channels: [usize; 3]) -> Result<Self> {
        let (h, w) = spec.input_hw;
        if h == 0 || w == 0 || h % WORK_RES != 0 || w % WORK_RES != 0 {
            return Err(Error::validation(
                "backbone.input_hw",
                format!("tiny-conv needs an input that is a multiple of {WORK_RES}, got {h}x{w}"),
            ));
        }
        let layers = [
            ConvShape {
                cin: 3,
                cout: channels[0],
                res: WORK_RES,
                pool: true,
            },
            ConvShape {
                cin: channels[0],
                cout: channels[1],
                res: WORK_RES / 2,
                pool: true,
            },
            ConvShape {
                cin: channels[1],
                cout: channels[2],
                res: WORK_RES / 4,
                pool: false,
            },
        ];
        let mut offsets = [0; 3];
        let mut total = 0;
        for (l, shape) in layers.iter().enumerate() {
            offsets[l] = total;
            total += shape.weights() + shape.cout;
        }
        Ok(TinyConv {
            spec,
            stem: (h / WORK_RES, w / WORK_RES),
            layers,
            offsets,
            total,
        })
    }

    /// Average-pools the images into a `3 × B × 16 × 16` tensor.
    fn stem<S: Scalar>(&self, images: &[&FloatImage]) -> Result<Vec<S>> {
        let b = images.len();
        let plane = WORK_RES * WORK_RES;
        let (py, px) = self.stem;
        let norm = 1.0 / (py * px) as f32;
        let mut out = vec![S::zero(); 3 * b * plane];
        for (bi, img) in images.iter().enumerate() {
            if (img.height, img.width) != self.spec.input_hw || img.data.len() != img.height * img.width * 3 {
                return Err(Error::Shape {
                    what: "backbone input",
                    expected: self.spec.input_hw.0 * self.spec.input_hw.1 * 3,
                    actual: img.data.len(),
                });
            }
            for y in 0..WORK_RES {
                for x in 0..WORK_RES {
                    let mut acc = [0.0f32; 3];
                    for dy in 0..py {
                        let row = (y * py + dy) * img.width;
                        for dx in 0..px {
                            let base = (row + x * px + dx) * 3;
                            acc[0] += img.data[base];
                            acc[1] += img.data[base + 1];
                            acc[2] += img.data[base + 2];
                        }
                    }
                    for c in 0..3 {
                        out[(c * b + bi) * plane + y * WORK_RES + x] =
                            S::from_f32(acc[c] * norm).expect("finite");
                    }
                }
            }
        }
        Ok(out)
    }
}

/// 3×3, pad-1 im2col on a `C × B × R × R` tensor into `(C·9) × (B·R·R)`.
fn im2col<S: Scalar>(input: &[S], c: usize, b: usize, r: usize) -> Vec<S> {
    let n = b * r * r;
    let mut cols = vec![S::zero(); c * 9 * n];
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * n..][..n];
                for bi in 0..b {
                    let src = &input[(ci * b + bi) * r * r..][..r * r];
                    let dst = &mut row[bi * r * r..][..r * r];
                    for y in 0..r {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= r as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        for x in 0..r {
                            let sx = x as isize + kx as isize - 1;
                            if sx >= 0 && sx < r as isize {
                                dst[y * r + x] = src[sy * r + sx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im<S: Scalar>(cols: &[S], c: usize, b: usize, r: usize) -> Vec<S> {
    let n = b * r * r;
    let mut out = vec![S::zero(); c * b * r * r];
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * n..][..n];
                for bi in 0..b {
                    let src = &row[bi * r * r..][..r * r];
                    let dst = &mut out[(ci * b + bi) * r * r..][..r * r];
                    for y in 0..r {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= r as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        for x in 0..r {
                            let sx = x as isize + kx as isize - 1;
                            if sx >= 0 && sx < r as isize {
                                dst[sy * r + sx as usize] = dst[sy * r + sx as usize] + src[y * r + x];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

impl<S: Scalar> Backbone<S> for TinyConv {
    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn num_params(&self) -> usize {
        self.total
    }

    fn init_params(&self, params: &mut [S], rng: &mut ChaCha8Rng) {
        for (l, shape) in self.layers.iter().enumerate() {
            let std = (2.0 / shape.k() as f64).sqrt();
            let w = &mut params[self.offsets[l]..][..shape.weights()];
            for v in w.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v = S::lit(z * std);
            }
            let bias = &mut params[self.offsets[l] + shape.weights()..][..shape.cout];
            for v in bias.iter_mut() {
                *v = S::lit(rng.gen_range(-0.01..0.01));
            }
        }
    }

    fn forward(
        &self,
        params: &[S],
        images: &[&FloatImage],
        keep_cache: bool,
    ) -> Result<(Vec<S>, Option<BackboneCache>)> {
        let b = images.len();
        if b == 0 {
            return Err(Error::EmptyInput("backbone batch"));
        }
        let mut x = self.stem(images)?;
        let mut caches = Vec::with_capacity(3);
        for (l, shape) in self.layers.iter().enumerate() {
            let r = shape.res;
            let n = b * r * r;
            let cols = im2col(&x, shape.cin, b, r);
            let w = &params[self.offsets[l]..][..shape.weights()];
            let bias = &params[self.offsets[l] + shape.weights()..][..shape.cout];
            let mut act = vec![S::zero(); shape.cout * n];
            gemm(
                shape.cout,
                shape.k(),
                n,
                S::one(),
                w,
                Layout::rows(shape.k()),
                &cols,
                Layout::rows(n),
                S::zero(),
                &mut act,
                Layout::rows(n),
            );
            for (co, row) in act.chunks_exact_mut(n).enumerate() {
                let bv = bias[co];
                for v in row.iter_mut() {
                    let z = *v + bv;
                    *v = if z > S::zero() { z } else { S::zero() };
                }
            }
            let mut argmax = Vec::new();
            if shape.pool {
                let h = r / 2;
                let mut pooled = vec![S::zero(); shape.cout * b * h * h];
                argmax = vec![0u8; pooled.len()];
                for plane in 0..shape.cout * b {
                    let src = &act[plane * r * r..][..r * r];
                    for y in 0..h {
                        for xx in 0..h {
                            let base = 2 * y * r + 2 * xx;
                            let cand = [src[base], src[base + 1], src[base + r], src[base + r + 1]];
                            let mut best = 0;
                            for k in 1..4 {
                                if cand[k] > cand[best] {
                                    best = k;
                                }
                            }
                            let o = plane * h * h + y * h + xx;
                            pooled[o] = cand[best];
                            argmax[o] = best as u8;
                        }
                    }
                }
                x = pooled;
            } else {
                x = Vec::new();
            }
            caches.push(LayerCache {
                cols: if keep_cache { cols } else { Vec::new() },
                act,
                argmax,
            });
        }

        let last = self.layers[2];
        let d = last.cout;
        let plane = last.res * last.res;
        let act = &caches[2].act;
        let mut emb = vec![S::zero(); b * d];
        let mut global_argmax = vec![0u8; b * d];
        for c in 0..d {
            for bi in 0..b {
                let values = &act[(c * b + bi) * plane..][..plane];
                let mut best = 0;
                for (k, &v) in values.iter().enumerate().skip(1) {
                    if v > values[best] {
                        best = k;
                    }
                }
                emb[bi * d + c] = values[best];
                global_argmax[bi * d + c] = best as u8;
            }
        }
        let cache = keep_cache.then(|| {
            BackboneCache(Box::new(TinyConvCache {
                batch: b,
                layers: caches,
                global_argmax,
            }))
        });
        Ok((emb, cache))
    }

    fn backward(&self, params: &[S], cache: &BackboneCache, d_embedding: &[S], grads: &mut [S]) {
        let cache = cache
            .0
            .downcast_ref::<TinyConvCache<S>>()
            .expect("cache produced by TinyConv::forward");
        let b = cache.batch;
        let last = self.layers[2];
        let plane = last.res * last.res;

        // gradient w.r.t. post-ReLU activations of the last layer
        let mut d_act = vec![S::zero(); last.cout * b * plane];
        for c in 0..last.cout {
            for bi in 0..b {
                let k = cache.global_argmax[bi * last.cout + c] as usize;
                d_act[(c * b + bi) * plane + k] = d_embedding[bi * last.cout + c];
            }
        }

        for l in (0..3).rev() {
            let shape = self.layers[l];
            let lc = &cache.layers[l];
            let r = shape.res;
            let n = b * r * r;
            // through ReLU
            for (g, &a) in d_act.iter_mut().zip(&lc.act) {
                if a <= S::zero() {
                    *g = S::zero();
                }
            }
            let (w_off, b_off) = (self.offsets[l], self.offsets[l] + shape.weights());
            {
                let dw = &mut grads[w_off..][..shape.weights()];
                gemm(
                    shape.cout,
                    n,
                    shape.k(),
                    S::one(),
                    &d_act,
                    Layout::rows(n),
                    &lc.cols,
                    Layout::transposed(n),
                    S::one(),
                    dw,
                    Layout::rows(shape.k()),
                );
            }
            for (co, row) in d_act.chunks_exact(n).enumerate() {
                let s: S = row.iter().copied().sum();
                grads[b_off + co] = grads[b_off + co] + s;
            }
            if l == 0 {
                break;
            }
            let w = &params[w_off..][..shape.weights()];
            let mut dcols = vec![S::zero(); shape.k() * n];
            gemm(
                shape.k(),
                shape.cout,
                n,
                S::one(),
                w,
                Layout::transposed(shape.k()),
                &d_act,
                Layout::rows(n),
                S::zero(),
                &mut dcols,
                Layout::rows(n),
            );
            let d_in = col2im(&dcols, shape.cin, b, r);
            // unpool into the previous layer's activation gradient
            let prev = self.layers[l - 1];
            let pr = prev.res;
            let h = pr / 2;
            let argmax = &cache.layers[l - 1].argmax;
            let mut d_prev = vec![S::zero(); prev.cout * b * pr * pr];
            for plane_idx in 0..prev.cout * b {
                for y in 0..h {
                    for x in 0..h {
                        let o = plane_idx * h * h + y * h + x;
                        let k = argmax[o] as usize;
                        let pos = plane_idx * pr * pr + (2 * y + k / 2) * pr + 2 * x + k % 2;
                        d_prev[pos] = d_in[o];
                    }
                }
            }
            d_act = d_prev;
        }
    }

    fn routing(&self, cache: &BackboneCache) -> Vec<u8> {
        let cache = cache
            .0
            .downcast_ref::<TinyConvCache<S>>()
            .expect("cache produced by TinyConv::forward");
        let mut out = Vec::new();
        for lc in &cache.layers {
            out.extend(lc.act.iter().map(|&a| u8::from(a > S::zero())));
            out.extend_from_slice(&lc.argmax);
        }
        out.extend_from_slice(&cache.global_argmax);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_lookup() {
        assert!(BackboneSpec::named("tiny-conv", (16, 16)).is_ok());
        let err = BackboneSpec::named("resnet", (16, 16)).unwrap_err().to_string();
        assert!(err.contains("tiny-conv") && err.contains("swin-large"), "{err}");
        let swin = BackboneSpec::named("swin-base", (224, 224)).unwrap();
        assert!(matches!(
            build_backbone::<f32>(&swin),
            Err(Error::BackboneUnavailable { .. })
        ));
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (c, b, r) = (2, 3, 4);
        let x: Vec<f64> = (0..c * b * r * r).map(|_| rng.gen()).collect();
        let y: Vec<f64> = (0..c * 9 * b * r * r).map(|_| rng.gen()).collect();
        let lhs: f64 = im2col(&x, c, b, r).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&y, c, b, r)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
