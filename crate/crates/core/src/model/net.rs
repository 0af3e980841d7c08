//! Backbone plus multi-task linear heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{build_backbone, Backbone, BackboneCache, BackboneSpec};
use super::scalar::{gemm, Layout, Scalar};
use crate::datagen::FloatImage;
use crate::error::{Error, Result};
use crate::vocab::TripletVocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Triplet,
    Instrument,
    Verb,
    Target,
    Phase,
}

impl Head {
    pub const ALL: [Head; 5] = [
        Head::Triplet,
        Head::Instrument,
        Head::Verb,
        Head::Target,
        Head::Phase,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Head::Triplet => "triplet",
            Head::Instrument => "instrument",
            Head::Verb => "verb",
            Head::Target => "target",
            Head::Phase => "phase",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

/// Which auxiliary heads are trained and how their losses are weighted.
/// The triplet head is always on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub instrument: bool,
    pub verb: bool,
    pub target: bool,
    pub phase: bool,
    pub w_triplet: f64,
    pub w_instrument: f64,
    pub w_verb: f64,
    pub w_target: f64,
    pub w_phase: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig::triplet_only()
    }
}

impl HeadConfig {
    pub fn triplet_only() -> Self {
        HeadConfig {
            instrument: false,
            verb: false,
            target: false,
            phase: false,
            w_triplet: 1.0,
            w_instrument: 1.0,
            w_verb: 1.0,
            w_target: 1.0,
            w_phase: 1.0,
        }
    }

    /// Triplet plus instrument, verb and target heads.
    pub fn multitask() -> Self {
        HeadConfig {
            instrument: true,
            verb: true,
            target: true,
            ..Self::triplet_only()
        }
    }

    pub fn multitask_with_phase() -> Self {
        HeadConfig {
            phase: true,
            ..Self::multitask()
        }
    }

    pub fn is_enabled(&self, head: Head) -> bool {
        match head {
            Head::Triplet => true,
            Head::Instrument => self.instrument,
            Head::Verb => self.verb,
            Head::Target => self.target,
            Head::Phase => self.phase,
        }
    }

    pub fn enabled(&self) -> impl Iterator<Item = Head> + '_ {
        Head::ALL.into_iter().filter(|&h| self.is_enabled(h))
    }

    pub fn weight(&self, head: Head) -> f64 {
        match head {
            Head::Triplet => self.w_triplet,
            Head::Instrument => self.w_instrument,
            Head::Verb => self.w_verb,
            Head::Target => self.w_target,
            Head::Phase => self.w_phase,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for head in Head::ALL {
            let w = self.weight(head);
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::validation(
                    format!("heads.w_{}", head.name()),
                    format!("weight {w} must be finite and >= 0"),
                ));
            }
        }
        if self.w_triplet <= 0.0 {
            return Err(Error::validation("heads.w_triplet", "must be > 0"));
        }
        Ok(())
    }
}

/// Output widths of every head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadDims {
    pub triplet: usize,
    pub instrument: usize,
    pub verb: usize,
    pub target: usize,
    pub phase: usize,
}

impl HeadDims {
    pub fn from_vocab(vocab: &TripletVocabulary, num_phases: usize) -> Self {
        let (i, v, t) = vocab.components().dims();
        HeadDims {
            triplet: vocab.num_classes(),
            instrument: i,
            verb: v,
            target: t,
            phase: num_phases,
        }
    }

    pub fn width(&self, head: Head) -> usize {
        match head {
            Head::Triplet => self.triplet,
            Head::Instrument => self.instrument,
            Head::Verb => self.verb,
            Head::Target => self.target,
            Head::Phase => self.phase,
        }
    }
}

/// Row-major `batch × width` logits of every enabled head.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<S> {
    pub batch: usize,
    dims: HeadDims,
    logits: [Option<Vec<S>>; 5],
}

impl<S: Scalar> ForwardOutput<S> {
    pub fn new(batch: usize, dims: HeadDims) -> Self {
        ForwardOutput {
            batch,
            dims,
            logits: Default::default(),
        }
    }

    pub fn get(&self, head: Head) -> Option<&[S]> {
        self.logits[head.slot()].as_deref()
    }

    pub fn get_mut(&mut self, head: Head) -> Option<&mut Vec<S>> {
        self.logits[head.slot()].as_mut()
    }

    pub fn set(&mut self, head: Head, values: Vec<S>) -> Result<()> {
        let expected = self.batch * self.dims.width(head);
        if values.len() != expected {
            return Err(Error::Shape {
                what: "head logits",
                expected,
                actual: values.len(),
            });
        }
        self.logits[head.slot()] = Some(values);
        Ok(())
    }

    pub fn width(&self, head: Head) -> usize {
        self.dims.width(head)
    }

    pub fn heads(&self) -> impl Iterator<Item = Head> + '_ {
        Head::ALL.into_iter().filter(|h| self.logits[h.slot()].is_some())
    }

    /// Logits of one sample for one head.
    pub fn row(&self, head: Head, sample: usize) -> Option<&[S]> {
        let w = self.width(head);
        self.get(head).map(|l| &l[sample * w..][..w])
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = ForwardOutput::new(self.batch, self.dims);
        for h in self.heads() {
            out.logits[h.slot()] = Some(vec![S::zero(); self.batch * self.width(h)]);
        }
        out
    }
}

/// Saved state of a training-mode forward pass.
pub struct ForwardCache<S> {
    embedding: Vec<S>,
    backbone: BackboneCache,
}

/// A backbone with its multi-task heads and a flat parameter vector.
pub struct Model<S: Scalar = f32> {
    backbone: Box<dyn Backbone<S>>,
    heads: HeadConfig,
    dims: HeadDims,
    /// (head, offset) of every enabled head's weight block
    head_offsets: Vec<(Head, usize)>,
    params: Vec<S>,
}

impl<S: Scalar> Model<S> {
    /// Builds the model with parameters drawn from `init_seed`.
    pub fn new(spec: &BackboneSpec, heads: HeadConfig, dims: HeadDims, init_seed: u64) -> Result<Self> {
        heads.validate()?;
        let backbone = build_backbone::<S>(spec)?;
        let d = spec.embedding_dim;
        let mut offset = backbone.num_params();
        let mut head_offsets = Vec::new();
        for head in heads.enabled() {
            let w = dims.width(head);
            if w == 0 {
                return Err(Error::validation(head.name(), "head has zero outputs"));
            }
            head_offsets.push((head, offset));
            offset += w * d + w;
        }
        let mut params = vec![S::zero(); offset];
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        backbone.init_params(&mut params, &mut rng);
        let bound = 1.0 / (d as f64).sqrt();
        for v in &mut params[backbone.num_params()..] {
            *v = S::lit(rng.gen_range(-bound..bound));
        }
        Ok(Model {
            backbone,
            heads,
            dims,
            head_offsets,
            params,
        })
    }

    pub fn from_params(
        spec: &BackboneSpec,
        heads: HeadConfig,
        dims: HeadDims,
        params: Vec<S>,
    ) -> Result<Self> {
        let mut model = Self::new(spec, heads, dims, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Shape {
                what: "parameter vector",
                expected: model.params.len(),
                actual: params.len(),
            });
        }
        model.params = params;
        Ok(model)
    }

    pub fn backbone_spec(&self) -> &BackboneSpec {
        self.backbone.spec()
    }

    pub fn heads(&self) -> &HeadConfig {
        &self.heads
    }

    pub fn dims(&self) -> HeadDims {
        self.dims
    }

    pub fn params(&self) -> &[S] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [S] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn run(&self, images: &[&FloatImage], keep: bool) -> Result<(ForwardOutput<S>, Option<ForwardCache<S>>)> {
        let (embedding, cache) = self.backbone.forward(&self.params, images, keep)?;
        let b = images.len();
        let d = self.backbone.spec().embedding_dim;
        let mut out = ForwardOutput::new(b, self.dims);
        for &(head, off) in &self.head_offsets {
            let w = self.dims.width(head);
            let weights = &self.params[off..][..w * d];
            let bias = &self.params[off + w * d..][..w];
            let mut logits = vec![S::zero(); b * w];
            for row in logits.chunks_exact_mut(w) {
                row.copy_from_slice(bias);
            }
            gemm(
                b,
                d,
                w,
                S::one(),
                &embedding,
                Layout::rows(d),
                weights,
                Layout::transposed(d),
                S::one(),
                &mut logits,
                Layout::rows(w),
            );
            out.set(head, logits)?;
        }
        let cache = cache.map(|backbone| ForwardCache {
            embedding,
            backbone,
        });
        Ok((out, cache))
    }

    /// Inference forward pass; a pure function of parameters and input.
    pub fn forward(&self, images: &[&FloatImage]) -> Result<ForwardOutput<S>> {
        Ok(self.run(images, false)?.0)
    }

    pub fn forward_train(&self, images: &[&FloatImage]) -> Result<(ForwardOutput<S>, ForwardCache<S>)> {
        let (out, cache) = self.run(images, true)?;
        Ok((out, cache.expect("cache requested")))
    }

    /// Discrete routing of a training forward pass; see [`Backbone::routing`].
    pub fn routing(&self, cache: &ForwardCache<S>) -> Vec<u8> {
        self.backbone.routing(&cache.backbone)
    }

    /// Parameter gradient for the given logit gradients.
    pub fn backward(&self, cache: &ForwardCache<S>, d_logits: &ForwardOutput<S>) -> Vec<S> {
        let d = self.backbone.spec().embedding_dim;
        let b = d_logits.batch;
        let mut grads = vec![S::zero(); self.params.len()];
        let mut d_emb = vec![S::zero(); b * d];
        for &(head, off) in &self.head_offsets {
            let Some(dl) = d_logits.get(head) else { continue };
            let w = self.dims.width(head);
            {
                let (dw, rest) = grads[off..].split_at_mut(w * d);
                gemm(
                    w,
                    b,
                    d,
                    S::one(),
                    dl,
                    Layout::transposed(w),
                    &cache.embedding,
                    Layout::rows(d),
                    S::one(),
                    dw,
                    Layout::rows(d),
                );
                for row in dl.chunks_exact(w) {
                    for (g, &v) in rest[..w].iter_mut().zip(row) {
                        *g = *g + v;
                    }
                }
            }
            let weights = &self.params[off..][..w * d];
            gemm(
                b,
                w,
                d,
                S::one(),
                dl,
                Layout::rows(w),
                weights,
                Layout::rows(d),
                S::one(),
                &mut d_emb,
                Layout::rows(d),
            );
        }
        self.backbone
            .backward(&self.params, &cache.backbone, &d_emb, &mut grads);
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> HeadDims {
        HeadDims {
            triplet: 20,
            instrument: 3,
            verb: 4,
            target: 5,
            phase: 7,
        }
    }

    fn images(n: usize, seed: u64) -> Vec<FloatImage> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| FloatImage::from_raw(16, 16, (0..768).map(|_| rng.gen()).collect()).unwrap())
            .collect()
    }

    #[test]
    fn head_shapes_and_determinism() {
        let spec = BackboneSpec::named("tiny-conv", (16, 16)).unwrap();
        let model = Model::<f32>::new(&spec, HeadConfig::multitask_with_phase(), dims(), 1).unwrap();
        let imgs = images(1, 0);
        let refs: Vec<&FloatImage> = imgs.iter().collect();
        let a = model.forward(&refs).unwrap();
        for head in Head::ALL {
            assert_eq!(a.get(head).unwrap().len(), dims().width(head));
        }
        assert_eq!(a, model.forward(&refs).unwrap());
        assert!(model.forward(&[]).is_err());
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let spec = BackboneSpec::named("tiny-conv", (32, 32)).unwrap();
        let model = Model::<f64>::new(&spec, HeadConfig::multitask(), dims(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let imgs: Vec<FloatImage> = (0..4)
            .map(|_| FloatImage::from_raw(32, 32, (0..3072).map(|_| rng.gen()).collect()).unwrap())
            .collect();
        let perm = [2, 0, 3, 1];
        let fwd: Vec<&FloatImage> = imgs.iter().collect();
        let permuted: Vec<&FloatImage> = perm.iter().map(|&i| &imgs[i]).collect();
        let a = model.forward(&fwd).unwrap();
        let b = model.forward(&permuted).unwrap();
        for head in a.heads() {
            for (j, &i) in perm.iter().enumerate() {
                let (x, y) = (a.row(head, i).unwrap(), b.row(head, j).unwrap());
                for (u, v) in x.iter().zip(y) {
                    assert!((u - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn wrong_input_size_is_a_shape_error() {
        let spec = BackboneSpec::named("tiny-conv", (16, 16)).unwrap();
        let model = Model::<f32>::new(&spec, HeadConfig::triplet_only(), dims(), 1).unwrap();
        let img = FloatImage::zeros(32, 32);
        assert!(matches!(model.forward(&[&img]), Err(Error::Shape { .. })));
    }
}
