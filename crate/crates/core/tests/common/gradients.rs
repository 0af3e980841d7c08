//! Central finite-difference checks of analytic gradients in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selfdistill::datagen::FloatImage;
use selfdistill::model::{
    multilabel_bce_loss, multitask_loss, phase_ce_loss, BackboneSpec, ForwardOutput, Head, HeadConfig,
    HeadDims, HeadTargets, Model,
};

use super::Outcome;

const STEP: f64 = 1e-5;
/// Denominator floor for relative errors. The difference quotient resolves
/// gradients to about 1e-11 absolute, so smaller gradients (including the
/// exact zeros of parameters a head does not touch) are compared on an
/// absolute scale of 1e-6.
const FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn random_image(rng: &mut ChaCha8Rng, hw: usize) -> FloatImage {
    let data = (0..hw * hw * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
    FloatImage::from_raw(hw, hw, data).unwrap()
}

pub struct Problem {
    pub model: Model<f64>,
    pub images: Vec<FloatImage>,
    pub targets: HeadTargets<f64>,
    pub heads: HeadConfig,
}

pub fn problem(seed: u64) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = BackboneSpec::named("tiny-conv", (16, 16)).unwrap();
    let dims = HeadDims {
        triplet: 6,
        instrument: 2,
        verb: 3,
        target: 3,
        phase: 4,
    };
    let mut heads = HeadConfig::multitask_with_phase();
    heads.w_verb = 0.5;
    heads.w_phase = 2.0;
    let model = Model::<f64>::new(&spec, heads.clone(), dims, seed).unwrap();
    let batch = 3;
    let images = (0..batch).map(|_| random_image(&mut rng, 16)).collect();
    let mut soft = |w: usize| Some((0..batch * w).map(|_| rng.gen_range(0.0..1.0)).collect());
    let targets = HeadTargets {
        triplet: soft(6),
        instrument: soft(2),
        verb: soft(3),
        target: soft(3),
        phase: Some(vec![0, 3, 1]),
    };
    Problem {
        model,
        images,
        targets,
        heads,
    }
}

impl Problem {
    fn outputs(&self, params: &[f64]) -> ForwardOutput<f64> {
        let m = Model::from_params(self.model.backbone_spec(), self.heads.clone(), self.model.dims(), params.to_vec())
            .unwrap();
        let refs: Vec<&FloatImage> = self.images.iter().collect();
        m.forward(&refs).unwrap()
    }

    fn routing(&self, params: &[f64]) -> Vec<u8> {
        let m = Model::from_params(self.model.backbone_spec(), self.heads.clone(), self.model.dims(), params.to_vec())
            .unwrap();
        let refs: Vec<&FloatImage> = self.images.iter().collect();
        let (_, cache) = m.forward_train(&refs).unwrap();
        m.routing(&cache)
    }

    /// Whether every stencil point of parameter `index` keeps the routing
    /// of `params`, so the loss is smooth across the whole stencil.
    pub fn smooth_at(&self, params: &[f64], index: usize) -> bool {
        let here = self.routing(params);
        let mut p = params.to_vec();
        [-2.0, -1.0, 1.0, 2.0].iter().all(|&o| {
            p[index] = params[index] + o * STEP;
            self.routing(&p) == here
        })
    }

    pub fn total_loss(&self, params: &[f64]) -> f64 {
        multitask_loss(&self.outputs(params), &self.targets, &self.heads).unwrap().total
    }

    /// Unweighted loss of one head computed directly by its loss function.
    pub fn head_loss(&self, params: &[f64], head: Head) -> f64 {
        let out = self.outputs(params);
        let logits = out.get(head).unwrap();
        match head {
            Head::Phase => phase_ce_loss(logits, out.width(head), self.targets.phase.as_ref().unwrap()).unwrap().0,
            Head::Triplet => multilabel_bce_loss(logits, self.targets.triplet.as_ref().unwrap()).unwrap().0,
            Head::Instrument => multilabel_bce_loss(logits, self.targets.instrument.as_ref().unwrap()).unwrap().0,
            Head::Verb => multilabel_bce_loss(logits, self.targets.verb.as_ref().unwrap()).unwrap().0,
            Head::Target => multilabel_bce_loss(logits, self.targets.target.as_ref().unwrap()).unwrap().0,
        }
    }

    /// Analytic gradient of the weighted total and of each head alone.
    pub fn analytic(&self) -> (Vec<f64>, Vec<(Head, Vec<f64>)>) {
        let refs: Vec<&FloatImage> = self.images.iter().collect();
        let (out, cache) = self.model.forward_train(&refs).unwrap();
        let loss = multitask_loss(&out, &self.targets, &self.heads).unwrap();
        let total = self.model.backward(&cache, &loss.grad);
        let mut per_head = Vec::new();
        for head in self.heads.enabled() {
            // the head's own loss gradient, routed through the network alone
            let logits = out.get(head).unwrap();
            let g = match head {
                Head::Phase => phase_ce_loss(logits, out.width(head), self.targets.phase.as_ref().unwrap()).unwrap().1,
                Head::Triplet => multilabel_bce_loss(logits, self.targets.triplet.as_ref().unwrap()).unwrap().1,
                Head::Instrument => multilabel_bce_loss(logits, self.targets.instrument.as_ref().unwrap()).unwrap().1,
                Head::Verb => multilabel_bce_loss(logits, self.targets.verb.as_ref().unwrap()).unwrap().1,
                Head::Target => multilabel_bce_loss(logits, self.targets.target.as_ref().unwrap()).unwrap().1,
            };
            let mut d = out.zeros_like();
            *d.get_mut(head).unwrap() = g;
            per_head.push((head, self.model.backward(&cache, &d)));
        }
        (total, per_head)
    }
}

/// Fourth-order central difference
/// `(f(x−2h) − 8f(x−h) + 8f(x+h) − f(x+2h)) / 12h`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, params: &[f64], index: usize) -> f64 {
    let mut p = params.to_vec();
    let mut at = |offset: f64| {
        p[index] = params[index] + offset * STEP;
        f(&p)
    };
    let (m2, m1, p1, p2) = (at(-2.0), at(-1.0), at(1.0), at(2.0));
    (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * STEP)
}

/// Worst relative error over `probes` random parameters for the total loss,
/// for every head's own loss, and for the weighted sum of per-head
/// gradients against the total. A parameter whose stencil flips a ReLU
/// gate or a pooling winner is redrawn, since the difference quotient
/// straddles a kink there; the count of redraws is reported.
pub fn gradient_check(probes: usize, seed: u64) -> Outcome {
    let prob = problem(seed);
    let params = prob.model.params().to_vec();
    let (total, per_head) = prob.analytic();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n = params.len();
    let mut worst_total = 0.0f64;
    let mut worst_head = [0.0f64; 5];
    let mut worst_sum = 0.0f64;
    let mut redrawn = 0;
    for _ in 0..probes {
        let i = loop {
            let i = rng.gen_range(0..n);
            if prob.smooth_at(&params, i) {
                break i;
            }
            redrawn += 1;
        };
        let numeric = central_difference(|p| prob.total_loss(p), &params, i);
        worst_total = worst_total.max(relative_error(total[i], numeric));
        let mut weighted = 0.0;
        for (head, g) in &per_head {
            let num_h = central_difference(|p| prob.head_loss(p, *head), &params, i);
            let e = relative_error(g[i], num_h);
            let slot = Head::ALL.iter().position(|h| h == head).unwrap();
            worst_head[slot] = worst_head[slot].max(e);
            weighted += prob.heads.weight(*head) * g[i];
        }
        worst_sum = worst_sum.max(relative_error(weighted, numeric));
    }
    let worst = worst_head.iter().copied().fold(worst_total.max(worst_sum), f64::max);
    Outcome::new(
        worst < 1e-4,
        format!(
            "{probes} probes over {n} params: total {worst_total:.2e}, triplet/instrument/verb/target/phase \
             {:.2e}/{:.2e}/{:.2e}/{:.2e}/{:.2e}, sum-of-heads {worst_sum:.2e} (limit 1e-4), {redrawn} kink probes redrawn",
            worst_head[0], worst_head[1], worst_head[2], worst_head[3], worst_head[4]
        ),
    )
}
