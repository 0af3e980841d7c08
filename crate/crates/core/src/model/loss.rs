//! Losses and their gradients with respect to logits.

use super::net::{ForwardOutput, Head, HeadConfig};
use super::scalar::Scalar;
use crate::error::{Error, Result};

pub fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

pub fn sigmoid_probs<S: Scalar>(logits: &[S]) -> Vec<S> {
    logits.iter().map(|&z| sigmoid(z)).collect()
}

/// Mean binary cross-entropy over all elements, computed from logits:
/// `max(z, 0) − z·t + ln(1 + e^{−|z|})`.
///
/// Returns the loss and its gradient with respect to `logits`.
pub fn multilabel_bce_loss<S: Scalar>(logits: &[S], targets: &[S]) -> Result<(S, Vec<S>)> {
    if logits.len() != targets.len() {
        return Err(Error::Shape {
            what: "bce targets",
            expected: logits.len(),
            actual: targets.len(),
        });
    }
    if logits.is_empty() {
        return Err(Error::EmptyInput("bce logits"));
    }
    let n = S::from_usize(logits.len()).expect("length fits");
    let mut total = S::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &t) in logits.iter().zip(targets) {
        if !z.is_finite() || !t.is_finite() {
            return Err(Error::Numeric("bce input"));
        }
        if t < S::zero() || t > S::one() {
            return Err(Error::Range {
                what: "bce target",
                value: format!("{t:?}"),
                range: "[0, 1]".into(),
            });
        }
        total = total + z.max(S::zero()) - z * t + (-z.abs()).exp().ln_1p();
        grad.push((sigmoid(z) - t) / n);
    }
    Ok((total / n, grad))
}

/// Mean softmax cross-entropy of a `batch × classes` logit matrix.
pub fn phase_ce_loss<S: Scalar>(logits: &[S], classes: usize, labels: &[usize]) -> Result<(S, Vec<S>)> {
    if classes == 0 || logits.len() != labels.len() * classes {
        return Err(Error::Shape {
            what: "phase logits",
            expected: labels.len() * classes,
            actual: logits.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput("phase labels"));
    }
    let bn = S::from_usize(labels.len()).expect("length fits");
    let mut total = S::zero();
    let mut grad = vec![S::zero(); logits.len()];
    for (row, (&y, g)) in logits
        .chunks_exact(classes)
        .zip(labels.iter().zip(grad.chunks_exact_mut(classes)))
    {
        if y >= classes {
            return Err(Error::Index {
                what: "phase",
                index: y,
                len: classes,
            });
        }
        if row.iter().any(|z| !z.is_finite()) {
            return Err(Error::Numeric("phase logits"));
        }
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let sum: S = row.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        total = total + lse - row[y];
        for (k, gk) in g.iter_mut().enumerate() {
            let p = (row[k] - lse).exp();
            let onehot = if k == y { S::one() } else { S::zero() };
            *gk = (p - onehot) / bn;
        }
    }
    Ok((total / bn, grad))
}

/// Per-head targets for a batch. Sigmoid heads take `batch × n` values in
/// `[0, 1]`; the phase head takes class ids.
#[derive(Clone, Debug, Default)]
pub struct HeadTargets<S> {
    pub triplet: Option<Vec<S>>,
    pub instrument: Option<Vec<S>>,
    pub verb: Option<Vec<S>>,
    pub target: Option<Vec<S>>,
    pub phase: Option<Vec<usize>>,
}

impl<S> HeadTargets<S> {
    fn sigmoid_target(&self, head: Head) -> Option<&Vec<S>> {
        match head {
            Head::Triplet => self.triplet.as_ref(),
            Head::Instrument => self.instrument.as_ref(),
            Head::Verb => self.verb.as_ref(),
            Head::Target => self.target.as_ref(),
            Head::Phase => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MultitaskLoss<S> {
    pub total: S,
    /// Unweighted loss of each enabled head.
    pub per_head: Vec<(Head, S)>,
    /// Gradient of `total` with respect to every head's logits.
    pub grad: ForwardOutput<S>,
}

/// Weighted sum of per-head losses over the heads enabled in `heads`.
pub fn multitask_loss<S: Scalar>(
    outputs: &ForwardOutput<S>,
    targets: &HeadTargets<S>,
    heads: &HeadConfig,
) -> Result<MultitaskLoss<S>> {
    let mut total = S::zero();
    let mut per_head = Vec::new();
    let mut grad = outputs.zeros_like();
    for head in heads.enabled() {
        let logits = outputs
            .get(head)
            .ok_or_else(|| Error::Config(format!("no logits for enabled head {}", head.name())))?;
        let weight = S::lit(heads.weight(head));
        let (loss, g) = if head == Head::Phase {
            let labels = targets
                .phase
                .as_ref()
                .ok_or_else(|| Error::Config("missing target for the phase head".into()))?;
            phase_ce_loss(logits, outputs.width(head), labels)?
        } else {
            let t = targets.sigmoid_target(head).ok_or_else(|| {
                Error::Config(format!("missing target for the {} head", head.name()))
            })?;
            multilabel_bce_loss(logits, t)?
        };
        total = total + weight * loss;
        per_head.push((head, loss));
        let slot = grad.get_mut(head).expect("allocated by zeros_like");
        for (s, gi) in slot.iter_mut().zip(g) {
            *s = weight * gi;
        }
    }
    Ok(MultitaskLoss {
        total,
        per_head,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_closed_forms() {
        let (l, g) = multilabel_bce_loss(&[0.0f64], &[0.5]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(g[0], 0.0);
        let (l, _) = multilabel_bce_loss(&[40.0f64], &[1.0]).unwrap();
        assert!(l < 1e-15);
        let (l, _) = multilabel_bce_loss(&[-800.0f64], &[0.0]).unwrap();
        assert!(l.is_finite() && l < 1e-15);
        assert!(multilabel_bce_loss(&[f64::NAN], &[0.0]).is_err());
        assert!(multilabel_bce_loss(&[0.0f64, 1.0], &[0.0]).is_err());
    }

    #[test]
    fn bce_gradient_vanishes_at_target() {
        let z = [-1.3f64, 0.2, 2.5];
        let t: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
        let (_, g) = multilabel_bce_loss(&z, &t).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn bce_bounded_below_by_target_entropy() {
        let t = [0.1f64, 0.5, 0.93];
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let at_target: Vec<f64> = t.iter().map(|&p| logit(p)).collect();
        let (floor, _) = multilabel_bce_loss(&at_target, &t).unwrap();
        for shift in [-2.0, -0.3, 0.7, 3.0] {
            let z: Vec<f64> = at_target.iter().map(|v| v + shift).collect();
            assert!(multilabel_bce_loss(&z, &t).unwrap().0 > floor);
        }
    }

    #[test]
    fn phase_ce_closed_forms() {
        let (l, _) = phase_ce_loss(&[0.0f64; 7], 7, &[3]).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-12);
        let mut z = vec![0.0f64; 7];
        z[2] = 60.0;
        assert!(phase_ce_loss(&z, 7, &[2]).unwrap().0 < 1e-20);
        let shifted: Vec<f64> = z.iter().map(|v| v + 123.0).collect();
        let a = phase_ce_loss(&z, 7, &[4]).unwrap().0;
        let b = phase_ce_loss(&shifted, 7, &[4]).unwrap().0;
        assert!((a - b).abs() < 1e-12);
        assert!(matches!(phase_ce_loss(&z, 7, &[7]), Err(Error::Index { .. })));
    }

    #[test]
    fn sigmoid_symmetry() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        for z in [-30.0f64, -2.0, 0.3, 9.0] {
            assert!((sigmoid(z) + sigmoid(-z) - 1.0).abs() < 1e-15);
        }
    }
}
