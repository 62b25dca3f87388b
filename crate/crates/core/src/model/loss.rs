//! Per-sample objectives and their gradients with respect to the head logit.
//!
//! Fake-negative objectives assume a stream in which every record first
//! appears with label 0 and converters appear a second time with label 1.
//! Under that stream the label-1 rate is `p / (1 + p)`, which gives the
//! importance weights used by [`fnw_loss`] and the inverse used by
//! [`fnc_calibrate`].

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Probability clamp for log terms.
pub const PROB_EPS: f64 = 1e-7;

pub fn clamp_prob<F: Scalar>(p: F) -> F {
    let eps = F::of(PROB_EPS);
    p.max(eps).min(F::one() - eps)
}

/// Binary cross-entropy and its logit gradient `p - y`.
pub fn bce_loss_and_grad<F: Scalar>(p: F, label: u8) -> (F, F) {
    let pc = clamp_prob(p);
    let y = F::of(label as f64);
    let loss = -(y * pc.ln() + (F::one() - y) * (F::one() - pc).ln());
    (loss, p - y)
}

/// Importance weight of a fake-negative event, treated as a constant.
pub fn fnw_weight<F: Scalar>(p_hat: F, label: u8) -> F {
    let p = p_hat.max(F::zero()).min(F::one());
    if label == 1 {
        F::one() + p
    } else {
        (F::one() + p) * (F::one() - p)
    }
}

/// Importance-weighted cross-entropy on the fake-negative stream, with the
/// weight computed from the model's own (stop-gradient) prediction.
pub fn fnw_loss<F: Scalar>(p_hat: F, label: u8) -> (F, F) {
    let w = fnw_weight(p_hat, label);
    let (l, g) = bce_loss_and_grad(p_hat, label);
    (w * l, w * g)
}

/// Unbiased positive-unlabeled risk term for one fake-negative event.
///
/// A label-1 event contributes `-ln p + ln(1 - p)`: its positive loss minus
/// the negative loss it was already charged as a fake negative. Summed over
/// the stream, this equals cross-entropy against the true labels.
pub fn pu_loss<F: Scalar>(p_hat: F, label: u8) -> (F, F) {
    let pc = clamp_prob(p_hat);
    if label == 1 {
        (-pc.ln() + (F::one() - pc).ln(), -F::one())
    } else {
        (-(F::one() - pc).ln(), p_hat)
    }
}

/// Maps a prediction trained on the fake-negative stream back to a
/// conversion probability, `q / (1 - q)`. Returns the value and whether the
/// clamp was hit.
pub fn fnc_calibrate_flagged(q: f64) -> (f64, bool) {
    let raw = if q >= 1.0 { f64::INFINITY } else { q / (1.0 - q) };
    let clamped = raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
    (clamped, clamped != raw)
}

pub fn fnc_calibrate(q: f64) -> f64 {
    fnc_calibrate_flagged(q).0
}

/// Cross-entropy of the policy softmax against the best task.
/// Returns the loss and the logit gradients `g - onehot(k*)`.
pub fn policy_loss_and_grad<F: Scalar>(probs: &[F], best: usize) -> (F, Vec<F>) {
    let loss = -clamp_prob(probs[best]).ln();
    let grad = probs
        .iter()
        .enumerate()
        .map(|(k, &g)| if k == best { g - F::one() } else { g })
        .collect();
    (loss, grad)
}

/// Loss applied to a single-output head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Bce,
    Fnw,
    /// `non_negative` clamps the batch's negative-class risk at zero.
    Pu { non_negative: bool },
}

/// Batch loss sum and per-sample logit gradients (unscaled).
pub fn objective_terms<F: Scalar>(obj: Objective, probs: &[F], labels: &[u8]) -> (F, Vec<F>) {
    debug_assert_eq!(probs.len(), labels.len());
    match obj {
        Objective::Bce | Objective::Fnw => {
            let f = if obj == Objective::Bce {
                bce_loss_and_grad::<F>
            } else {
                fnw_loss::<F>
            };
            let mut total = F::zero();
            let grads = probs
                .iter()
                .zip(labels)
                .map(|(&p, &y)| {
                    let (l, g) = f(p, y);
                    total += l;
                    g
                })
                .collect();
            (total, grads)
        }
        Objective::Pu { non_negative } => {
            let mut pos = F::zero();
            let mut neg = F::zero();
            for (&p, &y) in probs.iter().zip(labels) {
                let pc = clamp_prob(p);
                if y == 1 {
                    pos -= pc.ln();
                    neg += (F::one() - pc).ln();
                } else {
                    neg -= (F::one() - pc).ln();
                }
            }
            let drop_negative = non_negative && neg < F::zero();
            let grads = probs
                .iter()
                .zip(labels)
                .map(|(&p, &y)| match (y, drop_negative) {
                    (1, false) => -F::one(),
                    (1, true) => p - F::one(),
                    (_, false) => p,
                    (_, true) => F::zero(),
                })
                .collect();
            let total = if drop_negative { pos } else { pos + neg };
            (total, grads)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_diff(f: impl Fn(f64) -> f64, z: f64) -> f64 {
        let h = 1e-5;
        (f(z + h) - f(z - h)) / (2.0 * h)
    }

    fn sig(z: f64) -> f64 {
        1.0 / (1.0 + (-z).exp())
    }

    #[test]
    fn bce_closed_form() {
        let (l, g) = bce_loss_and_grad(0.5f64, 1);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(g, -0.5);
    }

    #[test]
    fn bce_at_exact_label_is_bounded_by_clamp() {
        let bound = -(1.0 - PROB_EPS).ln();
        assert!(bce_loss_and_grad(1.0f64, 1).0 <= bound + 1e-15);
        assert!(bce_loss_and_grad(0.0f64, 0).0 <= bound + 1e-15);
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let z: f64 = rng.random_range(-6.0..6.0);
            let y: u8 = rng.random_range(0..2);
            let analytic = bce_loss_and_grad(sig(z), y).1;
            let numeric = central_diff(|z| bce_loss_and_grad(sig(z), y).0, z);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-4, "z={z} y={y}: {analytic} vs {numeric}");
        }
    }

    #[test]
    fn fnw_weights() {
        assert_eq!(fnw_weight(0.0f64, 1), 1.0);
        assert_eq!(fnw_weight(0.0f64, 0), 1.0);
        assert_eq!(fnw_weight(0.5f64, 1), 1.5);
        assert_eq!(fnw_weight(0.5f64, 0), 0.75);
        // With unit weights the loss is plain cross-entropy.
        assert_eq!(fnw_loss(0.0f64, 0), bce_loss_and_grad(0.0, 0));
    }

    #[test]
    fn pu_examples() {
        let (l, g) = pu_loss(0.5f64, 1);
        assert!(l.abs() < 1e-12);
        assert_eq!(g, -1.0);
        let (l, _) = pu_loss(0.5f64, 0);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn pu_gradient_matches_finite_differences() {
        for &z in &[-3.0, -0.5, 0.2, 2.5] {
            for y in 0..2u8 {
                let analytic = pu_loss(sig(z), y).1;
                let numeric = central_diff(|z| pu_loss(sig(z), y).0, z);
                assert!((analytic - numeric).abs() < 1e-6, "z={z} y={y}");
            }
        }
    }

    #[test]
    fn fnc_examples() {
        assert!((fnc_calibrate(0.2) - 0.25).abs() < 1e-15);
        assert_eq!(fnc_calibrate(0.0), PROB_EPS);
        let (v, flagged) = fnc_calibrate_flagged(1.0);
        assert!(flagged);
        assert_eq!(v, 1.0 - PROB_EPS);
        let (_, flagged) = fnc_calibrate_flagged(0.3);
        assert!(!flagged);
    }

    #[test]
    fn fnc_is_strictly_increasing() {
        let mut last = f64::NEG_INFINITY;
        for i in 1..500 {
            let v = fnc_calibrate(i as f64 / 1000.0);
            assert!(v > last);
            last = v;
        }
    }

    #[test]
    fn policy_loss_uniform() {
        let (l, g) = policy_loss_and_grad(&[0.25f64; 4], 2);
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert_eq!(g, vec![0.25, 0.25, -0.75, 0.25]);
    }

    #[test]
    fn pu_clamp_drops_negative_risk() {
        // One positive event at p = 0.9: negative risk ln(0.1) < 0.
        let (total, g) = objective_terms(Objective::Pu { non_negative: true }, &[0.9f64], &[1]);
        assert!((total + 0.9f64.ln()).abs() < 1e-12);
        assert!((g[0] + 0.1).abs() < 1e-12);
        let (total, g) = objective_terms(Objective::Pu { non_negative: false }, &[0.9f64], &[1]);
        assert!((total - (-(0.9f64.ln()) + 0.1f64.ln())).abs() < 1e-12);
        assert_eq!(g[0], -1.0);
    }
}
