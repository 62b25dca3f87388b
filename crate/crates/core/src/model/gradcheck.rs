//! Finite-difference verification of the hand-written gradients.
//!
//! Checks run on an `f64` copy of the model with central differences of
//! step `1e-4`. Before checking, any Leaky-ReLU pre-activation closer than
//! `1e-3` to the kink is pushed away by shifting that unit's bias, so the
//! perturbed losses stay on one linear piece.

use crate::domain::Feature;
use crate::model::linear::LinearModel;
use crate::model::loss::{clamp_prob, fnw_weight, policy_loss_and_grad, Objective};
use crate::model::network::{Gradients, Network};
use crate::scalar::Scalar;

pub const FD_STEP: f64 = 1e-4;
pub const KINK_MARGIN: f64 = 1e-3;
/// Denominator floor of the relative error, for partials that are ~0.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadSelect {
    Task(usize),
    Policy,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CheckBatch {
    /// Single-output head loss with 0/1 labels.
    Head {
        objective: Objective,
        samples: Vec<(Vec<Feature>, u8)>,
    },
    /// Policy cross-entropy with best-task targets.
    Policy { samples: Vec<(Vec<Feature>, usize)> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub n_checked: usize,
    pub worst: Option<String>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Flat parameter view in checkpoint tensor order.
trait FlatParams {
    fn get(&self, i: usize) -> f64;
    fn set(&mut self, i: usize, v: f64);
}

fn compare<M: FlatParams>(
    model: &mut M,
    indices: impl IntoIterator<Item = (usize, String)>,
    analytic: &[f64],
    loss: impl Fn(&M) -> f64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        n_checked: 0,
        worst: None,
    };
    for (i, name) in indices {
        let orig = model.get(i);
        model.set(i, orig + FD_STEP);
        let up = loss(model);
        model.set(i, orig - FD_STEP);
        let down = loss(model);
        model.set(i, orig);
        let numeric = (up - down) / (2.0 * FD_STEP);
        let err = relative_error(analytic[i], numeric);
        report.n_checked += 1;
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some(format!("{name}: analytic {:.3e} numeric {numeric:.3e}", analytic[i]));
        }
    }
    report
}

impl FlatParams for Network<f64> {
    fn get(&self, i: usize) -> f64 {
        *self.flat_ref(i)
    }

    fn set(&mut self, i: usize, v: f64) {
        *self.flat_mut(i) = v;
    }
}

impl FlatParams for LinearModel<f64> {
    fn get(&self, i: usize) -> f64 {
        if i < self.weights.len() {
            self.weights.value[i]
        } else {
            self.bias.value[0]
        }
    }

    fn set(&mut self, i: usize, v: f64) {
        if i < self.weights.len() {
            self.weights.value[i] = v;
        } else {
            self.bias.value[0] = v;
        }
    }
}

impl Network<f64> {
    fn flat_ref(&self, mut i: usize) -> &f64 {
        for t in self.tensors() {
            if i < t.data.len() {
                return &t.data[i];
            }
            i -= t.data.len();
        }
        panic!("flat index out of range");
    }

    fn flat_mut(&mut self, mut i: usize) -> &mut f64 {
        for t in self.tensors_mut() {
            if i < t.len() {
                return &mut t[i];
            }
            i -= t.len();
        }
        panic!("flat index out of range");
    }

    /// Shifts biases so no Leaky-ReLU unit on the path of `which` sits within
    /// `KINK_MARGIN` of zero for any input in `xs`.
    fn nudge_kinks(&mut self, xs: &[&[Feature]], which: HeadSelect) {
        let pre_shared: Vec<Vec<f64>> = xs.iter().map(|x| self.trunk(x).pre).collect();
        nudge_layer(&mut self.shared.b.value, &pre_shared);
        if let HeadSelect::Task(k) = which {
            let pre_head: Vec<Vec<f64>> = xs
                .iter()
                .map(|x| {
                    let t = self.trunk(x);
                    self.head(k, &t).pre
                })
                .collect();
            nudge_layer(&mut self.heads[k].hidden.b.value, &pre_head);
        }
    }
}

fn nudge_layer(bias: &mut [f64], pre: &[Vec<f64>]) {
    for (j, b) in bias.iter_mut().enumerate() {
        let ok = |shift: f64| pre.iter().all(|z| (z[j] + shift).abs() >= KINK_MARGIN);
        if ok(0.0) {
            continue;
        }
        if let Some(s) = (1..64)
            .flat_map(|m| [m as f64 * 2.0 * KINK_MARGIN, -(m as f64) * 2.0 * KINK_MARGIN])
            .find(|&s| ok(s))
        {
            *b += s;
        }
    }
}

/// Dense gradient vector in the same order as `Network::tensors`.
pub fn flatten_gradients(net: &Network<f64>, grads: &Gradients<f64>) -> Vec<f64> {
    let mut out = Vec::new();
    let e = net.config().embed_dim;
    let mut table = vec![0.0; net.emb.table.len()];
    for (&r, g) in &grads.emb {
        table[r as usize * e..(r as usize + 1) * e].copy_from_slice(g);
    }
    out.extend(table);
    let dense = |out: &mut Vec<f64>, g: Option<&crate::model::param::DenseGrad<f64>>, n_w: usize, n_b: usize| match g {
        Some(g) => {
            out.extend(&g.w);
            out.extend(&g.b);
        }
        None => out.extend(std::iter::repeat_n(0.0, n_w + n_b)),
    };
    dense(&mut out, grads.shared.as_ref(), net.shared.w.len(), net.shared.b.len());
    for (h, g) in net.heads.iter().zip(&grads.heads) {
        dense(&mut out, g.as_ref().map(|g| &g.hidden), h.hidden.w.len(), h.hidden.b.len());
        dense(&mut out, g.as_ref().map(|g| &g.out), h.out.w.len(), h.out.b.len());
    }
    if let Some(p) = &net.policy {
        dense(&mut out, grads.policy.as_ref(), p.w.len(), p.b.len());
    }
    out
}

fn head_loss(net: &Network<f64>, k: usize, objective: Objective, samples: &[(Vec<Feature>, u8)], frozen: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut pos = 0.0;
    let mut neg = 0.0;
    for ((x, y), &w) in samples.iter().zip(frozen) {
        let p = clamp_prob(net.predict_head(k, x));
        match objective {
            Objective::Bce | Objective::Fnw => {
                let l = if *y == 1 { -p.ln() } else { -(1.0 - p).ln() };
                total += w * l;
            }
            Objective::Pu { .. } => {
                if *y == 1 {
                    pos -= p.ln();
                    neg += (1.0 - p).ln();
                } else {
                    neg -= (1.0 - p).ln();
                }
            }
        }
    }
    if let Objective::Pu { non_negative } = objective {
        total = if non_negative && neg < 0.0 { pos } else { pos + neg };
    }
    total / samples.len() as f64
}

fn policy_loss(net: &Network<f64>, samples: &[(Vec<Feature>, usize)]) -> f64 {
    samples
        .iter()
        .map(|(x, best)| {
            let probs = net.policy_weights(&net.trunk(x));
            policy_loss_and_grad(&probs, *best).0
        })
        .sum::<f64>()
        / samples.len() as f64
}

/// Largest relative error between analytic and finite-difference partials
/// over every parameter the selected head's loss updates.
pub fn grad_check<F: Scalar>(net: &Network<F>, batch: &CheckBatch, which: HeadSelect) -> GradCheckReport {
    let mut wide: Network<f64> = net.cast();
    let names = wide.flat_names();
    match (batch, which) {
        (CheckBatch::Head { objective, samples }, HeadSelect::Task(k)) => {
            let xs: Vec<&[Feature]> = samples.iter().map(|(x, _)| x.as_slice()).collect();
            wide.nudge_kinks(&xs, which);
            let refs: Vec<(&[Feature], u8)> = samples.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
            let (grads, _) = wide.head_gradients(k, &refs, *objective);
            let analytic = flatten_gradients(&wide, &grads);
            let frozen: Vec<f64> = samples
                .iter()
                .map(|(x, y)| match objective {
                    Objective::Fnw => fnw_weight(wide.predict_head(k, x), *y),
                    _ => 1.0,
                })
                .collect();
            let policy_start = analytic.len() - wide.policy.as_ref().map_or(0, |p| p.w.len() + p.b.len());
            let indices = (0..policy_start).map(|i| (i, names[i].clone()));
            compare(&mut wide, indices, &analytic, |m| head_loss(m, k, *objective, samples, &frozen))
        }
        (CheckBatch::Policy { samples }, HeadSelect::Policy) => {
            let xs: Vec<&[Feature]> = samples.iter().map(|(x, _)| x.as_slice()).collect();
            wide.nudge_kinks(&xs, which);
            let refs: Vec<(&[Feature], usize)> = samples.iter().map(|(x, k)| (x.as_slice(), *k)).collect();
            let (grads, _) = wide.policy_gradients(&refs);
            let analytic = flatten_gradients(&wide, &grads);
            let p = wide.policy.as_ref().expect("policy head required");
            let start = analytic.len() - p.w.len() - p.b.len();
            let indices = (start..analytic.len()).map(|i| (i, names[i].clone()));
            compare(&mut wide, indices, &analytic, |m| policy_loss(m, samples))
        }
        _ => panic!("batch kind does not match the selected head"),
    }
}

pub fn grad_check_linear<F: Scalar>(
    model: &LinearModel<F>,
    objective: Objective,
    samples: &[(Vec<Feature>, u8)],
) -> GradCheckReport {
    let mut wide = LinearModel::<f64> {
        weights: model.weights.cast(),
        bias: model.bias.cast(),
    };
    let refs: Vec<(&[Feature], u8)> = samples.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
    let (_, analytic) = wide.gradient(&refs, objective);
    let frozen: Vec<f64> = samples
        .iter()
        .map(|(x, y)| match objective {
            Objective::Fnw => fnw_weight(wide.predict(x), *y),
            _ => 1.0,
        })
        .collect();
    let n = analytic.len();
    let loss = |m: &LinearModel<f64>| {
        let mut total = 0.0;
        let (mut pos, mut neg) = (0.0, 0.0);
        for ((x, y), &w) in samples.iter().zip(&frozen) {
            let p = clamp_prob(m.predict(x));
            match objective {
                Objective::Pu { .. } => {
                    if *y == 1 {
                        pos -= p.ln();
                        neg += (1.0 - p).ln();
                    } else {
                        neg -= (1.0 - p).ln();
                    }
                }
                _ => total += w * if *y == 1 { -p.ln() } else { -(1.0 - p).ln() },
            }
        }
        if let Objective::Pu { non_negative } = objective {
            total = if non_negative && neg < 0.0 { pos } else { pos + neg };
        }
        total / samples.len() as f64
    };
    compare(&mut wide, (0..n).map(|i| (i, format!("linear[{i}]"))), &analytic, loss)
}
