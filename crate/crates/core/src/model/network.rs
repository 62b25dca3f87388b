//! Shared-bottom network: feature embeddings feed one shared dense layer;
//! each task head adds a private dense layer and a sigmoid output, and the
//! optional policy head is a softmax over tasks on top of the shared layer.
//!
//! Gradient routing:
//! - a task loss flows through its own head, the shared layer and the
//!   embeddings;
//! - the policy loss updates the policy head only.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::Feature;
use crate::error::{Error, Result};
use crate::model::loss::{objective_terms, policy_loss_and_grad, Objective};
use crate::model::param::{AdamConfig, Dense, DenseGrad, Embedding};
use crate::scalar::{sigmoid, softmax, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    /// Rows of the embedding table (size of the global feature index space).
    pub dim: u32,
    pub n_fields: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub head_hidden: usize,
    pub n_heads: usize,
    pub policy: bool,
    pub leaky_slope: f64,
    pub seed: u64,
    /// Initial output-bias probability for every task head.
    pub prior_cvr: Option<f64>,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            dim: 0,
            n_fields: 0,
            embed_dim: 8,
            hidden: 128,
            head_hidden: 128,
            n_heads: 1,
            policy: false,
            leaky_slope: 0.01,
            seed: 0,
            prior_cvr: None,
        }
    }
}

impl NetConfig {
    pub fn input_width(&self) -> usize {
        self.n_fields * self.embed_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead<F> {
    pub hidden: Dense<F>,
    pub out: Dense<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<F> {
    cfg: NetConfig,
    pub emb: Embedding<F>,
    pub shared: Dense<F>,
    pub heads: Vec<TaskHead<F>>,
    pub policy: Option<Dense<F>>,
}

/// Activations of the shared bottom for one input.
#[derive(Debug, Clone, Default)]
pub struct TrunkTrace<F> {
    pub input: Vec<F>,
    pub pre: Vec<F>,
    pub out: Vec<F>,
}

#[derive(Debug, Clone, Default)]
pub struct HeadTrace<F> {
    pub pre: Vec<F>,
    pub out: Vec<F>,
    pub logit: F,
    pub prob: F,
}

/// Everything one forward pass yields.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBundle<F> {
    pub task_preds: Vec<F>,
    pub policy_weights: Vec<F>,
    pub ftp_pred: F,
}

impl<F: Scalar> PredictionBundle<F> {
    pub fn from_parts(task_preds: Vec<F>, policy_weights: Vec<F>) -> Self {
        let ftp_pred = aggregate(&task_preds, &policy_weights);
        Self {
            task_preds,
            policy_weights,
            ftp_pred,
        }
    }
}

/// Policy-weighted average of task predictions.
pub fn aggregate<F: Scalar>(task_preds: &[F], weights: &[F]) -> F {
    task_preds.iter().zip(weights).map(|(&p, &g)| p * g).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad<F> {
    pub hidden: DenseGrad<F>,
    pub out: DenseGrad<F>,
}

/// Gradients of a batch, allocated only for the parts a loss reached.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F> {
    pub emb: BTreeMap<u32, Vec<F>>,
    pub shared: Option<DenseGrad<F>>,
    pub heads: Vec<Option<HeadGrad<F>>>,
    pub policy: Option<DenseGrad<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn new(n_heads: usize) -> Self {
        Self {
            emb: BTreeMap::new(),
            shared: None,
            heads: vec![None; n_heads],
            policy: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.emb.is_empty() && self.shared.is_none() && self.heads.iter().all(Option::is_none) && self.policy.is_none()
    }

    fn scale(&mut self, s: F) {
        for g in self.emb.values_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
        if let Some(g) = &mut self.shared {
            g.scale(s);
        }
        for h in self.heads.iter_mut().flatten() {
            h.hidden.scale(s);
            h.out.scale(s);
        }
        if let Some(g) = &mut self.policy {
            g.scale(s);
        }
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        let bad = |v: &[F]| v.iter().any(|x| !x.is_finite());
        if let Some((r, _)) = self.emb.iter().find(|(_, g)| bad(g)) {
            return Some(format!("embedding[{r}]"));
        }
        if let Some(g) = &self.shared {
            if bad(&g.w) || bad(&g.b) {
                return Some("shared".into());
            }
        }
        for (k, h) in self.heads.iter().enumerate() {
            if let Some(h) = h {
                if bad(&h.hidden.w) || bad(&h.hidden.b) {
                    return Some(format!("head[{k}].hidden"));
                }
                if bad(&h.out.w) || bad(&h.out.b) {
                    return Some(format!("head[{k}].out"));
                }
            }
        }
        if let Some(g) = &self.policy {
            if bad(&g.w) || bad(&g.b) {
                return Some("policy".into());
            }
        }
        None
    }
}

/// Per-batch training summary.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchStats {
    pub n: usize,
    pub loss_sum: f64,
}

impl BatchStats {
    pub fn merge(&mut self, other: BatchStats) {
        self.n += other.n;
        self.loss_sum += other.loss_sum;
    }

    pub fn mean_loss(&self) -> Option<f64> {
        (self.n > 0).then(|| self.loss_sum / self.n as f64)
    }
}

fn leaky<F: Scalar>(z: F, slope: F) -> F {
    if z > F::zero() {
        z
    } else {
        slope * z
    }
}

fn leaky_grad<F: Scalar>(z: F, slope: F) -> F {
    if z > F::zero() {
        F::one()
    } else {
        slope
    }
}

impl<F: Scalar> Network<F> {
    pub fn new(cfg: NetConfig) -> Self {
        assert!(cfg.dim > 0 && cfg.n_fields > 0 && cfg.n_heads > 0, "network needs inputs and at least one head");
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let emb = Embedding::new(cfg.dim as usize, cfg.embed_dim, &mut rng);
        let shared = Dense::new(cfg.input_width(), cfg.hidden, &mut rng);
        let prior_logit = cfg.prior_cvr.map(|p| {
            let p = p.clamp(1e-6, 1.0 - 1e-6);
            (p / (1.0 - p)).ln()
        });
        let heads = (0..cfg.n_heads)
            .map(|_| {
                let hidden = Dense::new(cfg.hidden, cfg.head_hidden, &mut rng);
                let mut out = Dense::new(cfg.head_hidden, 1, &mut rng);
                if let Some(l) = prior_logit {
                    out.b.value[0] = F::of(l);
                }
                TaskHead { hidden, out }
            })
            .collect();
        let policy = cfg.policy.then(|| Dense::new(cfg.hidden, cfg.n_heads, &mut rng));
        Self {
            cfg,
            emb,
            shared,
            heads,
            policy,
        }
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    /// Zeroes every head's output layer and the policy head, so each task
    /// predicts 0.5 and the policy is uniform.
    pub fn zero_heads(&mut self) {
        for h in &mut self.heads {
            h.out = Dense::zeroed(h.out.n_in, 1);
        }
        if let Some(p) = &mut self.policy {
            *p = Dense::zeroed(p.n_in, p.n_out);
        }
    }

    pub fn cast<G: Scalar>(&self) -> Network<G> {
        Network {
            cfg: self.cfg.clone(),
            emb: self.emb.cast(),
            shared: self.shared.cast(),
            heads: self
                .heads
                .iter()
                .map(|h| TaskHead {
                    hidden: h.hidden.cast(),
                    out: h.out.cast(),
                })
                .collect(),
            policy: self.policy.as_ref().map(Dense::cast),
        }
    }

    fn slope(&self) -> F {
        F::of(self.cfg.leaky_slope)
    }

    pub fn check_input(&self, x: &[Feature]) -> Result<()> {
        if x.len() != self.cfg.n_fields {
            return Err(Error::Shape(format!(
                "expected {} features, got {}",
                self.cfg.n_fields,
                x.len()
            )));
        }
        if let Some(f) = x.iter().find(|f| f.index >= self.cfg.dim) {
            return Err(Error::Shape(format!(
                "feature index {} outside embedding table of {} rows",
                f.index, self.cfg.dim
            )));
        }
        Ok(())
    }

    pub fn trunk(&self, x: &[Feature]) -> TrunkTrace<F> {
        debug_assert_eq!(x.len(), self.cfg.n_fields);
        let e = self.cfg.embed_dim;
        let mut input = Vec::with_capacity(self.cfg.input_width());
        for f in x {
            let v = F::of(f.value as f64);
            input.extend(self.emb.row(f.index).iter().map(|&w| w * v));
        }
        debug_assert_eq!(input.len(), x.len() * e);
        let mut pre = Vec::with_capacity(self.cfg.hidden);
        self.shared.forward(&input, &mut pre);
        let slope = self.slope();
        let out = pre.iter().map(|&z| leaky(z, slope)).collect();
        TrunkTrace { input, pre, out }
    }

    pub fn head(&self, k: usize, trunk: &TrunkTrace<F>) -> HeadTrace<F> {
        let h = &self.heads[k];
        let mut pre = Vec::with_capacity(h.hidden.n_out);
        h.hidden.forward(&trunk.out, &mut pre);
        let slope = self.slope();
        let out: Vec<F> = pre.iter().map(|&z| leaky(z, slope)).collect();
        let mut logit = Vec::with_capacity(1);
        h.out.forward(&out, &mut logit);
        let logit = logit[0];
        HeadTrace {
            pre,
            out,
            logit,
            prob: sigmoid(logit),
        }
    }

    /// Policy softmax over tasks; uniform when the network has no policy head.
    pub fn policy_weights(&self, trunk: &TrunkTrace<F>) -> Vec<F> {
        match &self.policy {
            Some(p) => {
                let mut logits = Vec::with_capacity(p.n_out);
                p.forward(&trunk.out, &mut logits);
                let mut probs = Vec::with_capacity(p.n_out);
                softmax(&logits, &mut probs);
                probs
            }
            None => vec![F::one() / F::of(self.heads.len() as f64); self.heads.len()],
        }
    }

    pub fn forward(&self, x: &[Feature]) -> PredictionBundle<F> {
        let trunk = self.trunk(x);
        let task_preds = (0..self.heads.len()).map(|k| self.head(k, &trunk).prob).collect();
        PredictionBundle::from_parts(task_preds, self.policy_weights(&trunk))
    }

    pub fn predict_head(&self, k: usize, x: &[Feature]) -> F {
        self.head(k, &self.trunk(x)).prob
    }

    /// Backpropagates `dlogit` through head `k`, the shared layer and the
    /// embedding rows of `x`.
    pub fn backward_head(
        &self,
        k: usize,
        x: &[Feature],
        trunk: &TrunkTrace<F>,
        head: &HeadTrace<F>,
        dlogit: F,
        grads: &mut Gradients<F>,
    ) {
        let slope = self.slope();
        let h = &self.heads[k];
        let hg = grads.heads[k].get_or_insert_with(|| HeadGrad {
            hidden: DenseGrad::zeros_like(&h.hidden),
            out: DenseGrad::zeros_like(&h.out),
        });
        let mut d_out = Vec::new();
        h.out.backward(&head.out, &[dlogit], &mut hg.out, Some(&mut d_out));
        let d_pre: Vec<F> = d_out
            .iter()
            .zip(&head.pre)
            .map(|(&d, &z)| d * leaky_grad(z, slope))
            .collect();
        let mut d_trunk = Vec::new();
        h.hidden.backward(&trunk.out, &d_pre, &mut hg.hidden, Some(&mut d_trunk));

        let d_trunk_pre: Vec<F> = d_trunk
            .iter()
            .zip(&trunk.pre)
            .map(|(&d, &z)| d * leaky_grad(z, slope))
            .collect();
        let sg = grads
            .shared
            .get_or_insert_with(|| DenseGrad::zeros_like(&self.shared));
        let mut d_input = Vec::new();
        self.shared.backward(&trunk.input, &d_trunk_pre, sg, Some(&mut d_input));

        let e = self.cfg.embed_dim;
        for (i, f) in x.iter().enumerate() {
            let v = F::of(f.value as f64);
            let row = grads.emb.entry(f.index).or_insert_with(|| vec![F::zero(); e]);
            for (g, &d) in row.iter_mut().zip(&d_input[i * e..(i + 1) * e]) {
                *g += d * v;
            }
        }
    }

    /// Backpropagates policy-logit gradients into the policy head only.
    pub fn backward_policy(&self, trunk: &TrunkTrace<F>, dlogits: &[F], grads: &mut Gradients<F>) {
        let p = self.policy.as_ref().expect("network has no policy head");
        let pg = grads.policy.get_or_insert_with(|| DenseGrad::zeros_like(p));
        p.backward(&trunk.out, dlogits, pg, None);
    }

    /// Applies one Adam step to every tensor present in `grads`.
    pub fn apply(&mut self, grads: &Gradients<F>, hp: &AdamConfig) -> Result<()> {
        if let Some(tensor) = grads.first_non_finite() {
            return Err(Error::NonFinite { tensor });
        }
        self.emb
            .sparse_adam_step(grads.emb.iter().map(|(&r, g)| (r, g.as_slice())), hp);
        if let Some(g) = &grads.shared {
            self.shared.w.adam_step(&g.w, hp);
            self.shared.b.adam_step(&g.b, hp);
        }
        for (h, g) in self.heads.iter_mut().zip(&grads.heads) {
            if let Some(g) = g {
                h.hidden.w.adam_step(&g.hidden.w, hp);
                h.hidden.b.adam_step(&g.hidden.b, hp);
                h.out.w.adam_step(&g.out.w, hp);
                h.out.b.adam_step(&g.out.b, hp);
            }
        }
        if let (Some(p), Some(g)) = (&mut self.policy, &grads.policy) {
            p.w.adam_step(&g.w, hp);
            p.b.adam_step(&g.b, hp);
        }
        Ok(())
    }

    /// Mean-loss gradients of `objective` on head `k` over a batch.
    pub fn head_gradients(&self, k: usize, batch: &[(&[Feature], u8)], objective: Objective) -> (Gradients<F>, BatchStats) {
        let mut grads = Gradients::new(self.heads.len());
        if batch.is_empty() {
            return (grads, BatchStats::default());
        }
        let traces: Vec<_> = batch
            .iter()
            .map(|(x, _)| {
                let t = self.trunk(x);
                let h = self.head(k, &t);
                (t, h)
            })
            .collect();
        let probs: Vec<F> = traces.iter().map(|(_, h)| h.prob).collect();
        let labels: Vec<u8> = batch.iter().map(|(_, y)| *y).collect();
        let (loss, dlogits) = objective_terms(objective, &probs, &labels);
        for (((x, _), (t, h)), &d) in batch.iter().zip(&traces).zip(&dlogits) {
            self.backward_head(k, x, t, h, d, &mut grads);
        }
        grads.scale(F::one() / F::of(batch.len() as f64));
        let stats = BatchStats {
            n: batch.len(),
            loss_sum: loss.as_f64(),
        };
        (grads, stats)
    }

    pub fn policy_gradients(&self, batch: &[(&[Feature], usize)]) -> (Gradients<F>, BatchStats) {
        let mut grads = Gradients::new(self.heads.len());
        let mut loss_sum = 0.0;
        for (x, best) in batch {
            let t = self.trunk(x);
            let probs = self.policy_weights(&t);
            let (loss, dlogits) = policy_loss_and_grad(&probs, *best);
            loss_sum += loss.as_f64();
            self.backward_policy(&t, &dlogits, &mut grads);
        }
        if !batch.is_empty() {
            grads.scale(F::one() / F::of(batch.len() as f64));
        }
        (grads, BatchStats {
            n: batch.len(),
            loss_sum,
        })
    }

    /// One optimizer step of `objective` on head `k`. Empty batches are a no-op.
    pub fn train_head(
        &mut self,
        k: usize,
        batch: &[(&[Feature], u8)],
        objective: Objective,
        hp: &AdamConfig,
    ) -> Result<BatchStats> {
        if batch.is_empty() {
            return Ok(BatchStats::default());
        }
        let (grads, stats) = self.head_gradients(k, batch, objective);
        self.apply(&grads, hp)?;
        Ok(stats)
    }

    pub fn train_policy(&mut self, batch: &[(&[Feature], usize)], hp: &AdamConfig) -> Result<BatchStats> {
        if batch.is_empty() {
            return Ok(BatchStats::default());
        }
        let (grads, stats) = self.policy_gradients(batch);
        self.apply(&grads, hp)?;
        Ok(stats)
    }
}
