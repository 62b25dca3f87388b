use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::domain::Feature;
use crate::model::loss::{objective_terms, Objective};
use crate::model::param::{AdamConfig, Param};
use crate::scalar::{sigmoid, Scalar};

/// Sparse logistic regression over the global feature index space.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel<F> {
    pub weights: Param<F>,
    pub bias: Param<F>,
}

impl<F: Scalar> LinearModel<F> {
    pub fn new(dim: u32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            weights: Param::uniform(dim as usize, 0.1, &mut rng),
            bias: Param::zeros(1),
        }
    }

    pub fn logit(&self, x: &[Feature]) -> F {
        self.bias.value[0]
            + x.iter()
                .map(|f| self.weights.value[f.index as usize] * F::of(f.value as f64))
                .sum::<F>()
    }

    pub fn predict(&self, x: &[Feature]) -> F {
        sigmoid(self.logit(x))
    }

    /// Dense mean-loss gradient: weights first, then the bias.
    pub fn gradient(&self, batch: &[(&[Feature], u8)], objective: Objective) -> (F, Vec<F>) {
        let probs: Vec<F> = batch.iter().map(|(x, _)| self.predict(x)).collect();
        let labels: Vec<u8> = batch.iter().map(|(_, y)| *y).collect();
        let (loss, dlogits) = objective_terms(objective, &probs, &labels);
        let n = F::of(batch.len().max(1) as f64);
        let mut g = vec![F::zero(); self.weights.len() + 1];
        for ((x, _), &d) in batch.iter().zip(&dlogits) {
            for f in x.iter() {
                g[f.index as usize] += d * F::of(f.value as f64) / n;
            }
            g[self.weights.len()] += d / n;
        }
        (loss / n, g)
    }

    pub fn train(&mut self, batch: &[(&[Feature], u8)], objective: Objective, hp: &AdamConfig) {
        if batch.is_empty() {
            return;
        }
        let (_, g) = self.gradient(batch, objective);
        let (gw, gb) = g.split_at(self.weights.len());
        self.weights.adam_step(gw, hp);
        self.bias.adam_step(gb, hp);
    }
}
