use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::{dot, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient, added to the gradient before the moment updates.
    pub l2: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2: 1e-6,
        }
    }
}

/// Bias-corrected Adam update of `w` in place.
pub(crate) fn adam_update<F: Scalar>(
    w: &mut [F],
    m: &mut [F],
    v: &mut [F],
    g: &[F],
    step: u32,
    hp: &AdamConfig,
) {
    let (b1, b2) = (F::of(hp.beta1), F::of(hp.beta2));
    let (lr, eps, l2) = (F::of(hp.lr), F::of(hp.eps), F::of(hp.l2));
    let c1 = F::one() - F::of(hp.beta1.powi(step as i32));
    let c2 = F::one() - F::of(hp.beta2.powi(step as i32));
    for i in 0..w.len() {
        let gi = g[i] + l2 * w[i];
        m[i] = b1 * m[i] + (F::one() - b1) * gi;
        v[i] = b2 * v[i] + (F::one() - b2) * gi * gi;
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        w[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// A dense tensor with its Adam moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub value: Vec<F>,
    m: Vec<F>,
    v: Vec<F>,
    step: u32,
}

impl<F: Scalar> Param<F> {
    pub fn zeros(n: usize) -> Self {
        Self::from_values(vec![F::zero(); n])
    }

    pub fn from_values(value: Vec<F>) -> Self {
        let n = value.len();
        Self {
            value,
            m: vec![F::zero(); n],
            v: vec![F::zero(); n],
            step: 0,
        }
    }

    pub fn uniform(n: usize, bound: f64, rng: &mut impl Rng) -> Self {
        Self::from_values((0..n).map(|_| F::of(rng.random_range(-bound..=bound))).collect())
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn step(&self) -> u32 {
        self.step
    }

    pub fn adam_step(&mut self, grad: &[F], hp: &AdamConfig) {
        assert_eq!(grad.len(), self.value.len(), "gradient shape mismatch");
        self.step += 1;
        adam_update(&mut self.value, &mut self.m, &mut self.v, grad, self.step, hp);
    }

    pub(crate) fn cast<G: Scalar>(&self) -> Param<G> {
        let c = |x: &Vec<F>| x.iter().map(|&v| G::of(v.as_f64())).collect();
        Param {
            value: c(&self.value),
            m: c(&self.m),
            v: c(&self.v),
            step: self.step,
        }
    }
}

/// Fully connected layer, weights stored row-major as `[n_out][n_in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F> {
    pub n_in: usize,
    pub n_out: usize,
    pub w: Param<F>,
    pub b: Param<F>,
}

impl<F: Scalar> Dense<F> {
    pub fn new(n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (n_in as f64).sqrt();
        Self {
            n_in,
            n_out,
            w: Param::uniform(n_in * n_out, bound, rng),
            b: Param::zeros(n_out),
        }
    }

    pub fn zeroed(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            w: Param::zeros(n_in * n_out),
            b: Param::zeros(n_out),
        }
    }

    pub fn forward(&self, x: &[F], out: &mut Vec<F>) {
        debug_assert_eq!(x.len(), self.n_in);
        out.clear();
        out.extend(
            self.w
                .value
                .chunks_exact(self.n_in)
                .zip(&self.b.value)
                .map(|(row, &b)| b + dot(row, x)),
        );
    }

    /// Accumulates parameter gradients for upstream gradient `dy` and, when
    /// `dx` is given, writes the input gradient.
    pub fn backward(&self, x: &[F], dy: &[F], grad: &mut DenseGrad<F>, dx: Option<&mut Vec<F>>) {
        for (j, &d) in dy.iter().enumerate() {
            if d == F::zero() {
                continue;
            }
            grad.b[j] += d;
            let row = &mut grad.w[j * self.n_in..(j + 1) * self.n_in];
            for (g, &xi) in row.iter_mut().zip(x) {
                *g += d * xi;
            }
        }
        if let Some(dx) = dx {
            dx.clear();
            dx.resize(self.n_in, F::zero());
            for (row, &d) in self.w.value.chunks_exact(self.n_in).zip(dy) {
                if d == F::zero() {
                    continue;
                }
                for (o, &w) in dx.iter_mut().zip(row) {
                    *o += d * w;
                }
            }
        }
    }

    pub(crate) fn cast<G: Scalar>(&self) -> Dense<G> {
        Dense {
            n_in: self.n_in,
            n_out: self.n_out,
            w: self.w.cast(),
            b: self.b.cast(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad<F> {
    pub w: Vec<F>,
    pub b: Vec<F>,
}

impl<F: Scalar> DenseGrad<F> {
    pub fn zeros_like(d: &Dense<F>) -> Self {
        Self {
            w: vec![F::zero(); d.w.len()],
            b: vec![F::zero(); d.b.len()],
        }
    }

    pub(crate) fn scale(&mut self, s: F) {
        self.w.iter_mut().chain(self.b.iter_mut()).for_each(|g| *g *= s);
    }
}

/// Embedding table with lazily updated rows; each row keeps its own step
/// counter so bias correction matches the number of times it was touched.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<F> {
    pub rows: usize,
    pub dim: usize,
    pub table: Vec<F>,
    m: Vec<F>,
    v: Vec<F>,
    steps: Vec<u32>,
}

impl<F: Scalar> Embedding<F> {
    pub fn new(rows: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let table = (0..rows * dim).map(|_| F::of(rng.random_range(-bound..=bound))).collect();
        Self::from_table(rows, dim, table)
    }

    pub fn from_table(rows: usize, dim: usize, table: Vec<F>) -> Self {
        assert_eq!(table.len(), rows * dim);
        Self {
            rows,
            dim,
            table,
            m: vec![F::zero(); rows * dim],
            v: vec![F::zero(); rows * dim],
            steps: vec![0; rows],
        }
    }

    pub fn row(&self, r: u32) -> &[F] {
        let r = r as usize;
        &self.table[r * self.dim..(r + 1) * self.dim]
    }

    /// Adam on the touched rows only.
    pub fn sparse_adam_step<'a>(&mut self, rows: impl IntoIterator<Item = (u32, &'a [F])>, hp: &AdamConfig) {
        for (r, g) in rows {
            let r = r as usize;
            let span = r * self.dim..(r + 1) * self.dim;
            self.steps[r] += 1;
            adam_update(
                &mut self.table[span.clone()],
                &mut self.m[span.clone()],
                &mut self.v[span],
                g,
                self.steps[r],
                hp,
            );
        }
    }

    pub(crate) fn cast<G: Scalar>(&self) -> Embedding<G> {
        let c = |x: &Vec<F>| x.iter().map(|&v| G::of(v.as_f64())).collect();
        Embedding {
            rows: self.rows,
            dim: self.dim,
            table: c(&self.table),
            m: c(&self.m),
            v: c(&self.v),
            steps: self.steps.clone(),
        }
    }
}
