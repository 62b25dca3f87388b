//! Synthetic delayed-feedback streams with a known conversion probability.
//!
//! Each record has one category per field. The conversion probability is a
//! logistic function of a dense weight vector indexed by the same global
//! feature indices the model sees, so `true_cvr` is exact ground truth.
//! Converting records draw a delay from an exponential mixture; a delay
//! longer than `d_max` discards the conversion.
//!
//! A field may be *rolling*: its categories are born one after another over
//! the horizon and each stays active for `lifetime` seconds, which mimics a
//! steady inflow of new ads. The conditional probability stays fixed; only
//! the mix of active categories moves.

use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{Feature, FeatureVec, ImpressionRecord, Timestamp};
use crate::error::{Error, Result};
use crate::scalar::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    /// Exponential rate in 1/seconds.
    pub rate: f64,
}

impl MixtureComponent {
    pub fn with_mean(weight: f64, mean: Timestamp) -> Self {
        Self {
            weight,
            rate: 1.0 / mean as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub cardinality: u32,
    /// Active lifetime of each category for a rolling field.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lifetime: Option<Timestamp>,
}

impl FieldSpec {
    pub fn fixed(cardinality: u32) -> Self {
        Self {
            cardinality,
            lifetime: None,
        }
    }

    pub fn rolling(cardinality: u32, lifetime: Timestamp) -> Self {
        Self {
            cardinality,
            lifetime: Some(lifetime),
        }
    }
}

/// Lets one field steer the delay mixture: category `c` moves `strength` of
/// the mixture mass onto component `c mod M`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayModulation {
    pub field: usize,
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    #[serde(default)]
    pub seed: u64,
    pub n_records: usize,
    pub horizon: Timestamp,
    pub d_max: Timestamp,
    /// Index range reserved for each field; field `f` owns
    /// `[f * n_buckets, (f + 1) * n_buckets)`.
    pub n_buckets: u32,
    pub fields: Vec<FieldSpec>,
    #[serde(default)]
    pub bias: f64,
    /// Standard deviation of generated weights when `true_weights` is empty.
    #[serde(default = "default_weight_scale")]
    pub weight_scale: f64,
    /// Dense oracle weights, one per global feature index. Drawn from the
    /// seed when empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub true_weights: Vec<f64>,
    pub delay_mixture: Vec<MixtureComponent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay_modulation: Option<DelayModulation>,
}

fn default_weight_scale() -> f64 {
    0.5
}

impl GeneratorConfig {
    pub fn dim(&self) -> u32 {
        self.fields.len() as u32 * self.n_buckets
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Generator(m));
        if self.n_records == 0 {
            return bad("n_records must be positive".into());
        }
        if self.horizon <= 0 || self.d_max <= 0 {
            return bad("horizon and d_max must be positive".into());
        }
        if self.n_buckets < 2 {
            return bad("n_buckets must be at least 2".into());
        }
        if self.fields.is_empty() {
            return bad("at least one field is required".into());
        }
        for (f, spec) in self.fields.iter().enumerate() {
            if spec.cardinality == 0 || spec.cardinality > self.n_buckets {
                return bad(format!(
                    "field {f}: cardinality {} must be in 1..={}",
                    spec.cardinality, self.n_buckets
                ));
            }
            if matches!(spec.lifetime, Some(l) if l <= 0) {
                return bad(format!("field {f}: lifetime must be positive"));
            }
        }
        if self.delay_mixture.is_empty() {
            return bad("delay_mixture must not be empty".into());
        }
        if self.delay_mixture.iter().any(|c| !(c.weight > 0.0) || !(c.rate > 0.0)) {
            return bad("mixture weights and rates must be positive".into());
        }
        let total: f64 = self.delay_mixture.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("mixture weights sum to {total}, expected 1"));
        }
        if let Some(m) = self.delay_modulation {
            if m.field >= self.fields.len() || !(0.0..=1.0).contains(&m.strength) {
                return bad("delay_modulation needs a valid field and strength in [0, 1]".into());
            }
        }
        if !self.true_weights.is_empty() && self.true_weights.len() != self.dim() as usize {
            return bad(format!(
                "true_weights has {} entries, expected {}",
                self.true_weights.len(),
                self.dim()
            ));
        }
        Ok(())
    }
}

impl GeneratorConfig {
    /// The feature-dependent-delay stream used by the examples and the
    /// acceptance runs: `days` days, `d_max` of 48 hours, four fields.
    ///
    /// - field 0: ad id; 300 ids, each live for 48 hours
    /// - field 1: delay class with 4 categories; category `c` puts 80% of its
    ///   conversions on delay component `c mod 3` (means of 20 min, 5 h, 20 h)
    /// - fields 2 and 3: fixed fields with 40 categories each
    pub fn feature_delay_preset(seed: u64, n_records: usize, days: Timestamp) -> Self {
        use crate::domain::{DAY, HOUR};
        Self {
            seed,
            n_records,
            horizon: days * DAY,
            d_max: 48 * HOUR,
            n_buckets: 512,
            fields: vec![
                FieldSpec::rolling(300, 48 * HOUR),
                FieldSpec::fixed(4),
                FieldSpec::fixed(40),
                FieldSpec::fixed(40),
            ],
            bias: -2.0,
            weight_scale: 0.7,
            true_weights: vec![],
            delay_mixture: vec![
                MixtureComponent::with_mean(0.4, 20 * 60),
                MixtureComponent::with_mean(0.3, 5 * HOUR),
                MixtureComponent::with_mean(0.3, 20 * HOUR),
            ],
            delay_modulation: Some(DelayModulation { field: 1, strength: 0.8 }),
        }
    }
}

/// A validated config with its oracle weights resolved.
#[derive(Debug, Clone)]
pub struct Generator {
    cfg: GeneratorConfig,
    weights: Vec<f64>,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let weights = match resolve_weights(&cfg) {
            Cow::Borrowed(w) => w.to_vec(),
            Cow::Owned(w) => w,
        };
        Ok(Self { cfg, weights })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dim(&self) -> u32 {
        self.cfg.dim()
    }

    pub fn true_cvr(&self, x: &[Feature]) -> f64 {
        true_cvr(x, self.cfg.bias, &self.weights)
    }

    /// Mixture weights governing the delay of a record with features `x`.
    pub fn mixture_weights(&self, x: &[Feature]) -> Vec<f64> {
        let base = self.cfg.delay_mixture.iter().map(|c| c.weight);
        match self.cfg.delay_modulation {
            None => base.collect(),
            Some(m) => {
                let n = self.cfg.delay_mixture.len();
                let category = x[m.field].index - m.field as u32 * self.cfg.n_buckets;
                let target = category as usize % n;
                base.enumerate()
                    .map(|(i, w)| (1.0 - m.strength) * w + if i == target { m.strength } else { 0.0 })
                    .collect()
            }
        }
    }

    /// `P(delay <= u | x, converts)` before truncation at `d_max`.
    pub fn delay_cdf(&self, x: &[Feature], u: f64) -> f64 {
        let w = self.mixture_weights(x);
        mixture_cdf(self.cfg.delay_mixture.iter().zip(w).map(|(c, w)| (w, c.rate)), u)
    }

    /// Draws a fresh stream. Identical configs give identical streams.
    pub fn generate(&self) -> Vec<ImpressionRecord> {
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut times: Vec<Timestamp> = (0..cfg.n_records)
            .map(|_| rng.random_range(0..cfg.horizon))
            .collect();
        times.sort_unstable();

        let exps: Vec<Exp<f64>> = cfg
            .delay_mixture
            .iter()
            .map(|c| Exp::new(c.rate).expect("validated rate"))
            .collect();

        let mut out = Vec::with_capacity(cfg.n_records);
        for (id, s) in times.into_iter().enumerate() {
            let features = self.sample_features(s, &mut rng);
            let p = self.true_cvr(&features);
            let conversion_time = if rng.random::<f64>() < p {
                let weights = self.mixture_weights(&features);
                let component = pick(&weights, rng.random::<f64>());
                let delay = exps[component].sample(&mut rng).floor();
                (delay <= cfg.d_max as f64).then(|| s + delay as Timestamp)
            } else {
                None
            };
            out.push(ImpressionRecord {
                id: id as u64,
                log_time: s,
                conversion_time,
                features,
                split: Default::default(),
            });
        }
        out
    }

    fn sample_features(&self, s: Timestamp, rng: &mut impl Rng) -> FeatureVec {
        let cfg = &self.cfg;
        cfg.fields
            .iter()
            .enumerate()
            .map(|(f, spec)| {
                let category = match spec.lifetime {
                    None => rng.random_range(0..spec.cardinality),
                    Some(lifetime) => {
                        let (lo, hi) = active_range(spec.cardinality, lifetime, cfg.horizon, s);
                        rng.random_range(lo..=hi)
                    }
                };
                Feature::one_hot(f as u32 * cfg.n_buckets + category)
            })
            .collect()
    }
}

/// Oracle conversion probability: logistic of the linear score.
pub fn true_cvr(x: &[Feature], bias: f64, weights: &[f64]) -> f64 {
    let score = bias
        + x.iter()
            .map(|f| weights[f.index as usize] * f.value as f64)
            .sum::<f64>();
    sigmoid(score)
}

/// CDF of an exponential mixture given `(weight, rate)` pairs.
pub fn mixture_cdf(components: impl IntoIterator<Item = (f64, f64)>, u: f64) -> f64 {
    components
        .into_iter()
        .map(|(w, r)| w * (1.0 - (-r * u).exp()))
        .sum()
}

fn resolve_weights(cfg: &GeneratorConfig) -> Cow<'_, [f64]> {
    if !cfg.true_weights.is_empty() {
        return Cow::Borrowed(&cfg.true_weights);
    }
    // Weights use their own stream so the record draws do not depend on them.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x05ee_d0f0_ac1e);
    let normal = Normal::new(0.0, cfg.weight_scale.max(0.0)).expect("finite scale");
    let mut w = vec![0.0; cfg.dim() as usize];
    for (f, spec) in cfg.fields.iter().enumerate() {
        let base = f * cfg.n_buckets as usize;
        for c in 0..spec.cardinality as usize {
            w[base + c] = normal.sample(&mut rng);
        }
    }
    Cow::Owned(w)
}

fn pick(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Categories of a rolling field alive at time `s`.
///
/// Category `j` is born at `-lifetime + j * (horizon + lifetime) / cardinality`
/// and stays active for `lifetime`.
fn active_range(cardinality: u32, lifetime: Timestamp, horizon: Timestamp, s: Timestamp) -> (u32, u32) {
    let span = (horizon + lifetime) as f64;
    let c = cardinality as f64;
    let newest = ((s + lifetime) as f64 * c / span).floor();
    let oldest = ((s as f64) * c / span).floor() + 1.0;
    let hi = newest.clamp(0.0, c - 1.0) as u32;
    let lo = oldest.clamp(0.0, hi as f64) as u32;
    (lo, hi)
}
