//! Trainable methods behind one interface: FTP, the prophets, Waiting(d) and
//! the fake-negative baselines PU, FNW and FNC.

use std::cell::Cell;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{Feature, ImpressionRecord, TaskSchedule, Timestamp, DAY, HOUR};
use crate::error::{Error, Result};
use crate::model::loss::{fnc_calibrate_flagged, Objective};
use crate::model::{AdamConfig, NetConfig, Network};
use crate::pipelines::{ExtendedLog, ExtendedLogEntry, FakeNegativePipeline, MaturedPipeline, OraclePipeline};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearnerKind {
    /// Multi-task model over the task schedule plus the aggregation policy.
    Ftp,
    /// Trained on the `d_max`-matured stream.
    Prophet,
    /// Trained on every past record with its final label. Reads the future.
    ProphetStar,
    Waiting {
        delay: Timestamp,
    },
    Pu {
        #[serde(default)]
        non_negative: bool,
    },
    Fnw,
    Fnc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyper {
    #[serde(flatten)]
    pub adam: AdamConfig,
    /// Learning rate of the policy head; `lr` when unset.
    pub policy_lr: Option<f64>,
    /// Passes over each matured policy batch.
    pub policy_epochs: usize,
    pub batch_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub head_hidden: usize,
    pub leaky_slope: f64,
    pub prior_cvr: Option<f64>,
}

impl Default for Hyper {
    fn default() -> Self {
        let net = NetConfig::default();
        Self {
            adam: AdamConfig::default(),
            policy_lr: None,
            policy_epochs: 1,
            batch_size: 256,
            embed_dim: net.embed_dim,
            hidden: net.hidden,
            head_hidden: net.head_hidden,
            leaky_slope: net.leaky_slope,
            prior_cvr: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(flatten)]
    pub kind: LearnerKind,
    #[serde(default)]
    pub hyper: Hyper,
}

/// Short human form of a duration: `7d`, `6h` or `90s`.
pub fn format_duration(d: Timestamp) -> String {
    if d % DAY == 0 {
        format!("{}d", d / DAY)
    } else if d % HOUR == 0 {
        format!("{}h", d / HOUR)
    } else {
        format!("{d}s")
    }
}

impl LearnerSpec {
    pub fn new(kind: LearnerKind) -> Self {
        Self {
            name: None,
            kind,
            hyper: Hyper::default(),
        }
    }

    pub fn with_hyper(mut self, hyper: Hyper) -> Self {
        self.hyper = hyper;
        self
    }

    pub fn display_name(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        match self.kind {
            LearnerKind::Ftp => "ftp".into(),
            LearnerKind::Prophet => "prophet".into(),
            LearnerKind::ProphetStar => "prophet_star".into(),
            LearnerKind::Waiting { delay } => format!("waiting_{}", format_duration(delay)),
            LearnerKind::Pu { non_negative: false } => "pu".into(),
            LearnerKind::Pu { non_negative: true } => "nnpu".into(),
            LearnerKind::Fnw => "fnw".into(),
            LearnerKind::Fnc => "fnc".into(),
        }
    }

    pub fn validate(&self, d_max: Timestamp) -> Result<()> {
        let bad = |m: String| Err(Error::LearnerSpec(m));
        let name = self.display_name();
        if let LearnerKind::Waiting { delay } = self.kind {
            if delay <= 0 || delay > d_max {
                return bad(format!("{name}: waiting delay {delay} must lie in (0, d_max = {d_max}]"));
            }
        }
        let h = &self.hyper;
        if h.batch_size == 0 {
            return bad(format!("{name}: batch_size must be positive"));
        }
        if h.policy_epochs == 0 {
            return bad(format!("{name}: policy_epochs must be positive"));
        }
        if h.embed_dim == 0 || h.hidden == 0 || h.head_hidden == 0 {
            return bad(format!("{name}: layer widths must be positive"));
        }
        if !(h.adam.lr > 0.0) || h.policy_lr.is_some_and(|lr| !(lr > 0.0)) {
            return bad(format!("{name}: learning rates must be positive"));
        }
        if let Some(p) = h.prior_cvr {
            if !(p > 0.0 && p < 1.0) {
                return bad(format!("{name}: prior_cvr must lie in (0, 1), got {p}"));
            }
        }
        Ok(())
    }
}

/// What a learner needs to know about the stream it will see.
#[derive(Debug, Clone)]
pub struct LearnerContext {
    pub dim: u32,
    pub n_fields: usize,
    pub schedule: TaskSchedule,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct UpdateStats {
    pub examples: usize,
    pub loss_sum: f64,
    pub policy_examples: usize,
    pub policy_loss_sum: f64,
}

impl UpdateStats {
    pub fn merge(&mut self, o: UpdateStats) {
        self.examples += o.examples;
        self.loss_sum += o.loss_sum;
        self.policy_examples += o.policy_examples;
        self.policy_loss_sum += o.policy_loss_sum;
    }
}

/// The interface the simulator drives. `update` receives the record stream
/// as visible at `tau`; `observe` is called once per record when it is
/// logged, after that step's update.
pub trait Learner {
    fn name(&self) -> &str;
    fn kind(&self) -> LearnerKind;

    /// Whether the learner may read labels that are not yet observable.
    fn sees_future(&self) -> bool {
        false
    }

    fn update(&mut self, tau: Timestamp, records: &[ImpressionRecord]) -> Result<UpdateStats>;

    fn predict(&self, x: &[Feature]) -> f64;

    fn observe(&mut self, _pos: usize, _record: &ImpressionRecord) -> Result<()> {
        Ok(())
    }

    /// Writes the learner's parameters under `dir`.
    fn save(&self, dir: &Path) -> Result<()>;

    fn extended_log(&self) -> Option<&ExtendedLog> {
        None
    }

    /// Task the current policy weights most.
    fn policy_argmax(&self, _x: &[Feature]) -> Option<usize> {
        None
    }

    /// Predictions clamped by a calibration step so far.
    fn clamp_count(&self) -> usize {
        0
    }
}

fn net_config(ctx: &LearnerContext, h: &Hyper, n_heads: usize, policy: bool, seed: u64) -> NetConfig {
    NetConfig {
        dim: ctx.dim,
        n_fields: ctx.n_fields,
        embed_dim: h.embed_dim,
        hidden: h.hidden,
        head_hidden: h.head_hidden,
        n_heads,
        policy,
        leaky_slope: h.leaky_slope,
        seed,
        prior_cvr: h.prior_cvr,
    }
}

/// Trains head `k` on labelled stream positions in mini-batches.
fn train_positions<F: Scalar>(
    net: &mut Network<F>,
    k: usize,
    records: &[ImpressionRecord],
    batch: &[(usize, u8)],
    objective: Objective,
    hp: &AdamConfig,
    batch_size: usize,
) -> Result<UpdateStats> {
    let mut stats = UpdateStats::default();
    let mut xs: Vec<(&[Feature], u8)> = Vec::with_capacity(batch_size);
    for chunk in batch.chunks(batch_size) {
        xs.clear();
        xs.extend(chunk.iter().map(|&(pos, y)| (records[pos].features.as_slice(), y)));
        let s = net.train_head(k, &xs, objective, hp)?;
        stats.examples += s.n;
        stats.loss_sum += s.loss_sum;
    }
    Ok(stats)
}

enum Source {
    Matured(MaturedPipeline),
    Oracle(OraclePipeline),
    FakeNegative(FakeNegativePipeline),
}

impl Source {
    fn release(&mut self, records: &[ImpressionRecord], tau: Timestamp) -> Result<Vec<(usize, u8)>> {
        match self {
            Source::Matured(p) => p.release_for_task(records, tau),
            Source::Oracle(p) => p.release(records, tau),
            Source::FakeNegative(p) => Ok(p.release(records, tau)?.into_iter().map(|e| (e.pos, e.label)).collect()),
        }
    }
}

/// One sigmoid head fed by one pipeline: the prophets, Waiting(d) and the
/// fake-negative baselines.
pub struct SingleHeadLearner<F> {
    name: String,
    kind: LearnerKind,
    source: Source,
    objective: Objective,
    net: Network<F>,
    hyper: Hyper,
    clamped: Cell<usize>,
}

impl<F: Scalar> SingleHeadLearner<F> {
    pub fn network(&self) -> &Network<F> {
        &self.net
    }
}

impl<F: Scalar> Learner for SingleHeadLearner<F> {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> LearnerKind {
        self.kind
    }

    fn sees_future(&self) -> bool {
        matches!(self.source, Source::Oracle(_))
    }

    fn update(&mut self, tau: Timestamp, records: &[ImpressionRecord]) -> Result<UpdateStats> {
        let batch = self.source.release(records, tau)?;
        train_positions(
            &mut self.net,
            0,
            records,
            &batch,
            self.objective,
            &self.hyper.adam,
            self.hyper.batch_size,
        )
    }

    fn predict(&self, x: &[Feature]) -> f64 {
        let q = self.net.predict_head(0, x).as_f64();
        if self.kind == LearnerKind::Fnc {
            let (p, clamped) = fnc_calibrate_flagged(q);
            if clamped {
                self.clamped.set(self.clamped.get() + 1);
            }
            p
        } else {
            q
        }
    }

    fn save(&self, dir: &Path) -> Result<()> {
        self.net.save(&dir.join(format!("{}.ckpt", self.name)))
    }

    fn clamp_count(&self) -> usize {
        self.clamped.get()
    }
}

/// Follow the Prophet: K task heads on nested maturity windows, a
/// standalone prophet on the `d_max` window, and a policy head trained to
/// pick the task whose online prediction was closest to the prophecy.
pub struct FtpLearner<F> {
    name: String,
    tasks: Vec<MaturedPipeline>,
    net: Network<F>,
    prophet: Network<F>,
    extlog: ExtendedLog,
    hyper: Hyper,
    policy_hp: AdamConfig,
}

fn train_policy<F: Scalar>(
    net: &mut Network<F>,
    batch: &[(&[Feature], usize)],
    hp: &AdamConfig,
    batch_size: usize,
    epochs: usize,
) -> Result<UpdateStats> {
    let mut stats = UpdateStats::default();
    for _ in 0..epochs {
        for chunk in batch.chunks(batch_size) {
            let s = net.train_policy(chunk, hp)?;
            stats.policy_examples += s.n;
            stats.policy_loss_sum += s.loss_sum;
        }
    }
    Ok(stats)
}

impl<F: Scalar> FtpLearner<F> {
    pub fn new(name: String, ctx: &LearnerContext, hyper: Hyper) -> Self {
        let k = ctx.schedule.len();
        let policy_hp = AdamConfig {
            lr: hyper.policy_lr.unwrap_or(hyper.adam.lr),
            ..hyper.adam
        };
        Self {
            name,
            tasks: ctx.schedule.delays().iter().map(|&d| MaturedPipeline::new(d)).collect(),
            net: Network::new(net_config(ctx, &hyper, k, true, ctx.seed)),
            prophet: Network::new(net_config(ctx, &hyper, 1, false, ctx.seed ^ 0x9e37_79b9)),
            extlog: ExtendedLog::new(ctx.schedule.d_max()),
            hyper,
            policy_hp,
        }
    }

    pub fn network(&self) -> &Network<F> {
        &self.net
    }

    pub fn prophet(&self) -> &Network<F> {
        &self.prophet
    }

    /// Offline retraining of the policy head on labelled entries of a
    /// persisted extended log. Unlabelled and eval-split entries are skipped.
    pub fn replay_policy(&mut self, entries: &[ExtendedLogEntry], epochs: usize) -> Result<UpdateStats> {
        let batch: Vec<(&[Feature], usize)> = entries
            .iter()
            .filter(|e| e.split == crate::domain::Split::Train)
            .filter_map(|e| Some((e.features.as_slice(), e.best_task?)))
            .collect();
        train_policy(&mut self.net, &batch, &self.policy_hp, self.hyper.batch_size, epochs)
    }
}

impl<F: Scalar> Learner for FtpLearner<F> {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> LearnerKind {
        LearnerKind::Ftp
    }

    fn update(&mut self, tau: Timestamp, records: &[ImpressionRecord]) -> Result<UpdateStats> {
        let (bs, hp) = (self.hyper.batch_size, &self.hyper.adam);
        let mut stats = UpdateStats::default();
        let last = self.tasks.len() - 1;
        for k in 0..self.tasks.len() {
            let batch = self.tasks[k].release_for_task(records, tau)?;
            stats.merge(train_positions(&mut self.net, k, records, &batch, Objective::Bce, hp, bs)?);
            if k == last {
                // The d_max window is exactly the prophet's training stream.
                train_positions(&mut self.prophet, 0, records, &batch, Objective::Bce, hp, bs)?;
            }
        }
        let prophet = &self.prophet;
        let consumed = self
            .extlog
            .policy_batch(records, tau, |x| prophet.predict_head(0, x).as_f64())?;
        let entries = self.extlog.entries();
        let batch: Vec<(&[Feature], usize)> = consumed
            .iter()
            .map(|&i| &entries[i])
            .filter(|e| e.split == crate::domain::Split::Train)
            .map(|e| (e.features.as_slice(), e.best_task.expect("consumed entries are labelled")))
            .collect();
        stats.merge(train_policy(&mut self.net, &batch, &self.policy_hp, bs, self.hyper.policy_epochs)?);
        Ok(stats)
    }

    fn predict(&self, x: &[Feature]) -> f64 {
        self.net.forward(x).ftp_pred.as_f64()
    }

    fn observe(&mut self, pos: usize, record: &ImpressionRecord) -> Result<()> {
        let bundle = self.net.forward(&record.features);
        self.extlog.capture(pos, record, &bundle)?;
        Ok(())
    }

    fn save(&self, dir: &Path) -> Result<()> {
        self.net.save(&dir.join(format!("{}.ckpt", self.name)))?;
        self.prophet.save(&dir.join(format!("{}.prophet.ckpt", self.name)))
    }

    fn extended_log(&self) -> Option<&ExtendedLog> {
        Some(&self.extlog)
    }

    fn policy_argmax(&self, x: &[Feature]) -> Option<usize> {
        let trunk = self.net.trunk(x);
        let g = self.net.policy_weights(&trunk);
        let mut best = 0;
        for (k, &w) in g.iter().enumerate() {
            if w > g[best] {
                best = k;
            }
        }
        Some(best)
    }
}

pub fn build_learner<F: Scalar>(spec: &LearnerSpec, ctx: &LearnerContext) -> Result<Box<dyn Learner>> {
    let d_max = ctx.schedule.d_max();
    spec.validate(d_max)?;
    let name = spec.display_name();
    if spec.kind == LearnerKind::Ftp {
        return Ok(Box::new(FtpLearner::<F>::new(name, ctx, spec.hyper.clone())));
    }
    let (source, objective) = match spec.kind {
        LearnerKind::Ftp => unreachable!(),
        LearnerKind::Prophet => (Source::Matured(MaturedPipeline::new(d_max)), Objective::Bce),
        LearnerKind::ProphetStar => (Source::Oracle(OraclePipeline::new(d_max)), Objective::Bce),
        LearnerKind::Waiting { delay } => (Source::Matured(MaturedPipeline::new(delay)), Objective::Bce),
        LearnerKind::Pu { non_negative } => (
            Source::FakeNegative(FakeNegativePipeline::new(d_max)),
            Objective::Pu { non_negative },
        ),
        LearnerKind::Fnw => (Source::FakeNegative(FakeNegativePipeline::new(d_max)), Objective::Fnw),
        LearnerKind::Fnc => (Source::FakeNegative(FakeNegativePipeline::new(d_max)), Objective::Bce),
    };
    Ok(Box::new(SingleHeadLearner::<F> {
        name,
        kind: spec.kind,
        source,
        objective,
        net: Network::new(net_config(ctx, &spec.hyper, 1, false, ctx.seed)),
        hyper: spec.hyper.clone(),
        clamped: Cell::new(0),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::HOUR;
    use crate::model::loss::policy_loss_and_grad;

    fn ctx() -> LearnerContext {
        LearnerContext {
            dim: 16,
            n_fields: 2,
            schedule: TaskSchedule::new(vec![HOUR, 6 * HOUR, 24 * HOUR]).unwrap(),
            seed: 5,
        }
    }

    fn small_hyper() -> Hyper {
        Hyper {
            hidden: 16,
            head_hidden: 16,
            batch_size: 8,
            ..Hyper::default()
        }
    }

    fn stream(n: u64) -> Vec<ImpressionRecord> {
        (0..n)
            .map(|i| {
                let s = i as Timestamp * 600;
                let t = (i % 4 == 0).then_some(s + (i as Timestamp % 5) * 3 * HOUR);
                let x = vec![Feature::one_hot(i as u32 % 8), Feature::one_hot(8 + i as u32 % 5)];
                ImpressionRecord::new(i, s, t, x, 24 * HOUR).unwrap()
            })
            .collect()
    }

    #[test]
    fn spec_parses_from_toml_like_json() {
        let spec: LearnerSpec = serde_json::from_str(r#"{"kind": "waiting", "delay": 3600}"#).unwrap();
        assert_eq!(spec.kind, LearnerKind::Waiting { delay: 3600 });
        assert_eq!(spec.display_name(), "waiting_1h");
        let spec: LearnerSpec = serde_json::from_str(r#"{"kind": "pu", "hyper": {"lr": 0.01}}"#).unwrap();
        assert_eq!(spec.hyper.adam.lr, 0.01);
        assert_eq!(spec.hyper.adam.beta1, 0.9);
        assert!(serde_json::from_str::<LearnerSpec>(r#"{"kind": "waiting"}"#).is_err());
    }

    #[test]
    fn validation_names_the_problem() {
        let spec = LearnerSpec::new(LearnerKind::Waiting { delay: 48 * HOUR });
        let err = spec.validate(24 * HOUR).unwrap_err().to_string();
        assert!(err.contains("waiting_2d"), "{err}");
        let mut spec = LearnerSpec::new(LearnerKind::Fnw);
        spec.hyper.batch_size = 0;
        assert!(spec.validate(HOUR).is_err());
    }

    #[test]
    fn uniform_policy_loss_is_ln_k() {
        let (loss, _) = policy_loss_and_grad(&[0.25f64; 4], 2);
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn early_updates_change_nothing() {
        let records = stream(50);
        let mut ftp = FtpLearner::<f32>::new("ftp".into(), &ctx(), small_hyper());
        let before = ftp.network().clone();
        let stats = ftp.update(0, &records).unwrap();
        assert_eq!(stats, UpdateStats::default());
        assert_eq!(ftp.network(), &before);
    }

    #[test]
    fn policy_overfits_a_fixed_batch() {
        let ctx = ctx();
        let mut net = Network::<f64>::new(net_config(&ctx, &Hyper::default(), 3, true, 1));
        let xs: Vec<Vec<Feature>> = (0..10u32)
            .map(|i| vec![Feature::one_hot(i % 8), Feature::one_hot(8 + (i * 3 + i / 8) % 8)])
            .collect();
        let batch: Vec<(&[Feature], usize)> = xs.iter().enumerate().map(|(i, x)| (x.as_slice(), i % 3)).collect();
        let hp = AdamConfig::default();
        for _ in 0..200 {
            net.train_policy(&batch, &hp).unwrap();
        }
        let hits = batch
            .iter()
            .filter(|(x, k)| {
                let g = net.policy_weights(&net.trunk(x));
                (0..3).all(|j| g[*k] >= g[j])
            })
            .count();
        assert!(hits >= 9, "{hits}/10");
    }

    #[test]
    fn prophet_and_longest_waiting_consume_the_same_stream() {
        let records = stream(400);
        let d_max = ctx().schedule.d_max();
        let mut a = MaturedPipeline::new(d_max);
        let mut b = Source::Matured(MaturedPipeline::new(d_max));
        let mut tau = 0;
        while tau < 100 * HOUR {
            assert_eq!(a.release_for_task(&records, tau).unwrap(), b.release(&records, tau).unwrap());
            tau += HOUR;
        }
    }

    #[test]
    fn policy_replays_a_persisted_log() {
        let records = stream(300);
        let mut ftp = FtpLearner::<f64>::new("ftp".into(), &ctx(), small_hyper());
        let mut next = 0;
        for step in 0..60 {
            let tau = step * HOUR;
            ftp.update(tau, &records).unwrap();
            while next < records.len() && records[next].log_time < tau + HOUR {
                ftp.observe(next, &records[next]).unwrap();
                next += 1;
            }
        }
        let mut buf = Vec::new();
        crate::pipelines::write_extended_log(&mut buf, ftp.extended_log().unwrap().entries()).unwrap();
        let entries = crate::pipelines::read_extended_log(buf.as_slice()).unwrap();
        let labelled = entries.iter().filter(|e| e.best_task.is_some()).count();
        assert!(labelled > 100);

        let before = ftp.network().tensors().last().unwrap().data.to_vec();
        let stats = ftp.replay_policy(&entries, 3).unwrap();
        assert_eq!(stats.policy_examples, 3 * labelled);
        assert_ne!(ftp.network().tensors().last().unwrap().data, before.as_slice());
    }

    #[test]
    fn every_kind_builds_and_runs() {
        let records = stream(300);
        let kinds = [
            LearnerKind::Ftp,
            LearnerKind::Prophet,
            LearnerKind::ProphetStar,
            LearnerKind::Waiting { delay: 6 * HOUR },
            LearnerKind::Pu { non_negative: false },
            LearnerKind::Pu { non_negative: true },
            LearnerKind::Fnw,
            LearnerKind::Fnc,
        ];
        let dir = tempfile::tempdir().unwrap();
        for kind in kinds {
            let spec = LearnerSpec::new(kind).with_hyper(small_hyper());
            let mut l = build_learner::<f32>(&spec, &ctx()).unwrap();
            let mut next = 0;
            let mut tau = 0;
            while tau < 60 * HOUR {
                l.update(tau, &records).unwrap();
                while next < records.len() && records[next].log_time < tau + HOUR {
                    l.observe(next, &records[next]).unwrap();
                    next += 1;
                }
                tau += HOUR;
            }
            let p = l.predict(&records[0].features);
            assert!((0.0..=1.0).contains(&p), "{}: {p}", l.name());
            assert_eq!(l.sees_future(), kind == LearnerKind::ProphetStar);
            l.save(dir.path()).unwrap();
        }
        assert!(dir.path().join("ftp.prophet.ckpt").exists());
        assert!(dir.path().join("waiting_6h.ckpt").exists());
    }
}
