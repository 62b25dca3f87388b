use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{auc, calibration_ratio, log_loss};
use crate::domain::{Feature, ImpressionRecord, TaskSchedule, Timestamp};
use crate::learners::{format_duration, UpdateStats};
use crate::pipelines::ExtendedLogEntry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourRow {
    pub tau: Timestamp,
    pub learner: String,
    pub n_eval: usize,
    pub positives: usize,
    pub log_loss: Option<f64>,
    pub auc: Option<f64>,
    pub calibration: Option<f64>,
    /// Log loss over the reference learner's, minus one.
    pub rel_log_loss: Option<f64>,
    pub rel_auc: Option<f64>,
}

impl HourRow {
    pub(crate) fn new(tau: Timestamp, learner: &str, preds: &[f64], labels: &[u8]) -> Self {
        Self {
            tau,
            learner: learner.to_string(),
            n_eval: preds.len(),
            positives: labels.iter().filter(|&&y| y == 1).count(),
            log_loss: log_loss(preds, labels),
            auc: auc(preds, labels),
            calibration: calibration_ratio(preds, labels),
            rel_log_loss: None,
            rel_auc: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LearnerTraining {
    pub examples: usize,
    pub loss_sum: f64,
    pub policy_examples: usize,
    pub policy_loss_sum: f64,
    /// Predictions clamped by FNC calibration.
    pub clamped: usize,
}

impl LearnerTraining {
    pub(crate) fn add(&mut self, s: UpdateStats) {
        self.examples += s.examples;
        self.loss_sum += s.loss_sum;
        self.policy_examples += s.policy_examples;
        self.policy_loss_sum += s.policy_loss_sum;
    }

    pub fn mean_loss(&self) -> Option<f64> {
        (self.examples > 0).then(|| self.loss_sum / self.examples as f64)
    }
}

/// Metrics pooled over every evaluated record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub learner: String,
    pub n_eval: usize,
    pub log_loss: Option<f64>,
    pub auc: Option<f64>,
    pub calibration: Option<f64>,
    pub rel_log_loss: Option<f64>,
    pub rel_auc: Option<f64>,
    pub training: LearnerTraining,
}

impl Aggregate {
    pub(crate) fn new(learner: &str, preds: &[f64], labels: &[u8], training: LearnerTraining) -> Self {
        Self {
            learner: learner.to_string(),
            n_eval: preds.len(),
            log_loss: log_loss(preds, labels),
            auc: auc(preds, labels),
            calibration: calibration_ratio(preds, labels),
            rel_log_loss: None,
            rel_auc: None,
            training,
        }
    }
}

/// One line of the best-task table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestTaskRow {
    pub delay: Timestamp,
    /// Share of conversions observed within `delay`, in percent.
    pub feedback_pct: f64,
    /// Share of matured entries whose best task is this one, in percent.
    pub best_pct: f64,
    pub best_count: usize,
}

/// Per task: how much feedback its window sees and how often it was the
/// task closest to the prophecy, over the matured extended-log entries.
pub fn best_task_stats(entries: &[ExtendedLogEntry], schedule: &TaskSchedule) -> Vec<BestTaskRow> {
    let matured: Vec<&ExtendedLogEntry> = entries.iter().filter(|e| e.is_matured()).collect();
    let delays: Vec<Timestamp> = matured
        .iter()
        .filter_map(|e| e.conversion_time.map(|t| t - e.log_time))
        .collect();
    let mut counts = vec![0usize; schedule.len()];
    for e in &matured {
        counts[e.best_task.unwrap()] += 1;
    }
    let pct = |n: usize, of: usize| if of == 0 { 0.0 } else { 100.0 * n as f64 / of as f64 };
    schedule
        .delays()
        .iter()
        .zip(counts)
        .map(|(&d, c)| BestTaskRow {
            delay: d,
            feedback_pct: pct(delays.iter().filter(|&&x| x <= d).count(), delays.len()),
            best_pct: pct(c, matured.len()),
            best_count: c,
        })
        .collect()
}

/// Percentage of conversions with delay at most each task's window.
pub fn feedback_rates(records: &[ImpressionRecord], schedule: &TaskSchedule) -> Vec<f64> {
    let delays: Vec<Timestamp> = records.iter().filter_map(|r| r.delay()).collect();
    schedule
        .delays()
        .iter()
        .map(|&d| {
            if delays.is_empty() {
                0.0
            } else {
                100.0 * delays.iter().filter(|&&x| x <= d).count() as f64 / delays.len() as f64
            }
        })
        .collect()
}

/// How often the policy's top task equals the best task, against the best
/// single task chosen in hindsight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyImitation {
    pub n: usize,
    pub policy_hits: usize,
    pub best_constant_task: usize,
    pub best_constant_hits: usize,
}

impl PolicyImitation {
    pub fn policy_accuracy(&self) -> f64 {
        self.policy_hits as f64 / self.n.max(1) as f64
    }

    pub fn constant_accuracy(&self) -> f64 {
        self.best_constant_hits as f64 / self.n.max(1) as f64
    }
}

pub fn policy_imitation<'a>(
    entries: impl IntoIterator<Item = &'a ExtendedLogEntry>,
    n_tasks: usize,
    argmax: impl Fn(&[Feature]) -> usize,
) -> PolicyImitation {
    let mut counts = vec![0usize; n_tasks];
    let (mut n, mut hits) = (0, 0);
    for e in entries {
        let Some(k) = e.best_task else { continue };
        n += 1;
        counts[k] += 1;
        hits += (argmax(&e.features) == k) as usize;
    }
    let (best, &best_hits) = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .unwrap_or((0, &0));
    PolicyImitation {
        n,
        policy_hits: hits,
        best_constant_task: best,
        best_constant_hits: best_hits,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub step: Timestamp,
    pub eval_start: Timestamp,
    pub eval_end: Timestamp,
    pub learners: Vec<String>,
    /// Learner the relative columns are measured against.
    pub reference: Option<String>,
    pub rows: Vec<HourRow>,
    pub aggregates: Vec<Aggregate>,
    pub best_task: Vec<(String, Vec<BestTaskRow>)>,
    pub imitation: Vec<(String, PolicyImitation)>,
}

fn ratio_minus_one(x: Option<f64>, reference: Option<f64>) -> Option<f64> {
    match (x, reference) {
        (Some(x), Some(r)) if r != 0.0 => Some(x / r - 1.0),
        _ => None,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl SimReport {
    pub(crate) fn fill_relative(&mut self) {
        let Some(reference) = self.reference.clone() else { return };
        let n = self.learners.len();
        for chunk in self.rows.chunks_mut(n) {
            let Some(r) = chunk.iter().find(|r| r.learner == reference).cloned() else { continue };
            for row in chunk {
                row.rel_log_loss = ratio_minus_one(row.log_loss, r.log_loss);
                row.rel_auc = ratio_minus_one(row.auc, r.auc);
            }
        }
        if let Some(r) = self.aggregates.iter().find(|a| a.learner == reference).cloned() {
            for a in &mut self.aggregates {
                a.rel_log_loss = ratio_minus_one(a.log_loss, r.log_loss);
                a.rel_auc = ratio_minus_one(a.auc, r.auc);
            }
        }
    }

    pub fn aggregate(&self, learner: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.learner == learner)
    }

    /// One row per step per learner.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau,learner,n_eval,positives,log_loss,auc,calibration,rel_log_loss,rel_auc\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.tau,
                r.learner,
                r.n_eval,
                r.positives,
                opt(r.log_loss),
                opt(r.auc),
                opt(r.calibration),
                opt(r.rel_log_loss),
                opt(r.rel_auc)
            )
            .unwrap();
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Per-step relative log loss, one column per learner.
    pub fn plot_data(&self) -> String {
        let mut out = String::from("tau");
        for l in &self.learners {
            write!(out, ",{l}").unwrap();
        }
        out.push('\n');
        for chunk in self.rows.chunks(self.learners.len().max(1)) {
            write!(out, "{}", chunk[0].tau).unwrap();
            for r in chunk {
                write!(out, ",{}", opt(r.rel_log_loss)).unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Aggregate metrics as an aligned text table.
    pub fn summary_table(&self) -> String {
        let mut out = format!(
            "{:<16} {:>8} {:>10} {:>8} {:>8} {:>9}\n",
            "learner", "n_eval", "log_loss", "auc", "calib", "rel_ll%"
        );
        let f = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
        for a in &self.aggregates {
            writeln!(
                out,
                "{:<16} {:>8} {:>10} {:>8} {:>8} {:>9}",
                a.learner,
                a.n_eval,
                f(a.log_loss, 5),
                f(a.auc, 4),
                f(a.calibration, 3),
                f(a.rel_log_loss.map(|x| 100.0 * x), 2)
            )
            .unwrap();
        }
        out
    }
}

/// Best-task rows laid out as `d_k, Feedback%, Best%`.
pub fn best_task_table(rows: &[BestTaskRow]) -> String {
    let mut out = format!("{:>6} {:>10} {:>8}\n", "d_k", "Feedback%", "Best%");
    for r in rows {
        writeln!(out, "{:>6} {:>10.1} {:>8.1}", format_duration(r.delay), r.feedback_pct, r.best_pct).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Split, HOUR};

    fn entry(s: Timestamp, t: Option<Timestamp>, best: Option<usize>) -> ExtendedLogEntry {
        ExtendedLogEntry {
            pos: 0,
            id: s as u64,
            log_time: s,
            features: vec![Feature::one_hot(0)],
            split: Split::Train,
            task_preds: vec![0.1, 0.2],
            policy_weights: vec![0.5, 0.5],
            label: best.map(|_| t.is_some() as u8),
            conversion_time: t,
            prophet_pred: best.map(|_| 0.1),
            best_task: best,
        }
    }

    #[test]
    fn short_delays_give_full_feedback() {
        let schedule = TaskSchedule::new(vec![HOUR, 6 * HOUR]).unwrap();
        let entries: Vec<_> = (0..10).map(|i| entry(i * 100, Some(i * 100 + 60), Some(0))).collect();
        let rows = best_task_stats(&entries, &schedule);
        assert_eq!(rows[0].feedback_pct, 100.0);
        assert_eq!(rows[1].feedback_pct, 100.0);
        assert_eq!(rows[0].best_pct + rows[1].best_pct, 100.0);
    }

    #[test]
    fn unmatured_entries_are_ignored() {
        let schedule = TaskSchedule::new(vec![HOUR, 6 * HOUR]).unwrap();
        let entries = vec![entry(0, Some(2 * HOUR), Some(1)), entry(5, None, None), entry(9, None, Some(0))];
        let rows = best_task_stats(&entries, &schedule);
        assert_eq!((rows[0].feedback_pct, rows[1].feedback_pct), (0.0, 100.0));
        assert_eq!((rows[0].best_count, rows[1].best_count), (1, 1));
        let im = policy_imitation(&entries, 2, |_| 1);
        assert_eq!((im.n, im.policy_hits, im.best_constant_task, im.best_constant_hits), (2, 1, 0, 1));
        assert!(best_task_table(&rows).contains("Feedback%"));
    }
}
