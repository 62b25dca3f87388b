//! The hour-stepped streaming simulation: at each simulated time `tau`
//! every learner updates on what is observable, then predicts the records
//! logged during the next step, which are also handed to the learners as
//! newly logged impressions.

mod metrics;
mod report;

use serde::{Deserialize, Serialize};

use crate::domain::{final_label, ImpressionRecord, TaskSchedule, Timestamp, HOUR};
use crate::error::{Error, Result};
use crate::ingest::is_sorted_by_log_time;
use crate::learners::{Learner, LearnerKind};

pub use metrics::{auc, calibration_ratio, log_loss};
pub use report::{
    best_task_stats, best_task_table, feedback_rates, policy_imitation, Aggregate, BestTaskRow, HourRow, LearnerTraining, PolicyImitation, SimReport,
};

/// Rewrites of not-yet-observable conversion times, used to check that no
/// learner reads the future.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Poison {
    #[default]
    Off,
    /// Conversions after `tau` are removed.
    Erase,
    /// Conversions after `tau` are moved to `tau + 1`.
    Imminent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub step: Timestamp,
    /// Fraction of the stream span used for burn-in when `eval_start` is unset.
    pub warmup: f64,
    pub eval_start: Option<Timestamp>,
    /// Exclusive; defaults to the stream end minus `d_max`.
    pub eval_end: Option<Timestamp>,
    pub poison: Poison,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            step: HOUR,
            warmup: 0.25,
            eval_start: None,
            eval_end: None,
            poison: Poison::Off,
        }
    }
}

/// Evaluation window `[start, end)` for a stream, after checking the
/// configuration against it.
pub fn eval_window(records: &[ImpressionRecord], d_max: Timestamp, cfg: &SimConfig) -> Result<(Timestamp, Timestamp)> {
    let bad = |m: String| Err(Error::SimConfig(m));
    if cfg.step <= 0 {
        return bad(format!("step must be positive, got {}", cfg.step));
    }
    if !(0.0..1.0).contains(&cfg.warmup) {
        return bad(format!("warmup must lie in [0, 1), got {}", cfg.warmup));
    }
    let (first, last) = match (records.first(), records.last()) {
        (Some(f), Some(l)) => (f.log_time, l.log_time),
        _ => return bad("record stream is empty".into()),
    };
    if !is_sorted_by_log_time(records) {
        return bad("records must be sorted by log time".into());
    }
    let stream_end = last + 1;
    let latest_end = stream_end - d_max;
    let start = cfg
        .eval_start
        .unwrap_or_else(|| first + (cfg.warmup * (stream_end - first) as f64) as Timestamp);
    let end = cfg.eval_end.unwrap_or(latest_end);
    if end > latest_end {
        return bad(format!(
            "eval_end {end} leaves fewer than d_max = {d_max} seconds of stream after it (latest allowed {latest_end})"
        ));
    }
    if start < first || start >= end {
        return bad(format!("eval window [{start}, {end}) is empty or starts before the stream ({first})"));
    }
    Ok((start, end))
}

fn poisoned(t: Option<Timestamp>, tau: Timestamp, poison: Poison) -> Option<Timestamp> {
    match (t, poison) {
        (Some(t), Poison::Erase) if t > tau => None,
        (Some(t), Poison::Imminent) if t > tau => Some(tau + 1),
        _ => t,
    }
}

/// Runs the streaming protocol over a time-sorted stream. The clock keeps
/// ticking past the last record until every evaluated record has matured,
/// so extended-log statistics cover the whole evaluation window.
pub fn run_simulation(
    records: &[ImpressionRecord],
    learners: &mut [Box<dyn Learner>],
    schedule: &TaskSchedule,
    cfg: &SimConfig,
) -> Result<SimReport> {
    let d_max = schedule.d_max();
    let (eval_start, eval_end) = eval_window(records, d_max, cfg)?;
    let step = cfg.step;
    let labels: Vec<u8> = records.iter().map(|r| final_label(r, d_max)).collect();
    let stream_end = records.last().unwrap().log_time + 1;

    let mut view = (cfg.poison != Poison::Off).then(|| records.to_vec());
    let mut training = vec![LearnerTraining::default(); learners.len()];
    let mut rows = Vec::new();
    let mut pooled: Vec<(Vec<f64>, Vec<u8>)> = vec![Default::default(); learners.len()];

    let mut tau = records[0].log_time.div_euclid(step) * step;
    let mut next = 0;
    loop {
        if let Some(v) = view.as_mut() {
            for (dst, src) in v.iter_mut().zip(records) {
                dst.conversion_time = poisoned(src.conversion_time, tau, cfg.poison);
            }
        }
        let visible = view.as_deref().unwrap_or(records);
        for (l, t) in learners.iter_mut().zip(&mut training) {
            let input = if l.sees_future() { records } else { visible };
            t.add(l.update(tau, input)?);
        }
        if tau >= stream_end {
            break;
        }

        let from = next;
        while next < records.len() && records[next].log_time < tau + step {
            next += 1;
        }
        let evaluated: Vec<usize> = (from..next)
            .filter(|&i| (eval_start..eval_end).contains(&records[i].log_time))
            .collect();
        let step_overlaps_eval = tau < eval_end && tau + step > eval_start;
        if step_overlaps_eval {
            let y: Vec<u8> = evaluated.iter().map(|&i| labels[i]).collect();
            for (li, l) in learners.iter().enumerate() {
                let p: Vec<f64> = evaluated.iter().map(|&i| l.predict(&records[i].features)).collect();
                rows.push(HourRow::new(tau, l.name(), &p, &y));
                pooled[li].0.extend(&p);
                pooled[li].1.extend(&y);
            }
        }
        for i in from..next {
            let r = view.as_ref().map_or(&records[i], |v| &v[i]);
            for l in learners.iter_mut() {
                l.observe(i, r)?;
            }
        }
        tau += step;
    }

    let names: Vec<String> = learners.iter().map(|l| l.name().to_string()).collect();
    let reference = learners
        .iter()
        .find(|l| l.kind() == LearnerKind::ProphetStar)
        .or_else(|| learners.iter().find(|l| l.kind() == LearnerKind::Prophet))
        .map(|l| l.name().to_string());
    let aggregates = learners
        .iter()
        .zip(&pooled)
        .zip(training)
        .map(|((l, (p, y)), mut t)| {
            t.clamped = l.clamp_count();
            Aggregate::new(l.name(), p, y, t)
        })
        .collect();
    let mut best_task = Vec::new();
    let mut imitation = Vec::new();
    for l in learners.iter() {
        if let Some(log) = l.extended_log() {
            best_task.push((l.name().to_string(), best_task_stats(log.entries(), schedule)));
            let eval_entries = log
                .entries()
                .iter()
                .filter(|e| (eval_start..eval_end).contains(&e.log_time));
            imitation.push((
                l.name().to_string(),
                policy_imitation(eval_entries, schedule.len(), |x| l.policy_argmax(x).unwrap_or(0)),
            ));
        }
    }
    let mut report = SimReport {
        step,
        eval_start,
        eval_end,
        learners: names,
        reference,
        rows,
        aggregates,
        best_task,
        imitation,
    };
    report.fill_relative();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Feature;

    fn rec(id: u64, s: Timestamp) -> ImpressionRecord {
        ImpressionRecord::new(id, s, None, vec![Feature::one_hot(0)], HOUR).unwrap()
    }

    #[test]
    fn config_errors() {
        let records: Vec<_> = (0..100).map(|i| rec(i, i as Timestamp * 360)).collect();
        let cfg = SimConfig::default();
        let (start, end) = eval_window(&records, HOUR, &cfg).unwrap();
        assert!(start < end && end == records[99].log_time + 1 - HOUR);
        let late = SimConfig {
            eval_end: Some(records[99].log_time),
            ..SimConfig::default()
        };
        assert!(matches!(eval_window(&records, HOUR, &late), Err(Error::SimConfig(_))));
        let mut shuffled = records.clone();
        shuffled.swap(3, 40);
        assert!(eval_window(&shuffled, HOUR, &cfg).is_err());
        assert!(eval_window(&[], HOUR, &cfg).is_err());
    }

    #[test]
    fn poison_only_touches_the_future() {
        assert_eq!(poisoned(Some(5), 5, Poison::Erase), Some(5));
        assert_eq!(poisoned(Some(6), 5, Poison::Erase), None);
        assert_eq!(poisoned(Some(60), 5, Poison::Imminent), Some(6));
        assert_eq!(poisoned(None, 5, Poison::Imminent), None);
    }
}
