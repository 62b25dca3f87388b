//! Logged impressions, delay windows, the simulated clock, and the label
//! semantics every pipeline is built on.
//!
//! Time is integer seconds since the stream epoch. A conversion observed at
//! exactly `at` counts as observed (`t <= at`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Timestamp = i64;

pub const HOUR: Timestamp = 3600;
pub const DAY: Timestamp = 24 * HOUR;

/// One active coordinate of a sparse feature vector.
///
/// Vectors produced by this crate hold exactly one entry per categorical
/// field, in field order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub index: u32,
    pub value: f32,
}

impl Feature {
    pub fn one_hot(index: u32) -> Self {
        Self { index, value: 1.0 }
    }
}

pub type FeatureVec = Vec<Feature>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Split {
    /// Trained on by the pipelines and evaluated when inside the eval window.
    #[default]
    Train,
    /// Evaluated only; never released to any training pipeline.
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpressionRecord {
    pub id: u64,
    pub log_time: Timestamp,
    pub conversion_time: Option<Timestamp>,
    pub features: FeatureVec,
    pub split: Split,
}

impl ImpressionRecord {
    /// Builds a record, dropping a conversion that arrives later than
    /// `log_time + d_max` so that every label beyond `d_max` equals the final
    /// one.
    pub fn new(
        id: u64,
        log_time: Timestamp,
        conversion_time: Option<Timestamp>,
        features: FeatureVec,
        d_max: Timestamp,
    ) -> Result<Self> {
        if let Some(t) = conversion_time {
            if t < log_time {
                return Err(Error::Record {
                    id,
                    reason: format!("conversion time {t} precedes log time {log_time}"),
                });
            }
        }
        if features.is_empty() {
            return Err(Error::Record {
                id,
                reason: "empty feature vector".into(),
            });
        }
        let conversion_time = conversion_time.filter(|&t| t - log_time <= d_max);
        Ok(Self {
            id,
            log_time,
            conversion_time,
            features,
            split: Split::Train,
        })
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn delay(&self) -> Option<Timestamp> {
        self.conversion_time.map(|t| t - self.log_time)
    }

    /// Checks the invariants that cannot be enforced by `new` alone.
    pub fn validate(&self, dim: u32, d_max: Timestamp) -> Result<()> {
        let bad = |reason: String| Error::Record {
            id: self.id,
            reason,
        };
        if self.features.is_empty() {
            return Err(bad("empty feature vector".into()));
        }
        if let Some(f) = self.features.iter().find(|f| f.index >= dim) {
            return Err(bad(format!("feature index {} outside dimension {dim}", f.index)));
        }
        match self.delay() {
            Some(d) if d < 0 => Err(bad(format!("negative conversion delay {d}"))),
            Some(d) if d > d_max => Err(bad(format!("conversion delay {d} exceeds d_max {d_max}"))),
            _ => Ok(()),
        }
    }
}

/// Label observed at time `at`: 1 iff the conversion happened at or before `at`.
pub fn observed_label(record: &ImpressionRecord, at: Timestamp) -> Result<u8> {
    if at < record.log_time {
        return Err(Error::LabelBeforeLog {
            id: record.id,
            log_time: record.log_time,
            at,
        });
    }
    Ok(label_at(record, at))
}

#[inline]
pub(crate) fn label_at(record: &ImpressionRecord, at: Timestamp) -> u8 {
    matches!(record.conversion_time, Some(t) if t <= at) as u8
}

/// The ground-truth label, i.e. the label observed after the full window.
pub fn final_label(record: &ImpressionRecord, d_max: Timestamp) -> u8 {
    label_at(record, record.log_time + d_max)
}

/// Records logged strictly before `tau - d`, each labelled with its
/// `d`-window outcome.
pub fn matured_subset(
    records: &[ImpressionRecord],
    tau: Timestamp,
    d: Timestamp,
) -> Vec<(&ImpressionRecord, u8)> {
    assert!(d > 0, "maturity delay must be positive");
    records
        .iter()
        .filter(|r| r.log_time < tau - d)
        .map(|r| (r, label_at(r, r.log_time + d)))
        .collect()
}

/// Ordered delay windows `d_1 < ... < d_K = d_max`, one per task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Timestamp>", into = "Vec<Timestamp>")]
pub struct TaskSchedule {
    delays: Vec<Timestamp>,
}

impl TaskSchedule {
    pub fn new(delays: Vec<Timestamp>) -> Result<Self> {
        if delays.is_empty() {
            return Err(Error::Schedule("at least one task is required".into()));
        }
        if delays[0] <= 0 {
            return Err(Error::Schedule(format!("first delay must be positive, got {}", delays[0])));
        }
        if let Some(w) = delays.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::Schedule(format!(
                "delays must be strictly increasing, got {} then {}",
                w[0], w[1]
            )));
        }
        Ok(Self { delays })
    }

    /// 1, 7, 14, 21 and 30 days.
    pub fn criteo() -> Self {
        Self::new([1, 7, 14, 21, 30].iter().map(|d| d * DAY).collect()).unwrap()
    }

    /// 1, 6, 24 and 48 hours.
    pub fn short_horizon() -> Self {
        Self::new([1, 6, 24, 48].iter().map(|h| h * HOUR).collect()).unwrap()
    }

    pub fn delays(&self) -> &[Timestamp] {
        &self.delays
    }

    pub fn len(&self) -> usize {
        self.delays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delays.is_empty()
    }

    pub fn d_max(&self) -> Timestamp {
        *self.delays.last().unwrap()
    }
}

impl TryFrom<Vec<Timestamp>> for TaskSchedule {
    type Error = Error;

    fn try_from(delays: Vec<Timestamp>) -> Result<Self> {
        Self::new(delays)
    }
}

impl From<TaskSchedule> for Vec<Timestamp> {
    fn from(s: TaskSchedule) -> Self {
        s.delays
    }
}

/// Simulated "now", advanced in whole steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimClock {
    tau: Timestamp,
    step: Timestamp,
}

impl SimClock {
    pub fn new(start: Timestamp, step: Timestamp) -> Self {
        assert!(step > 0, "clock step must be positive");
        Self { tau: start, step }
    }

    pub fn tau(&self) -> Timestamp {
        self.tau
    }

    pub fn step(&self) -> Timestamp {
        self.step
    }

    pub fn advance(&mut self) -> Timestamp {
        self.tau += self.step;
        self.tau
    }
}
