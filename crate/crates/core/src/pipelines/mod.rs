//! Streaming data pipelines. Each pipeline owns a cursor over the
//! time-sorted record stream and, at simulated time `tau`, releases only what
//! an online system could know by then: conversions strictly before `tau`.
//!
//! Records of the [`Split::Eval`] split are skipped by every pipeline.

mod extlog;

use std::collections::VecDeque;

use crate::domain::{label_at, ImpressionRecord, Split, Timestamp};
use crate::error::{Error, Result};

pub use extlog::{best_task, TIE_TOLERANCE, read_extended_log, write_extended_log, ExtendedLog, ExtendedLogEntry};

/// Guards a pipeline against being asked about an earlier time than before.
#[derive(Debug, Clone, Default)]
struct Monotone {
    last: Option<Timestamp>,
}

impl Monotone {
    fn check(&mut self, pipeline: &str, tau: Timestamp) -> Result<()> {
        if let Some(previous) = self.last {
            if tau < previous {
                return Err(Error::TimeRegression {
                    pipeline: pipeline.to_string(),
                    tau,
                    previous,
                });
            }
        }
        self.last = Some(tau);
        Ok(())
    }
}

/// Releases each record once it is `delay` old, labelled by what was
/// observed at `s + delay`.
#[derive(Debug, Clone)]
pub struct MaturedPipeline {
    delay: Timestamp,
    cursor: usize,
    clock: Monotone,
}

impl MaturedPipeline {
    pub fn new(delay: Timestamp) -> Self {
        assert!(delay > 0, "maturity delay must be positive");
        Self {
            delay,
            cursor: 0,
            clock: Monotone::default(),
        }
    }

    pub fn delay(&self) -> Timestamp {
        self.delay
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Stream positions and labels of all not-yet-released records with
    /// `s < tau - delay`.
    pub fn release_for_task(&mut self, records: &[ImpressionRecord], tau: Timestamp) -> Result<Vec<(usize, u8)>> {
        self.clock.check("matured", tau)?;
        let horizon = tau - self.delay;
        let mut out = Vec::new();
        while let Some(r) = records.get(self.cursor) {
            if r.log_time >= horizon {
                break;
            }
            if r.split == Split::Train {
                out.push((self.cursor, label_at(r, r.log_time + self.delay)));
            }
            self.cursor += 1;
        }
        Ok(out)
    }
}

/// The ideal dataset: every record logged before `tau`, labelled with its
/// final label. Reads the future and is only meant for the skyline learner.
#[derive(Debug, Clone)]
pub struct OraclePipeline {
    d_max: Timestamp,
    cursor: usize,
    clock: Monotone,
}

impl OraclePipeline {
    pub fn new(d_max: Timestamp) -> Self {
        Self {
            d_max,
            cursor: 0,
            clock: Monotone::default(),
        }
    }

    pub fn release(&mut self, records: &[ImpressionRecord], tau: Timestamp) -> Result<Vec<(usize, u8)>> {
        self.clock.check("oracle", tau)?;
        let mut out = Vec::new();
        while let Some(r) = records.get(self.cursor) {
            if r.log_time >= tau {
                break;
            }
            if r.split == Split::Train {
                out.push((self.cursor, label_at(r, r.log_time + self.d_max)));
            }
            self.cursor += 1;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FakeNegativeEvent {
    /// Position of the record in the stream.
    pub pos: usize,
    pub id: u64,
    pub emit_time: Timestamp,
    pub label: u8,
}

fn sort_events(events: &mut [FakeNegativeEvent]) {
    events.sort_by_key(|e| (e.emit_time, e.label, e.pos));
}

/// Every record as a negative at `s`, plus a positive duplicate at `t` for
/// converters; only events with `emit_time <= up_to`, ordered by time with
/// negatives first on ties.
pub fn emit_fake_negative_stream(records: &[ImpressionRecord], up_to: Timestamp) -> Vec<FakeNegativeEvent> {
    let mut events = Vec::new();
    for (pos, r) in records.iter().enumerate() {
        if r.split != Split::Train || r.log_time > up_to {
            continue;
        }
        events.push(FakeNegativeEvent {
            pos,
            id: r.id,
            emit_time: r.log_time,
            label: 0,
        });
        if let Some(t) = r.conversion_time.filter(|&t| t <= up_to) {
            events.push(FakeNegativeEvent {
                pos,
                id: r.id,
                emit_time: t,
                label: 1,
            });
        }
    }
    sort_events(&mut events);
    events
}

/// Incremental form of [`emit_fake_negative_stream`]. At `tau` it emits the
/// events with `emit_time < tau` not emitted before. Conversion times are
/// read only once they lie in the past, by rescanning the records still
/// inside their conversion window.
#[derive(Debug, Clone)]
pub struct FakeNegativePipeline {
    d_max: Timestamp,
    cursor: usize,
    pending: VecDeque<usize>,
    clock: Monotone,
}

impl FakeNegativePipeline {
    pub fn new(d_max: Timestamp) -> Self {
        Self {
            d_max,
            cursor: 0,
            pending: VecDeque::new(),
            clock: Monotone::default(),
        }
    }

    /// Records still waiting for a possible conversion.
    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn release(&mut self, records: &[ImpressionRecord], tau: Timestamp) -> Result<Vec<FakeNegativeEvent>> {
        self.clock.check("fake-negative", tau)?;
        let mut events = Vec::new();
        while let Some(r) = records.get(self.cursor) {
            if r.log_time >= tau {
                break;
            }
            if r.split == Split::Train {
                events.push(FakeNegativeEvent {
                    pos: self.cursor,
                    id: r.id,
                    emit_time: r.log_time,
                    label: 0,
                });
                self.pending.push_back(self.cursor);
            }
            self.cursor += 1;
        }
        let mut kept = VecDeque::with_capacity(self.pending.len());
        for pos in self.pending.drain(..) {
            let r = &records[pos];
            match r.conversion_time {
                Some(t) if t < tau => events.push(FakeNegativeEvent {
                    pos,
                    id: r.id,
                    emit_time: t,
                    label: 1,
                }),
                // Still able to convert at or after tau.
                _ if r.log_time + self.d_max >= tau => kept.push_back(pos),
                _ => {}
            }
        }
        self.pending = kept;
        sort_events(&mut events);
        Ok(events)
    }
}
