use std::collections::HashSet;
use std::io::{Read, Write};

use super::Monotone;
use crate::domain::{label_at, Feature, FeatureVec, ImpressionRecord, Split, Timestamp};
use crate::error::{Error, Result};
use crate::model::PredictionBundle;
use crate::scalar::Scalar;

/// A logged impression together with the task predictions the online model
/// made when it was logged.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedLogEntry {
    /// Position of the record in the stream.
    pub pos: usize,
    pub id: u64,
    pub log_time: Timestamp,
    pub features: FeatureVec,
    pub split: Split,
    pub task_preds: Vec<f64>,
    /// Policy weights at capture time; informational.
    pub policy_weights: Vec<f64>,
    /// Final label, filled once the entry matures.
    pub label: Option<u8>,
    pub conversion_time: Option<Timestamp>,
    pub prophet_pred: Option<f64>,
    pub best_task: Option<usize>,
}

impl ExtendedLogEntry {
    pub fn is_matured(&self) -> bool {
        self.best_task.is_some()
    }
}

/// Distances closer than this count as ties, so that decimal ties such as
/// |0.2 - 0.1| and |0.2 - 0.3| are not decided by rounding.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Index of the prediction nearest to `prophecy`; ties go to the smallest
/// index.
pub fn best_task(prophecy: f64, preds: &[f64]) -> usize {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (k, &p) in preds.iter().enumerate() {
        let d = (prophecy - p).abs();
        if d < best_dist - TIE_TOLERANCE {
            best = k;
            best_dist = d;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct ExtendedLog {
    d_max: Timestamp,
    entries: Vec<ExtendedLogEntry>,
    ids: HashSet<u64>,
    cursor: usize,
    clock: Monotone,
}

impl ExtendedLog {
    pub fn new(d_max: Timestamp) -> Self {
        Self {
            d_max,
            entries: Vec::new(),
            ids: HashSet::new(),
            cursor: 0,
            clock: Monotone::default(),
        }
    }

    pub fn entries(&self) -> &[ExtendedLogEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Stores the online predictions for a record entering the stream.
    /// Captures must arrive in log-time order.
    pub fn capture<F: Scalar>(
        &mut self,
        pos: usize,
        record: &ImpressionRecord,
        bundle: &PredictionBundle<F>,
    ) -> Result<&ExtendedLogEntry> {
        if !self.ids.insert(record.id) {
            return Err(Error::DuplicateCapture(record.id));
        }
        if let Some(last) = self.entries.last() {
            if record.log_time < last.log_time {
                self.ids.remove(&record.id);
                return Err(Error::ExtLog(format!(
                    "record {} logged at {} captured after time {}",
                    record.id, record.log_time, last.log_time
                )));
            }
        }
        self.entries.push(ExtendedLogEntry {
            pos,
            id: record.id,
            log_time: record.log_time,
            features: record.features.clone(),
            split: record.split,
            task_preds: bundle.task_preds.iter().map(|p| p.as_f64()).collect(),
            policy_weights: bundle.policy_weights.iter().map(|p| p.as_f64()).collect(),
            label: None,
            conversion_time: None,
            prophet_pred: None,
            best_task: None,
        });
        Ok(self.entries.last().unwrap())
    }

    /// Consumes every entry with `s < tau - d_max` not consumed before:
    /// fills its final label and prophecy and picks the best task. Returns
    /// the indices of the newly consumed entries.
    pub fn policy_batch(
        &mut self,
        records: &[ImpressionRecord],
        tau: Timestamp,
        mut prophet: impl FnMut(&[Feature]) -> f64,
    ) -> Result<Vec<usize>> {
        self.clock.check("policy", tau)?;
        let horizon = tau - self.d_max;
        let start = self.cursor;
        while let Some(e) = self.entries.get_mut(self.cursor) {
            if e.log_time >= horizon {
                break;
            }
            let r = &records[e.pos];
            let y = label_at(r, e.log_time + self.d_max);
            let prophecy = prophet(&e.features);
            e.label = Some(y);
            e.conversion_time = r.conversion_time.filter(|_| y == 1);
            e.prophet_pred = Some(prophecy);
            e.best_task = Some(best_task(prophecy, &e.task_preds));
            self.cursor += 1;
        }
        Ok((start..self.cursor).collect())
    }
}

fn put<W: Write>(w: &mut W, bytes: &[u8]) -> std::io::Result<()> {
    w.write_all(bytes)
}

/// Writes entries as `u32 LE payload length` followed by the payload:
///
/// ```text
/// id u64 | s i64 | t i64 (i64::MIN if none) | split u8 | label u8 (255 if none)
/// best u8 (255 if none) | prophecy f64 (NaN if none)
/// n_features u32 | n_features x (index u32, value f32)
/// K u32 | K x task pred f64 | K x policy weight f64
/// ```
///
/// All integers and floats are little-endian. The stream position is not
/// stored; read entries get `pos` equal to their order in the file.
pub fn write_extended_log<W: Write>(mut w: W, entries: &[ExtendedLogEntry]) -> std::io::Result<()> {
    let mut buf = Vec::new();
    for e in entries {
        buf.clear();
        put(&mut buf, &e.id.to_le_bytes())?;
        put(&mut buf, &e.log_time.to_le_bytes())?;
        put(&mut buf, &e.conversion_time.unwrap_or(i64::MIN).to_le_bytes())?;
        put(&mut buf, &[(e.split == Split::Eval) as u8])?;
        put(&mut buf, &[e.label.unwrap_or(255)])?;
        put(&mut buf, &[e.best_task.map_or(255, |k| k as u8)])?;
        put(&mut buf, &e.prophet_pred.unwrap_or(f64::NAN).to_le_bytes())?;
        put(&mut buf, &(e.features.len() as u32).to_le_bytes())?;
        for f in &e.features {
            put(&mut buf, &f.index.to_le_bytes())?;
            put(&mut buf, &f.value.to_le_bytes())?;
        }
        put(&mut buf, &(e.task_preds.len() as u32).to_le_bytes())?;
        for p in e.task_preds.iter().chain(&e.policy_weights) {
            put(&mut buf, &p.to_le_bytes())?;
        }
        w.write_all(&(buf.len() as u32).to_le_bytes())?;
        w.write_all(&buf)?;
    }
    w.flush()
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let bytes = self
            .buf
            .get(self.at..self.at + N)
            .ok_or_else(|| Error::ExtLog("truncated entry".into()))?;
        self.at += N;
        Ok(bytes.try_into().unwrap())
    }
}

pub fn read_extended_log<R: Read>(mut r: R) -> Result<Vec<ExtendedLogEntry>> {
    let io = |e: std::io::Error| Error::ExtLog(e.to_string());
    let mut data = Vec::new();
    r.read_to_end(&mut data).map_err(io)?;
    let mut entries = Vec::new();
    let mut at = 0;
    while at < data.len() {
        let len_bytes = data
            .get(at..at + 4)
            .ok_or_else(|| Error::ExtLog("truncated length prefix".into()))?;
        let len = u32::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
        at += 4;
        let payload = data
            .get(at..at + len)
            .ok_or_else(|| Error::ExtLog("truncated entry".into()))?;
        at += len;
        let mut c = Cursor { buf: payload, at: 0 };
        let id = u64::from_le_bytes(c.take()?);
        let log_time = i64::from_le_bytes(c.take()?);
        let t = i64::from_le_bytes(c.take()?);
        let [split] = c.take()?;
        let [label] = c.take()?;
        let [best] = c.take()?;
        let prophecy = f64::from_le_bytes(c.take()?);
        let n = u32::from_le_bytes(c.take()?) as usize;
        let mut features = Vec::with_capacity(n);
        for _ in 0..n {
            let index = u32::from_le_bytes(c.take()?);
            let value = f32::from_le_bytes(c.take()?);
            features.push(Feature { index, value });
        }
        let k = u32::from_le_bytes(c.take()?) as usize;
        let mut floats = Vec::with_capacity(2 * k);
        for _ in 0..2 * k {
            floats.push(f64::from_le_bytes(c.take()?));
        }
        if c.at != payload.len() {
            return Err(Error::ExtLog(format!("entry {id} has trailing bytes")));
        }
        let policy_weights = floats.split_off(k);
        entries.push(ExtendedLogEntry {
            pos: entries.len(),
            id,
            log_time,
            features,
            split: if split == 1 { Split::Eval } else { Split::Train },
            task_preds: floats,
            policy_weights,
            label: (label != 255).then_some(label),
            conversion_time: (t != i64::MIN).then_some(t),
            prophet_pred: (!prophecy.is_nan()).then_some(prophecy),
            best_task: (best != 255).then_some(best as usize),
        });
    }
    Ok(entries)
}
