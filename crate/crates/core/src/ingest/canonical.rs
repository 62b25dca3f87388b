//! Canonical log format shared by the generator and the real-data parsers.
//!
//! One record per line, tab separated:
//!
//! ```text
//! id <TAB> log_time <TAB> conversion_time_or_empty <TAB> feature ...
//! ```
//!
//! Each feature is a global index (`17`), or `index:value` when the value is
//! not 1. Timestamps are integer seconds.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::domain::{Feature, ImpressionRecord, Timestamp};
use crate::error::{Error, Result};

pub fn format_record(record: &ImpressionRecord) -> String {
    let mut out = String::with_capacity(16 + record.features.len() * 6);
    write!(out, "{}\t{}\t", record.id, record.log_time).unwrap();
    if let Some(t) = record.conversion_time {
        write!(out, "{t}").unwrap();
    }
    for f in &record.features {
        if f.value == 1.0 {
            write!(out, "\t{}", f.index).unwrap();
        } else {
            write!(out, "\t{}:{}", f.index, f.value).unwrap();
        }
    }
    out
}

pub fn parse_record(line: &str, line_no: usize, d_max: Timestamp) -> Result<ImpressionRecord> {
    let err = |reason: String| Error::Parse {
        line: line_no,
        reason,
    };
    let mut cols = line.trim_end_matches(['\r', '\n']).split('\t');
    let mut next = |name: &str| cols.next().ok_or_else(|| err(format!("missing {name} column")));
    let id: u64 = next("id")?
        .parse()
        .map_err(|_| err("non-numeric id".into()))?;
    let s: Timestamp = next("log time")?
        .parse()
        .map_err(|_| err("non-numeric log timestamp".into()))?;
    let t = match next("conversion time")? {
        "" => None,
        v => Some(
            v.parse::<Timestamp>()
                .map_err(|_| err(format!("non-numeric conversion timestamp {v:?}")))?,
        ),
    };
    let features = cols
        .map(|tok| {
            let (idx, val) = match tok.split_once(':') {
                Some((i, v)) => (i, v.parse::<f32>().map_err(|_| err(format!("bad feature value {tok:?}")))?),
                None => (tok, 1.0),
            };
            let index = idx
                .parse::<u32>()
                .map_err(|_| err(format!("bad feature index {tok:?}")))?;
            Ok(Feature { index, value: val })
        })
        .collect::<Result<Vec<_>>>()?;
    ImpressionRecord::new(id, s, t, features, d_max).map_err(|e| err(e.to_string()))
}

pub fn write_records<'a, W: Write>(
    mut writer: W,
    records: impl IntoIterator<Item = &'a ImpressionRecord>,
) -> std::io::Result<()> {
    for r in records {
        writeln!(writer, "{}", format_record(r))?;
    }
    writer.flush()
}

/// Streams records from canonical text, skipping blank lines.
pub fn read_records<'a, R: BufRead + 'a>(
    reader: R,
    d_max: Timestamp,
) -> impl Iterator<Item = Result<ImpressionRecord>> + 'a {
    reader
        .lines()
        .enumerate()
        .filter(|(_, l)| !matches!(l, Ok(l) if l.trim().is_empty()))
        .map(move |(i, line)| {
            let line = line.map_err(|e| Error::Parse {
                line: i + 1,
                reason: e.to_string(),
            })?;
            parse_record(&line, i + 1, d_max)
        })
}
