//! Criteo conversion-log parser.
//!
//! Layout (tab separated, 19 columns): click timestamp, conversion
//! timestamp (empty if none), 8 integer features, 9 categorical features.
//! Integer values above 2 are bucketized by `floor(ln(v)^2)` before hashing;
//! smaller values keep their own token.

use std::io::BufRead;

use crate::domain::{ImpressionRecord, Timestamp, DAY};
use crate::error::{Error, Result};
use crate::ingest::FeatureHasher;

pub const N_INT_FIELDS: usize = 8;
pub const N_CAT_FIELDS: usize = 9;
pub const N_COLUMNS: usize = 2 + N_INT_FIELDS + N_CAT_FIELDS;
pub const DEFAULT_D_MAX: Timestamp = 30 * DAY;

#[derive(Debug, Clone, Copy)]
pub struct CriteoParser {
    pub hasher: FeatureHasher,
    pub d_max: Timestamp,
}

impl CriteoParser {
    pub fn new(n_buckets: u32) -> Result<Self> {
        Ok(Self {
            hasher: FeatureHasher::new(n_buckets, (N_INT_FIELDS + N_CAT_FIELDS) as u32)?,
            d_max: DEFAULT_D_MAX,
        })
    }

    pub fn with_d_max(mut self, d_max: Timestamp) -> Self {
        self.d_max = d_max;
        self
    }

    /// Parses one line; `line_no` is 1-based and used for ids and errors.
    pub fn parse_line(&self, line: &str, line_no: usize) -> Result<ImpressionRecord> {
        let err = |reason: String| Error::Parse {
            line: line_no,
            reason,
        };
        let cols: Vec<&str> = line.trim_end_matches(['\r', '\n']).split('\t').collect();
        if cols.len() != N_COLUMNS {
            return Err(err(format!("expected {N_COLUMNS} columns, found {}", cols.len())));
        }
        let s: Timestamp = cols[0]
            .trim()
            .parse()
            .map_err(|_| err(format!("non-numeric click timestamp {:?}", cols[0])))?;
        let t = match cols[1].trim() {
            "" => None,
            v => Some(
                v.parse::<Timestamp>()
                    .map_err(|_| err(format!("non-numeric conversion timestamp {v:?}")))?,
            ),
        };

        let mut tokens: Vec<String> = Vec::with_capacity(N_INT_FIELDS + N_CAT_FIELDS);
        for (i, raw) in cols[2..2 + N_INT_FIELDS].iter().enumerate() {
            let raw = raw.trim();
            if raw.is_empty() {
                tokens.push(String::new());
                continue;
            }
            let v: i64 = raw
                .parse()
                .map_err(|_| err(format!("integer feature {} is not numeric: {raw:?}", i + 1)))?;
            tokens.push(int_token(v));
        }
        tokens.extend(cols[2 + N_INT_FIELDS..].iter().map(|c| c.trim().to_string()));

        let features = self.hasher.hash_features(&tokens);
        ImpressionRecord::new((line_no - 1) as u64, s, t, features, self.d_max)
            .map_err(|e| err(e.to_string()))
    }

    /// Streams records from a reader, one per non-empty line.
    pub fn records<'a, R: BufRead + 'a>(
        &'a self,
        reader: R,
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
                self.parse_line(&line, i + 1)
            })
    }
}

/// Token for an integer feature value.
pub fn int_token(v: i64) -> String {
    if v > 2 {
        let l = (v as f64).ln();
        format!("b{}", (l * l).floor() as i64)
    } else {
        format!("v{v}")
    }
}
