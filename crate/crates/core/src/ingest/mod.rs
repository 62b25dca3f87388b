//! Log ingestion: feature hashing, the Criteo parser, and the canonical
//! on-disk format. Plain and gzip-compressed inputs are both accepted.

pub mod canonical;
pub mod criteo;
mod hasher;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

pub use criteo::CriteoParser;
pub use hasher::{fnv1a, FeatureHasher};

use crate::domain::{ImpressionRecord, Timestamp};
use crate::error::{Error, Result};

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

/// Opens a text log, transparently decompressing gzip (detected by magic bytes).
pub fn open_text(path: &Path) -> Result<Box<dyn BufRead>> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 2];
    let n = file.read(&mut magic).map_err(|e| Error::io(path, e))?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    if n == 2 && magic == GZIP_MAGIC {
        Ok(Box::new(BufReader::new(MultiGzDecoder::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

/// Creates a text log for writing; a `.gz` extension selects gzip.
pub fn create_text(path: &Path) -> Result<Box<dyn Write>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(GzEncoder::new(BufWriter::new(file), Compression::default())))
    } else {
        Ok(Box::new(BufWriter::new(file)))
    }
}

pub fn read_canonical(path: &Path, d_max: Timestamp) -> Result<Vec<ImpressionRecord>> {
    canonical::read_records(open_text(path)?, d_max).collect()
}

pub fn write_canonical(path: &Path, records: &[ImpressionRecord]) -> Result<()> {
    let mut w = create_text(path)?;
    canonical::write_records(&mut w, records).map_err(|e| Error::io(path, e))?;
    drop(w);
    Ok(())
}

pub fn read_criteo(path: &Path, parser: &CriteoParser) -> Result<Vec<ImpressionRecord>> {
    parser.records(open_text(path)?).collect()
}

/// Restores log-time order; ties keep their id order.
pub fn sort_by_log_time(records: &mut [ImpressionRecord]) {
    records.sort_by_key(|r| (r.log_time, r.id));
}

pub fn is_sorted_by_log_time(records: &[ImpressionRecord]) -> bool {
    records.windows(2).all(|w| w[0].log_time <= w[1].log_time)
}
