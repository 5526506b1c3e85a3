//! JSONL ingestion with malformed-line accounting.

use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use super::{DataError, Interaction};

#[derive(Debug, Clone, Default)]
pub struct IngestStats {
    pub kept: usize,
    pub malformed: usize,
}

/// Parse a JSONL interaction log. Lines that fail to parse or violate the
/// record invariants are skipped and counted; more than 10% malformed lines
/// is an ingest error.
pub fn ingest(path: &Path) -> Result<(Vec<Interaction>, IngestStats), DataError> {
    let file = File::open(path).map_err(DataError::Io)?;
    ingest_reader(BufReader::new(file))
}

pub fn ingest_reader<R: Read>(reader: BufReader<R>) -> Result<(Vec<Interaction>, IngestStats), DataError> {
    let mut out = Vec::new();
    let mut stats = IngestStats::default();
    for line in reader.lines() {
        let line = line.map_err(DataError::Io)?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Interaction>(&line) {
            Ok(rec) if rec.validate().is_ok() => {
                out.push(rec);
                stats.kept += 1;
            }
            _ => stats.malformed += 1,
        }
    }
    let total = stats.kept + stats.malformed;
    if total > 0 && stats.malformed * 10 > total {
        return Err(DataError::Ingest(format!(
            "{} of {} lines malformed (> 10%)",
            stats.malformed, total
        )));
    }
    Ok((out, stats))
}
