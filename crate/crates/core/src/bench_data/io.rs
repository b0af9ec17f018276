use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::encoding::{ArchitectureRecord, EncodingLayout};
use crate::error::{Error, Result};

/// Reads a line-delimited JSON record file. Blank lines are skipped; every
/// other line must parse and pass the layout's invariants.
pub fn load_records(path: &Path, layout: &EncodingLayout) -> Result<Vec<ArchitectureRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: ArchitectureRecord =
            serde_json::from_str(&line).map_err(|e| Error::Line {
                line: lineno,
                reason: e.to_string(),
            })?;
        if record.family != layout.family {
            return Err(Error::Line {
                line: lineno,
                reason: format!(
                    "record {} has family {:?}, expected {:?}",
                    record.id, record.family, layout.family
                ),
            });
        }
        record
            .validate(layout.resolution, layout.cells)
            .map_err(|e| Error::Line {
                line: lineno,
                reason: e.to_string(),
            })?;
        if !ids.insert(record.id.clone()) {
            return Err(Error::Line {
                line: lineno,
                reason: format!("duplicate id {}", record.id),
            });
        }
        out.push(record);
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[ArchitectureRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// First record without an accuracy, if any.
pub fn first_unlabeled(records: &[ArchitectureRecord]) -> Option<&ArchitectureRecord> {
    records.iter().find(|r| r.accuracy.is_none())
}
