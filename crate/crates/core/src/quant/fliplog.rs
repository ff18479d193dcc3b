//! JSON-lines flip log: one [`FlipRecord`] per line plus the iteration that
//! committed it and a run timestamp.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{FlipRecord, Scheme};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipLogEntry {
    #[serde(flatten)]
    pub record: FlipRecord,
    /// 1-based search iteration that committed the flip.
    pub iteration: usize,
    /// Seconds since the Unix epoch supplied by the caller (0 when unset).
    pub timestamp: u64,
}

pub fn write_flip_log<W: Write>(mut out: W, entries: &[FlipLogEntry]) -> Result<()> {
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses a flip log, checking each record's XOR relation for `scheme`.
/// Blank lines are skipped.
pub fn parse_flip_log(text: &str, scheme: Scheme) -> Result<Vec<FlipLogEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let e: FlipLogEntry = serde_json::from_str(line)
                .map_err(|err| Error::Input(format!("flip log line {}: {err}", n + 1)))?;
            if !e.record.xor_consistent(scheme) {
                return Err(Error::Corruption(format!(
                    "flip log line {}: code_after is not code_before with bit {} flipped",
                    n + 1,
                    e.record.bit_index
                )));
            }
            Ok(e)
        })
        .collect()
}
