//! Append-only JSON-lines session journal. Every entry is flushed to disk
//! before the write returns.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::session::{Evaluator, SessionConfig};
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::partition::DatasetPartition;
use crate::trajectory::{ClassLabel, TrajId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum JournalEvent {
    /// Everything needed to rebuild the session from scratch.
    Init {
        session_id: String,
        config: SessionConfig,
        partition: DatasetPartition,
        embedding: Embedding,
        #[serde(with = "crate::trajectory::id_map")]
        initial_labels: BTreeMap<TrajId, ClassLabel>,
        evaluator: Evaluator,
    },
    QueryIssued {
        step: usize,
        id: TrajId,
        informativeness: f64,
    },
    LabelReceived {
        step: usize,
        id: TrajId,
        /// `None` is the explicit "other / unknown" answer.
        label: Option<ClassLabel>,
        at_ms: u64,
    },
    RetrainComplete {
        step: usize,
        train_size: usize,
    },
    Metric {
        step: usize,
        value: f64,
    },
}

pub struct Journal {
    path: PathBuf,
    file: File,
}

impl Journal {
    /// Creates a new journal; fails if the file already exists.
    pub fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().write(true).create_new(true).open(path)?;
        Ok(Journal {
            path: path.to_path_buf(),
            file,
        })
    }

    /// Opens an existing journal for appending.
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(Journal {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, event: &JournalEvent) -> Result<()> {
        let mut line = serde_json::to_vec(event)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()?;
        Ok(())
    }

    pub fn append_all(&mut self, events: &[JournalEvent]) -> Result<()> {
        events.iter().try_for_each(|e| self.append(e))
    }
}

/// Reads every complete entry. A final line cut short by a crash is dropped
/// (and truncated away so later appends start on a fresh line); corruption
/// anywhere else is an error.
pub fn read_journal(path: &Path) -> Result<Vec<JournalEvent>> {
    let reader = BufReader::new(File::open(path)?);
    let mut events = Vec::new();
    let mut good_bytes = 0u64;
    let mut torn = false;
    for (n, line) in reader.split(b'\n').enumerate() {
        let line = line?;
        if torn {
            return Err(Error::Journal(format!("{}: unreadable entry at line {n}", path.display())));
        }
        if line.is_empty() {
            good_bytes += 1;
            continue;
        }
        match serde_json::from_slice(&line) {
            Ok(e) => {
                events.push(e);
                good_bytes += line.len() as u64 + 1;
            }
            Err(_) => torn = true,
        }
    }
    if torn {
        log::warn!("{}: dropping a torn final entry", path.display());
        OpenOptions::new().write(true).open(path)?.set_len(good_bytes)?;
    } else {
        // A valid last entry may still lack its newline.
        let len = std::fs::metadata(path)?.len();
        if len < good_bytes {
            OpenOptions::new().append(true).open(path)?.write_all(b"\n")?;
        }
    }
    Ok(events)
}
