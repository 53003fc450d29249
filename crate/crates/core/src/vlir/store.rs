//! Append-only corpus storage.
//!
//! ```text
//! <dir>/corpus.jsonl      accepted samples, one per line
//! <dir>/processed.jsonl   every finished sample id with its outcome
//! <dir>/retry.jsonl       samples parked after repeated client failures
//! <dir>/images/<sha256>.png
//! ```
//!
//! A sample id found in either of the first two files is never processed
//! again, so an interrupted run can simply be restarted.

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Rejection, SchemaViolation, VlirSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessedRecord {
    pub sample_id: String,
    pub status: ProcessedStatus,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejections: Vec<Rejection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessedStatus {
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParkedRecord {
    pub sample_id: String,
    pub stage: String,
    pub reason: String,
}

#[derive(Debug)]
pub struct CorpusStore {
    dir: PathBuf,
    lock: Mutex<()>,
}

impl CorpusStore {
    pub const CORPUS: &'static str = "corpus.jsonl";
    pub const PROCESSED: &'static str = "processed.jsonl";
    pub const RETRY: &'static str = "retry.jsonl";

    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(dir.join("images"))?;
        Ok(CorpusStore {
            dir,
            lock: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn append<T: Serialize>(&self, name: &str, value: &T) -> std::io::Result<()> {
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut f = OpenOptions::new().create(true).append(true).open(self.path(name))?;
        let mut line = serde_json::to_vec(value)?;
        line.push(b'\n');
        f.write_all(&line)?;
        f.flush()
    }

    pub fn append_sample(&self, sample: &VlirSample) -> std::io::Result<()> {
        self.append(Self::CORPUS, sample)
    }

    pub fn mark_processed(&self, record: &ProcessedRecord) -> std::io::Result<()> {
        self.append(Self::PROCESSED, record)
    }

    pub fn park(&self, record: &ParkedRecord) -> std::io::Result<()> {
        self.append(Self::RETRY, record)
    }

    /// Ids already decided, from both the corpus and the processed log.
    pub fn processed_ids(&self) -> std::io::Result<HashSet<String>> {
        let mut ids: HashSet<String> = read_lines::<ProcessedRecord>(&self.path(Self::PROCESSED))?
            .into_iter()
            .map(|r| r.sample_id)
            .collect();
        ids.extend(
            read_lines::<serde_json::Value>(&self.path(Self::CORPUS))?
                .into_iter()
                .filter_map(|v| v.get("sample_id").and_then(|s| s.as_str()).map(str::to_string)),
        );
        Ok(ids)
    }

    pub fn parked(&self) -> std::io::Result<Vec<ParkedRecord>> {
        read_lines(&self.path(Self::RETRY))
    }

    pub fn load_corpus(&self) -> Result<Vec<VlirSample>, StoreError> {
        load_corpus(&self.path(Self::CORPUS))
    }

    /// Write PNG bytes under their content hash; returns the hex digest.
    pub fn store_image(&self, png: &[u8]) -> std::io::Result<String> {
        let sha = hex::encode(Sha256::digest(png));
        let path = self.image_path(&sha);
        if !path.exists() {
            let tmp = path.with_extension("tmp");
            fs::write(&tmp, png)?;
            fs::rename(tmp, &path)?;
        }
        Ok(sha)
    }

    pub fn image_path(&self, sha: &str) -> PathBuf {
        self.dir.join("images").join(format!("{sha}.png"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Schema(#[from] SchemaViolation),
}

/// Read a JSONL file; a missing file is empty. A truncated final line
/// (an interrupted append) is skipped with a warning; any other
/// malformed line is an error.
fn read_lines<T: DeserializeOwned>(path: &Path) -> std::io::Result<Vec<T>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let lines: Vec<String> = BufReader::new(file).lines().collect::<Result<_, _>>()?;
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(v) => out.push(v),
            Err(e) if i + 1 == lines.len() => {
                log::warn!("{}: ignoring truncated final line: {e}", path.display());
            }
            Err(e) => {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("{}:{}: {e}", path.display(), i + 1),
                ))
            }
        }
    }
    Ok(out)
}

/// Load a corpus file, mapping malformed records to schema violations.
pub fn load_corpus(path: &Path) -> Result<Vec<VlirSample>, StoreError> {
    read_lines(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::InvalidData {
            StoreError::Schema(SchemaViolation {
                sample_id: String::new(),
                reason: e.to_string(),
            })
        } else {
            StoreError::Io(e)
        }
    })
}

pub fn write_corpus(path: &Path, samples: &[VlirSample]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut f, s)?;
        f.write_all(b"\n")?;
    }
    f.flush()
}
