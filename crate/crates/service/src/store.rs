//! Append-only logs of worker registrations and clusterings.
//!
//! A single writer appends whole lines and then publishes the new committed
//! length. Readers copy only the committed prefix, so a snapshot never sees
//! a torn record and never takes the writer's lock.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use cen_core::annotation::{ClusteringRecord, FORMAT_VERSION};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

pub const CLUSTERINGS_FILE: &str = "clusterings.jsonl";
pub const WORKERS_FILE: &str = "workers.jsonl";

/// One token-to-index registration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkerRecord {
    pub version: u32,
    pub token: String,
    pub worker: usize,
}

struct Log {
    path: PathBuf,
    writer: Mutex<File>,
    committed: AtomicU64,
}

impl Log {
    fn open(path: PathBuf) -> Result<(Self, Vec<String>)> {
        let mut lines = Vec::new();
        let mut len = 0;
        if path.exists() {
            let mut bytes = Vec::new();
            File::open(&path)?.read_to_end(&mut bytes)?;
            if !bytes.is_empty() && bytes.last() != Some(&b'\n') {
                return Err(ServiceError::Storage(format!(
                    "{}: line {} is truncated",
                    path.display(),
                    bytes.iter().filter(|&&b| b == b'\n').count() + 1
                )));
            }
            for line in BufReader::new(bytes.as_slice()).lines() {
                lines.push(line?);
            }
            len = bytes.len() as u64;
        }
        let writer = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok((
            Self {
                path,
                writer: Mutex::new(writer),
                committed: AtomicU64::new(len),
            },
            lines,
        ))
    }

    fn append(&self, line: &str) -> Result<()> {
        debug_assert!(!line.contains('\n'));
        let mut w = self.writer.lock().map_err(|_| ServiceError::Storage("writer poisoned".into()))?;
        let mut buf = Vec::with_capacity(line.len() + 1);
        buf.extend_from_slice(line.as_bytes());
        buf.push(b'\n');
        w.write_all(&buf)?;
        w.flush()?;
        w.sync_data()?;
        self.committed.fetch_add(buf.len() as u64, Ordering::Release);
        Ok(())
    }

    fn snapshot(&self) -> Result<Vec<u8>> {
        let len = self.committed.load(Ordering::Acquire);
        let mut out = Vec::with_capacity(len as usize);
        File::open(&self.path)?.take(len).read_to_end(&mut out)?;
        if out.len() as u64 != len {
            return Err(ServiceError::Storage(format!("{} shrank while reading", self.path.display())));
        }
        Ok(out)
    }
}

/// Records recovered when a store is reopened.
#[derive(Debug, Default)]
pub struct Replay {
    pub workers: Vec<WorkerRecord>,
    pub clusterings: Vec<ClusteringRecord>,
}

pub struct Store {
    clusterings: Log,
    workers: Log,
}

fn parse<T: for<'de> Deserialize<'de>>(file: &Path, n: usize, line: &str) -> Result<T> {
    serde_json::from_str(line).map_err(|e| ServiceError::Storage(format!("{}: line {}: {e}", file.display(), n + 1)))
}

impl Store {
    pub fn open(dir: impl AsRef<Path>) -> Result<(Self, Replay)> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let (clusterings, c_lines) = Log::open(dir.join(CLUSTERINGS_FILE))?;
        let (workers, w_lines) = Log::open(dir.join(WORKERS_FILE))?;
        let mut replay = Replay::default();
        for (n, line) in w_lines.iter().enumerate() {
            let rec: WorkerRecord = parse(&workers.path, n, line)?;
            if rec.version != FORMAT_VERSION || rec.worker != replay.workers.len() {
                return Err(ServiceError::Storage(format!(
                    "{}: line {}: malformed registration",
                    workers.path.display(),
                    n + 1
                )));
            }
            replay.workers.push(rec);
        }
        for (n, line) in c_lines.iter().enumerate() {
            replay.clusterings.push(parse(&clusterings.path, n, line)?);
        }
        Ok((Self { clusterings, workers }, replay))
    }

    pub fn append_worker(&self, rec: &WorkerRecord) -> Result<()> {
        self.workers.append(&serde_json::to_string(rec).expect("serializable"))
    }

    pub fn append_clustering(&self, rec: &ClusteringRecord) -> Result<()> {
        self.clusterings.append(&serde_json::to_string(rec).expect("serializable"))
    }

    /// Committed prefix of the clustering log.
    pub fn snapshot(&self) -> Result<Vec<u8>> {
        self.clusterings.snapshot()
    }
}
