//! Append-only log of backend calls, one JSON object per line.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::BackendError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub operation: String,
    pub backend_id: String,
    pub request_digest: String,
    pub attempt: u32,
    pub latency_ms: f64,
    pub outcome: String,
}

#[derive(Debug, Default)]
pub struct AuditLog {
    path: Option<PathBuf>,
    inner: Mutex<AuditInner>,
}

#[derive(Debug, Default)]
struct AuditInner {
    file: Option<File>,
    records: Vec<AuditRecord>,
}

impl AuditLog {
    /// In-memory only.
    pub fn memory() -> Self {
        Self::default()
    }

    /// Appends to `path` as well as keeping records in memory.
    pub fn to_file(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| BackendError::io(parent, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| BackendError::io(path, e))?;
        Ok(Self {
            path: Some(path.to_path_buf()),
            inner: Mutex::new(AuditInner {
                file: Some(file),
                records: Vec::new(),
            }),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn record(&self, rec: AuditRecord) -> Result<(), BackendError> {
        let mut inner = self.inner.lock().expect("audit lock");
        if let Some(file) = inner.file.as_mut() {
            let line = serde_json::to_string(&rec).expect("audit record serializes");
            writeln!(file, "{line}").map_err(|e| {
                BackendError::io(self.path.clone().unwrap_or_default(), e)
            })?;
        }
        inner.records.push(rec);
        Ok(())
    }

    pub fn records(&self) -> Vec<AuditRecord> {
        self.inner.lock().expect("audit lock").records.clone()
    }

    /// Number of records for `backend_id`.
    pub fn count_for(&self, backend_id: &str) -> usize {
        self.inner
            .lock()
            .expect("audit lock")
            .records
            .iter()
            .filter(|r| r.backend_id == backend_id)
            .count()
    }
}
