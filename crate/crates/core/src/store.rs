//! Persistent completion records, one file per request.
//!
//! Layout: `<root>/<group>/<step>/<tech>/<run>.rec`, repair attempts as
//! `<run>.repair<k>.rec`, plus a sorted `manifest` of relative paths.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use crate::backend::{CompletionRecord, RequestKey};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub const MANIFEST: &str = "manifest";

#[derive(Debug)]
pub struct RunStore {
    root: PathBuf,
    manifest_lock: Mutex<()>,
    tmp_counter: AtomicU64,
}

/// Store-relative path of the record for `key`, with `/` separators.
pub fn record_path(key: &RequestKey) -> String {
    let file = if key.attempt == 0 {
        format!("{}.rec", key.run_index)
    } else {
        format!("{}.repair{}.rec", key.run_index, key.attempt)
    };
    format!(
        "{}/{}/{}/{}",
        key.group_id,
        key.step.slug(),
        key.technique.slug(),
        file
    )
}

impl RunStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_at(&root))?;
        Ok(RunStore {
            root,
            manifest_lock: Mutex::new(()),
            tmp_counter: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn abs(&self, key: &RequestKey) -> PathBuf {
        self.root.join(record_path(key))
    }

    /// A stored record, or `None` when absent. Unreadable records count as absent.
    pub fn load(&self, key: &RequestKey) -> Result<Option<CompletionRecord>, StoreError> {
        let path = self.abs(key);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_at(&path)(e)),
        };
        match serde_json::from_str::<CompletionRecord>(&text) {
            Ok(r) if r.request.key == *key => Ok(Some(r)),
            Ok(_) => {
                tracing::warn!(path = %path.display(), "record key does not match its location; ignoring");
                Ok(None)
            }
            Err(e) => {
                tracing::warn!(path = %path.display(), error = %e, "unreadable record; ignoring");
                Ok(None)
            }
        }
    }

    pub fn save(&self, rec: &CompletionRecord) -> Result<(), StoreError> {
        let path = self.abs(&rec.request.key);
        let mut text = serde_json::to_string_pretty(rec).map_err(|e| StoreError::Corrupt {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        text.push('\n');
        self.write_atomic(&path, text.as_bytes())
    }

    fn write_atomic(&self, path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
        let dir = path.parent().expect("record paths have a parent");
        fs::create_dir_all(dir).map_err(io_at(dir))?;
        let n = self.tmp_counter.fetch_add(1, Ordering::SeqCst);
        let name = path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let tmp = dir.join(format!(".{name}.tmp-{}-{n}", std::process::id()));
        {
            let mut f = fs::File::create(&tmp).map_err(io_at(&tmp))?;
            f.write_all(bytes).map_err(io_at(&tmp))?;
            f.sync_all().map_err(io_at(&tmp))?;
        }
        fs::rename(&tmp, path).map_err(io_at(path))
    }

    /// All record paths currently in the store, sorted.
    pub fn list(&self) -> Result<Vec<String>, StoreError> {
        let mut out = Vec::new();
        for entry in walkdir::WalkDir::new(&self.root).min_depth(1) {
            let entry = entry.map_err(|e| StoreError::Corrupt {
                path: self.root.clone(),
                detail: e.to_string(),
            })?;
            let p = entry.path();
            if entry.file_type().is_file() && p.extension().is_some_and(|x| x == "rec") {
                let rel = p.strip_prefix(&self.root).expect("walk stays under root");
                let parts: Vec<String> = rel
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy().into_owned())
                    .collect();
                out.push(parts.join("/"));
            }
        }
        out.sort();
        Ok(out)
    }

    /// Rewrite the manifest from the directory contents; returns the record count.
    pub fn write_manifest(&self) -> Result<usize, StoreError> {
        let _guard = self.manifest_lock.lock().unwrap_or_else(|e| e.into_inner());
        let list = self.list()?;
        let mut text = list.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        self.write_atomic(&self.root.join(MANIFEST), text.as_bytes())?;
        Ok(list.len())
    }
}
