use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{Description, DescribeError, Provenance, Source};

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    text: String,
    source: Source,
    version: String,
    created: DateTime<Utc>,
}

/// Append-only JSON-lines store of descriptions keyed by content hash.
///
/// Reads go through an in-memory index; writes are serialized through one
/// file handle.
pub struct DescriptionCache {
    path: PathBuf,
    index: RwLock<HashMap<String, Description>>,
    writer: Mutex<File>,
}

impl DescriptionCache {
    pub fn open(path: &Path) -> Result<Self, DescribeError> {
        let mut index = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (lineno, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheLine>(&line) {
                    Ok(l) => {
                        index.insert(
                            l.key.clone(),
                            Description {
                                text: l.text,
                                cache_key: l.key,
                                provenance: Provenance {
                                    source: l.source,
                                    version: l.version,
                                    created: l.created,
                                },
                            },
                        );
                    }
                    Err(e) => log::warn!("{}:{}: skipping corrupt cache line: {e}", path.display(), lineno + 1),
                }
            }
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let writer = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { path: path.to_path_buf(), index: RwLock::new(index), writer: Mutex::new(writer) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.index.read().expect("poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Most recent entry for `key`.
    pub fn get(&self, key: &str) -> Option<Description> {
        self.index.read().expect("poisoned").get(key).cloned()
    }

    /// Appends `desc` unless an entry with identical content already exists.
    pub fn put(&self, desc: &Description) -> Result<(), DescribeError> {
        let mut writer = self.writer.lock().expect("poisoned");
        {
            let index = self.index.read().expect("poisoned");
            if let Some(existing) = index.get(&desc.cache_key) {
                if existing.text == desc.text
                    && existing.provenance.source == desc.provenance.source
                    && existing.provenance.version == desc.provenance.version
                {
                    return Ok(());
                }
            }
        }
        let line = serde_json::to_string(&CacheLine {
            key: desc.cache_key.clone(),
            text: desc.text.clone(),
            source: desc.provenance.source,
            version: desc.provenance.version.clone(),
            created: desc.provenance.created,
        })
        .expect("serializable");
        writeln!(writer, "{line}")?;
        writer.flush()?;
        self.index.write().expect("poisoned").insert(desc.cache_key.clone(), desc.clone());
        Ok(())
    }
}
