//! Append-only on-disk embedding cache.
//!
//! Each line is a JSON record `{key_hash, dim, values, checksum}`. A record
//! whose checksum does not match its contents is ignored on load, so a torn
//! or corrupted line degrades to a cache miss.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::EmbeddingVector;
use crate::error::Result;

#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    key_hash: String,
    dim: usize,
    values: Vec<f64>,
    checksum: String,
}

fn record_checksum(key_hash: &str, values: &[f64]) -> String {
    let mut h = Sha256::new();
    h.update(key_hash.as_bytes());
    h.update((values.len() as u64).to_le_bytes());
    for v in values {
        h.update(v.to_bits().to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

fn ends_with_newline(path: &Path) -> Result<bool> {
    use std::io::{Read, Seek, SeekFrom};
    let mut f = File::open(path)?;
    f.seek(SeekFrom::End(-1))?;
    let mut last = [0u8; 1];
    f.read_exact(&mut last)?;
    Ok(last[0] == b'\n')
}

#[derive(Debug)]
pub struct EmbeddingCache {
    path: PathBuf,
    entries: RwLock<HashMap<String, Vec<f64>>>,
    writer: Mutex<BufWriter<File>>,
    corrupt_records: usize,
}

impl EmbeddingCache {
    /// Opens (or creates) the cache file, loading every intact record.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let mut entries = HashMap::new();
        let mut corrupt = 0;
        if path.exists() {
            for line in BufReader::new(File::open(&path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheRecord>(&line) {
                    Ok(r)
                        if r.values.len() == r.dim
                            && r.values.iter().all(|v| v.is_finite())
                            && record_checksum(&r.key_hash, &r.values) == r.checksum =>
                    {
                        entries.insert(r.key_hash, r.values);
                    }
                    _ => corrupt += 1,
                }
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(&path)?;
        // A torn final line must not swallow the next appended record.
        let contents_len = file.metadata()?.len();
        if contents_len > 0 && !ends_with_newline(&path)? {
            file.write_all(b"\n")?;
        }
        Ok(Self {
            path,
            entries: RwLock::new(entries),
            writer: Mutex::new(BufWriter::new(file)),
            corrupt_records: corrupt,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Records skipped on load because they failed validation.
    pub fn corrupt_records(&self) -> usize {
        self.corrupt_records
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key_hash: &str) -> Option<EmbeddingVector> {
        self.entries
            .read()
            .expect("cache lock poisoned")
            .get(key_hash)
            .map(|v| EmbeddingVector::new(v.clone()))
    }

    pub fn put(&self, key_hash: &str, vector: &EmbeddingVector) -> Result<()> {
        self.put_many(std::iter::once((key_hash, vector)))
    }

    /// Appends several entries under a single writer lock and flushes once.
    pub fn put_many<'a, I>(&self, items: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a EmbeddingVector)>,
    {
        let mut writer = self.writer.lock().expect("cache lock poisoned");
        let mut entries = self.entries.write().expect("cache lock poisoned");
        for (key, vector) in items {
            if entries.contains_key(key) {
                continue;
            }
            let record = CacheRecord {
                key_hash: key.to_string(),
                dim: vector.dim(),
                values: vector.values().to_vec(),
                checksum: record_checksum(key, vector.values()),
            };
            serde_json::to_writer(&mut *writer, &record)?;
            writer.write_all(b"\n")?;
            entries.insert(record.key_hash, record.values);
        }
        writer.flush()?;
        Ok(())
    }
}
