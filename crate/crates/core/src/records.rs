//! Line-delimited JSON record I/O shared by every pipeline stage.
//!
//! All inter-stage data is JSONL: one self-contained record per line, UTF-8,
//! human-inspectable and streamable. Writers are atomic (temp file + rename)
//! and report a SHA-256 digest of the final bytes so stage manifests can
//! verify shards on resume.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad record at {path}:{line}: {source}")]
    Malformed {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

impl RecordError {
    fn io(path: &Path, source: io::Error) -> Self {
        RecordError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Count and content digest of one written shard file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardDigest {
    pub records: u64,
    pub sha256: String,
}

/// Serialize `items` to `path` as JSONL, atomically.
///
/// The bytes are written to a `.tmp` sibling and renamed into place, so a
/// crash mid-write never leaves a partial shard under the final name.
pub fn write_jsonl<T, I>(path: &Path, items: I) -> Result<ShardDigest, RecordError>
where
    T: Serialize,
    I: IntoIterator<Item = T>,
{
    let tmp = tmp_path(path);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| RecordError::io(path, e))?;
    }
    let file = File::create(&tmp).map_err(|e| RecordError::io(&tmp, e))?;
    let mut writer = BufWriter::new(file);
    let mut hasher = Sha256::new();
    let mut records = 0u64;
    for item in items {
        let mut line = serde_json::to_vec(&item).map_err(|e| RecordError::Malformed {
            path: path.to_path_buf(),
            line: records as usize + 1,
            source: e,
        })?;
        line.push(b'\n');
        hasher.update(&line);
        writer.write_all(&line).map_err(|e| RecordError::io(&tmp, e))?;
        records += 1;
    }
    writer.flush().map_err(|e| RecordError::io(&tmp, e))?;
    drop(writer);
    fs::rename(&tmp, path).map_err(|e| RecordError::io(path, e))?;
    Ok(ShardDigest {
        records,
        sha256: hex::encode(hasher.finalize()),
    })
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Streaming JSONL reader: yields one deserialized record per line.
pub struct JsonlReader<T> {
    path: PathBuf,
    lines: io::Lines<BufReader<File>>,
    line_no: usize,
    _marker: PhantomData<T>,
}

impl<T: DeserializeOwned> JsonlReader<T> {
    pub fn open(path: &Path) -> Result<Self, RecordError> {
        let file = File::open(path).map_err(|e| RecordError::io(path, e))?;
        Ok(JsonlReader {
            path: path.to_path_buf(),
            lines: BufReader::new(file).lines(),
            line_no: 0,
            _marker: PhantomData,
        })
    }
}

impl<T: DeserializeOwned> Iterator for JsonlReader<T> {
    type Item = Result<T, RecordError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.line_no += 1;
            match self.lines.next()? {
                Err(e) => return Some(Err(RecordError::io(&self.path, e))),
                Ok(line) => {
                    if line.trim().is_empty() {
                        continue;
                    }
                    return Some(serde_json::from_str(&line).map_err(|e| {
                        RecordError::Malformed {
                            path: self.path.clone(),
                            line: self.line_no,
                            source: e,
                        }
                    }));
                }
            }
        }
    }
}

/// Read a whole shard into memory. Shards are bounded by construction, so
/// this is the per-shard working set, not the corpus.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, RecordError> {
    JsonlReader::open(path)?.collect()
}

/// SHA-256 of a file's bytes, hex-encoded.
pub fn sha256_file(path: &Path) -> Result<String, RecordError> {
    let file = File::open(path).map_err(|e| RecordError::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = reader.read(&mut buf).map_err(|e| RecordError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// SHA-256 of a byte slice, hex-encoded.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// FNV-1a 64-bit hash. Used for shard assignment: unlike `DefaultHasher` it
/// is pinned here and cannot drift across toolchain versions, so shard
/// layouts stay stable between runs.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    hash
}

/// Atomically write raw bytes (temp + rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RecordError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| RecordError::io(path, e))?;
    }
    let tmp = tmp_path(path);
    fs::write(&tmp, bytes).map_err(|e| RecordError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| RecordError::io(path, e))?;
    Ok(())
}
