//! Append-only JSONL persistence and the run-directory layout.
//!
//! Every stored line is a JSON object carrying a `type` tag and a schema
//! version `v` next to the record's own fields. Appends write whole lines;
//! a crash can leave at most one partial trailing line, which [`scan`]
//! reports and skips and [`Appender::open`] trims before writing again.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Attempt, Demonstration, Pool, Sample};

pub const SCHEMA_VERSION: u32 = 1;

/// A record kind that can live in a typed JSONL stream.
pub trait Record: Serialize + DeserializeOwned {
    const TYPE: &'static str;
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: record schema version {found}, expected {expected}")]
    IncompatibleSchemaVersion {
        path: PathBuf,
        line: usize,
        found: u64,
        expected: u32,
    },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Serialize `record` into one envelope line, newline included.
pub fn encode<R: Record>(record: &R) -> Vec<u8> {
    let value = serde_json::to_value(record).expect("records serialize");
    let serde_json::Value::Object(fields) = value else {
        panic!("record type {} does not serialize to an object", R::TYPE);
    };
    let mut obj = serde_json::Map::new();
    obj.insert("type".into(), R::TYPE.into());
    obj.insert("v".into(), SCHEMA_VERSION.into());
    obj.extend(fields);
    let mut line = serde_json::to_vec(&serde_json::Value::Object(obj)).unwrap();
    line.push(b'\n');
    line
}

/// Single-writer append handle.
#[derive(Debug)]
pub struct Appender {
    path: PathBuf,
    file: Mutex<(File, u64)>,
}

impl Appender {
    /// Open for appending, creating the file and its parents if needed. A
    /// partial trailing line left by a crash is cut off first.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(&path))?;
        }
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(&path)
            .map_err(io_err(&path))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(io_err(&path))?;
        let keep = match bytes.iter().rposition(|&b| b == b'\n') {
            Some(i) => i as u64 + 1,
            None => 0,
        };
        if keep != bytes.len() as u64 {
            tracing::warn!(path = %path.display(), dropped = bytes.len() as u64 - keep, "trimming truncated trailing record");
            file.set_len(keep).map_err(io_err(&path))?;
        }
        file.seek(SeekFrom::Start(keep)).map_err(io_err(&path))?;
        Ok(Self {
            path,
            file: Mutex::new((file, keep)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Append one record; returns the byte offset where its line starts.
    pub fn append<R: Record>(&self, record: &R) -> Result<u64, StoreError> {
        let line = encode(record);
        let mut guard = self.file.lock().unwrap();
        let (file, offset) = &mut *guard;
        file.write_all(&line).map_err(io_err(&self.path))?;
        file.flush().map_err(io_err(&self.path))?;
        let at = *offset;
        *offset += line.len() as u64;
        Ok(at)
    }

    pub fn sync(&self) -> Result<(), StoreError> {
        let guard = self.file.lock().unwrap();
        guard.0.sync_all().map_err(io_err(&self.path))
    }
}

/// Result of reading one stream.
#[derive(Debug)]
pub struct Scan<R> {
    pub records: Vec<R>,
    /// Complete lines that failed to decode.
    pub corrupt: usize,
    /// Whether the file ended in a partial line.
    pub truncated: bool,
}

/// Read every record of type `R`. Lines of other types are skipped. A
/// missing file reads as empty.
pub fn scan<R: Record>(path: impl AsRef<Path>) -> Result<Scan<R>, StoreError> {
    scan_filter(path, |_: &R| true)
}

pub fn scan_filter<R: Record>(
    path: impl AsRef<Path>,
    mut keep: impl FnMut(&R) -> bool,
) -> Result<Scan<R>, StoreError> {
    let path = path.as_ref();
    let mut out = Scan {
        records: Vec::new(),
        corrupt: 0,
        truncated: false,
    };
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut lines: Vec<&[u8]> = bytes.split(|&b| b == b'\n').collect();
    // split leaves an empty tail after a final newline; anything else is partial
    if let Some(tail) = lines.pop() {
        if !tail.is_empty() {
            out.truncated = true;
            tracing::warn!(path = %path.display(), "ignoring truncated trailing record");
        }
    }
    for (i, line) in lines.iter().enumerate() {
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let Ok(serde_json::Value::Object(mut obj)) = serde_json::from_slice(line) else {
            out.corrupt += 1;
            tracing::warn!(path = %path.display(), line = i + 1, "skipping corrupt record");
            continue;
        };
        if obj.get("type").and_then(|t| t.as_str()) != Some(R::TYPE) {
            continue;
        }
        let version = obj.get("v").and_then(|v| v.as_u64()).unwrap_or(0);
        if version != u64::from(SCHEMA_VERSION) {
            return Err(StoreError::IncompatibleSchemaVersion {
                path: path.to_path_buf(),
                line: i + 1,
                found: version,
                expected: SCHEMA_VERSION,
            });
        }
        obj.remove("type");
        obj.remove("v");
        match serde_json::from_value::<R>(serde_json::Value::Object(obj)) {
            Ok(r) => {
                if keep(&r) {
                    out.records.push(r);
                }
            }
            Err(e) => {
                out.corrupt += 1;
                tracing::warn!(path = %path.display(), line = i + 1, error = %e, "skipping corrupt record");
            }
        }
    }
    Ok(out)
}

/// Replace `path` with `bytes` through a temporary file and a rename.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<(), StoreError> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(path))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Atomically write a whole stream of records.
pub fn write_records<'a, R: Record + 'a>(
    path: impl AsRef<Path>,
    records: impl IntoIterator<Item = &'a R>,
) -> Result<(), StoreError> {
    let mut bytes = Vec::new();
    for r in records {
        bytes.extend(encode(r));
    }
    write_atomic(path, &bytes)
}

/// Read a JSON document.
pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T, StoreError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|e| StoreError::Invalid {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<(), StoreError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("json values serialize");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

impl Record for Sample {
    const TYPE: &'static str = "sample";
}

impl Record for Demonstration {
    const TYPE: &'static str = "demonstration";
}

impl Record for Pool {
    const TYPE: &'static str = "pool";
}

/// An attempt tagged with the stage and config that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub stage: String,
    pub config_digest: String,
    #[serde(flatten)]
    pub attempt: Attempt,
}

impl Record for AttemptRecord {
    const TYPE: &'static str = "attempt";
}

/// Completion state of one stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_digest: String,
    pub format_version: String,
    pub completed: BTreeSet<String>,
    pub complete: bool,
}

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn config(&self) -> PathBuf {
        self.join("config.json")
    }

    pub fn attempts(&self) -> PathBuf {
        self.join("attempts.jsonl")
    }

    pub fn pool_a(&self) -> PathBuf {
        self.join("pool_a.jsonl")
    }

    pub fn pool_b(&self) -> PathBuf {
        self.join("pool_b.jsonl")
    }

    pub fn pool_c(&self) -> PathBuf {
        self.join("pool_c.jsonl")
    }

    pub fn pool_merged(&self) -> PathBuf {
        self.join("pool_c_merged.jsonl")
    }

    pub fn pool_handcrafted(&self) -> PathBuf {
        self.join("pool_handcrafted.jsonl")
    }

    pub fn unsolved(&self) -> PathBuf {
        self.join("unsolved.jsonl")
    }

    pub fn one_shot_results(&self) -> PathBuf {
        self.join("one_shot_results.jsonl")
    }

    pub fn results(&self) -> PathBuf {
        self.join("results.jsonl")
    }

    pub fn manifest(&self, stage: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{stage}.json"))
    }

    pub fn read_manifest(&self, stage: &str) -> Result<Option<Manifest>, StoreError> {
        let path = self.manifest(stage);
        if !path.exists() {
            return Ok(None);
        }
        read_json(path).map(Some)
    }

    pub fn checkpoint(&self, manifest: &Manifest) -> Result<(), StoreError> {
        write_json(self.manifest(&manifest.stage), manifest)
    }

    /// Record the resolved configuration of a stage in `config.json`.
    ///
    /// `config.json` maps stage names to `{digest: config}`. Writing the
    /// same digest twice is a no-op.
    pub fn record_config<T: Serialize>(
        &self,
        stage: &str,
        digest: &str,
        config: &T,
    ) -> Result<(), StoreError> {
        let path = self.config();
        let mut doc: BTreeMap<String, BTreeMap<String, serde_json::Value>> = if path.exists() {
            read_json(&path)?
        } else {
            BTreeMap::new()
        };
        let value = serde_json::to_value(config).expect("configs serialize");
        let slot = doc.entry(stage.to_string()).or_default();
        if slot.get(digest) == Some(&value) {
            return Ok(());
        }
        slot.insert(digest.to_string(), value);
        write_json(&path, &doc)
    }

    /// Configurations recorded for `stage`, keyed by digest.
    pub fn configs(&self, stage: &str) -> Result<BTreeMap<String, serde_json::Value>, StoreError> {
        let path = self.config();
        if !path.exists() {
            return Ok(BTreeMap::new());
        }
        let mut doc: BTreeMap<String, BTreeMap<String, serde_json::Value>> = read_json(&path)?;
        Ok(doc.remove(stage).unwrap_or_default())
    }
}

/// Write a pool file: the pool header followed by its demonstrations in id
/// order.
pub fn write_pool(
    path: impl AsRef<Path>,
    pool: &Pool,
    demos: &[Demonstration],
) -> Result<(), StoreError> {
    let mut sorted: Vec<&Demonstration> = demos.iter().collect();
    sorted.sort_by(|a, b| a.id().cmp(b.id()));
    let mut bytes = encode(pool);
    for d in sorted {
        bytes.extend(encode(d));
    }
    write_atomic(path, &bytes)
}

pub fn read_pool(path: impl AsRef<Path>) -> Result<(Pool, Vec<Demonstration>), StoreError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(StoreError::Invalid {
            path: path.to_path_buf(),
            message: "pool file not found".into(),
        });
    }
    let pools = scan::<Pool>(path)?;
    let pool = pools.records.into_iter().next().ok_or_else(|| StoreError::Invalid {
        path: path.to_path_buf(),
        message: "no pool header record".into(),
    })?;
    let demos = scan::<Demonstration>(path)?.records;
    let ids: BTreeSet<String> = demos.iter().map(|d| d.id().to_string()).collect();
    if ids != pool.member_ids {
        return Err(StoreError::Invalid {
            path: path.to_path_buf(),
            message: "demonstrations do not match the pool members".into(),
        });
    }
    Ok((pool, demos))
}
