//! Loading corpora and handcrafted demonstration files (plain JSONL, one
//! object per line, UTF-8 without BOM).

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use thiserror::Error;

use crate::domain::{check_unique_ids, Demonstration, LanguageTag, Sample};
use crate::dsl::parse_program;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CorpusError {
    #[error("{path}: {message}")]
    File { path: String, message: String },
    #[error("{path}:{line}: {message}")]
    Line {
        path: String,
        line: usize,
        message: String,
    },
}

fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, CorpusError> {
    let shown = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| CorpusError::File {
        path: shown.clone(),
        message: e.to_string(),
    })?;
    if bytes.starts_with(&[0xEF, 0xBB, 0xBF]) {
        return Err(CorpusError::Line {
            path: shown,
            line: 1,
            message: "byte order mark is not allowed".into(),
        });
    }
    let mut out = Vec::new();
    for (i, line) in bytes.split(|&b| b == b'\n').enumerate() {
        let n = i + 1;
        let text = std::str::from_utf8(line).map_err(|_| CorpusError::Line {
            path: shown.clone(),
            line: n,
            message: "invalid UTF-8".into(),
        })?;
        if text.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(text).map_err(|e| CorpusError::Line {
            path: shown.clone(),
            line: n,
            message: e.to_string(),
        })?;
        out.push((n, value));
    }
    Ok(out)
}

/// Load and validate a sample corpus.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Sample>, CorpusError> {
    let path = path.as_ref();
    let rows: Vec<(usize, Sample)> = read_lines(path)?;
    let mut seen = std::collections::BTreeMap::new();
    for (line, s) in &rows {
        if let Some(first) = seen.insert(s.id.clone(), *line) {
            return Err(CorpusError::Line {
                path: path.display().to_string(),
                line: *line,
                message: format!("duplicate sample id {} (first seen on line {first})", s.id),
            });
        }
    }
    Ok(rows.into_iter().map(|(_, s)| s).collect())
}

/// Load handcrafted demonstrations. DSL steps must parse.
pub fn load_demonstrations(path: impl AsRef<Path>) -> Result<Vec<Demonstration>, CorpusError> {
    let path = path.as_ref();
    let rows: Vec<(usize, Demonstration)> = read_lines(path)?;
    for (line, d) in &rows {
        if d.steps.language_tag == LanguageTag::Dsl {
            if let Err(e) = parse_program(&d.steps.body) {
                return Err(CorpusError::Line {
                    path: path.display().to_string(),
                    line: *line,
                    message: format!("demonstration {}: {e}", d.id()),
                });
            }
        }
    }
    let demos: Vec<Demonstration> = rows.into_iter().map(|(_, d)| d).collect();
    let samples: Vec<Sample> = demos.iter().map(|d| d.sample.clone()).collect();
    check_unique_ids(&samples).map_err(|e| CorpusError::File {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    Ok(demos)
}

/// Write plain JSONL (the inverse of the loaders).
pub fn write_jsonl<T: serde::Serialize>(path: impl AsRef<Path>, items: &[T]) -> std::io::Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    if let Some(dir) = path.as_ref().parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, out)
}
