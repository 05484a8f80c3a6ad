//! Line-delimited JSON files with an optional `schema_version` header line.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: &str = "1";

/// One parsed data line with its 1-based line number.
#[derive(Debug, Clone)]
pub struct Numbered<T> {
    pub line: usize,
    pub value: T,
}

pub fn header_line(version: &str) -> String {
    serde_json::json!({ "schema_version": version }).to_string()
}

fn header_version(value: &Value) -> Option<String> {
    let obj = value.as_object()?;
    if obj.len() != 1 {
        return None;
    }
    obj.get("schema_version")
        .and_then(|v| v.as_str().map(str::to_owned).or_else(|| v.as_u64().map(|n| n.to_string())))
}

/// Read a headered file. An empty file yields no records; a non-empty file
/// must start with a header whose version equals `expected_version`.
pub fn read_versioned<T: DeserializeOwned>(path: &Path, expected_version: &str) -> Result<Vec<Numbered<T>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen_header = false;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if !seen_header {
            let value: Value = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
                line: line_no,
                message: e.to_string(),
            })?;
            let found = header_version(&value).ok_or_else(|| Error::MalformedLine {
                line: line_no,
                message: "expected a {\"schema_version\": ...} header record".into(),
            })?;
            if found != expected_version {
                return Err(Error::VersionMismatch {
                    expected: expected_version.to_owned(),
                    found,
                });
            }
            seen_header = true;
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push(Numbered { line: line_no, value });
    }
    Ok(out)
}

/// Read a header-less file, skipping blank lines.
pub fn read_plain<T: DeserializeOwned>(path: &Path) -> Result<Vec<Numbered<T>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(Numbered { line: idx + 1, value });
    }
    Ok(out)
}

pub fn write_versioned<T: Serialize>(path: &Path, version: &str, items: &[T]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", header_line(version)).map_err(io)?;
    for item in items {
        writeln!(w, "{}", serde_json::to_string(item)?).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_plain<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        writeln!(w, "{}", serde_json::to_string(item)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Append one record, creating the file if needed.
pub fn append<T: Serialize>(path: &Path, item: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_string(item)?;
    line.push('\n');
    file.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}
