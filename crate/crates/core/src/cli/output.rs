//! Atomic report writing and the append-only run manifest.

use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Write `bytes` to a temporary sibling and rename it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "output path has no file name"))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".{}.tmp", std::process::id()));
    let tmp = dir.join(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

pub fn json_bytes<T: Serialize>(value: &T) -> io::Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    write_atomic(path, &json_bytes(value)?)
}

/// CSV text from serializable rows, header taken from the field names.
pub fn csv_bytes<T: Serialize>(rows: &[T]) -> io::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| io::Error::other(e.to_string()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> io::Result<()> {
    write_atomic(path, &csv_bytes(rows)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

impl InputFile {
    pub fn read(path: &Path) -> io::Result<(Self, Vec<u8>)> {
        let bytes = fs::read(path)?;
        Ok((
            Self {
                path: path.to_path_buf(),
                sha256: sha256_hex(&bytes),
            },
            bytes,
        ))
    }
}

/// Provenance of one CLI invocation.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub run_id: String,
    pub subcommand: String,
    pub config: serde_json::Value,
    pub inputs: Vec<InputFile>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub duration_ms: f64,
}

impl RunManifest {
    /// The run id hashes everything that determines the outputs, so identical
    /// invocations share an id.
    pub fn new(subcommand: &str, config: serde_json::Value, inputs: Vec<InputFile>, seed: Option<u64>) -> Self {
        let tool_version = env!("CARGO_PKG_VERSION").to_string();
        let key = serde_json::json!({
            "subcommand": subcommand,
            "config": config,
            "inputs": inputs.iter().map(|i| &i.sha256).collect::<Vec<_>>(),
            "seed": seed,
            "tool_version": tool_version,
        });
        let run_id = sha256_hex(key.to_string().as_bytes())[..16].to_string();
        Self {
            run_id,
            subcommand: subcommand.to_string(),
            config,
            inputs,
            outputs: Vec::new(),
            seed,
            tool_version,
            duration_ms: 0.0,
        }
    }

    /// Append as one JSON line.
    pub fn append_to(&self, path: &Path) -> io::Result<()> {
        let mut line = serde_json::to_vec(self)?;
        line.push(b'\n');
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        f.write_all(&line)
    }
}

/// A report body tagged with the run that produced it.
#[derive(Debug, Serialize)]
pub struct Tagged<'a, T: Serialize> {
    pub run_id: &'a str,
    #[serde(flatten)]
    pub body: T,
}
