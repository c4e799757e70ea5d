//! Artifact writers. Every file is written to a temporary sibling and
//! renamed into place, so readers never see partial output.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::output(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| CliError::output(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::output(path, e))
}

/// CSV text with a leading `# schema:` comment naming the columns.
pub fn csv_text<R: Serialize>(schema: &str, rows: &[R]) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    writeln!(buf, "# schema: {schema}").expect("vec write");
    let mut w = csv::Writer::from_writer(buf);
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Internal(format!("csv encoding: {e}")))?;
    }
    w.into_inner().map_err(|e| CliError::Internal(format!("csv encoding: {e}")))
}

/// Reads CSV written by [`csv_text`], skipping the schema comment.
pub fn read_csv<R: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<R>, csv::Error> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes())
        .deserialize()
        .collect()
}

pub fn jsonl_text<R: Serialize>(rows: &[R]) -> Vec<u8> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).expect("plain data serializes");
        buf.push(b'\n');
    }
    buf
}

/// Record of one command invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub started: String,
    pub finished: String,
    /// Every resolved setting; feeding this file back via `--config`
    /// repeats the run.
    pub config: BTreeMap<String, String>,
    /// Artifact name to path.
    pub artifacts: BTreeMap<String, String>,
    pub summary: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: BTreeMap<String, String>) -> Self {
        Self {
            tool: "addrop".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            started: now(),
            finished: String::new(),
            config,
            artifacts: BTreeMap::new(),
            summary: serde_json::Value::Null,
        }
    }

    pub fn artifact(&mut self, name: &str, path: &Path) {
        self.artifacts.insert(name.into(), path.display().to_string());
    }

    pub fn finish(mut self, path: &Path, summary: serde_json::Value) -> Result<(), CliError> {
        self.finished = now();
        self.summary = summary;
        let text = serde_json::to_vec_pretty(&self).expect("manifest serializes");
        atomic_write(path, &text)
    }

    pub fn load(path: &Path) -> Option<Self> {
        let text = std::fs::read_to_string(path).ok()?;
        serde_json::from_str(&text).ok()
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}
