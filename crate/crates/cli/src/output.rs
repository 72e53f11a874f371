//! Artifact writing: CSV tables, JSON documents and the run manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::CliError;

pub const MANIFEST_NAME: &str = "manifest.json";

/// 17 significant digits.
pub fn fmt_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// A CSV table with a one-line header.
#[derive(Clone, Debug)]
pub struct Csv {
    text: String,
    columns: usize,
}

impl Csv {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        let cols: Vec<&str> = header.iter().map(|s| s.as_ref()).collect();
        Self {
            text: format!("{}\n", cols.join(",")),
            columns: cols.len(),
        }
    }

    pub fn row(&mut self, values: &[f64]) {
        debug_assert_eq!(values.len(), self.columns);
        for (i, v) in values.iter().enumerate() {
            if i > 0 {
                self.text.push(',');
            }
            let _ = write!(self.text, "{}", fmt_float(*v));
        }
        self.text.push('\n');
    }

    /// A row whose first column is a label.
    pub fn labeled_row(&mut self, label: &str, values: &[f64]) {
        debug_assert_eq!(values.len() + 1, self.columns);
        self.text.push_str(label);
        for v in values {
            let _ = write!(self.text, ",{}", fmt_float(*v));
        }
        self.text.push('\n');
    }

    pub fn into_string(self) -> String {
        self.text
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub phase: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub phase: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Software {
    pub name: String,
    pub version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub software: Software,
    pub command: String,
    pub config: ExperimentConfig,
    pub status: String,
    pub failure: Option<FailureRecord>,
    pub timings: Vec<PhaseTiming>,
    pub files: Vec<FileEntry>,
    /// Headline numbers (ρ, dt, final errors) for quick inspection.
    pub summary: serde_json::Map<String, serde_json::Value>,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Incompatible(format!("{}: {e}", path.display())))
    }

    /// Checks that every listed file exists with the recorded checksum.
    pub fn verify(&self, dir: &Path) -> Result<(), String> {
        for f in &self.files {
            let bytes = std::fs::read(dir.join(&f.path)).map_err(|e| format!("{}: {e}", f.path))?;
            if bytes.len() as u64 != f.bytes || sha256_hex(&bytes) != f.sha256 {
                return Err(format!("{} does not match its manifest entry", f.path));
            }
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Output directory that records everything written to it.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    files: Vec<FileEntry>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn files(&self) -> &[FileEntry] {
        &self.files
    }

    pub fn write(&mut self, name: &str, content: &[u8]) -> Result<(), CliError> {
        let path = self.root.join(name);
        std::fs::write(&path, content).map_err(|e| CliError::io(&path, e))?;
        self.files.retain(|f| f.path != name);
        self.files.push(FileEntry {
            path: name.to_string(),
            bytes: content.len() as u64,
            sha256: sha256_hex(content),
        });
        Ok(())
    }

    pub fn write_csv(&mut self, name: &str, csv: Csv) -> Result<(), CliError> {
        self.write(name, csv.into_string().as_bytes())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(&self.root.join(name), e))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Writes the manifest through a temporary file and a rename, so a
    /// present manifest is always complete.
    pub fn write_manifest(&self, manifest: &RunManifest) -> Result<(), CliError> {
        let tmp = self.root.join(format!("{MANIFEST_NAME}.tmp"));
        let dst = self.root.join(MANIFEST_NAME);
        let mut text = serde_json::to_string_pretty(manifest).map_err(|e| CliError::io(&dst, e))?;
        text.push('\n');
        std::fs::write(&tmp, text).map_err(|e| CliError::io(&tmp, e))?;
        std::fs::rename(&tmp, &dst).map_err(|e| CliError::io(&dst, e))
    }
}
