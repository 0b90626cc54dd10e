use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::rng::PRNG_IDENTITY;
use crate::{Error, Result};

/// Format a number so that parsing it back gives the same bits.
pub fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:e}")
    } else {
        v.to_string().to_lowercase()
    }
}

/// Comma-separated table with a leading `#` metadata line and a header row.
#[derive(Clone, Debug)]
pub struct Csv {
    text: String,
    columns: usize,
}

impl Csv {
    pub fn new(meta: &str, header: &[String]) -> Self {
        let mut text = String::new();
        if !meta.is_empty() {
            text.push_str("# ");
            text.push_str(meta);
            text.push('\n');
        }
        text.push_str(&header.join(","));
        text.push('\n');
        Self { text, columns: header.len() }
    }

    pub fn with_columns(meta: &str, header: &[&str]) -> Self {
        Self::new(meta, &header.iter().map(|s| s.to_string()).collect::<Vec<_>>())
    }

    /// Append a row; the field count must match the header.
    pub fn row(&mut self, fields: Vec<String>) {
        debug_assert_eq!(fields.len(), self.columns, "row width differs from header");
        self.text.push_str(&fields.join(","));
        self.text.push('\n');
    }

    pub fn into_string(self) -> String {
        self.text
    }
}

/// Header `prefix_1, ..., prefix_n`.
pub fn indexed_header(lead: &[&str], prefix: &str, n: usize) -> Vec<String> {
    lead.iter()
        .map(|s| s.to_string())
        .chain((1..=n).map(|i| format!("{prefix}_{i}")))
        .collect()
}

/// Parsed table: header names and numeric rows. `#` lines are skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Config("table has no header row".into()))?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(|s| s.trim().to_string()).collect()).collect();
        if let Some(bad) = rows.iter().position(|r| r.len() != header.len()) {
            return Err(Error::Config(format!("row {} has {} fields, header has {}", bad + 1, rows[bad].len(), header.len())));
        }
        Ok(Self { header, rows })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("missing column '{name}'")))
    }

    /// One column of every row as numbers.
    pub fn numeric_column(&self, name: &str) -> Result<Vec<f64>> {
        let j = self.column(name)?;
        self.rows
            .iter()
            .map(|r| r[j].parse::<f64>().map_err(|_| Error::Config(format!("not a number: '{}'", r[j]))))
            .collect()
    }

    /// Columns `from..` of every row as numbers.
    pub fn numeric_from(&self, from: usize) -> Result<Vec<Vec<f64>>> {
        self.rows
            .iter()
            .map(|r| {
                r[from..]
                    .iter()
                    .map(|s| s.parse::<f64>().map_err(|_| Error::Config(format!("not a number: '{s}'"))))
                    .collect()
            })
            .collect()
    }
}

/// One emitted file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Description of a run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub prng: String,
    pub seed: u64,
    /// Configuration as ordered `(key, value)` pairs.
    pub config: Vec<(String, String)>,
    pub files: Vec<FileRecord>,
}

/// File name of the manifest inside a run directory.
pub const MANIFEST_NAME: &str = "manifest.json";

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes files into one directory and records their hashes.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    files: Vec<FileRecord>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf(), files: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, name: &str, contents: &[u8]) -> Result<()> {
        fs::write(self.root.join(name), contents)?;
        self.files.push(FileRecord { name: name.to_string(), sha256: sha256_hex(contents), bytes: contents.len() as u64 });
        Ok(())
    }

    pub fn write_csv(&mut self, name: &str, csv: Csv) -> Result<()> {
        self.write(name, csv.into_string().as_bytes())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Write the manifest listing every file written so far.
    pub fn finish(self, command: &str, seed: u64, config: Vec<(String, String)>) -> Result<Manifest> {
        let manifest = Manifest {
            command: command.to_string(),
            version: crate::VERSION.to_string(),
            prng: PRNG_IDENTITY.to_string(),
            seed,
            config,
            files: self.files,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(self.root.join(MANIFEST_NAME), text)?;
        Ok(manifest)
    }
}

/// Recompute the hashes of every file listed in a manifest; returns the names that differ.
pub fn verify_manifest(dir: &Path) -> Result<Vec<String>> {
    let manifest = Manifest::read(&dir.join(MANIFEST_NAME))?;
    let mut bad = Vec::new();
    for f in &manifest.files {
        match fs::read(dir.join(&f.name)) {
            Ok(bytes) if sha256_hex(&bytes) == f.sha256 => {}
            _ => bad.push(f.name.clone()),
        }
    }
    Ok(bad)
}
