//! Versioned JSON documents and CSV mirrors.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::SCHEMA;
use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Both,
}

impl Format {
    fn json(self) -> bool {
        matches!(self, Format::Json | Format::Both)
    }

    fn csv(self) -> bool {
        matches!(self, Format::Csv | Format::Both)
    }
}

#[derive(Serialize, Deserialize)]
struct Document<T> {
    schema: String,
    kind: String,
    data: T,
}

pub struct Writer {
    pub dir: PathBuf,
    pub format: Format,
    pub written: Vec<PathBuf>,
}

impl Writer {
    pub fn new(dir: PathBuf, format: Format) -> Result<Self, CliError> {
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(Writer {
            dir,
            format,
            written: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        std::fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        self.written.push(path.clone());
        Ok(path)
    }

    /// Always written: later pipeline stages read these.
    pub fn json<T: Serialize>(&mut self, name: &str, kind: &str, data: &T) -> Result<PathBuf, CliError> {
        let doc = Document {
            schema: SCHEMA.to_string(),
            kind: kind.to_string(),
            data,
        };
        let text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Config(e.to_string()))?;
        self.write(name, &(text + "\n"))
    }

    /// Report-only JSON, skipped for `--format csv`.
    pub fn report<T: Serialize>(&mut self, name: &str, kind: &str, data: &T) -> Result<(), CliError> {
        if self.format.json() {
            self.json(name, kind, data)?;
        }
        Ok(())
    }

    pub fn csv(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        if self.format.csv() {
            self.write(name, contents)?;
        }
        Ok(())
    }
}

pub fn read_document<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let doc: Document<T> = serde_json::from_str(&text).map_err(|e| CliError::parse(path, e))?;
    if doc.schema != SCHEMA {
        return Err(CliError::Config(format!(
            "{}: schema '{}' is not '{SCHEMA}'",
            path.display(),
            doc.schema
        )));
    }
    if doc.kind != kind {
        return Err(CliError::Config(format!(
            "{}: expected a '{kind}' document, found '{}'",
            path.display(),
            doc.kind
        )));
    }
    Ok(doc.data)
}

/// File-name fragment for a grid setting, e.g. `m2_p1`.
pub fn setting_tag(setting: &[i32]) -> String {
    setting
        .iter()
        .map(|p| if *p < 0 { format!("m{}", -p) } else { format!("p{p}") })
        .collect::<Vec<_>>()
        .join("_")
}
