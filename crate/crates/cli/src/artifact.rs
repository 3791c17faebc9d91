//! Versioned JSON envelopes. Every file written by a command is either such an
//! envelope or a CSV accompanied by one (`<file>.meta.json`).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use cropclm::estimation::FittedModel;
use cropclm::mixed::FittedMixedModel;

use crate::config::RunConfig;

pub const FORMAT_VERSION: u32 = 1;
pub const TOOL: &str = "cropclm";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub format_version: u32,
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: RunConfig,
    pub payload: T,
}

impl<T> Envelope<T> {
    pub fn new(command: &str, config: &RunConfig, payload: T) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            tool: TOOL.into(),
            version: VERSION.into(),
            command: command.into(),
            config: config.clone(),
            payload,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "lowercase")]
pub enum ModelArtifact {
    Fixed(Box<FittedModel>),
    Mixed(Box<FittedMixedModel>),
}

/// Lists the CSV files an envelope describes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<FileEntry>,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub extra: Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: PathBuf,
    pub schema: String,
    pub rows: usize,
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(to_json(value)?.as_bytes())
        .with_context(|| format!("writing {}", path.display()))
}

pub fn read_envelope<T: DeserializeOwned>(path: &Path) -> Result<Envelope<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let env: Envelope<Value> =
        serde_json::from_str(&text).with_context(|| format!("{} is not a {TOOL} artifact", path.display()))?;
    if env.tool != TOOL {
        bail!("{} was written by `{}`, not {TOOL}", path.display(), env.tool);
    }
    if env.format_version > FORMAT_VERSION {
        bail!(
            "{} has format version {}; this build reads up to {FORMAT_VERSION}",
            path.display(),
            env.format_version
        );
    }
    let payload = serde_json::from_value(env.payload)
        .with_context(|| format!("{}: unexpected payload for command `{}`", path.display(), env.command))?;
    Ok(Envelope {
        format_version: env.format_version,
        tool: env.tool,
        version: env.version,
        command: env.command,
        config: env.config,
        payload,
    })
}

pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn count_rows(path: &Path) -> Result<usize> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().count().saturating_sub(1))
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_appends_suffix() {
        assert_eq!(sidecar(Path::new("out/pred.csv")), PathBuf::from("out/pred.csv.meta.json"));
    }

    #[test]
    fn envelope_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.json");
        let env = Envelope::new("cv", &RunConfig::default(), vec![1.5, 2.0]);
        write_json(&p, &env).unwrap();
        let back: Envelope<Vec<f64>> = read_envelope(&p).unwrap();
        assert_eq!(back.payload, vec![1.5, 2.0]);
        assert_eq!(back.command, "cv");
        assert!(read_envelope::<String>(&p).is_err());
    }
}
