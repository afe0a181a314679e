//! Output directory layout and file helpers.
//!
//! ```text
//! <out>/trusted/   slide, vault, secret, ground truth, layout, audit, mask, overlay, report
//! <out>/cloud/     shard files, trace, summary, detection outputs
//! <out>/           instance.json, plan.json, world.json, FAILED on pipeline error
//! ```

use anyhow::{anyhow, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};
use tileflow::slide::MetadataVault;
use tileflow::Error;

pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn trusted(&self, name: &str) -> PathBuf {
        self.root.join("trusted").join(name)
    }

    pub fn cloud(&self, name: &str) -> PathBuf {
        self.root.join("cloud").join(name)
    }

    pub fn top(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn failed_marker(&self) -> PathBuf {
        self.root.join("FAILED")
    }

    /// Returns the path or a stage-order hint naming the command that makes it.
    pub fn require(&self, path: PathBuf, producer: &str) -> Result<PathBuf> {
        if path.exists() {
            Ok(path)
        } else {
            Err(anyhow!(Error::InvalidSpec(format!(
                "{} not found; run `tileflow {producer}` first",
                path.strip_prefix(&self.root).unwrap_or(&path).display()
            ))))
        }
    }

    /// Fails if any file outside `trusted/` contains a vault value.
    pub fn scan_hygiene(&self) -> Result<()> {
        let vault_path = self.trusted("vault.json");
        if !vault_path.exists() {
            return Ok(());
        }
        let vault: MetadataVault = read_json(&vault_path)?;
        let trusted = self.root.join("trusted");
        let mut stack = vec![self.root.clone()];
        while let Some(dir) = stack.pop() {
            let mut entries: Vec<_> = fs::read_dir(&dir)?.collect::<std::io::Result<_>>()?;
            entries.sort_by_key(|e| e.path());
            for entry in entries {
                let path = entry.path();
                if path == trusted {
                    continue;
                }
                if path.is_dir() {
                    stack.push(path);
                    continue;
                }
                let bytes = fs::read(&path)?;
                for marker in vault.leak_markers() {
                    if bytes.windows(marker.len()).any(|w| w == marker.as_bytes()) {
                        return Err(anyhow!(Error::PrivacyPrecondition(format!(
                            "metadata value found outside the trusted directory in {}",
                            path.display()
                        ))));
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| anyhow!(Error::Format(format!("{}: {e}", path.display()))))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}
