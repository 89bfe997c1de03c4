//! Run manifests and dataset listings.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// One fixed/moving pair with optional labels and displacement field.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub fixed: PathBuf,
    pub moving: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moving_labels: Option<PathBuf>,
    /// Field mapping fixed positions into the moving image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ddf: Option<PathBuf>,
}

impl PairEntry {
    /// Resolve relative paths against `dir`.
    pub fn resolved(&self, dir: &Path) -> Self {
        let r = |p: &PathBuf| if p.is_absolute() { p.clone() } else { dir.join(p) };
        Self {
            fixed: r(&self.fixed),
            moving: r(&self.moving),
            fixed_labels: self.fixed_labels.as_ref().map(r),
            moving_labels: self.moving_labels.as_ref().map(r),
            ddf: self.ddf.as_ref().map(r),
        }
    }
}

/// Record written by every artifact-producing command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    /// SHA-256 of every input file, by path.
    pub inputs: BTreeMap<String, String>,
    pub artifacts: Vec<PathBuf>,
    pub versions: BTreeMap<String, String>,
    /// Pairs described by the run, usable as an evaluation listing.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pairs: Vec<PairEntry>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: u64) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("patchmorph".into(), env!("CARGO_PKG_VERSION").into());
        versions.insert("config".into(), crate::config::CONFIG_VERSION.to_string());
        Self {
            command: command.into(),
            config,
            seed,
            inputs: BTreeMap::new(),
            artifacts: Vec::new(),
            versions,
            pairs: Vec::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> std::io::Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text + "\n")
    }
}

/// Listing of pairs: either a bare `{"pairs": [...]}` document or a run
/// manifest that carries pairs.
#[derive(Debug, Deserialize)]
struct PairListing {
    pairs: Vec<PairEntry>,
}

/// Read the pairs of a listing, with paths resolved against its directory.
pub fn read_pairs(path: &Path) -> Result<Vec<PairEntry>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let listing: PairListing =
        serde_json::from_str(&text).map_err(|e| format!("{} is not a pair listing: {e}", path.display()))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    Ok(listing.pairs.iter().map(|p| p.resolved(dir)).collect())
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut f = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}
