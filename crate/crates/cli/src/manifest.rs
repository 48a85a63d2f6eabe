use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use itid_core::config::PipelineConfig;
use itid_core::simdata::Split;
use serde::{Deserialize, Serialize};

use crate::UsageError;

pub const FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnippetRecord {
    pub id: u64,
    pub split: Split,
    pub frames: usize,
}

/// Record of one command run, written before work starts and completed after.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub config_sha256: String,
    /// Resolved configuration as TOML.
    pub config: String,
    pub out_dir: PathBuf,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    /// Written files, relative to `out_dir`.
    #[serde(default)]
    pub artifacts: Vec<String>,
    /// Hash over every artifact except the manifest, in listed order.
    #[serde(default)]
    pub outputs_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub snippets: Vec<SnippetRecord>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn start(config_path: Option<&Path>, seed: u64, cfg: &PipelineConfig, out_dir: &Path) -> Self {
        Self {
            command: std::env::args().collect(),
            config_path: config_path.map(Path::to_path_buf),
            seed,
            config_sha256: cfg.content_hash(),
            config: cfg.to_toml(),
            out_dir: out_dir.to_path_buf(),
            started_unix: now(),
            finished_unix: None,
            artifacts: Vec::new(),
            outputs_sha256: None,
            snippets: Vec::new(),
        }
    }

    pub fn write(&self) -> Result<()> {
        let path = self.out_dir.join(FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn finish(&mut self) -> Result<()> {
        let mut bytes = Vec::new();
        for a in &self.artifacts {
            let p = self.out_dir.join(a);
            bytes.extend_from_slice(a.as_bytes());
            bytes.extend(std::fs::read(&p).with_context(|| format!("reading {}", p.display()))?);
        }
        self.outputs_sha256 = Some(itid_core::config::sha256_hex(&bytes));
        self.finished_unix = Some(now());
        self.write()
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(FILE);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())).into())
    }
}

/// Creates `out`, refusing a non-empty directory unless `force` is set.
pub fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let mut entries = std::fs::read_dir(out).with_context(|| format!("reading {}", out.display()))?;
        if entries.next().is_some() && !force {
            return Err(UsageError(format!("output directory {} is not empty; pass --force to write into it", out.display())).into());
        }
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}
