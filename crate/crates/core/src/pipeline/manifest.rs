use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::write_atomic;

use super::PipelineConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub run: u64,
    /// Every seed tried for the first view, in order.
    pub initialization: Vec<u64>,
    pub accepted: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewTiming {
    pub view_index: usize,
    pub azimuth: f64,
    pub fuse_seconds: f64,
    pub remap_seconds: f64,
    pub paint_seconds: f64,
}

impl ViewTiming {
    pub fn new(view_index: usize, azimuth: f64) -> Self {
        ViewTiming {
            view_index,
            azimuth,
            fuse_seconds: 0.0,
            remap_seconds: 0.0,
            paint_seconds: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub status: RunStatus,
    pub error: Option<String>,
    pub config: PipelineConfig,
    pub input: String,
    pub input_sha256: String,
    pub pointcloud_input: bool,
    pub plan: Vec<f64>,
    pub seeds: SeedRecord,
    pub timings: Vec<ViewTiming>,
    pub final_fusion_seconds: f64,
    pub export_seconds: f64,
    pub total_seconds: f64,
    /// Fraction of surface samples seen by at least one view.
    pub coverage: f64,
    /// sha256 of every file in the output directory except the manifest,
    /// keyed by relative path.
    pub artifacts: BTreeMap<String, String>,
    /// sha256 over the sorted artifact list.
    pub digest: String,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Manifest {
    pub fn new(cfg: &PipelineConfig, input: &Path) -> Result<Self> {
        Ok(Manifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            status: RunStatus::Ok,
            error: None,
            config: cfg.clone(),
            input: std::fs::canonicalize(input)
                .unwrap_or_else(|_| input.to_path_buf())
                .display()
                .to_string(),
            input_sha256: sha256_file(input)?,
            pointcloud_input: false,
            plan: Vec::new(),
            seeds: SeedRecord {
                run: cfg.seed,
                initialization: Vec::new(),
                accepted: cfg.seed,
            },
            timings: Vec::new(),
            final_fusion_seconds: 0.0,
            export_seconds: 0.0,
            total_seconds: 0.0,
            coverage: 0.0,
            artifacts: BTreeMap::new(),
            digest: String::new(),
        })
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        let path = out.join(MANIFEST_FILE);
        let bytes =
            serde_json::to_vec_pretty(self).map_err(|e| Error::parse(&path, e.to_string()))?;
        write_atomic(&path, &bytes)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
    }
}

/// Hashes every regular file under `out`, skipping the top-level manifest.
pub fn digest_artifacts(out: &Path) -> Result<BTreeMap<String, String>> {
    fn walk(root: &Path, dir: &Path, acc: &mut BTreeMap<String, String>) -> Result<()> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(root, &path, acc)?;
                continue;
            }
            let rel = path.strip_prefix(root).expect("walked path is under root");
            let key = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            if key == MANIFEST_FILE || key.ends_with(".tmp") {
                continue;
            }
            acc.insert(key, sha256_file(&path)?);
        }
        Ok(())
    }
    let mut acc = BTreeMap::new();
    walk(out, out, &mut acc)?;
    Ok(acc)
}

pub(crate) fn combined_digest(artifacts: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    for (k, v) in artifacts {
        h.update(k.as_bytes());
        h.update(b"\0");
        h.update(v.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}
