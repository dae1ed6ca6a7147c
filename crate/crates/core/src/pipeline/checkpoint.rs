//! Versioned checkpoints: safetensors payload plus config and step in the header metadata.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};

pub const FORMAT: &str = "lap-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Landmark,
    Render,
}

impl CheckpointKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Landmark => "landmark",
            Self::Render => "render",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub step: u64,
    pub config: RunConfig,
    pub tensors: HashMap<String, Tensor>,
}

impl Checkpoint {
    /// Tensors under `prefix.`, with the prefix stripped.
    pub fn group(&self, prefix: &str) -> HashMap<String, Tensor> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
            .collect()
    }
}

pub fn save(path: &Path, kind: CheckpointKind, step: u64, config: &RunConfig, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FORMAT.to_string());
    meta.insert("version".to_string(), VERSION.to_string());
    meta.insert("kind".to_string(), kind.as_str().to_string());
    meta.insert("step".to_string(), step.to_string());
    meta.insert("config".to_string(), serde_json::to_string(config)?);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let contiguous: Vec<(String, Tensor)> = tensors
        .iter()
        .map(|(k, t)| Ok((k.clone(), t.contiguous()?)))
        .collect::<Result<_>>()?;
    // write then rename so an interrupted save never leaves a truncated checkpoint
    let tmp = path.with_extension("tmp");
    safetensors::serialize_to_file(contiguous.iter().map(|(k, t)| (k.as_str(), t)), Some(meta), &tmp)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let meta = header.metadata().clone().ok_or_else(|| bad("no metadata".into()))?;
    let field = |k: &str| meta.get(k).cloned().ok_or_else(|| bad(format!("metadata lacks `{k}`")));
    if field("format")? != FORMAT {
        return Err(bad("not a checkpoint file".into()));
    }
    let version: u32 = field("version")?.parse().map_err(|_| bad("bad version".into()))?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let kind = match field("kind")?.as_str() {
        "landmark" => CheckpointKind::Landmark,
        "render" => CheckpointKind::Render,
        other => return Err(bad(format!("unknown kind {other}"))),
    };
    let step = field("step")?.parse().map_err(|_| bad("bad step".into()))?;
    let config: RunConfig = serde_json::from_str(&field("config")?)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    Ok(Checkpoint { kind, step, config, tensors })
}

/// Loads a checkpoint and checks it holds the expected model.
pub fn load_kind(path: &Path, kind: CheckpointKind) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!("missing checkpoint {}", path.display())));
    }
    let ck = load(path)?;
    if ck.kind != kind {
        return Err(Error::Checkpoint(format!(
            "{} holds a {} model, expected {}",
            path.display(),
            ck.kind.as_str(),
            kind.as_str()
        )));
    }
    Ok(ck)
}
