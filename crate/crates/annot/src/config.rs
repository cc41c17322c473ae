use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use attnprobe::saliency::PixelPath;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub id: String,
    pub checkpoint: PathBuf,
}

/// Service configuration, usually read from a JSON file. Relative paths are
/// resolved against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    pub corpus: PathBuf,
    /// Restrict the queue to one split (`train`, `valid`, `gold`).
    #[serde(default)]
    pub split: Option<attnprobe::corpus::Split>,
    pub models: Vec<ModelEntry>,
    pub store: PathBuf,
    /// Shared secret; requests must present it when set.
    #[serde(default)]
    pub token: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_bind")]
    pub bind: String,
    #[serde(default)]
    pub static_dir: Option<PathBuf>,
    #[serde(default = "default_pixel_path")]
    pub pixel_path: PixelPath,
}

fn default_bind() -> String {
    "127.0.0.1:8787".into()
}

fn default_pixel_path() -> PixelPath {
    PixelPath::GridBilinear
}

impl ServiceConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, crate::Error> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg: ServiceConfig = serde_json::from_str(&text).map_err(|e| crate::Error::Config(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.corpus);
        resolve(&mut cfg.store);
        for m in &mut cfg.models {
            resolve(&mut m.checkpoint);
        }
        if let Some(d) = cfg.static_dir.as_mut() {
            resolve(d);
        }
        Ok(cfg)
    }
}
