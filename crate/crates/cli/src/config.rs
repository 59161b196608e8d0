//! Flat TOML run configs. Unknown keys are rejected and relative paths are
//! resolved against the config file's directory.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub annotations: Option<PathBuf>,
    /// Image root; defaults to the annotation file's directory.
    pub images: Option<PathBuf>,
    pub plans: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub method: Option<String>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub fusion: Option<bool>,
    pub backend: Option<String>,
    pub tap: Option<String>,
    pub timestep: Option<u32>,
    pub inpaint_steps: Option<u32>,
    pub input_size: Option<u32>,
    pub grid: Option<u32>,
    pub feature_dim: Option<usize>,
    pub mask_grid: Option<u32>,
    pub overlap: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalFile {
    pub checkpoint: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub folder: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Row label in the report; defaults to the checkpoint's method.
    pub method: Option<String>,
    pub levels: Option<Vec<u32>>,
    pub seed: Option<u64>,
    pub patch_size: Option<u32>,
    pub classes: Option<Vec<String>>,
    pub backend: Option<String>,
}

pub trait Resolve {
    fn resolve(&mut self, base: &Path);
}

fn rebase(p: &mut Option<PathBuf>, base: &Path) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl Resolve for TrainFile {
    fn resolve(&mut self, base: &Path) {
        for p in [&mut self.annotations, &mut self.images, &mut self.plans, &mut self.cache, &mut self.out] {
            rebase(p, base);
        }
    }
}

impl Resolve for EvalFile {
    fn resolve(&mut self, base: &Path) {
        for p in [&mut self.checkpoint, &mut self.annotations, &mut self.images, &mut self.folder, &mut self.out] {
            rebase(p, base);
        }
    }
}

/// Reads `path`, or returns the defaults when no file is given.
pub fn load<T: DeserializeOwned + Default + Resolve>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut cfg: T = toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
    cfg.resolve(path.parent().unwrap_or(Path::new(".")));
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_rejected() {
        assert!(toml::from_str::<TrainFile>("epochs = 3\nepoch = 4\n").is_err());
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let mut c: TrainFile = toml::from_str("annotations = \"a.json\"\nout = \"/abs\"\n").unwrap();
        c.resolve(Path::new("/cfg"));
        assert_eq!(c.annotations.unwrap(), Path::new("/cfg/a.json"));
        assert_eq!(c.out.unwrap(), Path::new("/abs"));
    }
}
