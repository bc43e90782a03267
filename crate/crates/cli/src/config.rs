use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gsam::train::TrainConfig;
use gsam::ModelConfig;
use serde::{Deserialize, Serialize};

/// Everything a run needs, loadable from one JSON file. Command-line flags
/// override the file; the resolved value is written next to the run outputs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: Paths,
    /// Key of the adapter ablation variant to train, if not the configured adapter.
    pub adapter_variant: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    /// Separate validation set; otherwise the last `val_fraction` of `data` is held out.
    pub val_data: Option<PathBuf>,
    pub val_fraction: f64,
    pub out: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: None,
            val_data: None,
            val_fraction: 0.2,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_json() {
        let mut c = RunConfig::default();
        c.train.epochs = 3;
        c.paths.data = Some("data".into());
        c.adapter_variant = Some("no_dilated".into());
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"train": {"epochs": 2}}"#).unwrap();
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.model, ModelConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"trian": {}}"#).is_err());
    }
}
