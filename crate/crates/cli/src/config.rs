use std::path::Path;

use climcredit::climate::IndexConfig;
use climcredit::features::FeatureConfig;
use climcredit::synth::GenSpec;
use climcredit::trainer::{ModalityMask, ModelConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Everything a pipeline run reads besides its input artifacts. The run
/// seed drives data generation, the split, the bootstrap and SHAP sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<String>,
    pub data: GenSpec,
    pub index: IndexConfig,
    pub rescale: bool,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    /// Masks trained by `train` when no `--modality` is given; empty means `model.mask`.
    pub modalities: Vec<ModalityMask>,
    pub seeds: Vec<u64>,
    pub grid: bool,
    pub jobs: usize,
    pub bootstrap: BootstrapOptions,
    pub shap: ShapOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: None,
            data: GenSpec::default(),
            index: IndexConfig::default(),
            rescale: true,
            features: FeatureConfig::default(),
            model: ModelConfig::default(),
            modalities: Vec::new(),
            seeds: (0..5).collect(),
            grid: false,
            jobs: 1,
            bootstrap: BootstrapOptions::default(),
            shap: ShapOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapOptions {
    pub resamples: usize,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        Self { resamples: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapOptions {
    pub background: usize,
    pub budget: usize,
    /// Test loans explained when no baseline model selects cases.
    pub instances: usize,
    pub window: (f64, f64),
    pub top_k: usize,
}

impl Default for ShapOptions {
    fn default() -> Self {
        Self { background: 100, budget: 2048, instances: 100, window: (0.3, 0.7), top_k: 20 }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Validation(m));
        self.data.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        self.model.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.jobs == 0 {
            return bad("jobs must be at least 1".into());
        }
        if self.bootstrap.resamples == 0 {
            return bad("bootstrap.resamples must be at least 1".into());
        }
        let s = &self.shap;
        if s.background == 0 || s.budget == 0 || s.instances == 0 || s.top_k == 0 {
            return bad("shap sizes must be at least 1".into());
        }
        if !(0.0 <= s.window.0 && s.window.0 <= s.window.1 && s.window.1 <= 1.0) {
            return bad(format!("shap.window {:?} must satisfy 0 <= lo <= hi <= 1", s.window));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config is serializable");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 3, "sede": 4}"#).unwrap();
        assert!(matches!(RunConfig::load(Some(&path)), Err(CliError::Validation(_))));
        std::fs::write(&path, r#"{"seed": 3, "model": {"mask": "S+C"}}"#).unwrap();
        let cfg = RunConfig::load(Some(&path)).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.model.mask.to_string(), "S+C");
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 1, ..RunConfig::default() };
        assert_eq!(a.hash(), RunConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
    }
}
