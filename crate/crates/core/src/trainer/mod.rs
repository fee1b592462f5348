//! Multimodal default models: modality masks, model configuration, the
//! stratified split, training with early stopping, grid search and the
//! frozen-branch hybrid.

mod fit;
mod model;
mod split;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::AutodiffError;
use crate::encoders::{EncoderConfig, EncoderError, EncoderKind};
use crate::loans::LoanRecord;
use crate::panel::{ClimatePanel, FACTORS, PANEL_MONTHS};

pub use fit::{grid_search, hybrid_freeze_train, search_grid, train, train_with_embeddings, GridEntry, GridOutcome};
pub use model::{forward_probabilities, TrainedModel};
pub use split::{make_split, Split, SplitPlan};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("labels contain a single class")]
    SingleClass,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("model needs the {0} modality but the data lacks it")]
    MissingModality(&'static str),
    #[error("no pretrained {0} checkpoint supplied")]
    MissingCheckpoint(&'static str),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    Divergence { epoch: usize, step: usize },
    #[error("empty grid or every grid cell failed")]
    EmptyGrid,
    #[error("split has no {0} rows")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        TrainError::Encoder(EncoderError::Autodiff(e))
    }
}

/// Which input branches feed the model. The all-false mask is illegal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModalityMask {
    pub structured: bool,
    pub climate: bool,
    pub text: bool,
}

impl ModalityMask {
    pub fn new(structured: bool, climate: bool, text: bool) -> Result<Self, TrainError> {
        if !(structured || climate || text) {
            return Err(TrainError::InvalidConfig("modality mask must enable at least one input".into()));
        }
        Ok(Self { structured, climate, text })
    }

    /// The seven legal masks in a fixed order.
    pub fn all() -> Vec<ModalityMask> {
        (1u8..8).map(|b| Self { structured: b & 1 != 0, climate: b & 2 != 0, text: b & 4 != 0 }).collect()
    }

    pub fn structured_only(&self) -> bool {
        self.structured && !self.climate && !self.text
    }
}

impl fmt::Display for ModalityMask {
    /// Short name such as `S+C+T`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.structured, "S"), (self.climate, "C"), (self.text, "T")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for ModalityMask {
    type Err = TrainError;

    /// Accepts comma lists (`structured,climate`) and short forms (`S+C`).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (mut st, mut cl, mut tx) = (false, false, false);
        for part in s.split([',', '+']).map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "s" | "structured" => st = true,
                "c" | "climate" => cl = true,
                "t" | "text" => tx = true,
                other => return Err(TrainError::InvalidConfig(format!("unknown modality {other:?}"))),
            }
        }
        ModalityMask::new(st, cl, tx)
    }
}

impl Serialize for ModalityMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModalityMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

pub const LEARNING_RATES: [f64; 4] = [2e-5, 1e-5, 1e-4, 1e-3];
pub const BATCH_SIZES: [usize; 2] = [16, 32];
pub const RECURRENT_LAYERS: [usize; 2] = [2, 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub mask: ModalityMask,
    pub encoder: EncoderKind,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub text_embed_dim: usize,
    pub min_token_count: usize,
    pub mlp_hidden: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub pos_weight: f64,
    /// Panel columns fed to the climate branch, from `0..4` (DI, WLR, HT, CF).
    pub climate_factors: Vec<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mask: ModalityMask { structured: true, climate: true, text: true },
            encoder: EncoderKind::Lstm,
            hidden_size: 128,
            num_layers: 2,
            heads: 8,
            ff_dim: 256,
            max_seq_len: crate::encoders::DEFAULT_MAX_SEQ_LEN,
            text_embed_dim: 32,
            min_token_count: 1,
            mlp_hidden: 64,
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            pos_weight: 1.0,
            climate_factors: (0..FACTORS).collect(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !LEARNING_RATES.contains(&self.lr) {
            return bad(format!("lr {} not in {LEARNING_RATES:?}", self.lr));
        }
        if !BATCH_SIZES.contains(&self.batch_size) {
            return bad(format!("batch_size {} not in {BATCH_SIZES:?}", self.batch_size));
        }
        match self.encoder {
            EncoderKind::Transformer if self.num_layers != crate::encoders::TRANSFORMER_LAYERS => {
                return bad("transformer encoders use exactly 3 layers".into());
            }
            EncoderKind::Lstm | EncoderKind::Gru if !RECURRENT_LAYERS.contains(&self.num_layers) => {
                return bad(format!("recurrent layers {} not in {RECURRENT_LAYERS:?}", self.num_layers));
            }
            _ => {}
        }
        if self.max_epochs == 0 || self.mlp_hidden == 0 || self.text_embed_dim == 0 {
            return bad("sizes and epoch budget must be at least 1".into());
        }
        if !(self.pos_weight.is_finite() && self.pos_weight > 0.0) {
            return bad("pos_weight must be positive".into());
        }
        let mut f = self.climate_factors.clone();
        f.sort_unstable();
        f.dedup();
        if f.is_empty() || f.len() != self.climate_factors.len() || f.iter().any(|&i| i >= FACTORS) {
            return bad("climate_factors must be distinct indices in 0..4".into());
        }
        self.encoder_config(1).validate()?;
        Ok(())
    }

    pub fn encoder_config(&self, input_dim: usize) -> EncoderConfig {
        EncoderConfig {
            kind: self.encoder,
            input_dim,
            hidden_size: self.hidden_size,
            num_layers: self.num_layers,
            heads: self.heads,
            ff_dim: self.ff_dim,
            max_seq_len: self.max_seq_len.max(PANEL_MONTHS),
            positional_encoding: true,
        }
    }
}

/// Aligned per-loan model inputs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelData {
    pub ids: Vec<String>,
    /// WoE-encoded structured rows; may have zero columns.
    pub structured: Vec<Vec<f64>>,
    pub climate: Vec<[[f64; FACTORS]; PANEL_MONTHS]>,
    pub text: Vec<Vec<String>>,
    pub labels: Vec<u8>,
}

impl ModelData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn structured_dim(&self) -> usize {
        self.structured.first().map_or(0, Vec::len)
    }

    pub fn check(&self, mask: ModalityMask) -> Result<(), TrainError> {
        let n = self.labels.len();
        if self.ids.len() != n {
            return Err(TrainError::InvalidConfig("ids and labels differ in length".into()));
        }
        if mask.structured && (self.structured.len() != n || self.structured_dim() == 0) {
            return Err(TrainError::MissingModality("structured"));
        }
        if mask.climate && self.climate.len() != n {
            return Err(TrainError::MissingModality("climate"));
        }
        if mask.text && self.text.len() != n {
            return Err(TrainError::MissingModality("text"));
        }
        Ok(())
    }

    /// Joins loans with their climate panels (by loan id) and WoE rows
    /// aligned with `loans`. Loans without a panel are an error.
    pub fn assemble(loans: &[LoanRecord], panels: &[ClimatePanel], structured: Vec<Vec<f64>>) -> Result<Self, TrainError> {
        if !structured.is_empty() && structured.len() != loans.len() {
            return Err(TrainError::InvalidConfig("structured rows and loans differ in length".into()));
        }
        let by_id: std::collections::HashMap<&str, &ClimatePanel> =
            panels.iter().map(|p| (p.loan_id.as_str(), p)).collect();
        let climate = loans
            .iter()
            .map(|l| {
                by_id.get(l.loan_id.as_str()).map(|p| p.values).ok_or_else(|| {
                    TrainError::InvalidConfig(format!("loan {} has no climate panel", l.loan_id))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ModelData {
            ids: loans.iter().map(|l| l.loan_id.clone()).collect(),
            structured,
            climate,
            text: loans.iter().map(|l| l.text.clone()).collect(),
            labels: loans.iter().map(|l| l.label).collect(),
        })
    }

    /// Rows `idx` as a new dataset.
    pub fn subset(&self, idx: &[usize]) -> ModelData {
        let pick = |v: &Vec<Vec<f64>>| if v.is_empty() { vec![] } else { idx.iter().map(|&i| v[i].clone()).collect() };
        ModelData {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            structured: pick(&self.structured),
            climate: if self.climate.is_empty() { vec![] } else { idx.iter().map(|&i| self.climate[i]).collect() },
            text: if self.text.is_empty() { vec![] } else { idx.iter().map(|&i| self.text[i].clone()).collect() },
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seven_legal_masks() {
        let all = ModalityMask::all();
        assert_eq!(all.len(), 7);
        assert!(ModalityMask::new(false, false, false).is_err());
        let names: Vec<String> = all.iter().map(ToString::to_string).collect();
        assert!(names.contains(&"S+C+T".to_string()));
        assert_eq!("structured,climate".parse::<ModalityMask>().unwrap().to_string(), "S+C");
        assert_eq!("T".parse::<ModalityMask>().unwrap(), ModalityMask { structured: false, climate: false, text: true });
    }

    #[test]
    fn config_rejects_off_grid_values() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig { lr: 0.5, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { batch_size: 64, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { encoder: EncoderKind::Transformer, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { encoder: EncoderKind::Transformer, num_layers: 3, ..Default::default() }.validate().is_ok());
        assert!(ModelConfig { climate_factors: vec![1, 1], ..Default::default() }.validate().is_err());
        let json = serde_json::to_string(&ModelConfig::default()).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&json).unwrap(), ModelConfig::default());
        assert!(serde_json::from_str::<ModelConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
