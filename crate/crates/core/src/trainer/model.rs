use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ModalityMask, ModelConfig, ModelData, TrainError};
use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::encoders::{encode, init_encoder, token_batch, Standardizer, TokenVocab};

pub(crate) const CLIMATE_PREFIX: &str = "clim.";
pub(crate) const TEXT_PREFIX: &str = "text.";
pub(crate) const EMBED_NAME: &str = "text.emb";
pub(crate) const HEAD_W: &str = "head.w";
pub(crate) const HEAD_B: &str = "head.b";
const MLP: [&str; 4] = ["mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"];
const PREDICT_CHUNK: usize = 256;

/// A trained model with everything needed to score new loans.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedModel {
    pub config: ModelConfig,
    #[serde(with = "checkpoint_serde")]
    pub params: ParamStore,
    pub vocab: Option<TokenVocab>,
    pub climate_scaler: Option<Standardizer>,
    pub structured_dim: usize,
    pub train_curve: Vec<f64>,
    pub val_curve: Vec<f64>,
    /// Zero-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_bce: f64,
}

mod checkpoint_serde {
    use crate::autodiff::{Checkpoint, ParamStore};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(p: &ParamStore, s: S) -> Result<S::Ok, S::Error> {
        p.to_checkpoint().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<ParamStore, D::Error> {
        let c = Checkpoint::deserialize(d)?;
        ParamStore::from_checkpoint(&c).map_err(serde::de::Error::custom)
    }
}

/// Frozen-branch latents precomputed for every row of a dataset.
#[derive(Debug, Clone, Default)]
pub(crate) struct LatentCache {
    pub climate: Option<Tensor>,
    pub text: Option<Tensor>,
}

impl TrainedModel {
    /// Fresh model with randomly initialised branches and head.
    pub(crate) fn init<R: Rng>(
        config: ModelConfig,
        structured_dim: usize,
        vocab: Option<TokenVocab>,
        climate_scaler: Option<Standardizer>,
        embeddings: Option<Tensor>,
        rng: &mut R,
    ) -> Result<Self, TrainError> {
        let mut params = ParamStore::new();
        let mask = config.mask;
        if mask.climate {
            init_encoder(&config.encoder_config(config.climate_factors.len()), CLIMATE_PREFIX, &mut params, rng)?;
        }
        if mask.text {
            let vocab = vocab.as_ref().ok_or(TrainError::MissingModality("text"))?;
            let dim = match embeddings {
                Some(table) => {
                    let d = table.cols();
                    params.insert(EMBED_NAME, table);
                    params.set_frozen(EMBED_NAME, true);
                    d
                }
                None => {
                    params.insert_embedding(EMBED_NAME, vocab.len(), config.text_embed_dim, rng);
                    config.text_embed_dim
                }
            };
            init_encoder(&config.encoder_config(dim), TEXT_PREFIX, &mut params, rng)?;
        }
        if mask.structured_only() {
            params.insert_dense(MLP[0], structured_dim, config.mlp_hidden, rng);
            params.insert_zeros(MLP[1], 1, config.mlp_hidden);
            params.insert_dense(MLP[2], config.mlp_hidden, 1, rng);
            params.insert_zeros(MLP[3], 1, 1);
        } else {
            let width = fusion_width(&config, structured_dim);
            params.insert_dense(HEAD_W, width, 1, rng);
            params.insert_zeros(HEAD_B, 1, 1);
        }
        Ok(Self {
            config,
            params,
            vocab,
            climate_scaler,
            structured_dim,
            train_curve: vec![],
            val_curve: vec![],
            best_epoch: 0,
            best_val_bce: f64::INFINITY,
        })
    }

    pub fn mask(&self) -> ModalityMask {
        self.config.mask
    }

    /// Default probabilities for every row of `data`.
    pub fn predict(&self, data: &ModelData) -> Result<Vec<f64>, TrainError> {
        data.check(self.config.mask)?;
        let all: Vec<usize> = (0..data.len()).collect();
        let mut out = Vec::with_capacity(data.len());
        for chunk in all.chunks(PREDICT_CHUNK) {
            let g = Graph::new();
            let p = self.forward(&g, data, chunk, &LatentCache::default())?;
            out.extend_from_slice(g.value(p).data());
        }
        Ok(out)
    }

    /// Number of scalar parameters the optimizer may update.
    /// Mean BCE (with the configured positive weight) on rows `idx`, and
    /// its gradient for every trainable parameter.
    pub fn loss_and_gradients(&self, data: &ModelData, idx: &[usize]) -> Result<(f64, HashMap<String, Tensor>), TrainError> {
        data.check(self.config.mask)?;
        let g = Graph::new();
        let p = self.forward(&g, data, idx, &LatentCache::default())?;
        let labels: Vec<f64> = idx.iter().map(|&i| f64::from(data.labels[i])).collect();
        let loss = g.bce(p, &labels, self.config.pos_weight)?;
        let value = g.value(loss).get(0, 0);
        Ok((value, g.backward(loss)?.into_param_map()))
    }

    pub fn trainable_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// SHA-256 of the parameters under `prefix`, e.g. `"clim."`.
    pub fn branch_hash(&self, prefix: &str) -> String {
        self.params.hash_prefix(prefix)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model is serializable")
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        serde_json::from_str(text).map_err(|e| TrainError::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_json()).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn embed_dim(&self) -> usize {
        self.params.value(EMBED_NAME).map_or(self.config.text_embed_dim, Tensor::cols)
    }

    /// Climate panel rows `idx`, standardized, batch-major `(n·12) × factors`.
    fn climate_input(&self, data: &ModelData, idx: &[usize]) -> Result<Tensor, TrainError> {
        let factors = &self.config.climate_factors;
        let mut rows = Vec::with_capacity(idx.len() * crate::panel::PANEL_MONTHS);
        for &i in idx {
            for month in &data.climate[i] {
                let raw: Vec<f64> = factors.iter().map(|&f| month[f]).collect();
                rows.push(match &self.climate_scaler {
                    Some(s) => s.apply(&raw),
                    None => raw,
                });
            }
        }
        Ok(Tensor::from_rows(&rows)?)
    }

    fn climate_latent(&self, g: &Graph, data: &ModelData, idx: &[usize]) -> Result<Var, TrainError> {
        let steps = crate::panel::PANEL_MONTHS;
        let x = g.constant(self.climate_input(data, idx)?)?;
        let ecfg = self.config.encoder_config(self.config.climate_factors.len());
        Ok(encode(g, &self.params, CLIMATE_PREFIX, &ecfg, x, steps, &vec![1.0; idx.len() * steps])?)
    }

    fn text_latent(&self, g: &Graph, data: &ModelData, idx: &[usize]) -> Result<Var, TrainError> {
        let vocab = self.vocab.as_ref().ok_or(TrainError::MissingModality("text"))?;
        let texts: Vec<&[String]> = idx.iter().map(|&i| data.text[i].as_slice()).collect();
        let (ids, mask, steps) = token_batch(&texts, vocab, self.config.max_seq_len);
        let table = g.param(&self.params, EMBED_NAME)?;
        let x = g.embedding_lookup(table, &ids)?;
        let ecfg = self.config.encoder_config(self.embed_dim());
        Ok(encode(g, &self.params, TEXT_PREFIX, &ecfg, x, steps, &mask)?)
    }

    /// Branch latents for all rows of `data`, for branches whose parameters
    /// are entirely frozen.
    pub(crate) fn frozen_latents(&self, data: &ModelData) -> Result<LatentCache, TrainError> {
        let all: Vec<usize> = (0..data.len()).collect();
        let collect = |f: &dyn Fn(&Graph, &[usize]) -> Result<Var, TrainError>| -> Result<Tensor, TrainError> {
            let mut rows = Vec::with_capacity(data.len());
            for chunk in all.chunks(PREDICT_CHUNK) {
                let g = Graph::new();
                let v = f(&g, chunk)?;
                let t = g.value(v);
                rows.extend((0..t.rows()).map(|r| t.row(r).to_vec()));
            }
            Ok(Tensor::from_rows(&rows)?)
        };
        let mut cache = LatentCache::default();
        if self.config.mask.climate && branch_frozen(&self.params, CLIMATE_PREFIX) {
            cache.climate = Some(collect(&|g, idx| self.climate_latent(g, data, idx))?);
        }
        if self.config.mask.text && branch_frozen(&self.params, TEXT_PREFIX) {
            cache.text = Some(collect(&|g, idx| self.text_latent(g, data, idx))?);
        }
        Ok(cache)
    }

    /// Probabilities for rows `idx` as an `n × 1` node.
    pub(crate) fn forward(&self, g: &Graph, data: &ModelData, idx: &[usize], cache: &LatentCache) -> Result<Var, TrainError> {
        let mask = self.config.mask;
        let structured = if mask.structured {
            let rows: Vec<Vec<f64>> = idx.iter().map(|&i| data.structured[i].clone()).collect();
            Some(g.constant(Tensor::from_rows(&rows)?)?)
        } else {
            None
        };
        if mask.structured_only() {
            let x = structured.expect("structured mask");
            let [w1, b1, w2, b2] = MLP.map(|n| g.param(&self.params, n));
            let h = g.tanh(g.add(g.matmul(x, w1?)?, b1?)?)?;
            return Ok(g.sigmoid(g.add(g.matmul(h, w2?)?, b2?)?)?);
        }
        let cached = |t: &Option<Tensor>| -> Result<Option<Var>, TrainError> {
            Ok(match t {
                Some(t) => {
                    let rows: Vec<Vec<f64>> = idx.iter().map(|&i| t.row(i).to_vec()).collect();
                    Some(g.constant(Tensor::from_rows(&rows)?)?)
                }
                None => None,
            })
        };
        let mut parts: Vec<Var> = structured.into_iter().collect();
        if mask.climate {
            parts.push(match cached(&cache.climate)? {
                Some(v) => v,
                None => self.climate_latent(g, data, idx)?,
            });
        }
        if mask.text {
            parts.push(match cached(&cache.text)? {
                Some(v) => v,
                None => self.text_latent(g, data, idx)?,
            });
        }
        let z = if parts.len() == 1 { parts[0] } else { g.concat_cols(&parts)? };
        let w = g.param(&self.params, HEAD_W)?;
        let b = g.param(&self.params, HEAD_B)?;
        Ok(g.sigmoid(g.add(g.matmul(z, w)?, b)?)?)
    }
}

/// Input width of the fusion unit: raw WoE columns plus one latent per branch.
pub(crate) fn fusion_width(config: &ModelConfig, structured_dim: usize) -> usize {
    let m = config.mask;
    usize::from(m.structured) * structured_dim + (usize::from(m.climate) + usize::from(m.text)) * config.hidden_size
}

pub(crate) fn branch_frozen(params: &ParamStore, prefix: &str) -> bool {
    let mut any = false;
    for name in params.names().filter(|n| n.starts_with(prefix)) {
        any = true;
        if !params.get(name).is_some_and(|p| p.frozen) {
            return false;
        }
    }
    any
}

/// Probabilities of `model` on `data`; shorthand for [`TrainedModel::predict`].
pub fn forward_probabilities(model: &TrainedModel, data: &ModelData) -> Result<Vec<f64>, TrainError> {
    model.predict(data)
}
