use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use super::AutodiffError;

/// Adaptive-moment optimizer constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub frozen: bool,
    first_moment: Tensor,
    second_moment: Tensor,
}

impl Param {
    fn new(value: Tensor) -> Self {
        let [r, c] = value.shape();
        Self { value, frozen: false, first_moment: Tensor::zeros(r, c), second_moment: Tensor::zeros(r, c) }
    }
}

/// Named parameters plus Adam state. Iteration order is by name, which
/// keeps checkpoints and hashes stable.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Param::new(value));
    }

    /// Glorot-uniform dense weight of shape `fan_in × fan_out`.
    pub fn insert_dense<R: Rng>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..=limit)).collect();
        self.insert(name, Tensor::from_vec(fan_in, fan_out, data).expect("shape matches"));
    }

    /// Embedding table with entries uniform in ±0.1.
    pub fn insert_embedding<R: Rng>(&mut self, name: &str, rows: usize, dim: usize, rng: &mut R) {
        let data = (0..rows * dim).map(|_| rng.gen_range(-0.1..=0.1)).collect();
        self.insert(name, Tensor::from_vec(rows, dim, data).expect("shape matches"));
    }

    pub fn insert_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Tensor::zeros(rows, cols));
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Freezes (or unfreezes) every parameter whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.frozen = frozen;
                n += 1;
            }
        }
        n
    }

    /// Number of scalar entries in trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.params.values().filter(|p| !p.frozen).map(|p| p.value.len()).sum()
    }

    /// Moves every entry from `other` into this store under `prefix`.
    pub fn absorb(&mut self, prefix: &str, other: ParamStore) {
        for (name, p) in other.params {
            self.params.insert(format!("{prefix}{name}"), p);
        }
    }

    /// Applies one bias-corrected Adam update. Any non-finite or mis-shaped
    /// gradient aborts the step before a parameter is touched.
    pub fn adam_step(
        &mut self,
        grads: &HashMap<String, Tensor>,
        lr: f64,
        cfg: &AdamConfig,
    ) -> Result<(), AutodiffError> {
        for (name, g) in grads {
            let p = self.params.get(name).ok_or_else(|| AutodiffError::UnknownParam(name.clone()))?;
            if p.value.shape() != g.shape() {
                return Err(AutodiffError::ShapeMismatch { op: "adam_step", left: p.value.shape(), right: g.shape() });
            }
            if !g.all_finite() {
                return Err(AutodiffError::NonFinite { op: "adam_step" });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, g) in grads {
            let p = self.params.get_mut(name).expect("checked above");
            if p.frozen {
                continue;
            }
            let Param { value, first_moment, second_moment, .. } = p;
            for (((w, m), v), &gi) in value
                .data_mut()
                .iter_mut()
                .zip(first_moment.data_mut())
                .zip(second_moment.data_mut())
                .zip(g.data())
            {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and value bits of parameters matching `prefix`.
    pub fn hash_prefix(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.params.iter().filter(|(n, _)| n.starts_with(prefix)) {
            h.update(name.as_bytes());
            h.update((p.value.rows() as u64).to_le_bytes());
            h.update((p.value.cols() as u64).to_le_bytes());
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION.to_string(),
            params: self
                .params
                .iter()
                .map(|(name, p)| NamedTensor {
                    name: name.clone(),
                    shape: p.value.shape().to_vec(),
                    frozen: p.frozen,
                    values: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds a store from a checkpoint; optimizer state starts fresh.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, AutodiffError> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(AutodiffError::Checkpoint(format!("unsupported version {}", ckpt.version)));
        }
        let mut store = ParamStore::new();
        for p in &ckpt.params {
            if p.shape.len() != 2 {
                return Err(AutodiffError::Checkpoint(format!("{}: expected rank-2 shape", p.name)));
            }
            let t = Tensor::from_vec(p.shape[0], p.shape[1], p.values.clone())?;
            store.insert(p.name.clone(), t);
            store.set_frozen_exact(&p.name, p.frozen);
        }
        Ok(store)
    }

    fn set_frozen_exact(&mut self, name: &str, frozen: bool) {
        if let Some(p) = self.params.get_mut(name) {
            p.frozen = frozen;
        }
    }
}

pub const CHECKPOINT_VERSION: &str = "climcredit-params/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(default)]
    pub frozen: bool,
    pub values: Vec<f64>,
}

/// Parameter checkpoint: name, shape and row-major values per tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub params: Vec<NamedTensor>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::row_vector(vec![value, -value]));
        s
    }

    fn grads(g: &[f64]) -> HashMap<String, Tensor> {
        HashMap::from([("w".to_string(), Tensor::row_vector(g.to_vec()))])
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store_with(0.3);
        s.adam_step(&grads(&[0.0, 0.0]), 1e-3, &AdamConfig::default()).unwrap();
        assert_eq!(s.value("w").unwrap().data(), &[0.3, -0.3]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = store_with(0.0);
        let lr = 1e-3;
        let g = [0.5, -2.0];
        s.adam_step(&grads(&g), lr, &AdamConfig::default()).unwrap();
        // m_hat = g, v_hat = g², so Δ = -lr · g / (|g| + ε)
        for (w, gi) in s.value("w").unwrap().data().iter().zip(g) {
            let expected = -lr * gi / (gi.abs() + 1e-8);
            assert!((w - expected).abs() < 1e-15, "{w} vs {expected}");
        }
    }

    #[test]
    fn constant_gradient_update_tends_to_lr() {
        let mut s = store_with(0.0);
        let lr = 1e-2;
        let mut prev = 0.0;
        let mut last_delta = 0.0;
        for _ in 0..2000 {
            s.adam_step(&grads(&[3.0, 3.0]), lr, &AdamConfig::default()).unwrap();
            let w = s.value("w").unwrap().data()[0];
            last_delta = prev - w;
            prev = w;
        }
        assert!((last_delta - lr).abs() < 1e-6 * lr.max(1.0), "{last_delta}");
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut s = store_with(1.0);
        let err = s.adam_step(&grads(&[f64::NAN, 0.0]), 1e-3, &AdamConfig::default());
        assert!(matches!(err, Err(AutodiffError::NonFinite { .. })));
        assert_eq!(s.step(), 0);
        assert_eq!(s.value("w").unwrap().data(), &[1.0, -1.0]);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut s = store_with(1.0);
        s.set_frozen("w", true);
        let before = s.hash_prefix("");
        s.adam_step(&grads(&[1.0, 1.0]), 1e-1, &AdamConfig::default()).unwrap();
        assert_eq!(before, s.hash_prefix(""));
    }

    #[test]
    fn checkpoint_json_round_trip_is_bit_exact() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::from_vec(2, 2, vec![0.1, 1.0 / 3.0, -2.5e-300, 7.0]).unwrap());
        let text = serde_json::to_string(&s.to_checkpoint()).unwrap();
        let back = ParamStore::from_checkpoint(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back.hash_prefix(""), s.hash_prefix(""));
    }
}
