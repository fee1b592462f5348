//! Sequence encoders: stacked LSTM, stacked GRU and a pre-norm transformer
//! encoder with a learned classification token.
//!
//! Inputs are batch-major `(batch·steps) × input_dim` graph nodes with a
//! `batch·steps` validity mask. Recurrent encoders carry their state
//! unchanged through masked steps, so the final state is the state after
//! the last valid step. All encoders return a `batch × hidden_size` node.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EncoderKind {
    Lstm,
    Gru,
    Transformer,
}

impl std::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Lstm => "LSTM",
            Self::Gru => "GRU",
            Self::Transformer => "TRANSFORMER",
        })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("embedding table: {0}")]
    Embeddings(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub input_dim: usize,
    #[serde(default = "defaults::hidden")]
    pub hidden_size: usize,
    #[serde(default = "defaults::layers")]
    pub num_layers: usize,
    #[serde(default = "defaults::heads")]
    pub heads: usize,
    #[serde(default = "defaults::ff_dim")]
    pub ff_dim: usize,
    #[serde(default = "defaults::max_seq_len")]
    pub max_seq_len: usize,
    #[serde(default = "defaults::yes")]
    pub positional_encoding: bool,
}

mod defaults {
    pub fn hidden() -> usize {
        128
    }
    pub fn layers() -> usize {
        2
    }
    pub fn heads() -> usize {
        8
    }
    pub fn ff_dim() -> usize {
        256
    }
    pub fn max_seq_len() -> usize {
        326
    }
    pub fn yes() -> bool {
        true
    }
}

pub const TRANSFORMER_LAYERS: usize = 3;
pub const DEFAULT_MAX_SEQ_LEN: usize = 326;

impl EncoderConfig {
    pub fn new(kind: EncoderKind, input_dim: usize) -> Self {
        let num_layers = if kind == EncoderKind::Transformer { TRANSFORMER_LAYERS } else { defaults::layers() };
        Self {
            kind,
            input_dim,
            hidden_size: defaults::hidden(),
            num_layers,
            heads: defaults::heads(),
            ff_dim: defaults::ff_dim(),
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
            positional_encoding: true,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: &str| Err(EncoderError::InvalidConfig(m.to_string()));
        if self.input_dim == 0 || self.hidden_size == 0 || self.num_layers == 0 || self.max_seq_len == 0 {
            return bad("sizes must be at least 1");
        }
        if self.kind == EncoderKind::Transformer {
            if self.heads == 0 || self.hidden_size % self.heads != 0 {
                return bad("hidden_size must be divisible by heads");
            }
            if self.ff_dim == 0 {
                return bad("ff_dim must be at least 1");
            }
        }
        Ok(())
    }
}

/// Registers the encoder's parameters under `prefix`.
pub fn init_encoder<R: Rng>(cfg: &EncoderConfig, prefix: &str, store: &mut ParamStore, rng: &mut R) -> Result<(), EncoderError> {
    cfg.validate()?;
    let h = cfg.hidden_size;
    match cfg.kind {
        EncoderKind::Lstm | EncoderKind::Gru => {
            let gates = if cfg.kind == EncoderKind::Lstm { 4 } else { 3 };
            for l in 0..cfg.num_layers {
                let din = if l == 0 { cfg.input_dim } else { h };
                store.insert_dense(&format!("{prefix}l{l}.wx"), din, gates * h, rng);
                store.insert_dense(&format!("{prefix}l{l}.wh"), h, gates * h, rng);
                store.insert_zeros(&format!("{prefix}l{l}.b"), 1, gates * h);
            }
        }
        EncoderKind::Transformer => {
            store.insert_dense(&format!("{prefix}in.w"), cfg.input_dim, h, rng);
            store.insert_zeros(&format!("{prefix}in.b"), 1, h);
            store.insert_embedding(&format!("{prefix}cls"), 1, h, rng);
            for l in 0..cfg.num_layers {
                for m in ["wq", "wk", "wv", "wo"] {
                    store.insert_dense(&format!("{prefix}l{l}.{m}"), h, h, rng);
                }
                store.insert_dense(&format!("{prefix}l{l}.ff1"), h, cfg.ff_dim, rng);
                store.insert_zeros(&format!("{prefix}l{l}.ff1b"), 1, cfg.ff_dim);
                store.insert_dense(&format!("{prefix}l{l}.ff2"), cfg.ff_dim, h, rng);
                store.insert_zeros(&format!("{prefix}l{l}.ff2b"), 1, h);
            }
        }
    }
    Ok(())
}

/// Encodes a batch-major input node into `batch × hidden_size`.
pub fn encode(
    g: &Graph,
    store: &ParamStore,
    prefix: &str,
    cfg: &EncoderConfig,
    x: Var,
    steps: usize,
    mask: &[f64],
) -> Result<Var, EncoderError> {
    let [rows, cols] = g.shape(x);
    if steps == 0 || rows % steps != 0 || mask.len() != rows || cols != cfg.input_dim {
        return Err(AutodiffError::ShapeMismatch { op: "encode", left: [rows, cols], right: [steps, cfg.input_dim] }.into());
    }
    if steps > cfg.max_seq_len {
        return Err(EncoderError::SequenceTooLong { len: steps, max: cfg.max_seq_len });
    }
    match cfg.kind {
        EncoderKind::Lstm => recurrent(g, store, prefix, cfg, x, steps, mask, lstm_step),
        EncoderKind::Gru => recurrent(g, store, prefix, cfg, x, steps, mask, gru_step),
        EncoderKind::Transformer => transformer(g, store, prefix, cfg, x, steps, mask),
    }
}

struct StepParams {
    wh: Var,
    wh_cand: Option<Var>,
    hidden: usize,
}

/// One recurrent cell update; returns the new `(h, c)`.
type StepFn = fn(&Graph, &StepParams, Var, Var, Var) -> Result<(Var, Var), AutodiffError>;

fn lstm_step(g: &Graph, p: &StepParams, xw: Var, h: Var, c: Var) -> Result<(Var, Var), AutodiffError> {
    let n = p.hidden;
    let pre = g.add(xw, g.matmul(h, p.wh)?)?;
    let i = g.sigmoid(g.slice_cols(pre, 0, n)?)?;
    let f = g.sigmoid(g.slice_cols(pre, n, 2 * n)?)?;
    let cand = g.tanh(g.slice_cols(pre, 2 * n, 3 * n)?)?;
    let o = g.sigmoid(g.slice_cols(pre, 3 * n, 4 * n)?)?;
    let c_new = g.add(g.mul(f, c)?, g.mul(i, cand)?)?;
    let h_new = g.mul(o, g.tanh(c_new)?)?;
    Ok((h_new, c_new))
}

/// `h' = h + z ⊙ (ĥ − h)` with `ĥ = tanh(x W + (r ⊙ h) U)`.
fn gru_step(g: &Graph, p: &StepParams, xw: Var, h: Var, c: Var) -> Result<(Var, Var), AutodiffError> {
    let n = p.hidden;
    let zr = g.add(g.slice_cols(xw, 0, 2 * n)?, g.matmul(h, p.wh)?)?;
    let z = g.sigmoid(g.slice_cols(zr, 0, n)?)?;
    let r = g.sigmoid(g.slice_cols(zr, n, 2 * n)?)?;
    let u = p.wh_cand.expect("gru candidate weights");
    let cand = g.tanh(g.add(g.slice_cols(xw, 2 * n, 3 * n)?, g.matmul(g.mul(r, h)?, u)?)?)?;
    let h_new = g.add(h, g.mul(z, g.sub(cand, h)?)?)?;
    Ok((h_new, c))
}

#[allow(clippy::too_many_arguments)]
fn recurrent(
    g: &Graph,
    store: &ParamStore,
    prefix: &str,
    cfg: &EncoderConfig,
    x: Var,
    steps: usize,
    mask: &[f64],
    step: StepFn,
) -> Result<Var, EncoderError> {
    let batch = mask.len() / steps;
    let h = cfg.hidden_size;
    // reorder to time-major so each step is a contiguous row block
    let tm: Vec<usize> = (0..steps).flat_map(|t| (0..batch).map(move |b| b * steps + t)).collect();
    let mut input = g.gather_rows(x, &tm)?;
    let step_masks: Vec<Var> = (0..steps)
        .map(|t| g.constant(Tensor::column_vector((0..batch).map(|b| mask[b * steps + t]).collect())))
        .collect::<Result<_, _>>()?;
    let mut last = None;
    for l in 0..cfg.num_layers {
        let wx = g.param(store, &format!("{prefix}l{l}.wx"))?;
        let wh_full = g.param(store, &format!("{prefix}l{l}.wh"))?;
        let b = g.param(store, &format!("{prefix}l{l}.b"))?;
        let params = if cfg.kind == EncoderKind::Gru {
            StepParams { wh: g.slice_cols(wh_full, 0, 2 * h)?, wh_cand: Some(g.slice_cols(wh_full, 2 * h, 3 * h)?), hidden: h }
        } else {
            StepParams { wh: wh_full, wh_cand: None, hidden: h }
        };
        let xw = g.add(g.matmul(input, wx)?, b)?;
        let zero = g.constant(Tensor::zeros(batch, h))?;
        let (mut hs, mut cs) = (zero, zero);
        let mut outputs = Vec::with_capacity(steps);
        for (t, &m) in step_masks.iter().enumerate() {
            let xt = g.slice_rows(xw, t * batch, (t + 1) * batch)?;
            let (h_new, c_new) = step(g, &params, xt, hs, cs)?;
            hs = g.add(hs, g.mul(m, g.sub(h_new, hs)?)?)?;
            if cfg.kind == EncoderKind::Lstm {
                cs = g.add(cs, g.mul(m, g.sub(c_new, cs)?)?)?;
            }
            outputs.push(hs);
        }
        last = Some(hs);
        if l + 1 < cfg.num_layers {
            input = g.concat_rows(&outputs)?;
        }
    }
    Ok(last.expect("at least one layer"))
}

/// Sinusoidal positional encoding, `steps × dim`: even channels `sin`, odd
/// channels `cos`, wavelengths growing geometrically to 10000·2π.
pub fn positional_encoding(steps: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(steps, dim);
    for pos in 0..steps {
        for c in 0..dim {
            let pair = (c / 2) as f64 * 2.0;
            let angle = pos as f64 / 10000f64.powf(pair / dim as f64);
            t.set(pos, c, if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

fn transformer(
    g: &Graph,
    store: &ParamStore,
    prefix: &str,
    cfg: &EncoderConfig,
    x: Var,
    steps: usize,
    mask: &[f64],
) -> Result<Var, EncoderError> {
    let batch = mask.len() / steps;
    let d = cfg.hidden_size;
    let p = |name: &str| g.param(store, &format!("{prefix}{name}"));
    let mut proj = g.add(g.matmul(x, p("in.w")?)?, p("in.b")?)?;
    if cfg.positional_encoding {
        let pe = positional_encoding(steps, d);
        let tiled: Vec<f64> = (0..batch).flat_map(|_| pe.data().iter().copied()).collect();
        proj = g.add(proj, g.constant(Tensor::from_vec(batch * steps, d, tiled)?)?)?;
    }
    // rows: [cls, proj...]; sequence b becomes [cls, proj[b·T .. b·T+T]]
    let stacked = g.concat_rows(&[p("cls")?, proj])?;
    let span = steps + 1;
    let index: Vec<usize> =
        (0..batch).flat_map(|b| (0..span).map(move |s| if s == 0 { 0 } else { 1 + b * steps + s - 1 })).collect();
    let mut hcur = g.gather_rows(stacked, &index)?;
    let full_mask: Vec<f64> =
        (0..batch).flat_map(|b| std::iter::once(1.0).chain(mask[b * steps..(b + 1) * steps].iter().copied())).collect();
    for l in 0..cfg.num_layers {
        let lp = |name: &str| p(&format!("l{l}.{name}"));
        let normed = g.layer_norm(hcur)?;
        let q = g.matmul(normed, lp("wq")?)?;
        let k = g.matmul(normed, lp("wk")?)?;
        let v = g.matmul(normed, lp("wv")?)?;
        let att = g.attention(q, k, v, span, cfg.heads, &full_mask)?;
        hcur = g.add(hcur, g.matmul(att, lp("wo")?)?)?;
        let normed = g.layer_norm(hcur)?;
        let ff = g.gelu(g.add(g.matmul(normed, lp("ff1")?)?, lp("ff1b")?)?)?;
        let ff = g.add(g.matmul(ff, lp("ff2")?)?, lp("ff2b")?)?;
        hcur = g.add(hcur, ff)?;
    }
    let out = g.layer_norm(hcur)?;
    let cls_rows: Vec<usize> = (0..batch).map(|b| b * span).collect();
    Ok(g.gather_rows(out, &cls_rows)?)
}

/// Encodes a single unmasked `steps × input_dim` sequence.
pub fn encode_sequence(store: &ParamStore, prefix: &str, cfg: &EncoderConfig, seq: &Tensor) -> Result<Vec<f64>, EncoderError> {
    let g = Graph::new();
    let x = g.constant(seq.clone())?;
    let out = encode(&g, store, prefix, cfg, x, seq.rows(), &vec![1.0; seq.rows()])?;
    let v = g.value(out).data().to_vec();
    Ok(v)
}

pub fn lstm_encode(store: &ParamStore, prefix: &str, cfg: &EncoderConfig, seq: &Tensor) -> Result<Vec<f64>, EncoderError> {
    encode_sequence(store, prefix, &EncoderConfig { kind: EncoderKind::Lstm, ..cfg.clone() }, seq)
}

pub fn gru_encode(store: &ParamStore, prefix: &str, cfg: &EncoderConfig, seq: &Tensor) -> Result<Vec<f64>, EncoderError> {
    encode_sequence(store, prefix, &EncoderConfig { kind: EncoderKind::Gru, ..cfg.clone() }, seq)
}

pub fn transformer_encode(
    store: &ParamStore,
    prefix: &str,
    cfg: &EncoderConfig,
    seq: &Tensor,
) -> Result<Vec<f64>, EncoderError> {
    encode_sequence(store, prefix, &EncoderConfig { kind: EncoderKind::Transformer, ..cfg.clone() }, seq)
}

pub const PAD_ID: usize = 0;
pub const OOV_ID: usize = 1;
pub const CLS_ID: usize = 2;
const RESERVED: [&str; 3] = ["<pad>", "<oov>", "<cls>"];

/// Token to id map with reserved PAD, OOV and CLS ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct TokenVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for TokenVocab {
    fn from(tokens: Vec<String>) -> Self {
        Self::from_tokens(tokens)
    }
}

impl From<TokenVocab> for Vec<String> {
    fn from(v: TokenVocab) -> Self {
        v.tokens
    }
}

impl TokenVocab {
    /// Vocabulary of tokens seen at least `min_count` times, ids assigned
    /// by descending frequency then token order.
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a [String]>, min_count: usize) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in texts {
            for tok in t {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count.max(1)).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = RESERVED.iter().map(|s| s.to_string()).chain(kept.into_iter().map(|(t, _)| t.to_string())).collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        match self.index.get(token) {
            Some(&i) if i >= RESERVED.len() => i,
            _ => OOV_ID,
        }
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn to_json(&self) -> String {
        let pairs: Vec<(&str, usize)> = self.tokens.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
        serde_json::to_string_pretty(&pairs).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self, EncoderError> {
        let mut pairs: Vec<(String, usize)> =
            serde_json::from_str(text).map_err(|e| EncoderError::Embeddings(e.to_string()))?;
        pairs.sort_by_key(|p| p.1);
        if pairs.iter().enumerate().any(|(i, p)| p.1 != i) {
            return Err(EncoderError::Embeddings("vocabulary ids must be dense from 0".into()));
        }
        if pairs.len() < RESERVED.len() || pairs.iter().zip(RESERVED).any(|(p, r)| p.0 != r) {
            return Err(EncoderError::Embeddings("reserved tokens missing".into()));
        }
        Ok(Self::from_tokens(pairs.into_iter().map(|p| p.0).collect()))
    }
}

/// Token ids padded with PAD to `len`, plus the validity mask. Tokens
/// beyond `len` are dropped; an empty text becomes a single PAD position.
pub fn embed_tokens(tokens: &[String], vocab: &TokenVocab, len: usize) -> (Vec<usize>, Vec<f64>) {
    let len = len.max(1);
    let mut ids: Vec<usize> = tokens.iter().take(len).map(|t| vocab.id(t)).collect();
    let mut mask = vec![1.0; ids.len()];
    ids.resize(len, PAD_ID);
    mask.resize(len, 0.0);
    (ids, mask)
}

/// Batch of token sequences padded to the longest member (capped at
/// `max_len`), batch-major.
pub fn token_batch(texts: &[&[String]], vocab: &TokenVocab, max_len: usize) -> (Vec<usize>, Vec<f64>, usize) {
    let steps = texts.iter().map(|t| t.len()).max().unwrap_or(0).clamp(1, max_len.max(1));
    let mut ids = Vec::with_capacity(texts.len() * steps);
    let mut mask = Vec::with_capacity(texts.len() * steps);
    for t in texts {
        let (i, m) = embed_tokens(t, vocab, steps);
        ids.extend(i);
        mask.extend(m);
    }
    (ids, mask, steps)
}

/// Externally computed token vectors, one `token TAB v1 … vd` line each.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalEmbeddings {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f64>>,
}

impl ExternalEmbeddings {
    pub fn read<R: Read>(reader: R) -> Result<Self, EncoderError> {
        let mut dim = None;
        let mut vectors = HashMap::new();
        for (n, line) in BufReader::new(reader).lines().enumerate() {
            let line = line.map_err(|e| EncoderError::Embeddings(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let (tok, rest) =
                line.split_once('\t').ok_or_else(|| EncoderError::Embeddings(format!("line {}: missing tab", n + 1)))?;
            let v: Vec<f64> = rest
                .split_whitespace()
                .map(|x| x.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| EncoderError::Embeddings(format!("line {}: {e}", n + 1)))?;
            if *dim.get_or_insert(v.len()) != v.len() || v.is_empty() || v.iter().any(|x| !x.is_finite()) {
                return Err(EncoderError::Embeddings(format!("line {}: inconsistent vector", n + 1)));
            }
            vectors.insert(tok.to_string(), v);
        }
        let dim = dim.ok_or_else(|| EncoderError::Embeddings("empty table".into()))?;
        Ok(Self { dim, vectors })
    }

    /// Vocabulary restricted to tokens the table covers; the rest fall back to OOV.
    pub fn restrict(&self, vocab: &TokenVocab) -> TokenVocab {
        let tokens = vocab
            .tokens
            .iter()
            .enumerate()
            .filter(|(i, t)| *i < RESERVED.len() || self.vectors.contains_key(*t))
            .map(|(_, t)| t.clone())
            .collect();
        TokenVocab::from_tokens(tokens)
    }

    /// Table aligned with `vocab` ids; reserved rows are zero.
    pub fn table(&self, vocab: &TokenVocab) -> Tensor {
        let mut t = Tensor::zeros(vocab.len(), self.dim);
        for (i, tok) in vocab.tokens.iter().enumerate().skip(RESERVED.len()) {
            if let Some(v) = self.vectors.get(tok) {
                t.row_mut(i).copy_from_slice(v);
            }
        }
        t
    }
}

/// Per-column z-scoring with statistics from training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Self {
        let mut n = 0.0;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for r in rows {
            n += 1.0;
            for (j, &v) in r.iter().enumerate().take(dim) {
                sum[j] += v;
                sq[j] += v * v;
            }
        }
        let n = f64::max(n, 1.0);
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq.iter().zip(&mean).map(|(s, m)| (s / n - m * m).max(0.0).sqrt()).map(|s| if s > 0.0 { s } else { 1.0 }).collect();
        Self { mean, std }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }
}
