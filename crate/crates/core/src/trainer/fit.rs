use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{fusion_width, LatentCache, CLIMATE_PREFIX, HEAD_B, HEAD_W, TEXT_PREFIX};
use super::{ModelConfig, ModelData, Split, SplitPlan, TrainError, BATCH_SIZES, LEARNING_RATES, RECURRENT_LAYERS};
use crate::autodiff::{AdamConfig, AutodiffError, Graph, ParamStore, Tensor};
use crate::encoders::{EncoderKind, ExternalEmbeddings, Standardizer, TokenVocab, TRANSFORMER_LAYERS};
use crate::rng::SeedSource;
use crate::trainer::TrainedModel;

pub fn train(config: &ModelConfig, data: &ModelData, plan: &SplitPlan) -> Result<TrainedModel, TrainError> {
    train_with_embeddings(config, data, plan, None)
}

/// Like [`train`], with the text embedding table taken (frozen) from an
/// external token-vector file. Tokens the table lacks map to OOV.
pub fn train_with_embeddings(
    config: &ModelConfig,
    data: &ModelData,
    plan: &SplitPlan,
    embeddings: Option<&ExternalEmbeddings>,
) -> Result<TrainedModel, TrainError> {
    config.validate()?;
    data.check(config.mask)?;
    let (train_idx, val_idx) = split_indices(data, plan)?;
    let mask = config.mask;
    let vocab = mask.text.then(|| {
        let v = TokenVocab::fit(train_idx.iter().map(|&i| data.text[i].as_slice()), config.min_token_count);
        match embeddings {
            Some(e) => e.restrict(&v),
            None => v,
        }
    });
    let table = match (embeddings, &vocab) {
        (Some(e), Some(v)) => Some(e.table(v)),
        _ => None,
    };
    let scaler = mask.climate.then(|| {
        let rows: Vec<Vec<f64>> = train_idx
            .iter()
            .flat_map(|&i| data.climate[i].iter().map(|m| config.climate_factors.iter().map(|&f| m[f]).collect()))
            .collect();
        Standardizer::fit(rows.iter().map(Vec::as_slice), config.climate_factors.len())
    });
    let mut rng = SeedSource::new(config.seed).stream("init");
    let model = TrainedModel::init(config.clone(), data.structured_dim(), vocab, scaler, table, &mut rng)?;
    fit(model, data, &train_idx, &val_idx)
}

fn split_indices(data: &ModelData, plan: &SplitPlan) -> Result<(Vec<usize>, Vec<usize>), TrainError> {
    let train_idx = plan.indices(&data.ids, Split::Train);
    let val_idx = plan.indices(&data.ids, Split::Val);
    if train_idx.is_empty() {
        return Err(TrainError::EmptySplit("TRAIN"));
    }
    if val_idx.is_empty() {
        return Err(TrainError::EmptySplit("VAL"));
    }
    Ok((train_idx, val_idx))
}

fn diverged(e: TrainError, epoch: usize, step: usize) -> TrainError {
    match e {
        TrainError::Encoder(crate::encoders::EncoderError::Autodiff(AutodiffError::NonFinite { .. })) => {
            TrainError::Divergence { epoch, step }
        }
        other => other,
    }
}

fn labels_of(data: &ModelData, idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| f64::from(data.labels[i])).collect()
}

/// Plain BCE of the current parameters on rows `idx`.
fn evaluate(model: &TrainedModel, data: &ModelData, idx: &[usize], cache: &LatentCache) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for chunk in idx.chunks(256) {
        let g = Graph::new();
        let p = model.forward(&g, data, chunk, cache)?;
        let l = g.bce(p, &labels_of(data, chunk), 1.0)?;
        total += g.value(l).get(0, 0) * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

/// Mini-batch Adam with per-epoch validation, early stopping on patience
/// and restoration of the best epoch's parameters.
fn fit(mut model: TrainedModel, data: &ModelData, train_idx: &[usize], val_idx: &[usize]) -> Result<TrainedModel, TrainError> {
    let cfg = model.config.clone();
    let cache = model.frozen_latents(data)?;
    let adam = AdamConfig::default();
    let mut rng = SeedSource::new(cfg.seed).stream("shuffle");
    let mut order = train_idx.to_vec();
    let mut best: Option<ParamStore> = None;
    let mut since = 0;
    let mut step = 0;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let g = Graph::new();
            let loss = model
                .forward(&g, data, batch, &cache)
                .and_then(|p| Ok(g.bce(p, &labels_of(data, batch), cfg.pos_weight)?))
                .map_err(|e| diverged(e, epoch, step))?;
            let value = g.value(loss).get(0, 0);
            if !value.is_finite() {
                return Err(TrainError::Divergence { epoch, step });
            }
            epoch_loss += value * batch.len() as f64;
            let grads = g.backward(loss).map_err(|e| diverged(e.into(), epoch, step))?.into_param_map();
            model.params.adam_step(&grads, cfg.lr, &adam).map_err(|e| diverged(e.into(), epoch, step))?;
            step += 1;
        }
        model.train_curve.push(epoch_loss / order.len() as f64);
        let val = evaluate(&model, data, val_idx, &cache).map_err(|e| diverged(e, epoch, step))?;
        if !val.is_finite() {
            return Err(TrainError::Divergence { epoch, step });
        }
        model.val_curve.push(val);
        log::debug!("epoch {epoch}: train {:.5} val {val:.5}", model.train_curve[epoch]);
        if val < model.best_val_bce {
            model.best_val_bce = val;
            model.best_epoch = epoch;
            best = Some(model.params.clone());
            since = 0;
        } else {
            since += 1;
        }
        if since >= cfg.patience {
            break;
        }
    }
    if let Some(p) = best {
        model.params = p;
    }
    Ok(model)
}

/// One grid cell's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub lr: f64,
    pub batch_size: usize,
    pub num_layers: usize,
    pub val_bce: Option<f64>,
    pub best_epoch: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub best: TrainedModel,
    /// Successful cells by ascending validation BCE, then failed cells.
    pub leaderboard: Vec<GridEntry>,
}

/// Every learning rate × batch size (× layer count for recurrent encoders)
/// around `base`.
pub fn search_grid(base: &ModelConfig) -> Vec<ModelConfig> {
    let layers: &[usize] = match base.encoder {
        EncoderKind::Transformer => &[TRANSFORMER_LAYERS],
        _ => &RECURRENT_LAYERS,
    };
    let mut out = Vec::new();
    for &num_layers in layers {
        for lr in LEARNING_RATES {
            for batch_size in BATCH_SIZES {
                out.push(ModelConfig { lr, batch_size, num_layers, ..base.clone() });
            }
        }
    }
    out
}

fn tie_key(c: &ModelConfig) -> (f64, usize, usize) {
    (c.lr, c.batch_size, c.num_layers)
}

/// Trains every cell and keeps the one with the lowest validation BCE.
/// Ties go to the lower learning rate, then the smaller batch, then fewer
/// layers. A failing cell is recorded and skipped.
pub fn grid_search(grid: &[ModelConfig], data: &ModelData, plan: &SplitPlan) -> Result<GridOutcome, TrainError> {
    let mut best: Option<TrainedModel> = None;
    let mut ok: Vec<(f64, (f64, usize, usize), GridEntry)> = Vec::new();
    let mut failed = Vec::new();
    for cfg in grid {
        let entry = |val_bce, best_epoch, error| GridEntry {
            lr: cfg.lr,
            batch_size: cfg.batch_size,
            num_layers: cfg.num_layers,
            val_bce,
            best_epoch,
            error,
        };
        match train(cfg, data, plan) {
            Ok(m) => {
                ok.push((m.best_val_bce, tie_key(cfg), entry(Some(m.best_val_bce), Some(m.best_epoch), None)));
                let better = best.as_ref().map_or(true, |b| {
                    m.best_val_bce.total_cmp(&b.best_val_bce).then_with(|| cmp_key(tie_key(cfg), tie_key(&b.config))).is_lt()
                });
                if better {
                    best = Some(m);
                }
            }
            Err(e) => {
                log::warn!("grid cell lr={} batch={} layers={} failed: {e}", cfg.lr, cfg.batch_size, cfg.num_layers);
                failed.push(entry(None, None, Some(e.to_string())));
            }
        }
    }
    let best = best.ok_or(TrainError::EmptyGrid)?;
    ok.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| cmp_key(a.1, b.1)));
    let leaderboard = ok.into_iter().map(|(_, _, e)| e).chain(failed).collect();
    Ok(GridOutcome { best, leaderboard })
}

fn cmp_key(a: (f64, usize, usize), b: (f64, usize, usize)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
}

fn pretrained<'a>(m: Option<&'a TrainedModel>, name: &'static str, needs: bool) -> Result<Option<&'a TrainedModel>, TrainError> {
    match m {
        _ if !needs => Ok(None),
        Some(m) if m.config.encoder == EncoderKind::Transformer => Ok(Some(m)),
        _ => Err(TrainError::MissingCheckpoint(name)),
    }
}

fn copy_branch(dst: &mut ParamStore, src: &ParamStore, prefix: &str) {
    for name in src.names().filter(|n| n.starts_with(prefix)) {
        dst.insert(name, src.value(name).expect("listed").clone());
    }
    dst.set_frozen(prefix, true);
}

/// Fusion model whose climate and text branches are copied from pretrained
/// unimodal transformer models and frozen; only the zero-initialised
/// fusion unit trains.
pub fn hybrid_freeze_train(
    config: &ModelConfig,
    climate: Option<&TrainedModel>,
    text: Option<&TrainedModel>,
    data: &ModelData,
    plan: &SplitPlan,
) -> Result<TrainedModel, TrainError> {
    let mask = config.mask;
    if !(mask.climate || mask.text) {
        return Err(TrainError::InvalidConfig("hybrid training needs a climate or text branch".into()));
    }
    let clim = pretrained(climate.filter(|m| m.config.mask.climate), "climate", mask.climate)?;
    let txt = pretrained(text.filter(|m| m.config.mask.text), "text", mask.text)?;
    let source = clim.or(txt).expect("at least one branch");
    let shape = |c: &ModelConfig| (c.hidden_size, c.num_layers, c.heads, c.ff_dim, c.max_seq_len);
    if let (Some(a), Some(b)) = (clim, txt) {
        if shape(&a.config) != shape(&b.config) {
            return Err(TrainError::InvalidConfig("pretrained branches differ in encoder shape".into()));
        }
    }
    let s = &source.config;
    let cfg = ModelConfig {
        encoder: EncoderKind::Transformer,
        hidden_size: s.hidden_size,
        num_layers: s.num_layers,
        heads: s.heads,
        ff_dim: s.ff_dim,
        max_seq_len: s.max_seq_len,
        climate_factors: clim.map_or(config.climate_factors.clone(), |m| m.config.climate_factors.clone()),
        text_embed_dim: txt.map_or(config.text_embed_dim, |m| m.config.text_embed_dim),
        ..config.clone()
    };
    cfg.validate()?;
    data.check(mask)?;
    let (train_idx, val_idx) = split_indices(data, plan)?;
    let structured_dim = data.structured_dim();
    let mut params = ParamStore::new();
    if let Some(m) = clim {
        copy_branch(&mut params, &m.params, CLIMATE_PREFIX);
    }
    if let Some(m) = txt {
        copy_branch(&mut params, &m.params, TEXT_PREFIX);
    }
    params.insert(HEAD_W, Tensor::zeros(fusion_width(&cfg, structured_dim), 1));
    params.insert(HEAD_B, Tensor::zeros(1, 1));
    let model = TrainedModel {
        config: cfg,
        params,
        vocab: txt.and_then(|m| m.vocab.clone()),
        climate_scaler: clim.and_then(|m| m.climate_scaler.clone()),
        structured_dim,
        train_curve: vec![],
        val_curve: vec![],
        best_epoch: 0,
        best_val_bce: f64::INFINITY,
    };
    fit(model, data, &train_idx, &val_idx)
}

/// Small learnable dataset with all three modalities.
#[cfg(test)]
pub(crate) fn toy_data(n: usize, seed: u64) -> ModelData {
    use crate::panel::PANEL_MONTHS;
    use rand::Rng;
    let mut rng = SeedSource::new(seed).stream("toy");
    let mut d = ModelData::default();
    for i in 0..n {
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = u8::from(x[0] + 0.5 * x[1] > 0.0);
        let mut panel = [[0.0; 4]; PANEL_MONTHS];
        for m in panel.iter_mut() {
            *m = [rng.gen_range(0.0..10.0), f64::from(y) * 5.0 + rng.gen_range(0.0..1.0), rng.gen(), rng.gen()];
        }
        d.ids.push(format!("L{i:04}"));
        d.structured.push(x);
        d.climate.push(panel);
        d.text.push(if y == 1 { vec!["flood".into(), "late".into()] } else { vec!["steady".into()] });
        d.labels.push(y);
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{make_split, ModalityMask};

    fn small(mask: &str, kind: EncoderKind) -> ModelConfig {
        ModelConfig {
            mask: mask.parse().unwrap(),
            encoder: kind,
            hidden_size: 4,
            num_layers: if kind == EncoderKind::Transformer { 3 } else { 2 },
            heads: 2,
            ff_dim: 8,
            text_embed_dim: 4,
            mlp_hidden: 8,
            lr: 1e-3,
            batch_size: 16,
            max_epochs: 3,
            patience: 10,
            seed: 5,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn separable_toy_reaches_low_loss() {
        let mut d = toy_data(800, 1);
        for (x, y) in d.structured.iter_mut().zip(&d.labels) {
            x[2] = if *y == 1 { 2.0 } else { -2.0 };
        }
        let plan = make_split(&d.ids, &d.labels, 1).unwrap();
        let cfg = ModelConfig { max_epochs: 100, patience: 100, ..small("S", EncoderKind::Lstm) };
        let m = train(&cfg, &d, &plan).unwrap();
        let train_idx = plan.indices(&d.ids, Split::Train);
        let bce = evaluate(&m, &d, &train_idx, &LatentCache::default()).unwrap();
        assert!(bce < 0.05, "train bce {bce}");
        assert_eq!(m.val_curve.len(), 100);
        let min = m.val_curve.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(m.best_val_bce, min);
        assert_eq!(m.val_curve[m.best_epoch], min);
    }

    #[test]
    fn patience_zero_runs_one_epoch_and_is_deterministic() {
        let d = toy_data(120, 2);
        let plan = make_split(&d.ids, &d.labels, 2).unwrap();
        let cfg = ModelConfig { patience: 0, ..small("S+C", EncoderKind::Gru) };
        let a = train(&cfg, &d, &plan).unwrap();
        assert_eq!(a.val_curve.len(), 1);
        let b = train(&cfg, &d, &plan).unwrap();
        assert_eq!(a.best_val_bce.to_bits(), b.best_val_bce.to_bits());
        assert_eq!(a.predict(&d).unwrap(), b.predict(&d).unwrap());
    }

    #[test]
    fn deactivated_inputs_are_never_read() {
        let d = toy_data(80, 3);
        let plan = make_split(&d.ids, &d.labels, 3).unwrap();
        for mask in ModalityMask::all() {
            let cfg = ModelConfig { mask, max_epochs: 1, ..small("S", EncoderKind::Lstm) };
            let m = train(&cfg, &d, &plan).unwrap();
            let base = m.predict(&d).unwrap();
            assert!(base.iter().all(|p| *p > 0.0 && *p < 1.0));
            let mut poked = d.clone();
            if !mask.structured {
                poked.structured.iter_mut().for_each(|r| r.iter_mut().for_each(|v| *v = 1e3));
            }
            if !mask.climate {
                poked.climate.iter_mut().for_each(|p| p[0][1] = -7.0);
            }
            if !mask.text {
                poked.text.iter_mut().for_each(|t| t.push("noise".into()));
            }
            let after = m.predict(&poked).unwrap();
            assert!(base.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()), "{mask}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let d = toy_data(60, 4);
        let plan = make_split(&d.ids, &d.labels, 4).unwrap();
        let m = train(&ModelConfig { max_epochs: 2, ..small("S+C+T", EncoderKind::Transformer) }, &d, &plan).unwrap();
        let back = TrainedModel::from_json(&m.to_json()).unwrap();
        let (a, b) = (m.predict(&d).unwrap(), back.predict(&d).unwrap());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(matches!(m.predict(&ModelData { text: vec![], ..d }), Err(TrainError::MissingModality("text"))));
    }

    #[test]
    fn grid_has_expected_cells_and_sorted_leaderboard() {
        assert_eq!(search_grid(&small("S", EncoderKind::Lstm)).len(), 16);
        assert_eq!(search_grid(&small("S", EncoderKind::Transformer)).len(), 8);
        let d = toy_data(60, 5);
        let plan = make_split(&d.ids, &d.labels, 5).unwrap();
        let base = ModelConfig { max_epochs: 2, ..small("S", EncoderKind::Lstm) };
        let one = grid_search(&[base.clone()], &d, &plan).unwrap();
        assert_eq!(one.best.config, base);
        let mut grid: Vec<ModelConfig> = search_grid(&base).into_iter().take(4).collect();
        grid.push(ModelConfig { lr: 0.7, ..base.clone() });
        let out = grid_search(&grid, &d, &plan).unwrap();
        assert_eq!(out.leaderboard.len(), 5);
        assert!(out.leaderboard[4].error.is_some());
        let vals: Vec<f64> = out.leaderboard.iter().filter_map(|e| e.val_bce).collect();
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(out.best.best_val_bce, vals[0]);
        assert!(matches!(grid_search(&[], &d, &plan), Err(TrainError::EmptyGrid)));
    }

    #[test]
    fn hybrid_freezes_branches_and_trains_head() {
        let d = toy_data(80, 6);
        let plan = make_split(&d.ids, &d.labels, 6).unwrap();
        let tcfg = |m: &str| ModelConfig { max_epochs: 1, ..small(m, EncoderKind::Transformer) };
        let clim = train(&tcfg("C"), &d, &plan).unwrap();
        let text = train(&tcfg("T"), &d, &plan).unwrap();
        let cfg = ModelConfig { max_epochs: 0, ..tcfg("S+C+T") };
        assert!(matches!(
            hybrid_freeze_train(&cfg, Some(&clim), None, &d, &plan),
            Err(TrainError::MissingCheckpoint("text"))
        ));
        let lstm = train(&ModelConfig { max_epochs: 1, ..small("C", EncoderKind::Lstm) }, &d, &plan).unwrap();
        assert!(matches!(
            hybrid_freeze_train(&cfg, Some(&lstm), Some(&text), &d, &plan),
            Err(TrainError::MissingCheckpoint("climate"))
        ));
        let untrained = hybrid_freeze_train(&cfg, Some(&clim), Some(&text), &d, &plan);
        assert!(untrained.is_err(), "zero epochs is rejected by validation");
        let cfg = ModelConfig { max_epochs: 1, ..cfg };
        let zero_head = {
            let mut m = hybrid_freeze_train(&ModelConfig { patience: 0, ..cfg.clone() }, Some(&clim), Some(&text), &d, &plan).unwrap();
            m.params.value_mut(HEAD_W).unwrap().data_mut().iter_mut().for_each(|w| *w = 0.0);
            m.params.value_mut(HEAD_B).unwrap().data_mut()[0] = 0.0;
            m
        };
        assert!(zero_head.predict(&d).unwrap().iter().all(|&p| p == 0.5));
        let m = hybrid_freeze_train(&cfg, Some(&clim), Some(&text), &d, &plan).unwrap();
        assert_eq!(m.branch_hash(CLIMATE_PREFIX), clim.branch_hash(CLIMATE_PREFIX));
        assert_eq!(m.branch_hash(TEXT_PREFIX), text.branch_hash(TEXT_PREFIX));
        assert_eq!(m.trainable_count(), d.structured_dim() + 2 * cfg.hidden_size + 1);
        assert!(m.params.value(HEAD_W).unwrap().data().iter().any(|&w| w != 0.0));
    }
}
