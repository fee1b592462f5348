use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use climcredit::climate::io::{read_stations, read_weather, write_indices, write_stations, write_weather};
use climcredit::climate::{compute_all_indices, rescale_rows, FACTOR_NAMES};
use climcredit::encoders::{EncoderKind, ExternalEmbeddings, TRANSFORMER_LAYERS};
use climcredit::explain::{
    explain_model, factor_attribution, per_factor_ablation, sample_background, select_uncertain_cases,
    write_shap_csv, FeatureLayout, ShapConfig,
};
use climcredit::features::FeaturePipeline;
use climcredit::loans::{attach_texts, read_loans, read_texts, write_loans, write_texts, LoanRecord, StructuredSchema};
use climcredit::metrics::{all_metrics, bootstrap_summary, spearman_matrix, write_report, ReportRow, ScoreSet};
use climcredit::panel::{read_panels, write_panels};
use climcredit::synth::{generate, GenSpec};
use climcredit::trainer::{
    grid_search, hybrid_freeze_train, make_split, search_grid, train_with_embeddings, ModalityMask, ModelConfig,
    ModelData, Split, SplitPlan, TrainError, TrainedModel, RECURRENT_LAYERS,
};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::manifest::{Stage, Workspace};
use crate::{CliError, CorrelateArgs, EvalArgs, ExplainArgs, GenArgs, TrainArgs};

const STATIONS: &str = "data/stations.csv";
const WEATHER: &str = "data/weather.csv";
const LOANS: &str = "data/loans.csv";
const TEXTS: &str = "data/texts.tsv";
const SCHEMA: &str = "data/schema.json";
const TRUTH: &str = "data/truth.csv";
const INDICES: &str = "indices/indices.csv";
const SCALERS: &str = "indices/scalers.json";
const PANELS: &str = "panels/panels.csv";
const DROPPED: &str = "panels/dropped.csv";
const SPLIT: &str = "features/split.json";
const PIPELINE: &str = "features/pipeline.json";
const SELECTION: &str = "features/selection.csv";
const PREDICTIONS: &str = "eval/predictions.csv";
const REPORT: &str = "eval/report.csv";

pub struct Context {
    cfg: RunConfig,
    out_dir: PathBuf,
}

impl Context {
    pub fn new(cfg: RunConfig, out_dir: PathBuf) -> Self {
        Self { cfg, out_dir }
    }

    fn open(&self) -> Result<Workspace, CliError> {
        self.cfg.validate()?;
        Workspace::open(&self.out_dir)
    }
}

fn rt(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::InvalidConfig(m) => CliError::Validation(m),
        e => rt(e),
    }
}

fn utf8(bytes: Vec<u8>, rel: &str) -> Result<String, CliError> {
    String::from_utf8(bytes).map_err(|_| CliError::Validation(format!("{rel} is not UTF-8")))
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

fn read_json<T: for<'de> Deserialize<'de>>(stage: &mut Stage<'_>, rel: &str) -> Result<T, CliError> {
    let bytes = stage.read(rel)?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Validation(format!("{rel}: {e}")))
}

fn read_schema_and_loans(stage: &mut Stage<'_>) -> Result<(StructuredSchema, Vec<LoanRecord>), CliError> {
    let schema: StructuredSchema = read_json(stage, SCHEMA)?;
    let loans = read_loans(stage.read(LOANS)?.as_slice(), &schema).map_err(|e| CliError::Validation(e.to_string()))?;
    Ok((schema, loans))
}

fn parse_list<T>(s: &str, what: &str, f: impl Fn(&str) -> Option<T>) -> Result<Vec<T>, CliError> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| f(p).ok_or_else(|| CliError::Validation(format!("invalid {what} {p:?}"))))
        .collect()
}

fn parse_encoder(s: &str) -> Result<EncoderKind, CliError> {
    serde_json::from_value(json!(s.to_ascii_uppercase()))
        .map_err(|_| CliError::Validation(format!("unknown encoder {s:?}; expected lstm, gru or transformer")))
}

fn parse_factor(s: &str) -> Option<usize> {
    FACTOR_NAMES.iter().position(|f| f.eq_ignore_ascii_case(s)).or_else(|| s.parse().ok().filter(|&i| i < 4))
}

/// Runs `f(0..n)` on up to `jobs` threads; results keep index order.
fn pool<T: Send>(jobs: usize, n: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let v = f(i);
                slots.lock().expect("no panics while held")[i] = Some(v);
            });
        }
    });
    slots.into_inner().expect("no panics while held").into_iter().map(|v| v.expect("every job ran")).collect()
}

pub fn gen_data(mut ctx: Context, args: &GenArgs) -> Result<(), CliError> {
    let d = &mut ctx.cfg.data;
    if args.test_profile {
        *d = GenSpec { effects: d.effects.clone(), text_lengths: d.text_lengths.clone(), ..GenSpec::test_profile(0) };
    }
    d.n_loans = args.n_loans.unwrap_or(d.n_loans);
    d.default_rate = args.default_rate.unwrap_or(d.default_rate);
    d.n_stations = args.n_stations.unwrap_or(d.n_stations);
    d.seed = ctx.cfg.seed;
    let ws = ctx.open()?;
    let mut stage = ws.stage("gen-data");
    let data = generate(&ctx.cfg.data).map_err(|e| CliError::Validation(e.to_string()))?;

    let mut buf = Vec::new();
    write_stations(&mut buf, &data.stations).map_err(rt)?;
    stage.write(STATIONS, &buf)?;
    let mut buf = Vec::new();
    write_weather(&mut buf, &data.weather).map_err(rt)?;
    stage.write(WEATHER, &buf)?;
    let mut buf = Vec::new();
    write_loans(&mut buf, &data.loans, &data.schema).map_err(rt)?;
    stage.write(LOANS, &buf)?;
    let mut buf = Vec::new();
    write_texts(&mut buf, &data.loans).map_err(rt)?;
    stage.write(TEXTS, &buf)?;
    stage.write(SCHEMA, &json_bytes(&data.schema))?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["loan_id", "quality", "sentiment", "di_mean", "wlr_mean", "ht_mean", "cf_mean", "probability"])
        .map_err(rt)?;
    for t in &data.truth {
        let mut rec = vec![t.loan_id.clone(), t.quality.to_string(), t.sentiment.to_string()];
        rec.extend(t.climate_means.iter().map(f64::to_string));
        rec.push(t.probability.to_string());
        w.write_record(&rec).map_err(rt)?;
    }
    stage.write(TRUTH, &w.into_inner().map_err(rt)?)?;

    let defaults = data.loans.iter().filter(|l| l.label == 1).count();
    info!("generated {} loans, {defaults} defaults, {} stations", data.loans.len(), data.stations.len());
    let details = json!({ "loans": data.loans.len(), "defaults": defaults, "stations": data.stations.len(), "intercept": data.alpha });
    stage.finish(ctx.cfg.hash(), ctx.cfg.seed, details)?;
    Ok(())
}

pub fn compute_indices(ctx: Context) -> Result<(), CliError> {
    let ws = ctx.open()?;
    let mut stage = ws.stage("compute-indices");
    let stations = read_stations(stage.read(STATIONS)?.as_slice()).map_err(|e| CliError::Validation(e.to_string()))?;
    let weather = read_weather(stage.read(WEATHER)?.as_slice()).map_err(|e| CliError::Validation(e.to_string()))?;
    let mut rows = compute_all_indices(&stations, &weather, &ctx.cfg.index).map_err(rt)?;
    if ctx.cfg.rescale {
        let scalers = rescale_rows(&mut rows).map_err(rt)?;
        let named: BTreeMap<&str, _> = FACTOR_NAMES.iter().copied().zip(scalers).collect();
        stage.write(SCALERS, &json_bytes(&named))?;
    }
    let mut buf = Vec::new();
    write_indices(&mut buf, &rows).map_err(rt)?;
    stage.write(INDICES, &buf)?;
    info!("{} station-months", rows.len());
    stage.finish(ctx.cfg.hash(), ctx.cfg.seed, json!({ "rows": rows.len(), "rescaled": ctx.cfg.rescale }))?;
    Ok(())
}

pub fn build_panels(ctx: Context) -> Result<(), CliError> {
    let ws = ctx.open()?;
    let mut stage = ws.stage("build-panels");
    let stations = read_stations(stage.read(STATIONS)?.as_slice()).map_err(|e| CliError::Validation(e.to_string()))?;
    let rows = climcredit::climate::io::read_indices(stage.read(INDICES)?.as_slice())
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let (_, loans) = read_schema_and_loans(&mut stage)?;
    let (panels, dropped) = climcredit::panel::build_panels(&loans, &stations, &rows).map_err(rt)?;
    let mut buf = Vec::new();
    write_panels(&mut buf, &panels).map_err(rt)?;
    stage.write(PANELS, &buf)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["loan_id", "reason"]).map_err(rt)?;
    for (id, e) in &dropped {
        w.write_record([id.clone(), e.to_string()]).map_err(rt)?;
    }
    stage.write(DROPPED, &w.into_inner().map_err(rt)?)?;
    info!("{} panels, {} loans dropped", panels.len(), dropped.len());
    stage.finish(ctx.cfg.hash(), ctx.cfg.seed, json!({ "panels": panels.len(), "dropped": dropped.len() }))?;
    Ok(())
}

pub fn prep_features(ctx: Context) -> Result<(), CliError> {
    let ws = ctx.open()?;
    let mut stage = ws.stage("prep-features");
    let (schema, loans) = read_schema_and_loans(&mut stage)?;
    let panels = read_panels(stage.read(PANELS)?.as_slice()).map_err(|e| CliError::Validation(e.to_string()))?;
    let with_panel: HashSet<&str> = panels.iter().map(|p| p.loan_id.as_str()).collect();
    let loans: Vec<LoanRecord> = loans.into_iter().filter(|l| with_panel.contains(l.loan_id.as_str())).collect();
    let ids: Vec<String> = loans.iter().map(|l| l.loan_id.clone()).collect();
    let labels: Vec<u8> = loans.iter().map(|l| l.label).collect();
    let plan = make_split(&ids, &labels, ctx.cfg.seed).map_err(train_err)?;
    let train_loans: Vec<LoanRecord> =
        plan.indices(&ids, Split::Train).into_iter().map(|i| loans[i].clone()).collect();
    let (pipeline, report) = FeaturePipeline::fit(&train_loans, &schema, &ctx.cfg.features).map_err(rt)?;
    stage.write(SPLIT, &json_bytes(&plan))?;
    stage.write(PIPELINE, &json_bytes(&pipeline))?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf).map_err(rt)?;
    stage.write(SELECTION, &buf)?;
    let retained = pipeline.feature_names();
    info!("{} of {} features retained", retained.len(), report.rows.len());
    let details = json!({
        "split_checksum": plan.checksum(),
        "train": plan.count(Split::Train),
        "val": plan.count(Split::Val),
        "test": plan.count(Split::Test),
        "retained": retained,
    });
    stage.finish(ctx.cfg.hash(), ctx.cfg.seed, details)?;
    Ok(())
}

/// Model inputs for every loan in the split, in loan-file order.
struct Prepared {
    data: ModelData,
    plan: SplitPlan,
    features: Vec<String>,
}

fn load_prepared(stage: &mut Stage<'_>) -> Result<Prepared, CliError> {
    let (_, mut loans) = read_schema_and_loans(stage)?;
    let texts = read_texts(stage.read(TEXTS)?.as_slice()).map_err(|e| CliError::Validation(e.to_string()))?;
    attach_texts(&mut loans, texts);
    let panels = read_panels(stage.read(PANELS)?.as_slice()).map_err(|e| CliError::Validation(e.to_string()))?;
    let plan: SplitPlan = read_json(stage, SPLIT)?;
    let pipeline: FeaturePipeline = read_json(stage, PIPELINE)?;
    let loans: Vec<LoanRecord> = loans.into_iter().filter(|l| plan.assignments.contains_key(&l.loan_id)).collect();
    if loans.len() != plan.assignments.len() {
        return Err(CliError::Validation(format!("{SPLIT} names loans missing from {LOANS}")));
    }
    let structured = pipeline.transform(&loans);
    let data = ModelData::assemble(&loans, &panels, structured).map_err(train_err)?;
    Ok(Prepared { data, plan, features: pipeline.feature_names() })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunRecord {
    seed: u64,
    checkpoint: String,
    best_epoch: usize,
    best_val_bce: f64,
    test: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainDetails {
    name: String,
    mask: ModalityMask,
    encoder: EncoderKind,
    config: ModelConfig,
    split_checksum: String,
    runs: Vec<RunRecord>,
}

fn train_stage(name: &str) -> String {
    format!("train-{name}")
}

fn trained(ws: &Workspace, name: &str) -> Result<TrainDetails, CliError> {
    let m = ws
        .manifest(&train_stage(name))
        .ok_or_else(|| CliError::Artifact(format!("no trained model named {name:?}; run train first")))?;
    serde_json::from_value(m.details.clone()).map_err(|e| CliError::Validation(format!("manifest {}: {e}", m.stage)))
}

fn load_model(stage: &mut Stage<'_>, rel: &str) -> Result<TrainedModel, CliError> {
    TrainedModel::from_json(&utf8(stage.read(rel)?, rel)?).map_err(|e| CliError::Validation(format!("{rel}: {e}")))
}

fn apply_model_overrides(base: &ModelConfig, a: &TrainArgs) -> Result<ModelConfig, CliError> {
    let mut m = base.clone();
    if let Some(e) = &a.encoder {
        m.encoder = parse_encoder(e)?;
        // switching encoder family without --num-layers picks a legal depth
        m.num_layers = match m.encoder {
            EncoderKind::Transformer => TRANSFORMER_LAYERS,
            _ if RECURRENT_LAYERS.contains(&m.num_layers) => m.num_layers,
            _ => RECURRENT_LAYERS[0],
        };
    }
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { m.$f = v; } )* };
    }
    set!(hidden_size, num_layers, heads, ff_dim, max_seq_len, text_embed_dim, min_token_count, mlp_hidden, lr,
        batch_size, max_epochs, patience, pos_weight);
    if let Some(f) = &a.climate_factors {
        m.climate_factors = parse_list(f, "climate factor", parse_factor)?;
    }
    Ok(m)
}

fn default_name(cfg: &ModelConfig) -> String {
    let mut name = if cfg.mask.structured_only() {
        cfg.mask.to_string()
    } else {
        format!("{}-{}", cfg.mask, cfg.encoder.to_string().to_ascii_lowercase())
    };
    if cfg.climate_factors.len() < 4 && cfg.mask.climate {
        let f: Vec<&str> = cfg.climate_factors.iter().map(|&i| FACTOR_NAMES[i]).collect();
        name.push('-');
        name.push_str(&f.join("-"));
    }
    name
}

pub fn train(mut ctx: Context, a: &TrainArgs) -> Result<(), CliError> {
    ctx.cfg.model = apply_model_overrides(&ctx.cfg.model, a)?;
    if let Some(s) = &a.seeds {
        ctx.cfg.seeds = parse_list(s, "seed", |p| p.parse().ok())?;
    }
    ctx.cfg.grid |= a.grid;
    ctx.cfg.jobs = a.jobs.unwrap_or(ctx.cfg.jobs);
    let masks = match &a.modality {
        Some(m) => vec![m.parse::<ModalityMask>().map_err(train_err)?],
        None if !ctx.cfg.modalities.is_empty() => ctx.cfg.modalities.clone(),
        None => vec![ctx.cfg.model.mask],
    };
    if a.name.is_some() && masks.len() > 1 {
        return Err(CliError::Validation("--name needs a single modality mask".into()));
    }
    ctx.cfg.model.mask = masks[0];
    let ws = ctx.open()?;
    for mask in masks {
        let mut cfg = ctx.cfg.clone();
        cfg.model.mask = mask;
        let name = a.name.clone().unwrap_or_else(|| default_name(&cfg.model));
        if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
            return Err(CliError::Validation(format!("invalid model name {name:?}")));
        }
        train_one(&ws, &cfg, a, &name)?;
    }
    Ok(())
}

fn train_one(ws: &Workspace, cfg: &RunConfig, a: &TrainArgs, name: &str) -> Result<(), CliError> {
    let mut stage = ws.stage(&train_stage(name));
    let prep = load_prepared(&mut stage)?;
    let embeddings = match &a.embeddings {
        Some(p) => Some(ExternalEmbeddings::read(stage.read_external(p)?.as_slice()).map_err(|e| CliError::Validation(e.to_string()))?),
        None => None,
    };
    let hybrid = a.hybrid_climate.is_some() || a.hybrid_text.is_some();
    let mut pretrained = |source: &Option<String>| -> Result<Vec<Option<TrainedModel>>, CliError> {
        let Some(src) = source else { return Ok(vec![None; cfg.seeds.len()]) };
        let details = trained(ws, src)?;
        cfg.seeds
            .iter()
            .map(|s| {
                let run = details.runs.iter().find(|r| r.seed == *s).ok_or_else(|| {
                    CliError::Validation(format!("model {src} has no run for seed {s}"))
                })?;
                load_model(&mut stage, &run.checkpoint).map(Some)
            })
            .collect()
    };
    let climate_src = pretrained(&a.hybrid_climate)?;
    let text_src = pretrained(&a.hybrid_text)?;
    let test_idx = prep.plan.indices(&prep.data.ids, Split::Test);
    let test = prep.data.subset(&test_idx);

    info!("training {name} on {} seeds", cfg.seeds.len());
    let results = pool(cfg.jobs, cfg.seeds.len(), |k| -> Result<(TrainedModel, Option<Vec<u8>>), TrainError> {
        let mc = ModelConfig { seed: cfg.seeds[k], ..cfg.model.clone() };
        if hybrid {
            let m = hybrid_freeze_train(&mc, climate_src[k].as_ref(), text_src[k].as_ref(), &prep.data, &prep.plan)?;
            return Ok((m, None));
        }
        if cfg.grid {
            let outcome = grid_search(&search_grid(&mc), &prep.data, &prep.plan)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            for e in &outcome.leaderboard {
                w.serialize(e).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
            }
            let board = w.into_inner().map_err(|e| TrainError::Checkpoint(e.to_string()))?;
            return Ok((outcome.best, Some(board)));
        }
        Ok((train_with_embeddings(&mc, &prep.data, &prep.plan, embeddings.as_ref())?, None))
    });

    let mut runs = Vec::new();
    let mut final_config = None;
    for (seed, r) in cfg.seeds.iter().zip(results) {
        let (model, board) = r.map_err(train_err)?;
        let checkpoint = format!("models/{name}/seed-{seed}.json");
        stage.write(&checkpoint, model.to_json().as_bytes())?;
        if let Some(b) = board {
            stage.write(&format!("models/{name}/grid-{seed}.csv"), &b)?;
        }
        let scores = ScoreSet::new(model.predict(&test).map_err(train_err)?, test.labels.clone()).map_err(rt)?;
        let m = all_metrics(&scores).map_err(rt)?;
        let test_metrics = ["AUC", "KS", "H"].iter().map(|s| s.to_string()).zip(m).collect();
        info!("{name} seed {seed}: test AUC {:.4}, best epoch {}", m[0], model.best_epoch);
        final_config.get_or_insert_with(|| model.config.clone());
        runs.push(RunRecord {
            seed: *seed,
            checkpoint,
            best_epoch: model.best_epoch,
            best_val_bce: model.best_val_bce,
            test: test_metrics,
        });
    }
    let config = final_config.expect("at least one seed");
    let details = TrainDetails {
        name: name.to_string(),
        mask: config.mask,
        encoder: config.encoder,
        config,
        split_checksum: prep.plan.checksum(),
        runs,
    };
    let details = serde_json::to_value(&details).expect("serializable");
    stage.finish(cfg.hash(), cfg.seed, details)?;
    Ok(())
}

fn selected_models(ws: &Workspace, list: &Option<String>) -> Result<Vec<String>, CliError> {
    let names = match list {
        Some(l) => parse_list(l, "model", |p| Some(p.to_string()))?,
        None => ws.manifests().filter_map(|m| m.stage.strip_prefix("train-").map(str::to_string)).collect(),
    };
    if names.is_empty() {
        return Err(CliError::Artifact("no trained models; run train first".into()));
    }
    Ok(names)
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRow {
    model: String,
    seed: u64,
    loan_id: String,
    label: u8,
    probability: f64,
}

pub fn evaluate(mut ctx: Context, a: &EvalArgs) -> Result<(), CliError> {
    ctx.cfg.bootstrap.resamples = a.resamples.unwrap_or(ctx.cfg.bootstrap.resamples);
    let ws = ctx.open()?;
    let names = selected_models(&ws, &a.models)?;
    let mut stage = ws.stage("evaluate");
    let prep = load_prepared(&mut stage)?;
    let test = prep.data.subset(&prep.plan.indices(&prep.data.ids, Split::Test));
    let mut preds = csv::Writer::from_writer(Vec::new());
    let mut rows = Vec::new();
    let mut skipped = BTreeMap::new();
    for name in &names {
        let details = trained(&ws, name)?;
        if details.split_checksum != prep.plan.checksum() {
            return Err(CliError::Artifact(format!(
                "model {name} was trained on split {} but {SPLIT} has checksum {}",
                details.split_checksum,
                prep.plan.checksum()
            )));
        }
        let mut runs = Vec::new();
        for run in &details.runs {
            let model = load_model(&mut stage, &run.checkpoint)?;
            let p = model.predict(&test).map_err(train_err)?;
            for (i, &prob) in p.iter().enumerate() {
                let row = PredictionRow {
                    model: name.clone(),
                    seed: run.seed,
                    loan_id: test.ids[i].clone(),
                    label: test.labels[i],
                    probability: prob,
                };
                preds.serialize(row).map_err(rt)?;
            }
            runs.push(ScoreSet::new(p, test.labels.clone()).map_err(rt)?);
        }
        let boot = bootstrap_summary(&runs, ctx.cfg.bootstrap.resamples, ctx.cfg.seed).map_err(rt)?;
        skipped.insert(name.clone(), boot.skipped);
        for s in boot.summaries {
            info!("{name} {}: {:.4} [{:.4}, {:.4}]", s.metric, s.mean, s.ci_low, s.ci_high);
            rows.push(ReportRow {
                model: name.clone(),
                modality: details.mask.to_string(),
                metric: s.metric,
                mean: s.mean,
                ci_low: s.ci_low,
                ci_high: s.ci_high,
            });
        }
    }
    stage.write(PREDICTIONS, &preds.into_inner().map_err(rt)?)?;
    let mut buf = Vec::new();
    write_report(&mut buf, &rows).map_err(rt)?;
    stage.write(REPORT, &buf)?;
    stage.finish(ctx.cfg.hash(), ctx.cfg.seed, json!({ "models": names, "skipped_resamples": skipped }))?;
    Ok(())
}

pub fn explain(mut ctx: Context, a: &ExplainArgs) -> Result<(), CliError> {
    let s = &mut ctx.cfg.shap;
    s.instances = a.instances.unwrap_or(s.instances);
    s.background = a.background.unwrap_or(s.background);
    s.budget = a.budget.unwrap_or(s.budget);
    s.top_k = a.top_k.unwrap_or(s.top_k);
    if let Some(w) = &a.window {
        let v = parse_list(w, "window bound", |p| p.parse::<f64>().ok())?;
        let [lo, hi] = v[..] else { return Err(CliError::Validation("--window takes lo,hi".into())) };
        s.window = (lo, hi);
    }
    let ws = ctx.open()?;
    let mut stage = ws.stage(&format!("explain-{}", a.model));
    let prep = load_prepared(&mut stage)?;
    let details = trained(&ws, &a.model)?;
    let run = details.runs.first().ok_or_else(|| CliError::Validation(format!("model {} has no runs", a.model)))?;
    let model = load_model(&mut stage, &run.checkpoint)?;
    let dir = format!("explain/{}", a.model);
    let test_idx = prep.plan.indices(&prep.data.ids, Split::Test);
    let shap = &ctx.cfg.shap;

    let instances: Vec<usize> = match &a.baseline {
        Some(b) => {
            let bd = trained(&ws, b)?;
            let brun = bd.runs.first().ok_or_else(|| CliError::Validation(format!("model {b} has no runs")))?;
            let base = load_model(&mut stage, &brun.checkpoint)?;
            let test = prep.data.subset(&test_idx);
            let ps = base.predict(&test).map_err(train_err)?;
            let pc = model.predict(&test).map_err(train_err)?;
            let cases = select_uncertain_cases(&test.ids, &ps, &pc, &test.labels, shap.window, shap.top_k).map_err(rt)?;
            let pos: BTreeMap<&str, usize> = test.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["loan_id", "label", "structured_probability", "combined_probability", "improvement"])
                .map_err(rt)?;
            for (id, g) in cases.loan_ids.iter().zip(&cases.improvements) {
                let i = pos[id.as_str()];
                w.write_record([id.clone(), test.labels[i].to_string(), ps[i].to_string(), pc[i].to_string(), g.to_string()])
                    .map_err(rt)?;
            }
            stage.write(&format!("{dir}/uncertain.csv"), &w.into_inner().map_err(rt)?)?;
            info!("{} uncertain cases in probability window {:?}", cases.loan_ids.len(), cases.bounds);
            cases.loan_ids.iter().map(|id| test_idx[pos[id.as_str()]]).collect()
        }
        None => test_idx.iter().copied().take(shap.instances).collect(),
    };
    if instances.is_empty() {
        return Err(CliError::Runtime("no instances to explain".into()));
    }

    let train_idx = prep.plan.indices(&prep.data.ids, Split::Train);
    let background = sample_background(&train_idx, shap.background, ctx.cfg.seed);
    let layout = FeatureLayout::new(&prep.features);
    let sc = ShapConfig { background: shap.background, budget: shap.budget, seed: ctx.cfg.seed };
    info!("explaining {} loans with background {} and budget {}", instances.len(), background.len(), sc.budget);
    let results = explain_model(&model, &layout, &prep.data, &instances, &background, &sc).map_err(rt)?;
    let attribution = factor_attribution(&layout, &results);

    let mut buf = Vec::new();
    write_shap_csv(&mut buf, &layout, &results).map_err(rt)?;
    stage.write(&format!("{dir}/shap.csv"), &buf)?;
    let mut buf = Vec::new();
    attribution.write_factors_csv(&mut buf).map_err(rt)?;
    stage.write(&format!("{dir}/factors.csv"), &buf)?;
    let mut buf = Vec::new();
    attribution.write_periods_csv(&mut buf).map_err(rt)?;
    stage.write(&format!("{dir}/periods.csv"), &buf)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["factor", "month_offset", "loan_id", "shap", "value"]).map_err(rt)?;
    for p in &attribution.periods {
        for (r, (v, x)) in results.iter().zip(&p.points) {
            w.write_record([p.factor.clone(), p.month_offset.to_string(), r.loan_id.clone(), v.to_string(), x.to_string()])
                .map_err(rt)?;
        }
    }
    stage.write(&format!("{dir}/points.csv"), &w.into_inner().map_err(rt)?)?;
    let ranking = attribution.ranking();
    info!("factor ranking: {}", ranking.join(" > "));
    let details = json!({ "model": a.model, "seed": run.seed, "instances": instances.len(), "ranking": ranking });
    stage.finish(ctx.cfg.hash(), ctx.cfg.seed, details)?;
    Ok(())
}

pub fn correlate(ctx: Context, a: &CorrelateArgs) -> Result<(), CliError> {
    let ws = ctx.open()?;
    let mut stage = ws.stage("correlate");
    let bytes = stage.read(PREDICTIONS)?;
    let mut by_model: BTreeMap<String, (u64, Vec<(String, f64)>)> = BTreeMap::new();
    let mut order = Vec::new();
    for row in csv::Reader::from_reader(bytes.as_slice()).deserialize::<PredictionRow>() {
        let row = row.map_err(|e| CliError::Validation(format!("{PREDICTIONS}: {e}")))?;
        let entry = by_model.entry(row.model.clone()).or_insert_with(|| {
            order.push(row.model.clone());
            (row.seed, Vec::new())
        });
        if entry.0 == row.seed {
            entry.1.push((row.loan_id, row.probability));
        }
    }
    let names = match &a.models {
        Some(l) => parse_list(l, "model", |p| Some(p.to_string()))?,
        None => order,
    };
    let mut vectors = Vec::new();
    for n in &names {
        let (_, v) = by_model.get(n).ok_or_else(|| CliError::Artifact(format!("{PREDICTIONS} has no model {n:?}; rerun evaluate")))?;
        let mut v = v.clone();
        v.sort_by(|x, y| x.0.cmp(&y.0));
        vectors.push(v.into_iter().map(|p| p.1).collect::<Vec<f64>>());
    }
    let matrix = spearman_matrix(&names, &vectors).map_err(|e| CliError::Validation(format!("{PREDICTIONS}: {e}")))?;
    let mut buf = Vec::new();
    matrix.write_csv(&mut buf).map_err(rt)?;
    stage.write("correlation/correlation.csv", &buf)?;

    if a.ablation {
        let prep = load_prepared(&mut stage)?;
        info!("per-factor ablation over {} seeds", ctx.cfg.seeds.len());
        let report = per_factor_ablation(
            &ctx.cfg.model,
            &prep.data,
            &prep.plan,
            &ctx.cfg.seeds,
            ctx.cfg.bootstrap.resamples,
            ctx.cfg.seed,
        )
        .map_err(rt)?;
        let mut buf = Vec::new();
        write_report(&mut buf, &report.rows).map_err(rt)?;
        stage.write("correlation/ablation_report.csv", &buf)?;
        let mut buf = Vec::new();
        report.correlations.write_csv(&mut buf).map_err(rt)?;
        stage.write("correlation/ablation_correlation.csv", &buf)?;
    }
    let undefined: Vec<(String, String)> =
        matrix.undefined.iter().map(|&(i, j)| (names[i].clone(), names[j].clone())).collect();
    stage.finish(ctx.cfg.hash(), ctx.cfg.seed, json!({ "models": names, "undefined_pairs": undefined }))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use clap::Parser;

    use super::*;

    #[test]
    fn pool_keeps_order() {
        assert_eq!(pool(3, 10, |i| i * i), (0..10).map(|i| i * i).collect::<Vec<_>>());
        assert!(pool(2, 0, |i| i).is_empty());
    }

    #[test]
    fn factor_and_encoder_names_parse() {
        assert_eq!(parse_list("wlr, 0,CF", "f", parse_factor).unwrap(), vec![1, 0, 3]);
        assert!(parse_list("rain", "f", parse_factor).is_err());
        assert_eq!(parse_encoder("transformer").unwrap(), EncoderKind::Transformer);
        assert!(matches!(parse_encoder("cnn"), Err(CliError::Validation(_))));
    }

    #[test]
    fn encoder_switch_picks_a_legal_depth() {
        #[derive(Parser)]
        struct Wrap {
            #[command(flatten)]
            a: TrainArgs,
        }
        let args = |enc: &str, layers: Option<usize>| {
            let mut w = Wrap::parse_from(["train", "--encoder", enc]);
            w.a.num_layers = layers;
            w.a
        };
        let base = ModelConfig::default();
        assert_eq!(apply_model_overrides(&base, &args("transformer", None)).unwrap().num_layers, 3);
        let t = ModelConfig { encoder: EncoderKind::Transformer, num_layers: 3, ..base.clone() };
        assert_eq!(apply_model_overrides(&t, &args("gru", None)).unwrap().num_layers, 3);
        let shallow = ModelConfig { num_layers: 1, ..base.clone() };
        assert_eq!(apply_model_overrides(&shallow, &args("lstm", None)).unwrap().num_layers, 2);
        assert_eq!(apply_model_overrides(&base, &args("gru", Some(3))).unwrap().num_layers, 3);
        assert!(apply_model_overrides(&base, &args("transformer", None)).unwrap().validate().is_ok());
    }

    #[test]
    fn default_names_follow_mask_and_encoder() {
        let mut cfg = ModelConfig { mask: "S+C".parse().unwrap(), encoder: EncoderKind::Transformer, ..ModelConfig::default() };
        assert_eq!(default_name(&cfg), "S+C-transformer");
        cfg.climate_factors = vec![1];
        assert_eq!(default_name(&cfg), "S+C-transformer-wlr");
        cfg.mask = "S".parse().unwrap();
        assert_eq!(default_name(&cfg), "S");
    }
}
