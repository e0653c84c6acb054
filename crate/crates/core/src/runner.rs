//! Experiment orchestration: one JSON [`RunConfig`] drives corpus generation,
//! template building, pretraining, evaluation and the sweeps built on them.
//!
//! Artifacts live under an output root (`$SPAN_OUTPUT_ROOT`, default `runs`):
//!
//! ```text
//! <root>/corpus-<hash>/       generated corpus (keyed by corpus config)
//! <root>/templates/<kind>-<hash>/
//! <root>/run-<hash>/          checkpoint, loss log, metric CSVs, manifest
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::{make_view_set, transform_knowledge_map, AugmentParams, Regime};
use crate::distill::{epoch_log, epoch_row, train_step, DistillConfig, SpanHook, StepRecord, TrainSample, TrainState};
use crate::error::{bail, Error, Result};
use crate::eval::{self, ApResult, HeadPolicy, LowDataTable, ProbeConfig, ProbeResult};
use crate::io::{self, Container, CsvTable};
use crate::seed;
use crate::span_reg::{self, HeadAssignment, RegularizerConfig, SweepResult, TemplateKind, ViewMaps};
use crate::synthdata::{self, Corpus, CorpusConfig, Split, COMPONENT_NAMES};
use crate::templates::{self, TemplateConfig, TemplateSet};
use crate::vit::{AttentionMapStack, ParameterSet, ViTConfig};

pub const OUTPUT_ROOT_VAR: &str = "SPAN_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    pub regime: Regime,
    /// Regime defaults when absent.
    pub params: Option<AugmentParams>,
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self { regime: Regime::DomainSpecific, params: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpanSection {
    /// No template kind means plain DINO.
    pub kind: Option<TemplateKind>,
    pub regularizer: RegularizerConfig,
    /// Head for each component, in component order.
    pub heads: Vec<usize>,
}

impl Default for SpanSection {
    fn default() -> Self {
        Self { kind: None, regularizer: RegularizerConfig::default(), heads: vec![0, 1, 2] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// `None` picks `assigned` for regularised runs and `max_over_heads` otherwise.
    pub policy: Option<HeadPolicy>,
    pub probe_resolution: usize,
    pub probe: ProbeConfig,
    pub low_data_sizes: Vec<usize>,
    pub low_data_seeds: Vec<u64>,
    /// Values combined pairwise for the lambda sweep.
    pub lambda_values: Vec<f64>,
    /// Share of pixels whose attention mass defines concentration.
    pub top_fraction: f64,
    pub export_count: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            policy: None,
            probe_resolution: 64,
            probe: ProbeConfig::default(),
            low_data_sizes: vec![4, 8, 16, 32],
            low_data_seeds: (0..5).collect(),
            lambda_values: span_reg::log_grid(1e-6, 1e-2, 3),
            top_fraction: 0.05,
            export_count: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub vit: ViTConfig,
    pub augment: AugmentSection,
    pub distill: DistillConfig,
    pub span: SpanSection,
    pub templates: TemplateConfig,
    pub eval: EvalConfig,
    pub seed: u64,
    /// Run directory; `<root>/run-<hash>` when absent.
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            vit: ViTConfig::default(),
            augment: AugmentSection::default(),
            distill: DistillConfig::default(),
            span: SpanSection::default(),
            templates: TemplateConfig::default(),
            eval: EvalConfig::default(),
            seed: 0,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn dino(regime: Regime) -> Self {
        Self { augment: AugmentSection { regime, params: None }, ..Self::default() }
    }

    pub fn span(kind: TemplateKind) -> Self {
        Self { span: SpanSection { kind: Some(kind), ..SpanSection::default() }, ..Self::default() }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?)
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.distill.validate()?;
        self.augment_params().validate()?;
        self.span.regularizer.validate()?;
        if self.span.kind.is_some() {
            self.assignment()?;
        }
        if self.corpus.size != self.vit.image_size {
            bail!(Config, "corpus size {} differs from model input size {}", self.corpus.size, self.vit.image_size);
        }
        if self.augment_params().global_size % self.vit.patch_size != 0 {
            bail!(Config, "global view size must be a multiple of the patch size");
        }
        Ok(())
    }

    /// Applies one `a.b.c=value` override. The value is parsed as JSON and
    /// falls back to a plain string.
    pub fn with_override(&self, assignment: &str) -> Result<Self> {
        let (path, raw) = assignment.split_once('=').ok_or_else(|| Error::Config(format!("override {assignment} lacks '='")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(self)?;
        let keys: Vec<&str> = path.split('.').collect();
        let mut node = &mut doc;
        for (i, k) in keys.iter().enumerate() {
            if node.is_null() {
                *node = Value::Object(Default::default());
            }
            let obj = node.as_object_mut().ok_or_else(|| Error::Config(format!("{} is not a section", keys[..i].join("."))))?;
            if i + 1 == keys.len() {
                obj.insert(k.to_string(), value.clone());
                break;
            }
            node = obj.entry(k.to_string()).or_insert(Value::Null);
        }
        let c: Self = serde_json::from_value(doc).map_err(|e| Error::Config(format!("override {assignment}: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn augment_params(&self) -> AugmentParams {
        self.augment.params.clone().unwrap_or_else(|| AugmentParams::for_regime(self.augment.regime))
    }

    pub fn assignment(&self) -> Result<HeadAssignment> {
        HeadAssignment::from_heads(&self.span.heads, self.vit.n_heads)
    }

    pub fn is_regularised(&self) -> bool {
        self.span.kind.is_some() && !self.span.regularizer.is_inactive()
    }

    pub fn policy(&self) -> HeadPolicy {
        self.eval.policy.unwrap_or(if self.span.kind.is_some() { HeadPolicy::Assigned } else { HeadPolicy::MaxOverHeads })
    }

    /// Digest of everything except the output location.
    pub fn hash(&self) -> Result<String> {
        io::hash_json(&Self { output_dir: None, ..self.clone() })
    }

    pub fn run_dir(&self) -> Result<PathBuf> {
        match &self.output_dir {
            Some(d) => Ok(d.clone()),
            None => Ok(output_root().join(format!("run-{}", self.hash()?))),
        }
    }

    pub fn corpus_dir(&self) -> Result<PathBuf> {
        Ok(output_root().join(format!("corpus-{}", io::hash_json(&self.corpus)?)))
    }
}

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

/// The five pretraining setups compared in the interpretability table.
pub fn experiment_bundle() -> Vec<(&'static str, RunConfig)> {
    vec![
        ("dino_domain_agnostic", RunConfig::dino(Regime::DomainAgnostic)),
        ("dino_domain_specific", RunConfig::dino(Regime::DomainSpecific)),
        ("span_heuristic", RunConfig::span(TemplateKind::SpatialHeuristic)),
        ("span_global", RunConfig::span(TemplateKind::GlobalAverage)),
        ("span_deformable", RunConfig::span(TemplateKind::Deformable)),
    ]
}

/// Exclusive ownership of a run directory for the lifetime of the value.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!(Config, "run directory {} is locked by another run", dir.display())
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub updated_unix: u64,
    /// File name to SHA-256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("manifest.json");
        if !p.exists() {
            return Ok(Self::default());
        }
        Ok(serde_json::from_slice(&fs::read(p)?)?)
    }

    /// Merges metrics and re-hashes the named artifacts, then saves.
    pub fn record(dir: &Path, config_hash: &str, artifacts: &[&str], metrics: &[(String, f64)]) -> Result<Self> {
        use sha2::{Digest, Sha256};
        let mut m = Self::load(dir)?;
        m.config_hash = config_hash.to_string();
        m.updated_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        for a in artifacts {
            let bytes = fs::read(dir.join(a))?;
            m.artifacts.insert(a.to_string(), hex::encode(Sha256::digest(&bytes)));
        }
        for (k, v) in metrics {
            m.metrics.insert(k.clone(), *v);
        }
        io::write_atomic(&dir.join("manifest.json"), serde_json::to_string_pretty(&m)?.as_bytes())?;
        Ok(m)
    }
}

fn train_sample(cfg: &RunConfig, params: &AugmentParams, s: &synthdata::SynthSample, epoch: u64, templates: Option<&TemplateSet>) -> Result<TrainSample> {
    let view_seed = seed::derive(cfg.seed, &[0xA06, epoch, s.sample_id]);
    let views = make_view_set(&s.image_f32(), s.width, s.height, view_seed, params, cfg.augment.regime)?;
    let global_maps = match templates {
        Some(set) if cfg.is_regularised() => {
            let t = set.for_sample(s.sample_id).ok_or_else(|| Error::Missing(format!("no template for sample {}", s.sample_id)))?;
            Some(
                views
                    .global_views
                    .iter()
                    .map(|v| ViewMaps { side: v.size(), maps: t.maps().map(|m| transform_knowledge_map(m, &v.recipe)).collect() })
                    .collect(),
            )
        }
        _ => None,
    };
    Ok(TrainSample { views, global_maps })
}

pub const CHECKPOINT_STEM: &str = "checkpoint";

/// Self-distillation over the pretraining split, regularised when the config
/// names a template kind. With `run_dir` the state is checkpointed after
/// every epoch and an existing checkpoint is resumed.
pub fn pretrain(cfg: &RunConfig, corpus: &Corpus, templates: Option<&TemplateSet>, run_dir: Option<&Path>, mut on_epoch: impl FnMut(u64, &[StepRecord])) -> Result<TrainState<f32>> {
    cfg.validate()?;
    let hook = if cfg.is_regularised() {
        if templates.is_none() {
            bail!(Missing, "regularised pretraining needs a template set");
        }
        Some(SpanHook { config: cfg.span.regularizer, assignment: cfg.assignment()? })
    } else {
        None
    };
    let params = cfg.augment_params();
    let stem = run_dir.map(|d| d.join(CHECKPOINT_STEM));
    let mut state = match &stem {
        Some(s) if Container::paths(s).0.exists() => TrainState::from_container(&Container::load(s)?)?,
        _ => TrainState::new(&cfg.vit, &cfg.distill, cfg.seed)?,
    };
    let ids = corpus.ids(Split::Pretrain);
    if ids.is_empty() {
        bail!(Missing, "corpus has no pretraining samples");
    }
    let hash = cfg.hash()?;
    for epoch in state.epoch..cfg.distill.epochs as u64 {
        let mut order = ids.clone();
        order.shuffle(&mut seed::rng(cfg.seed, &[0xE90C, epoch]));
        let start = state.history.len();
        for chunk in order.chunks(cfg.distill.batch_size) {
            let batch = chunk.iter().map(|&i| train_sample(cfg, &params, &corpus.samples[i], epoch, templates)).collect::<Result<Vec<_>>>()?;
            train_step(&mut state, &batch, hook.as_ref())?;
        }
        state.epoch = epoch + 1;
        if let (Some(dir), Some(stem)) = (run_dir, &stem) {
            state.to_container()?.save(stem)?;
            loss_table(&state, &hash, ids.len().div_ceil(cfg.distill.batch_size), cfg.distill.ema_momentum).save(&dir.join("loss.csv"))?;
        }
        on_epoch(epoch, &state.history[start..]);
    }
    Ok(state)
}

fn loss_table(state: &TrainState<f32>, hash: &str, steps_per_epoch: usize, ema: f64) -> CsvTable {
    let mut t = epoch_log(hash);
    for (e, recs) in state.history.chunks(steps_per_epoch).enumerate() {
        epoch_row(&mut t, e as u64 + 1, ((e + 1) * steps_per_epoch) as u64, recs, ema);
    }
    t
}

pub fn load_state(stem: &Path) -> Result<TrainState<f32>> {
    TrainState::from_container(&Container::load(stem)?)
}

/// Attention scores of the teacher on the probe test split.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionReport {
    pub result: ApResult,
    /// Max-over-heads score of the same maps, for comparison with baselines.
    pub max_over_heads: ApResult,
    /// Mean share of attention mass in the top pixels of the scored heads.
    pub concentration: f64,
}

pub fn evaluate_attention(cfg: &RunConfig, model: &ParameterSet<f32>, corpus: &Corpus, split: Split) -> Result<AttentionReport> {
    let samples = corpus.split(split);
    if samples.is_empty() {
        bail!(Missing, "split {} is empty", split.as_str());
    }
    let stacks = eval::attention_stacks(model, &samples, cfg.eval.probe_resolution)?;
    let assignment = cfg.assignment().ok();
    let policy = cfg.policy();
    let result = eval::score_stacks(&stacks, &samples, assignment.as_ref(), policy)?;
    let max_over_heads = if policy == HeadPolicy::MaxOverHeads { result.clone() } else { eval::score_stacks(&stacks, &samples, None, HeadPolicy::MaxOverHeads)? };
    let concentration = attention_concentration(&stacks, &result.heads, cfg.eval.top_fraction);
    Ok(AttentionReport { result, max_over_heads, concentration })
}

/// Share of a map's total mass held by its top `fraction` of pixels,
/// averaged over images and the given heads.
pub fn attention_concentration(stacks: &[AttentionMapStack], heads: &[Vec<usize>], fraction: f64) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (s, hs) in stacks.iter().zip(heads) {
        for &h in hs {
            let mut v = s.head(h).to_vec();
            v.sort_by(|a, b| b.total_cmp(a));
            let k = ((fraction * v.len() as f64).ceil() as usize).clamp(1, v.len());
            let sum: f64 = v.iter().sum();
            if sum > 0.0 {
                total += v[..k].iter().sum::<f64>() / sum;
                n += 1;
            }
        }
    }
    total / n.max(1) as f64
}

fn split_features(model: &ParameterSet<f32>, corpus: &Corpus, split: Split) -> Result<(Vec<Vec<f64>>, Vec<u8>)> {
    let samples = corpus.split(split);
    Ok((eval::extract_features(model, &samples)?, samples.iter().map(|s| s.label).collect()))
}

/// Linear probe on teacher features: probe-train split to probe-test split.
pub fn evaluate_probe(cfg: &RunConfig, model: &ParameterSet<f32>, corpus: &Corpus) -> Result<ProbeResult> {
    let (x, y) = split_features(model, corpus, Split::ProbeTrain)?;
    let (xt, yt) = split_features(model, corpus, Split::ProbeTest)?;
    let mut r = eval::linear_probe(&x, &y, &xt, &yt, &cfg.eval.probe)?;
    r.feature_source = format!("teacher:cls:layer{}", cfg.vit.n_layers - 1);
    Ok(r)
}

pub fn evaluate_low_data(cfg: &RunConfig, model: &ParameterSet<f32>, corpus: &Corpus) -> Result<LowDataTable> {
    let (x, y) = split_features(model, corpus, Split::ProbeTrain)?;
    let (xt, yt) = split_features(model, corpus, Split::ProbeTest)?;
    eval::low_data_sweep(&x, &y, &xt, &yt, &cfg.eval.low_data_sizes, &cfg.eval.low_data_seeds, &cfg.eval.probe)
}

/// Loads the corpus from its directory or generates and saves it there.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<(PathBuf, Corpus)> {
    let dir = cfg.corpus_dir()?;
    if dir.join("manifest.tsv").exists() {
        return Ok((dir.clone(), synthdata::load_corpus(&dir)?));
    }
    let corpus = synthdata::generate_corpus(&cfg.corpus)?;
    synthdata::save_corpus(&corpus, &dir)?;
    Ok((dir, corpus))
}

pub fn cmd_build_templates(cfg: &RunConfig) -> Result<(PathBuf, TemplateSet)> {
    let kind = cfg.span.kind.ok_or_else(|| Error::Config("span.kind is not set".into()))?;
    let (_, corpus) = cmd_gen_data(cfg)?;
    let root = output_root().join("templates");
    let set = templates::build_template_set(kind, &corpus, &cfg.templates, Some(&root))?;
    Ok((templates::cache_dir(&root, kind, &corpus, &cfg.templates)?, set))
}

/// Pretrains into the run directory and returns it.
pub fn cmd_pretrain(cfg: &RunConfig, on_epoch: impl FnMut(u64, &[StepRecord])) -> Result<PathBuf> {
    let dir = cfg.run_dir()?;
    let _lock = RunLock::acquire(&dir)?;
    let (_, corpus) = cmd_gen_data(cfg)?;
    let set = if cfg.span.kind.is_some() { Some(cmd_build_templates(cfg)?.1) } else { None };
    io::write_atomic(&dir.join("config.json"), serde_json::to_string_pretty(cfg)?.as_bytes())?;
    let state = pretrain(cfg, &corpus, set.as_ref(), Some(&dir), on_epoch)?;
    let last = state.history.last().map_or(f64::NAN, |r| r.total);
    RunManifest::record(&dir, &cfg.hash()?, &["config.json", "loss.csv", "checkpoint.json", "checkpoint.bin"], &[("final_total_loss".into(), last)])?;
    Ok(dir)
}

fn checkpoint_or_default(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(PathBuf, TrainState<f32>)> {
    let dir = cfg.run_dir()?;
    let stem = checkpoint.map_or_else(|| dir.join(CHECKPOINT_STEM), |p| p.with_extension(""));
    Ok((dir, load_state(&stem)?))
}

pub fn attention_csv(report: &AttentionReport, hash: &str) -> CsvTable {
    let mut t = CsvTable::new(hash, &["component", "policy", "ap", "pointing_game"]);
    for (res, name) in [(&report.result, report.result.policy.as_str()), (&report.max_over_heads, "max_over_heads")] {
        let aps = res.component_ap();
        for (c, ap) in aps.iter().enumerate() {
            t.row([COMPONENT_NAMES[c].to_string(), name.to_string(), format!("{ap:.6}"), format!("{:.6}", res.pointing[c])]);
        }
        t.row(["mean".to_string(), name.to_string(), format!("{:.6}", res.map()), format!("{:.6}", res.pointing.iter().sum::<f64>() / res.pointing.len() as f64)]);
    }
    t
}

/// Scores attention on the probe test split and exports a few maps.
pub fn cmd_eval_attn(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<AttentionReport> {
    let (dir, state) = checkpoint_or_default(cfg, checkpoint)?;
    let (_, corpus) = cmd_gen_data(cfg)?;
    let report = evaluate_attention(cfg, &state.pair.teacher, &corpus, Split::ProbeTest)?;
    let hash = cfg.hash()?;
    attention_csv(&report, &hash).save(&dir.join("attention.csv"))?;
    report.result.to_csv(&hash, &COMPONENT_NAMES).save(&dir.join("attention_per_image.csv"))?;
    cmd_export_maps_with(cfg, &state, &corpus, &dir.join("maps"))?;
    RunManifest::record(
        &dir,
        &hash,
        &["attention.csv", "attention_per_image.csv"],
        &[
            ("map".into(), report.result.map()),
            ("map_max_over_heads".into(), report.max_over_heads.map()),
            ("concentration".into(), report.concentration),
        ],
    )?;
    Ok(report)
}

pub fn cmd_probe(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<ProbeResult> {
    let (dir, state) = checkpoint_or_default(cfg, checkpoint)?;
    let (_, corpus) = cmd_gen_data(cfg)?;
    let r = evaluate_probe(cfg, &state.pair.teacher, &corpus)?;
    let hash = cfg.hash()?;
    let mut t = CsvTable::new(&hash, &["class", "auc", "n_train", "seed", "feature_source"]);
    for (c, a) in r.per_class_auc.iter().enumerate() {
        t.row([c.to_string(), format!("{a:.6}"), r.n_train.to_string(), r.seed.to_string(), r.feature_source.clone()]);
    }
    t.row(["mean".to_string(), format!("{:.6}", r.mean_auc), r.n_train.to_string(), r.seed.to_string(), r.feature_source.clone()]);
    t.save(&dir.join("probe.csv"))?;
    RunManifest::record(&dir, &hash, &["probe.csv"], &[("probe_auc".into(), r.mean_auc)])?;
    Ok(r)
}

pub fn cmd_low_data(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<LowDataTable> {
    let (dir, state) = checkpoint_or_default(cfg, checkpoint)?;
    let (_, corpus) = cmd_gen_data(cfg)?;
    let table = evaluate_low_data(cfg, &state.pair.teacher, &corpus)?;
    let hash = cfg.hash()?;
    table.to_csv(&hash, cfg.span.kind.map_or("dino", |k| k.as_str())).save(&dir.join("low_data.csv"))?;
    let metrics: Vec<(String, f64)> = table.summary().iter().map(|(s, m, _)| (format!("low_data_auc_{s}"), *m)).collect();
    RunManifest::record(&dir, &hash, &["low_data.csv"], &metrics)?;
    Ok(table)
}

/// Trains one model per lambda pair and scores assigned-head mAP on the
/// probe training split, which serves as validation data.
pub fn sweep_lambda(cfg: &RunConfig, corpus: &Corpus, set: &TemplateSet) -> Result<SweepResult> {
    let grid = span_reg::lambda_pairs(&cfg.eval.lambda_values);
    span_reg::lambda_sweep(
        &grid,
        |li, le| {
            let mut c = cfg.clone();
            c.span.regularizer.lambda_incl = li;
            c.span.regularizer.lambda_excl = le;
            pretrain(&c, corpus, Some(set), None, |_, _| {})
        },
        |state| Ok(evaluate_attention(cfg, &state.pair.teacher, corpus, Split::ProbeTrain)?.result.component_ap()),
    )
}

pub fn cmd_sweep_lambda(cfg: &RunConfig) -> Result<SweepResult> {
    if cfg.span.kind.is_none() {
        bail!(Config, "lambda sweep needs span.kind");
    }
    let dir = cfg.run_dir()?;
    let _lock = RunLock::acquire(&dir)?;
    let (_, corpus) = cmd_gen_data(cfg)?;
    let (_, set) = cmd_build_templates(cfg)?;
    let r = sweep_lambda(cfg, &corpus, &set)?;
    let hash = cfg.hash()?;
    r.to_csv(&hash, &COMPONENT_NAMES).save(&dir.join("sweep_lambda.csv"))?;
    io::write_atomic(&dir.join("best_lambda.json"), serde_json::to_string_pretty(&serde_json::json!({"lambda_incl": r.best.0, "lambda_excl": r.best.1}))?.as_bytes())?;
    RunManifest::record(&dir, &hash, &["sweep_lambda.csv", "best_lambda.json"], &[("best_lambda_incl".into(), r.best.0), ("best_lambda_excl".into(), r.best.1)])?;
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub lambda_incl: f64,
    pub lambda_excl: f64,
    pub map_assigned: f64,
    pub map_max_over_heads: f64,
    pub concentration: f64,
}

/// Both terms, inclusion only and exclusion only, from the same config.
pub fn ablate_collapse(cfg: &RunConfig, corpus: &Corpus, set: &TemplateSet) -> Result<Vec<AblationRow>> {
    let r = cfg.span.regularizer;
    let variants = [("both", r.lambda_incl, r.lambda_excl), ("inclusion_only", r.lambda_incl, 0.0), ("exclusion_only", 0.0, r.lambda_excl)];
    let mut rows = Vec::with_capacity(3);
    for (name, li, le) in variants {
        let mut c = cfg.clone();
        c.span.regularizer.lambda_incl = li;
        c.span.regularizer.lambda_excl = le;
        c.eval.policy = Some(HeadPolicy::Assigned);
        let state = pretrain(&c, corpus, Some(set), None, |_, _| {})?;
        let rep = evaluate_attention(&c, &state.pair.teacher, corpus, Split::ProbeTest)?;
        rows.push(AblationRow {
            variant: name.into(),
            lambda_incl: li,
            lambda_excl: le,
            map_assigned: rep.result.map(),
            map_max_over_heads: rep.max_over_heads.map(),
            concentration: rep.concentration,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow], hash: &str) -> CsvTable {
    let mut t = CsvTable::new(hash, &["variant", "lambda_incl", "lambda_excl", "map_assigned", "map_max_over_heads", "top_mass_fraction"]);
    for r in rows {
        t.row([r.variant.clone(), format!("{:e}", r.lambda_incl), format!("{:e}", r.lambda_excl), format!("{:.6}", r.map_assigned), format!("{:.6}", r.map_max_over_heads), format!("{:.6}", r.concentration)]);
    }
    t
}

pub fn cmd_ablate_collapse(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    if cfg.span.kind.is_none() {
        bail!(Config, "collapse ablation needs span.kind");
    }
    let dir = cfg.run_dir()?;
    let _lock = RunLock::acquire(&dir)?;
    let (_, corpus) = cmd_gen_data(cfg)?;
    let (_, set) = cmd_build_templates(cfg)?;
    let rows = ablate_collapse(cfg, &corpus, &set)?;
    let hash = cfg.hash()?;
    ablation_csv(&rows, &hash).save(&dir.join("ablation_collapse.csv"))?;
    let metrics: Vec<(String, f64)> = rows.iter().map(|r| (format!("ablation_{}_map", r.variant), r.map_assigned)).collect();
    RunManifest::record(&dir, &hash, &["ablation_collapse.csv"], &metrics)?;
    Ok(rows)
}

fn cmd_export_maps_with(cfg: &RunConfig, state: &TrainState<f32>, corpus: &Corpus, out: &Path) -> Result<usize> {
    let samples: Vec<_> = corpus.split(Split::ProbeTest).into_iter().take(cfg.eval.export_count).collect();
    let stacks = eval::attention_stacks(&state.pair.teacher, &samples, cfg.eval.probe_resolution)?;
    for (s, st) in samples.iter().zip(&stacks) {
        eval::export_stack(st, out, &format!("{:05}", s.sample_id))?;
    }
    Ok(samples.len())
}

/// Writes per-head PGM attention maps for the first probe-test samples.
pub fn cmd_export_maps(cfg: &RunConfig, checkpoint: Option<&Path>, out: Option<&Path>) -> Result<PathBuf> {
    let (dir, state) = checkpoint_or_default(cfg, checkpoint)?;
    let (_, corpus) = cmd_gen_data(cfg)?;
    let out = out.map_or_else(|| dir.join("maps"), Path::to_path_buf);
    cmd_export_maps_with(cfg, &state, &corpus, &out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_unknown_keys() {
        let c = RunConfig::default().with_override("distill.lr=0.0005").unwrap();
        assert_eq!(c.distill.lr, 5e-4);
        let c = c.with_override("span.kind=deformable").unwrap();
        assert_eq!(c.span.kind, Some(TemplateKind::Deformable));
        let c = c.with_override("augment.regime=domain_agnostic").unwrap();
        assert_eq!(c.augment.regime, Regime::DomainAgnostic);
        assert!(c.with_override("distill.learning_rate=1").is_err());
        assert!(RunConfig::from_json(r#"{"seed": 3, "bogus": 1}"#).is_err());
        assert_eq!(RunConfig::from_json(r#"{"seed": 3}"#).unwrap().seed, 3);
        assert!(c.with_override("span.heads=[0,0,1]").is_err());
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = RunConfig::default();
        let b = RunConfig { output_dir: Some("elsewhere".into()), ..a.clone() };
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        assert_ne!(a.hash().unwrap(), a.with_override("seed=1").unwrap().hash().unwrap());
        let roundtrip = RunConfig::from_json(&serde_json::to_string(&a).unwrap()).unwrap();
        assert_eq!(roundtrip, a);
    }

    #[test]
    fn lock_is_exclusive() {
        let d = tempfile::tempdir().unwrap();
        let l = RunLock::acquire(d.path()).unwrap();
        assert!(RunLock::acquire(d.path()).is_err());
        drop(l);
        assert!(RunLock::acquire(d.path()).is_ok());
    }

    #[test]
    fn bundle_has_five_rows() {
        let b = experiment_bundle();
        assert_eq!(b.len(), 5);
        assert!(b.iter().all(|(_, c)| c.validate().is_ok()));
    }

    #[test]
    fn concentration_of_uniform_and_peaked_maps() {
        let flat = AttentionMapStack::from_patch_values(2, vec![0.25; 4], vec![0.0], 10, 10).unwrap();
        assert!((attention_concentration(&[flat], &[vec![0]], 0.05) - 0.05).abs() < 1e-12);
        let peak = AttentionMapStack::from_patch_values(2, vec![1.0, 0.0, 0.0, 0.0], vec![0.0], 10, 10).unwrap();
        assert!((attention_concentration(&[peak], &[vec![0]], 0.05) - 0.2).abs() < 1e-12);
    }
}
