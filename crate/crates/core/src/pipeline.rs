//! Stage orchestration: layered run configuration, per-stage config hashes,
//! resumable stage runs and run manifests.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chaincomp::{self, PriorTemplateSet};
use crate::difficulty::{self, DifficultyWeights, Lexicon};
use crate::diffmask::perceptual::{
    ExternalBackend, GuardedBackend, OnFailure, PerceptualBackend, ProxyBackend,
};
use crate::diffmask::{self, RoutingConfig};
use crate::error::{Error, Result};
use crate::ingest::{self, AdapterConfig, HttpFetcher, IngestOutcome};
use crate::records::{
    read_records, write_records, CategoryRecord, DifficultyRecord, EditTriplet, Layout,
    MaskArtifact, ScorerVersion, Signal, Stage,
};
use crate::taxonomy::{CategoryRuleSet, Classifier, LabelMap};

pub const OUTPUT_ROOT_ENV: &str = "EDITFORGE_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Synthetic,
    PicoBanana,
    Magicbrush,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceConfig {
    pub kind: SourceKind,
    /// Synthetic dataset directory, Pico-Banana manifest, or MagicBrush root.
    pub path: PathBuf,
    /// Root that Pico-Banana manifest paths are relative to; defaults to the
    /// manifest's directory.
    pub dataset_root: Option<PathBuf>,
    pub split: String,
    pub single_turn_only: bool,
    pub download_missing: bool,
    pub cache_dir: Option<PathBuf>,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            kind: SourceKind::Synthetic,
            path: PathBuf::new(),
            dataset_root: None,
            split: "dev".into(),
            single_turn_only: false,
            download_missing: false,
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Proxy,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptualConfig {
    pub backend: BackendKind,
    pub command: Vec<String>,
    pub on_failure: OnFailure,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Proxy,
            command: Vec::new(),
            on_failure: OnFailure::Fail,
        }
    }
}

impl PerceptualConfig {
    fn build(&self) -> Result<Box<dyn PerceptualBackend>> {
        Ok(match self.backend {
            BackendKind::Proxy => Box::new(ProxyBackend),
            BackendKind::External => Box::new(GuardedBackend::new(
                ExternalBackend::new(self.command.clone())?,
                self.on_failure,
            )),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DifficultyConfig {
    pub scorer: ScorerVersion,
    /// Overrides the default weights of the chosen scorer.
    pub weights: Option<BTreeMap<String, f64>>,
    /// TOML weights file; inline `weights` still take precedence.
    pub weights_file: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
}

impl Default for DifficultyConfig {
    fn default() -> Self {
        Self {
            scorer: ScorerVersion::V2,
            weights: None,
            weights_file: None,
            lexicon: None,
        }
    }
}

impl DifficultyConfig {
    pub fn weights(&self) -> Result<DifficultyWeights> {
        let mut w = match &self.weights_file {
            Some(path) => {
                let w = DifficultyWeights::load(path)?;
                if w.version != self.scorer {
                    return Err(Error::Config(format!(
                        "weights file {} is for {}, scorer is {}",
                        path.display(),
                        w.version,
                        self.scorer
                    )));
                }
                w
            }
            None => DifficultyWeights::default_for(self.scorer),
        };
        if let Some(custom) = &self.weights {
            w.weights = custom.clone();
        }
        w.validate()?;
        Ok(w)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CategoryConfig {
    pub label_map: Option<PathBuf>,
    pub rules: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainConfig {
    pub templates: Option<PathBuf>,
}

/// Full run configuration. Everything except `workers` and `output_root`
/// feeds the stage config hashes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Name used for the stage files; derived from the source when absent.
    pub dataset: Option<String>,
    pub output_root: Option<PathBuf>,
    pub workers: usize,
    pub source: SourceConfig,
    pub mask: RoutingConfig,
    pub perceptual: PerceptualConfig,
    pub difficulty: DifficultyConfig,
    pub category: CategoryConfig,
    pub chain: ChainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            output_root: None,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            source: SourceConfig::default(),
            mask: RoutingConfig::default(),
            perceptual: PerceptualConfig::default(),
            difficulty: DifficultyConfig::default(),
            category: CategoryConfig::default(),
            chain: ChainConfig::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

fn parse_override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `a.b.c=value` to a TOML table. Values are parsed as TOML when
/// possible (numbers, booleans, arrays) and taken as strings otherwise.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_err(format!("override {spec:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("bad override key {key:?}")));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("override {key:?}: {part} is not a table")))?;
    }
    node.insert(
        parts[parts.len() - 1].to_string(),
        parse_override_value(raw.trim()),
    );
    Ok(())
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Defaults, then the optional TOML file, then dotted overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::new();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let parsed: toml::Table = toml::from_str(&text)
                .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            merge(&mut table, parsed);
        }
        for spec in overrides {
            apply_override(&mut table, spec)?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(config_err("workers must be at least 1"));
        }
        self.mask.validate()?;
        self.difficulty.weights()?;
        if self.perceptual.backend == BackendKind::External && self.perceptual.command.is_empty() {
            return Err(config_err(
                "perceptual.backend = external needs perceptual.command",
            ));
        }
        Ok(())
    }

    pub fn dataset_name(&self) -> String {
        self.dataset
            .clone()
            .unwrap_or_else(|| match self.source.kind {
                SourceKind::Synthetic => "synthetic".into(),
                SourceKind::PicoBanana => "pico_banana".into(),
                SourceKind::Magicbrush => format!("magicbrush_{}", self.source.split),
            })
    }

    /// Explicit root, else the environment variable, else the config value.
    pub fn resolve_output_root(&self, explicit: Option<&Path>) -> Result<PathBuf> {
        if let Some(p) = explicit {
            return Ok(p.to_path_buf());
        }
        if let Some(p) = std::env::var_os(OUTPUT_ROOT_ENV).filter(|v| !v.is_empty()) {
            return Ok(PathBuf::from(p));
        }
        self.output_root.clone().ok_or_else(|| {
            config_err(format!(
                "no output root (flag, {OUTPUT_ROOT_ENV} or config)"
            ))
        })
    }
}

/// Loaded lexicon, label map, rules and templates.
pub struct Resources {
    pub lexicon: Lexicon,
    pub classifier: Classifier,
    pub templates: PriorTemplateSet,
    /// Version plus content hash of each resource, for the config hashes.
    pub fingerprints: BTreeMap<&'static str, String>,
}

fn file_fingerprint(version: &str, path: Option<&Path>) -> Result<String> {
    match path {
        None => Ok(format!("{version}:builtin")),
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            Ok(format!("{version}:{:x}", Sha256::digest(&bytes)))
        }
    }
}

impl Resources {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let lexicon = match &cfg.difficulty.lexicon {
            Some(p) => Lexicon::load(p)?,
            None => Lexicon::builtin(),
        };
        let labels = match &cfg.category.label_map {
            Some(p) => LabelMap::load(p)?,
            None => LabelMap::builtin(),
        };
        let rules = match &cfg.category.rules {
            Some(p) => CategoryRuleSet::load(p)?,
            None => CategoryRuleSet::builtin(),
        };
        let templates = match &cfg.chain.templates {
            Some(p) => PriorTemplateSet::load(p)?,
            None => PriorTemplateSet::builtin(),
        };
        let fingerprints = BTreeMap::from([
            (
                "lexicon",
                file_fingerprint(&lexicon.version, cfg.difficulty.lexicon.as_deref())?,
            ),
            (
                "label_map",
                file_fingerprint(&labels.version, cfg.category.label_map.as_deref())?,
            ),
            (
                "rules",
                file_fingerprint(&rules.version, cfg.category.rules.as_deref())?,
            ),
            (
                "templates",
                file_fingerprint(&templates.version, cfg.chain.templates.as_deref())?,
            ),
        ]);
        Ok(Self {
            lexicon,
            classifier: Classifier { labels, rules },
            templates,
            fingerprints,
        })
    }
}

pub const STAGES: [Stage; 5] = [
    Stage::Triplets,
    Stage::Masks,
    Stage::Difficulty,
    Stage::Categories,
    Stage::Chains,
];

fn upstream_of(stage: Stage) -> Option<Stage> {
    let i = STAGES.iter().position(|s| *s == stage)?;
    i.checked_sub(1).map(|j| STAGES[j])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dropped {
    pub triplet_id: String,
    pub reason: String,
}

/// Written next to each stage file. Contains nothing run-dependent (no wall
/// time, no worker count), so equal config hashes give equal manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: Stage,
    pub dataset: String,
    pub schema: String,
    pub config_hash: String,
    pub records: usize,
    pub dropped: Vec<Dropped>,
    pub notes: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct StageSummary {
    pub stage: Stage,
    pub output: PathBuf,
    pub records: usize,
    pub dropped: Vec<Dropped>,
    pub cache_hit: bool,
    pub elapsed: Duration,
}

fn sha_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn hash_json(value: &serde_json::Value) -> String {
    format!("{:x}", Sha256::digest(value.to_string().as_bytes()))
}

fn to_json(v: &impl Serialize) -> serde_json::Value {
    serde_json::to_value(v).expect("config types serialize")
}

/// Hash of every knob that can change the stage's output, plus the bytes of
/// its upstream stage file (which carries all earlier knobs transitively).
pub fn stage_config_hash(
    stage: Stage,
    cfg: &RunConfig,
    resources: &Resources,
    layout: &Layout,
) -> Result<String> {
    let dataset = cfg.dataset_name();
    let knobs = match stage {
        Stage::Triplets => {
            let mut v = to_json(&cfg.source);
            let input = match cfg.source.kind {
                SourceKind::Synthetic => cfg.source.path.join(crate::synth::MANIFEST_FILE),
                SourceKind::PicoBanana => cfg.source.path.clone(),
                SourceKind::Magicbrush => {
                    cfg.source.path.join(format!("{}.jsonl", cfg.source.split))
                }
            };
            v["input_sha256"] = serde_json::Value::String(sha_file(&input)?);
            v
        }
        Stage::Masks => serde_json::json!({
            "routing": to_json(&cfg.mask),
            "perceptual": to_json(&cfg.perceptual),
        }),
        Stage::Difficulty => serde_json::json!({
            "difficulty": to_json(&cfg.difficulty),
            "weights": to_json(&cfg.difficulty.weights()?),
            "lexicon": resources.fingerprints["lexicon"],
            "perceptual": to_json(&cfg.perceptual),
        }),
        Stage::Categories => serde_json::json!({
            "label_map": resources.fingerprints["label_map"],
            "rules": resources.fingerprints["rules"],
        }),
        Stage::Chains => serde_json::json!({
            "templates": resources.fingerprints["templates"],
        }),
    };
    let mut inputs = BTreeMap::new();
    let mut deps = Vec::new();
    if let Some(up) = upstream_of(stage) {
        deps.push(up);
    }
    if matches!(
        stage,
        Stage::Masks | Stage::Difficulty | Stage::Categories | Stage::Chains
    ) {
        deps.push(Stage::Triplets);
    }
    for dep in deps {
        let path = layout.stage_file(dep, &dataset);
        inputs.insert(dep.as_str(), sha_file(&path)?);
    }
    Ok(hash_json(&serde_json::json!({
        "stage": stage.as_str(),
        "schema": stage.schema_tag(),
        "knobs": knobs,
        "inputs": inputs,
    })))
}

/// One perceptual backend per concurrently running task, created lazily.
struct BackendPool<'a> {
    cfg: &'a PerceptualConfig,
    free: Mutex<Vec<Box<dyn PerceptualBackend>>>,
}

impl<'a> BackendPool<'a> {
    fn new(cfg: &'a PerceptualConfig) -> Self {
        Self {
            cfg,
            free: Mutex::new(Vec::new()),
        }
    }

    fn with<R>(&self, f: impl FnOnce(&mut dyn PerceptualBackend) -> Result<R>) -> Result<R> {
        let taken = self.free.lock().expect("pool lock").pop();
        let mut backend = match taken {
            Some(b) => b,
            None => self.cfg.build()?,
        };
        let out = f(backend.as_mut());
        self.free.lock().expect("pool lock").push(backend);
        out
    }
}

fn load_rgb(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Resolves a record path: absolute paths as-is, relative ones against the
/// output root.
pub fn resolve(root: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        root.join(path)
    }
}

/// Errors that abort the stage instead of dropping one triplet.
fn is_fatal(e: &Error) -> bool {
    e.is_config() || matches!(e, Error::Backend(_) | Error::Io { .. })
}

/// Runs `f` over `items` on `workers` threads, keeping input order. Per-item
/// data errors become drops; fatal errors abort.
fn par_map<T: Sync, R: Send>(
    workers: usize,
    items: &[T],
    id: impl Fn(&T) -> &str + Sync,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<(Vec<R>, Vec<Dropped>)> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(config_err)?;
    let results: Vec<Result<R>> = pool.install(|| items.par_iter().map(&f).collect());
    let mut out = Vec::with_capacity(items.len());
    let mut dropped = Vec::new();
    for (item, r) in items.iter().zip(results) {
        match r {
            Ok(v) => out.push(v),
            Err(e) if is_fatal(&e) => return Err(e),
            Err(e) => {
                log::warn!("dropping {}: {e}", id(item));
                dropped.push(Dropped {
                    triplet_id: id(item).to_string(),
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok((out, dropped))
}

fn require(layout: &Layout, stage: Stage, dataset: &str, by: Stage) -> Result<PathBuf> {
    let path = layout.stage_file(stage, dataset);
    if !path.is_file() {
        return Err(Error::MissingStage {
            stage: stage.as_str().to_string(),
            detail: format!("{} needs {}", by.as_str(), path.display()),
        });
    }
    Ok(path)
}

fn by_id<R: crate::records::StageRecord>(records: Vec<R>) -> BTreeMap<String, R> {
    records
        .into_iter()
        .map(|r| (r.triplet_id().to_string(), r))
        .collect()
}

/// Keeps triplets whose IDs are present in `present`; the rest are recorded as
/// upstream drops.
fn restrict(
    triplets: Vec<EditTriplet>,
    present: &BTreeSet<&str>,
    upstream: Stage,
    dropped: &mut Vec<Dropped>,
) -> Vec<EditTriplet> {
    let (kept, gone): (Vec<_>, Vec<_>) = triplets
        .into_iter()
        .partition(|t| present.contains(t.triplet_id.as_str()));
    for t in gone {
        dropped.push(Dropped {
            triplet_id: t.triplet_id,
            reason: format!("absent from {} output", upstream.as_str()),
        });
    }
    kept
}

struct StageOutput {
    records: usize,
    dropped: Vec<Dropped>,
    notes: BTreeMap<String, String>,
}

/// Runs one stage, skipping it when its manifest already records the same
/// config hash (unless `force`).
pub fn run_stage(
    stage: Stage,
    cfg: &RunConfig,
    output_root: &Path,
    force: bool,
) -> Result<StageSummary> {
    let started = Instant::now();
    let layout = Layout::new(output_root);
    let dataset = cfg.dataset_name();
    if let Some(up) = upstream_of(stage) {
        require(&layout, up, &dataset, stage)?;
    }
    let resources = Resources::load(cfg)?;
    let hash = stage_config_hash(stage, cfg, &resources, &layout)?;
    let out_path = layout.stage_file(stage, &dataset);
    let manifest_path = layout.manifest_file(stage, &dataset);

    if !force && out_path.is_file() {
        if let Ok(text) = fs::read_to_string(&manifest_path) {
            if let Ok(m) = serde_json::from_str::<StageManifest>(&text) {
                if m.config_hash == hash {
                    log::info!("{}: cache hit ({hash})", stage.as_str());
                    return Ok(StageSummary {
                        stage,
                        output: out_path,
                        records: m.records,
                        dropped: m.dropped,
                        cache_hit: true,
                        elapsed: started.elapsed(),
                    });
                }
            }
        }
    }

    let out = match stage {
        Stage::Triplets => run_ingest(cfg, &layout, &dataset)?,
        Stage::Masks => run_masks(cfg, &layout, &dataset)?,
        Stage::Difficulty => run_difficulty(cfg, &resources, &layout, &dataset)?,
        Stage::Categories => run_categories(cfg, &resources, &layout, &dataset)?,
        Stage::Chains => run_chains(cfg, &resources, &layout, &dataset)?,
    };

    let manifest = StageManifest {
        stage,
        dataset,
        schema: stage.schema_tag(),
        config_hash: hash,
        records: out.records,
        dropped: out.dropped.clone(),
        notes: out.notes,
    };
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Invalid(e.to_string()))?;
    fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))?;
    Ok(StageSummary {
        stage,
        output: out_path,
        records: out.records,
        dropped: out.dropped,
        cache_hit: false,
        elapsed: started.elapsed(),
    })
}

/// Runs all five stages in order.
pub fn run_all(cfg: &RunConfig, output_root: &Path, force: bool) -> Result<Vec<StageSummary>> {
    STAGES
        .iter()
        .map(|s| run_stage(*s, cfg, output_root, force))
        .collect()
}

fn canonical(p: &Path) -> Result<PathBuf> {
    fs::canonicalize(p).map_err(|e| Error::io(p, e))
}

fn run_ingest(cfg: &RunConfig, layout: &Layout, dataset: &str) -> Result<StageOutput> {
    let src = &cfg.source;
    let outcome: IngestOutcome = match src.kind {
        SourceKind::Synthetic => ingest::ingest_synthetic(&canonical(&src.path)?)?,
        SourceKind::PicoBanana => {
            let manifest = canonical(&src.path)?;
            let root = match &src.dataset_root {
                Some(r) => canonical(r)?,
                None => manifest.parent().map(Path::to_path_buf).unwrap_or_default(),
            };
            let adapter = AdapterConfig {
                dataset_root: root,
                download_missing: src.download_missing,
                single_turn_only: src.single_turn_only,
                cache_dir: src.cache_dir.clone(),
            };
            ingest::ingest_picobanana(&manifest, &adapter, &HttpFetcher::default())?
        }
        SourceKind::Magicbrush => {
            let adapter = AdapterConfig {
                dataset_root: canonical(&src.path)?,
                download_missing: false,
                single_turn_only: src.single_turn_only,
                cache_dir: None,
            };
            ingest::ingest_magicbrush(&src.split, &adapter, &layout.root)?
        }
    };
    let records = write_records(
        &outcome.triplets,
        &layout.stage_file(Stage::Triplets, dataset),
    )?;
    let dropped = outcome
        .skipped
        .iter()
        .map(|s| Dropped {
            triplet_id: s
                .triplet_id
                .clone()
                .unwrap_or_else(|| format!("<line {}>", s.line)),
            reason: s.reason.clone(),
        })
        .collect();
    let mut notes = BTreeMap::new();
    if !outcome.warnings.is_empty() {
        notes.insert("warnings".into(), outcome.warnings.join("; "));
    }
    Ok(StageOutput {
        records,
        dropped,
        notes,
    })
}

fn run_masks(cfg: &RunConfig, layout: &Layout, dataset: &str) -> Result<StageOutput> {
    let triplets: Vec<EditTriplet> = read_records(&layout.stage_file(Stage::Triplets, dataset))?;
    let png_dir = layout.root.join("masks_png");
    fs::create_dir_all(&png_dir).map_err(|e| Error::io(&png_dir, e))?;
    let uses_perceptual = cfg.mask.signal_stack.contains(&Signal::Perceptual);
    let pool = BackendPool::new(&cfg.perceptual);
    let root = layout.root.as_path();

    let (mut artifacts, dropped) = par_map(
        cfg.workers,
        &triplets,
        |t| &t.triplet_id,
        |t| {
            let real = load_rgb(&resolve(root, &t.real_path))?;
            let edited = load_rgb(&resolve(root, &t.edited_path))?;
            let mut artifact = if uses_perceptual {
                pool.with(|b| {
                    diffmask::generate_mask(&t.triplet_id, &real, &edited, &cfg.mask, Some(b))
                })?
            } else {
                diffmask::generate_mask(&t.triplet_id, &real, &edited, &cfg.mask, None)?
            };
            if let Some(mask) = artifact.mask.take() {
                let rel = Layout::mask_rel_path(&t.triplet_id);
                mask.save_png(&root.join(&rel))?;
                artifact.mask_path = Some(rel);
            }
            Ok(artifact)
        },
    )?;
    artifacts.iter_mut().for_each(|a| a.mask = None);
    let mut notes = BTreeMap::new();
    let mut scopes: BTreeMap<&str, usize> = BTreeMap::new();
    for a in &artifacts {
        *scopes.entry(a.scope.as_str()).or_default() += 1;
    }
    for (scope, n) in scopes {
        notes.insert(format!("scope.{scope}"), n.to_string());
    }
    let records = write_records(&artifacts, &layout.stage_file(Stage::Masks, dataset))?;
    Ok(StageOutput {
        records,
        dropped,
        notes,
    })
}

fn run_difficulty(
    cfg: &RunConfig,
    resources: &Resources,
    layout: &Layout,
    dataset: &str,
) -> Result<StageOutput> {
    let triplets: Vec<EditTriplet> = read_records(&layout.stage_file(Stage::Triplets, dataset))?;
    let masks = by_id(read_records::<MaskArtifact>(
        &layout.stage_file(Stage::Masks, dataset),
    )?);
    let present: BTreeSet<&str> = masks.keys().map(String::as_str).collect();
    let mut dropped = Vec::new();
    let triplets = restrict(triplets, &present, Stage::Masks, &mut dropped);
    let weights = cfg.difficulty.weights()?;
    let pool = BackendPool::new(&cfg.perceptual);
    let root = layout.root.as_path();

    let (components, more) = par_map(
        cfg.workers,
        &triplets,
        |t| &t.triplet_id,
        |t| {
            let mut mask = masks[&t.triplet_id].clone();
            mask.load_mask(root)?;
            let real = load_rgb(&resolve(root, &t.real_path))?;
            let edited = load_rgb(&resolve(root, &t.edited_path))?;
            let run = |b: Option<&mut dyn PerceptualBackend>| {
                difficulty::measure(
                    &real,
                    &edited,
                    &mask,
                    &t.instruction,
                    weights.version,
                    &resources.lexicon,
                    b,
                )
            };
            match weights.version {
                ScorerVersion::V1 => pool.with(|b| run(Some(b))),
                ScorerVersion::V2 => run(None),
            }
        },
    )?;
    dropped.extend(more);
    let (records, cutoffs) = difficulty::bin_dataset(&components, &weights)?;
    let mut notes = BTreeMap::from([
        ("scorer".to_string(), weights.version.as_str().to_string()),
        ("cutoff_p33".to_string(), cutoffs.p33.to_string()),
        ("cutoff_p66".to_string(), cutoffs.p66.to_string()),
        ("cutoff_n".to_string(), cutoffs.n.to_string()),
    ]);
    let degraded = records.iter().filter(|r| !r.flags.is_empty()).count();
    if degraded > 0 {
        notes.insert("flagged".into(), degraded.to_string());
    }
    let records = write_records(&records, &layout.stage_file(Stage::Difficulty, dataset))?;
    Ok(StageOutput {
        records,
        dropped,
        notes,
    })
}

fn run_categories(
    _cfg: &RunConfig,
    resources: &Resources,
    layout: &Layout,
    dataset: &str,
) -> Result<StageOutput> {
    let triplets: Vec<EditTriplet> = read_records(&layout.stage_file(Stage::Triplets, dataset))?;
    let diff: Vec<DifficultyRecord> = read_records(&layout.stage_file(Stage::Difficulty, dataset))?;
    let present: BTreeSet<&str> = diff.iter().map(|d| d.triplet_id.as_str()).collect();
    let mut dropped = Vec::new();
    let triplets = restrict(triplets, &present, Stage::Difficulty, &mut dropped);
    let records: Vec<CategoryRecord> = triplets
        .iter()
        .map(|t| resources.classifier.classify(t))
        .collect();
    let notes = BTreeMap::from([(
        "ruleset_version".to_string(),
        resources.classifier.version(),
    )]);
    let n = write_records(&records, &layout.stage_file(Stage::Categories, dataset))?;
    Ok(StageOutput {
        records: n,
        dropped,
        notes,
    })
}

fn run_chains(
    cfg: &RunConfig,
    resources: &Resources,
    layout: &Layout,
    dataset: &str,
) -> Result<StageOutput> {
    let triplets: Vec<EditTriplet> = read_records(&layout.stage_file(Stage::Triplets, dataset))?;
    let masks = by_id(read_records::<MaskArtifact>(
        &layout.stage_file(Stage::Masks, dataset),
    )?);
    let diffs = by_id(read_records::<DifficultyRecord>(
        &layout.stage_file(Stage::Difficulty, dataset),
    )?);
    let cats = by_id(read_records::<CategoryRecord>(
        &layout.stage_file(Stage::Categories, dataset),
    )?);
    let present: BTreeSet<&str> = cats
        .keys()
        .filter(|id| masks.contains_key(*id) && diffs.contains_key(*id))
        .map(String::as_str)
        .collect();
    let mut dropped = Vec::new();
    let triplets = restrict(triplets, &present, Stage::Categories, &mut dropped);
    let root = layout.root.as_path();

    let (chains, more) = par_map(
        cfg.workers,
        &triplets,
        |t| &t.triplet_id,
        |t| {
            let id = &t.triplet_id;
            let mut mask = masks[id].clone();
            mask.load_mask(root)?;
            chaincomp::compose_chain(t, &mask, &diffs[id], &cats[id], &resources.templates)
        },
    )?;
    dropped.extend(more);
    let flagged: Vec<&str> = chains
        .iter()
        .filter(|c| !c.flags.is_empty())
        .map(|c| c.triplet_id.as_str())
        .collect();
    let mut notes = BTreeMap::from([(
        "template_version".to_string(),
        resources.templates.version.clone(),
    )]);
    if !flagged.is_empty() {
        notes.insert("flagged".into(), flagged.join(","));
    }
    let n = write_records(&chains, &layout.stage_file(Stage::Chains, dataset))?;
    let text_path = layout
        .root
        .join(Stage::Chains.as_str())
        .join(format!("{dataset}.txt"));
    let text = chaincomp::export_text(&chains);
    fs::write(&text_path, text).map_err(|e| Error::io(&text_path, e))?;
    Ok(StageOutput {
        records: n,
        dropped,
        notes,
    })
}

/// A chain statement that disagrees with the upstream records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditFinding {
    pub triplet_id: String,
    pub violation: chaincomp::Violation,
}

/// Re-checks every chain of a finished run against its upstream records.
/// Returns the number of chains audited and all findings.
pub fn audit_run(cfg: &RunConfig, output_root: &Path) -> Result<(usize, Vec<AuditFinding>)> {
    let layout = Layout::new(output_root);
    let dataset = cfg.dataset_name();
    let files = STAGES
        .iter()
        .map(|s| require(&layout, *s, &dataset, Stage::Chains))
        .collect::<Result<Vec<_>>>()?;
    let resources = Resources::load(cfg)?;
    let joined = crate::records::join_by_id(&files)?;
    for m in &joined.missing {
        log::warn!(
            "{} missing from {:?}; not audited",
            m.triplet_id,
            m.missing_from
        );
    }
    let mut findings = Vec::new();
    for view in &joined.views {
        let (Some(t), Some(m), Some(d), Some(c), Some(chain)) = (
            &view.triplet,
            &view.mask,
            &view.difficulty,
            &view.category,
            &view.chain,
        ) else {
            continue;
        };
        let mut mask = m.clone();
        mask.load_mask(output_root)?;
        for violation in chaincomp::audit_chain(chain, t, &mask, d, c, &resources.templates)? {
            findings.push(AuditFinding {
                triplet_id: view.triplet_id.clone(),
                violation,
            });
        }
    }
    Ok((joined.views.len(), findings))
}
