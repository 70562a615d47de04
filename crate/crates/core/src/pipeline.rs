//! End-to-end orchestration: config, stages, run directory and report.
//!
//! Stages run in order and each writes schema-versioned JSONL into the run
//! directory plus a `<stage>.done` summary:
//!
//! | stage           | output                                            |
//! |-----------------|---------------------------------------------------|
//! | `ingest`        | `images.jsonl`                                    |
//! | `build-regions` | `regions.jsonl`                                   |
//! | `generate`      | `candidates.jsonl`                                |
//! | `score`         | `scored.jsonl`                                    |
//! | `pair`          | `pairs.jsonl`, `pairs_chat.jsonl`, `skips.jsonl`  |
//! | `report`        | `report.json`                                     |
//!
//! The run directory is `<output_dir>/run-<hash>` where the hash covers the
//! semantic part of the config and the annotation file bytes. Completed stages
//! are skipped on the next run unless forced; rerunning a stage invalidates
//! every later one.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    filter_images, load_annotations, read_jsonl, write_jsonl, ImageId, ImageRecord, DEFAULT_MIN_OBJECTS,
};
use crate::error::{Error, Result};
use crate::grounded_text::{parse_grounded, Convention};
use crate::hashing::{content_hash, derive_seed, sha256_hex};
use crate::preference::{build_pair, PairOutcome, PairParams, PreferencePair, SkipReason};
use crate::providers::{
    CachedProvider, GenerationRequest, HttpConfig, HttpProvider, ImageLocator, MockConfig, MockProvider, ObjectRef,
    Provider, ProviderStats, ResponseCache, Sampling,
};
use crate::region::{build_regions_for_dataset, ExpansionParams, RegionQuery};
use crate::scoring::{score_candidate, CandidateId, ScoredCandidate, ScoringParams};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateStyle {
    Plain,
    Crop,
    Refs,
    CropRefs,
}

impl TemplateStyle {
    pub const ALL: [TemplateStyle; 4] = [
        TemplateStyle::Plain,
        TemplateStyle::Crop,
        TemplateStyle::Refs,
        TemplateStyle::CropRefs,
    ];

    /// Stable id used for tie-breaking, independent of config order.
    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            TemplateStyle::Plain => "plain",
            TemplateStyle::Crop => "crop",
            TemplateStyle::Refs => "refs",
            TemplateStyle::CropRefs => "crop_refs",
        }
    }

    fn has_crop(self) -> bool {
        matches!(self, TemplateStyle::Crop | TemplateStyle::CropRefs)
    }

    fn has_refs(self) -> bool {
        matches!(self, TemplateStyle::Refs | TemplateStyle::CropRefs)
    }
}

impl fmt::Display for TemplateStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TemplateStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "plain" => Ok(TemplateStyle::Plain),
            "crop" => Ok(TemplateStyle::Crop),
            "refs" => Ok(TemplateStyle::Refs),
            "crop_refs" | "crop+refs" => Ok(TemplateStyle::CropRefs),
            _ => Err(Error::UnknownStyle(s.to_string())),
        }
    }
}

/// Builds the generation request for one region and prompt style.
pub fn prompt_templates(
    region: &RegionQuery,
    style: TemplateStyle,
    convention: Convention,
    sampling: Sampling,
) -> GenerationRequest {
    let (w, h) = (region.image_width, region.image_height);
    let mut prompt = format!(
        "Describe the objects in the region {} of this image. Give the bounding box of every object you mention.",
        convention.format_box(&region.region_box, w, h)
    );
    if style.has_crop() {
        prompt.push_str(" A crop of the region is attached.");
    }
    let mut object_refs = Vec::new();
    if style.has_refs() {
        prompt.push_str("\nObjects in the region:");
        for m in &region.members {
            let r = ObjectRef {
                category: m.category.clone(),
                box_text: convention.format_box(&m.bbox, w, h),
            };
            prompt.push_str(&format!("\n{} {}", r.category, r.box_text));
            object_refs.push(r);
        }
    }
    GenerationRequest {
        image: ImageLocator {
            uri: region.uri.clone(),
            width: w,
            height: h,
        },
        crop: style.has_crop().then_some(region.region_box),
        prompt,
        object_refs,
        sampling,
    }
}

/// The prompt recorded with each preference pair.
pub fn canonical_prompt(region: &RegionQuery, convention: Convention) -> String {
    prompt_templates(
        region,
        TemplateStyle::Plain,
        convention,
        Sampling {
            temperature: 0.0,
            seed: 0,
        },
    )
    .prompt
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub annotations: Option<PathBuf>,
    /// Prefix joined to each image file name to form its URI.
    pub image_root: Option<String>,
    pub min_objects: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            annotations: None,
            image_root: None,
            min_objects: DEFAULT_MIN_OBJECTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionConfig {
    pub expansion: ExpansionParams,
    pub regions_per_image: u32,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self {
            expansion: ExpansionParams::default(),
            regions_per_image: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub templates: Vec<TemplateStyle>,
    pub samples_per_template: u32,
    pub temperature: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            templates: TemplateStyle::ALL.to_vec(),
            samples_per_template: 1,
            temperature: 0.7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[default]
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    /// Coordinate convention of prompts and generated text.
    pub convention: Convention,
    pub mock: MockConfig,
    pub http: HttpConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads; 0 uses one per core.
    pub workers: usize,
    pub cache_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub regions: RegionConfig,
    pub generation: GenerationConfig,
    pub provider: ProviderConfig,
    pub scoring: ScoringParams,
    pub preference: PairParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            workers: 0,
            cache_dir: None,
            dataset: DatasetConfig::default(),
            regions: RegionConfig::default(),
            generation: GenerationConfig::default(),
            provider: ProviderConfig::default(),
            scoring: ScoringParams::default(),
            preference: PairParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            what: path.display().to_string(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.regions.expansion.validate()?;
        if self.regions.regions_per_image == 0 {
            return Err(Error::InvalidParam {
                name: "regions.regions_per_image",
                reason: "must be at least 1".into(),
            });
        }
        let g = &self.generation;
        if g.templates.is_empty() {
            return Err(Error::Empty("generation.templates"));
        }
        let mut seen = g.templates.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != g.templates.len() {
            return Err(Error::InvalidParam {
                name: "generation.templates",
                reason: "templates must be distinct".into(),
            });
        }
        if g.samples_per_template == 0 {
            return Err(Error::InvalidParam {
                name: "generation.samples_per_template",
                reason: "must be at least 1".into(),
            });
        }
        if !(g.temperature.is_finite() && g.temperature >= 0.0) {
            return Err(Error::InvalidParam {
                name: "generation.temperature",
                reason: format!("{} must be finite and nonnegative", g.temperature),
            });
        }
        self.scoring.validate()?;
        let p = &self.preference;
        if !(p.delta_min.is_finite() && p.delta_min >= 0.0) {
            return Err(Error::InvalidParam {
                name: "preference.delta_min",
                reason: format!("{} must be finite and nonnegative", p.delta_min),
            });
        }
        if !(p.beta.is_finite() && p.beta > 0.0) {
            return Err(Error::InvalidParam {
                name: "preference.beta",
                reason: format!("{} must be positive", p.beta),
            });
        }
        Ok(())
    }

    /// The config minus operational and secret settings; this is what names a run.
    pub fn fingerprint(&self) -> PipelineConfig {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.workers = 0;
        c.cache_dir = None;
        c.provider.http.auth_token = None;
        c.provider.http.concurrency = 0;
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Ingest,
    BuildRegions,
    Generate,
    Score,
    Pair,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Ingest,
        Stage::BuildRegions,
        Stage::Generate,
        Stage::Score,
        Stage::Pair,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::BuildRegions => "build-regions",
            Stage::Generate => "generate",
            Stage::Score => "score",
            Stage::Pair => "pair",
            Stage::Report => "report",
        }
    }

    fn previous(self) -> Option<Stage> {
        let i = Stage::ALL.iter().position(|s| *s == self).expect("listed");
        i.checked_sub(1).map(|j| Stage::ALL[j])
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const IMAGES_FILE: &str = "images.jsonl";
pub const REGIONS_FILE: &str = "regions.jsonl";
pub const CANDIDATES_FILE: &str = "candidates.jsonl";
pub const SCORED_FILE: &str = "scored.jsonl";
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const PAIRS_CHAT_FILE: &str = "pairs_chat.jsonl";
pub const SKIPS_FILE: &str = "skips.jsonl";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageLine {
    pub schema_version: u32,
    #[serde(flatten)]
    pub record: ImageRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionLine {
    pub schema_version: u32,
    #[serde(flatten)]
    pub region: RegionQuery,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateLine {
    pub schema_version: u32,
    pub image_id: ImageId,
    pub region_index: u32,
    pub candidate: CandidateId,
    pub template: TemplateStyle,
    pub request_hash: String,
    pub text: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredLine {
    pub schema_version: u32,
    pub image_id: ImageId,
    pub region_index: u32,
    pub scored: ScoredCandidate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipLine {
    pub schema_version: u32,
    pub image_id: ImageId,
    pub region_index: u32,
    pub reason: SkipReason,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub counts: BTreeMap<String, u64>,
    /// Provider traffic while the stage ran.
    pub provider: ProviderStats,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl Distribution {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        };
        Self {
            count: n,
            mean: v.iter().sum::<f64>() / n as f64,
            min: v[0],
            median,
            max: v[n - 1],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    pub ok: bool,
    pub problems: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub run_id: String,
    pub counts: BTreeMap<String, u64>,
    pub skips_by_reason: BTreeMap<String, u64>,
    pub parse_diagnostics: BTreeMap<String, u64>,
    pub semantic: Distribution,
    pub localization: Distribution,
    pub combined: Distribution,
    pub margin: Distribution,
    /// Provider traffic summed over the stage executions recorded in this run.
    pub provider: ProviderStats,
    pub stages: Vec<StageSummary>,
    pub audit: Audit,
}

/// Checks pair-level invariants and count reconciliation.
pub fn audit_pairs(
    pairs: &[PreferencePair],
    skips: &[SkipLine],
    regions: &[RegionQuery],
    delta_min: f64,
    convention: Convention,
) -> Audit {
    let mut problems = Vec::new();
    if pairs.len() + skips.len() != regions.len() {
        problems.push(format!(
            "{} pairs + {} skips != {} regions",
            pairs.len(),
            skips.len(),
            regions.len()
        ));
    }
    let mut keys: Vec<(ImageId, u32)> = pairs
        .iter()
        .map(|p| (p.image_id, p.region_index))
        .chain(skips.iter().map(|s| (s.image_id, s.region_index)))
        .collect();
    keys.sort();
    if keys.windows(2).any(|w| w[0] == w[1]) {
        problems.push("a region appears more than once among pairs and skips".into());
    }
    let dims: HashMap<(ImageId, u32), (u32, u32)> = regions
        .iter()
        .map(|r| ((r.image_id, r.region_index), (r.image_width, r.image_height)))
        .collect();
    for p in pairs {
        let tag = format!("pair {}#{}", p.image_id, p.region_index);
        if p.margin.is_nan() || p.margin < delta_min {
            problems.push(format!("{tag}: margin {} below {delta_min}", p.margin));
        }
        if p.chosen_score < p.rejected_score {
            problems.push(format!("{tag}: chosen scores below rejected"));
        }
        if p.chosen_candidate == p.rejected_candidate {
            problems.push(format!("{tag}: chosen and rejected are the same candidate"));
        }
        match dims.get(&(p.image_id, p.region_index)) {
            Some(&(w, h)) => {
                let parsed = parse_grounded(&p.chosen, w, h, convention);
                if !parsed.diagnostics.is_empty() {
                    problems.push(format!(
                        "{tag}: chosen text has {} malformed groups",
                        parsed.diagnostics.len()
                    ));
                }
            }
            None => problems.push(format!("{tag}: no such region")),
        }
    }
    Audit {
        ok: problems.is_empty(),
        problems,
    }
}

type SharedProvider = CachedProvider<Box<dyn Provider>>;

pub struct Pipeline {
    config: PipelineConfig,
    run_id: String,
    run_dir: PathBuf,
    force: bool,
    pool: rayon::ThreadPool,
    cache: Arc<ResponseCache>,
    custom_provider: std::sync::Mutex<Option<Box<dyn Provider>>>,
    provider: OnceLock<SharedProvider>,
}

fn annotations_digest(config: &PipelineConfig) -> Result<Option<String>> {
    match &config.dataset.annotations {
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            Ok(Some(sha256_hex(&bytes)))
        }
        None => Ok(None),
    }
}

fn add_stats(a: ProviderStats, b: ProviderStats) -> ProviderStats {
    ProviderStats {
        transport_calls: a.transport_calls + b.transport_calls,
        cache_hits: a.cache_hits + b.cache_hits,
        errors: a.errors + b.errors,
    }
}

fn sub_stats(a: ProviderStats, b: ProviderStats) -> ProviderStats {
    ProviderStats {
        transport_calls: a.transport_calls - b.transport_calls,
        cache_hits: a.cache_hits - b.cache_hits,
        errors: a.errors - b.errors,
    }
}

fn region_key(r: &RegionQuery) -> (ImageId, u32) {
    (r.image_id, r.region_index)
}

impl Pipeline {
    /// Validates the config, derives the run directory and writes its `config.json`.
    pub fn open(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let fingerprint = config.fingerprint();
        let digest = annotations_digest(&config)?;
        let run_id = content_hash(&serde_json::json!({
            "config": fingerprint,
            "annotations_sha256": digest,
        }))?[..12]
            .to_string();
        let run_dir = config.output_dir.join(format!("run-{run_id}"));
        fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;

        let mut stored = config.clone();
        stored.provider.http.auth_token = None;
        let cfg_path = run_dir.join("config.json");
        let text = serde_json::to_string_pretty(&stored)?;
        fs::write(&cfg_path, text + "\n").map_err(|e| Error::io(&cfg_path, e))?;

        let mut builder = rayon::ThreadPoolBuilder::new();
        if config.workers > 0 {
            builder = builder.num_threads(config.workers);
        }
        let pool = builder
            .build()
            .map_err(|e| Error::Precondition(format!("cannot start worker pool: {e}")))?;
        let cache = Arc::new(match &config.cache_dir {
            Some(d) => ResponseCache::on_disk(d)?,
            None => ResponseCache::in_memory(),
        });
        Ok(Self {
            config,
            run_id,
            run_dir,
            force: false,
            pool,
            cache,
            custom_provider: std::sync::Mutex::new(None),
            provider: OnceLock::new(),
        })
    }

    /// Re-executes completed stages instead of resuming past them.
    pub fn force(mut self, force: bool) -> Self {
        self.force = force;
        self
    }

    /// Uses `provider` instead of the one described by the config.
    pub fn with_provider(self, provider: Box<dyn Provider>) -> Self {
        *self.custom_provider.lock().expect("provider slot") = Some(provider);
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.run_dir.join(file)
    }

    /// Provider traffic since this pipeline was opened.
    pub fn provider_stats(&self) -> ProviderStats {
        self.provider.get().map(|p| p.stats()).unwrap_or_default()
    }

    fn convention(&self) -> Convention {
        self.config.provider.convention
    }

    fn provider(&self) -> Result<&SharedProvider> {
        if let Some(p) = self.provider.get() {
            return Ok(p);
        }
        let inner: Box<dyn Provider> = match self.custom_provider.lock().expect("provider slot").take() {
            Some(p) => p,
            None => match self.config.provider.kind {
                ProviderKind::Mock => {
                    let records: Vec<ImageRecord> = self.read_images()?;
                    let mut mc = self.config.provider.mock.clone();
                    mc.convention = self.convention();
                    Box::new(MockProvider::new(&records, mc))
                }
                ProviderKind::Http => {
                    let mut hc = self.config.provider.http.clone();
                    hc.apply_env();
                    Box::new(HttpProvider::new(hc))
                }
            },
        };
        let _ = self.provider.set(CachedProvider::new(inner, Arc::clone(&self.cache)));
        Ok(self.provider.get().expect("just set"))
    }

    fn done_path(&self, stage: Stage) -> PathBuf {
        self.path(&format!("{}.done", stage.name()))
    }

    pub fn is_done(&self, stage: Stage) -> bool {
        self.done_path(stage).exists()
    }

    pub fn stage_summary(&self, stage: Stage) -> Result<Option<StageSummary>> {
        let p = self.done_path(stage);
        if !p.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    fn replay_command(&self, stage: Stage) -> String {
        format!(
            "groundpref --config {} {}",
            self.path("config.json").display(),
            stage.name()
        )
    }

    /// Runs every stage in order, resuming past completed ones unless forced.
    pub fn run_all(&self) -> Result<RunReport> {
        for stage in Stage::ALL {
            if stage == Stage::Report {
                break;
            }
            if self.force || !self.is_done(stage) {
                self.run_stage(stage)?;
            } else {
                log::info!("{stage}: already complete, skipping");
            }
        }
        self.report()
    }

    /// Executes one stage unconditionally; later stages are invalidated.
    pub fn run_stage(&self, stage: Stage) -> Result<StageSummary> {
        if stage == Stage::Report {
            let start = Instant::now();
            self.report()?;
            return Ok(StageSummary {
                stage: stage.name().into(),
                counts: BTreeMap::new(),
                provider: ProviderStats::default(),
                elapsed_ms: start.elapsed().as_millis() as u64,
            });
        }
        let wrap = |e: Error| Error::Stage {
            stage: stage.name().into(),
            command: self.replay_command(stage),
            source: Box::new(e),
        };
        if let Some(prev) = stage.previous() {
            if !self.is_done(prev) {
                return Err(wrap(Error::Precondition(format!(
                    "stage `{prev}` has not completed in {}",
                    self.run_dir.display()
                ))));
            }
        }
        for later in Stage::ALL.iter().filter(|s| **s > stage) {
            let p = self.done_path(*later);
            if p.exists() {
                fs::remove_file(&p).map_err(|e| wrap(Error::io(&p, e)))?;
            }
        }
        let start = Instant::now();
        let before = self.provider_stats();
        let counts = match stage {
            Stage::Ingest => self.ingest(),
            Stage::BuildRegions => self.build_regions(),
            Stage::Generate => self.generate(),
            Stage::Score => self.score(),
            Stage::Pair => self.pair(),
            Stage::Report => unreachable!(),
        }
        .map_err(wrap)?;
        let summary = StageSummary {
            stage: stage.name().into(),
            counts,
            provider: sub_stats(self.provider_stats(), before),
            elapsed_ms: start.elapsed().as_millis() as u64,
        };
        let p = self.done_path(stage);
        fs::write(&p, serde_json::to_string_pretty(&summary).map_err(|e| wrap(e.into()))?)
            .map_err(|e| wrap(Error::io(&p, e)))?;
        log::info!("{stage}: {:?}", summary.counts);
        Ok(summary)
    }

    pub fn read_images(&self) -> Result<Vec<ImageRecord>> {
        let lines: Vec<ImageLine> = read_jsonl(&self.path(IMAGES_FILE))?;
        Ok(lines.into_iter().map(|l| l.record).collect())
    }

    pub fn read_regions(&self) -> Result<Vec<RegionQuery>> {
        let lines: Vec<RegionLine> = read_jsonl(&self.path(REGIONS_FILE))?;
        Ok(lines.into_iter().map(|l| l.region).collect())
    }

    pub fn read_pairs(&self) -> Result<Vec<PreferencePair>> {
        read_jsonl(&self.path(PAIRS_FILE))
    }

    fn ingest(&self) -> Result<BTreeMap<String, u64>> {
        let ds = &self.config.dataset;
        let path = ds
            .annotations
            .as_ref()
            .ok_or_else(|| Error::Precondition("dataset.annotations is not set".into()))?;
        let mut records = load_annotations(path, ds.image_root.as_deref())?;
        records.sort_by_key(|r| r.image_id);
        let kept = filter_images(&records, ds.min_objects);
        let lines: Vec<ImageLine> = kept
            .iter()
            .map(|r| ImageLine {
                schema_version: SCHEMA_VERSION,
                record: r.clone(),
            })
            .collect();
        write_jsonl(&self.path(IMAGES_FILE), &lines)?;
        Ok(BTreeMap::from([
            ("images_total".into(), records.len() as u64),
            ("images_kept".into(), kept.len() as u64),
            ("objects_kept".into(), kept.iter().map(|r| r.objects.len() as u64).sum()),
        ]))
    }

    fn build_regions(&self) -> Result<BTreeMap<String, u64>> {
        let records = self.read_images()?;
        let rc = &self.config.regions;
        let (mut regions, summary) =
            build_regions_for_dataset(&records, self.config.seed, &rc.expansion, rc.regions_per_image)?;
        regions.sort_by_key(region_key);
        let lines: Vec<RegionLine> = regions
            .into_iter()
            .map(|region| RegionLine {
                schema_version: SCHEMA_VERSION,
                region,
            })
            .collect();
        write_jsonl(&self.path(REGIONS_FILE), &lines)?;
        Ok(BTreeMap::from([
            ("regions".into(), summary.regions as u64),
            ("images_skipped".into(), summary.images_skipped as u64),
        ]))
    }

    fn generate(&self) -> Result<BTreeMap<String, u64>> {
        let regions = self.read_regions()?;
        let provider = self.provider()?;
        let g = &self.config.generation;
        let mut templates = g.templates.clone();
        templates.sort();
        let jobs: Vec<(&RegionQuery, TemplateStyle, u32)> = regions
            .iter()
            .flat_map(|r| {
                templates
                    .iter()
                    .flat_map(move |t| (0..g.samples_per_template).map(move |s| (r, *t, s)))
            })
            .collect();
        let convention = self.convention();
        let global_seed = self.config.seed;
        let lines: Vec<CandidateLine> = self.pool.install(|| {
            jobs.par_iter()
                .map(|(region, style, sample)| {
                    let sampling = Sampling {
                        temperature: g.temperature,
                        seed: derive_seed(
                            global_seed,
                            &[
                                region.image_id.0,
                                region.region_index as u64,
                                style.id() as u64,
                                *sample as u64,
                            ],
                        ),
                    };
                    let req = prompt_templates(region, *style, convention, sampling);
                    let request_hash = req.request_hash().unwrap_or_default();
                    let (text, error) = match provider.generate(&req) {
                        Ok(t) => (Some(t), None),
                        Err(e) => {
                            log::warn!("generate {}#{} {style}: {e}", region.image_id, region.region_index);
                            (None, Some(e.to_string()))
                        }
                    };
                    CandidateLine {
                        schema_version: SCHEMA_VERSION,
                        image_id: region.image_id,
                        region_index: region.region_index,
                        candidate: CandidateId {
                            template_id: style.id(),
                            sample: *sample,
                        },
                        template: *style,
                        request_hash,
                        text,
                        error,
                    }
                })
                .collect()
        });
        write_jsonl(&self.path(CANDIDATES_FILE), &lines)?;
        let errors = lines.iter().filter(|l| l.error.is_some()).count() as u64;
        Ok(BTreeMap::from([
            ("candidates".into(), lines.len() as u64 - errors),
            ("generation_errors".into(), errors),
        ]))
    }

    fn score(&self) -> Result<BTreeMap<String, u64>> {
        let regions = self.read_regions()?;
        let by_key: HashMap<(ImageId, u32), &RegionQuery> = regions.iter().map(|r| (region_key(r), r)).collect();
        let candidates: Vec<CandidateLine> = read_jsonl(&self.path(CANDIDATES_FILE))?;
        let provider = self.provider()?;
        let convention = self.convention();
        let params = &self.config.scoring;
        let results: Vec<Option<ScoredLine>> = self.pool.install(|| {
            candidates
                .par_iter()
                .filter(|c| c.text.is_some())
                .map(|c| {
                    let region = by_key.get(&(c.image_id, c.region_index))?;
                    let text = c.text.as_deref().expect("filtered");
                    let parsed = parse_grounded(text, region.image_width, region.image_height, convention);
                    match score_candidate(
                        provider,
                        region,
                        c.candidate,
                        c.template.name(),
                        text,
                        parsed.description,
                        parsed.diagnostics,
                        params,
                    ) {
                        Ok(scored) => Some(ScoredLine {
                            schema_version: SCHEMA_VERSION,
                            image_id: c.image_id,
                            region_index: c.region_index,
                            scored,
                        }),
                        Err(e) => {
                            log::warn!("score {}#{} {}: {e}", c.image_id, c.region_index, c.template);
                            None
                        }
                    }
                })
                .collect()
        });
        let attempted = results.len() as u64;
        let lines: Vec<ScoredLine> = results.into_iter().flatten().collect();
        write_jsonl(&self.path(SCORED_FILE), &lines)?;
        let warnings = lines.iter().filter(|l| l.scored.localization.warning.is_some()).count() as u64;
        Ok(BTreeMap::from([
            ("scored".into(), lines.len() as u64),
            ("scoring_errors".into(), attempted - lines.len() as u64),
            ("localization_warnings".into(), warnings),
        ]))
    }

    fn pair(&self) -> Result<BTreeMap<String, u64>> {
        let regions = self.read_regions()?;
        let scored: Vec<ScoredLine> = read_jsonl(&self.path(SCORED_FILE))?;
        let mut grouped: HashMap<(ImageId, u32), Vec<ScoredCandidate>> = HashMap::new();
        for l in scored {
            grouped.entry((l.image_id, l.region_index)).or_default().push(l.scored);
        }
        let convention = self.convention();
        let params = &self.config.preference;
        let outcomes: Vec<Result<PairOutcome>> = self.pool.install(|| {
            regions
                .par_iter()
                .map(|r| {
                    let mut cands = grouped.get(&region_key(r)).cloned().unwrap_or_default();
                    cands.sort_by_key(|c| c.candidate);
                    if cands.len() < 2 {
                        return Ok(PairOutcome::Skip {
                            reason: SkipReason::TooFewCandidates,
                            detail: format!("{} scored candidates", cands.len()),
                        });
                    }
                    build_pair(&cands, r, &canonical_prompt(r, convention), convention, params)
                })
                .collect()
        });
        let mut pairs = Vec::new();
        let mut skips = Vec::new();
        for (r, outcome) in regions.iter().zip(outcomes) {
            match outcome? {
                PairOutcome::Pair(p) => pairs.push(p),
                PairOutcome::Skip { reason, detail } => skips.push(SkipLine {
                    schema_version: SCHEMA_VERSION,
                    image_id: r.image_id,
                    region_index: r.region_index,
                    reason,
                    detail,
                }),
            }
        }
        write_jsonl(&self.path(PAIRS_FILE), &pairs)?;
        let chat: Vec<serde_json::Value> = pairs.iter().map(PreferencePair::to_conversation).collect();
        write_jsonl(&self.path(PAIRS_CHAT_FILE), &chat)?;
        write_jsonl(&self.path(SKIPS_FILE), &skips)?;
        let mut counts = BTreeMap::from([
            ("pairs".into(), pairs.len() as u64),
            ("skips".into(), skips.len() as u64),
        ]);
        for s in &skips {
            *counts.entry(format!("skip_{}", s.reason.as_str())).or_insert(0) += 1;
        }
        Ok(counts)
    }

    /// Summarizes the completed stages and writes `report.json`.
    pub fn report(&self) -> Result<RunReport> {
        let mut stages = Vec::new();
        let mut counts = BTreeMap::new();
        let mut provider = ProviderStats::default();
        for stage in Stage::ALL {
            if let Some(s) = self.stage_summary(stage)? {
                for (k, v) in &s.counts {
                    counts.insert(k.clone(), *v);
                }
                provider = add_stats(provider, s.provider);
                stages.push(s);
            }
        }

        let mut report = RunReport {
            schema_version: SCHEMA_VERSION,
            run_id: self.run_id.clone(),
            counts,
            skips_by_reason: BTreeMap::new(),
            parse_diagnostics: BTreeMap::new(),
            semantic: Distribution::default(),
            localization: Distribution::default(),
            combined: Distribution::default(),
            margin: Distribution::default(),
            provider,
            stages,
            audit: Audit {
                ok: true,
                problems: vec![],
            },
        };

        if self.is_done(Stage::Score) {
            let scored: Vec<ScoredLine> = read_jsonl(&self.path(SCORED_FILE))?;
            let col = |f: fn(&ScoredCandidate) -> f64| -> Vec<f64> { scored.iter().map(|l| f(&l.scored)).collect() };
            report.semantic = Distribution::of(&col(|c| c.semantic.score));
            report.localization = Distribution::of(&col(|c| c.localization.score));
            report.combined = Distribution::of(&col(|c| c.combined_score));
            for l in &scored {
                for d in &l.scored.parse_diagnostics {
                    let kind = serde_json::to_value(&d.kind)?
                        .get("kind")
                        .and_then(|k| k.as_str())
                        .unwrap_or("unknown")
                        .to_string();
                    *report.parse_diagnostics.entry(kind).or_insert(0) += 1;
                }
            }
        }
        if self.is_done(Stage::Pair) {
            let pairs = self.read_pairs()?;
            let skips: Vec<SkipLine> = read_jsonl(&self.path(SKIPS_FILE))?;
            let regions = self.read_regions()?;
            report.margin = Distribution::of(&pairs.iter().map(|p| p.margin).collect::<Vec<_>>());
            for s in &skips {
                *report.skips_by_reason.entry(s.reason.as_str().into()).or_insert(0) += 1;
            }
            report.audit = audit_pairs(
                &pairs,
                &skips,
                &regions,
                self.config.preference.delta_min,
                self.convention(),
            );
        }
        let p = self.path(REPORT_FILE);
        fs::write(&p, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::io(&p, e))?;
        Ok(report)
    }
}
