//! End-to-end runs: configuration, the run manifest, per-item checkpoints,
//! the six stages in order, resume, and dataset statistics.
//!
//! Work directory layout:
//!
//! ```text
//! manifest.json              run id, config hash, per-stage progress
//! checkpoints/<stage>.jsonl  one record per finished item
//! tables.jsonl               seed tables kept by the filters
//! schemas/<db>.json          synthesized schemas
//! databases/<db>.sqlite      materialized databases
//! databases.jsonl            one record per database
//! sql_samples.jsonl          retained SQL queries
//! questions.jsonl            selected question per SQL query
//! dataset.jsonl              final samples
//! reports/<stage>.json       per-stage summaries
//! llm_requests.jsonl         request log
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::catalog::Catalog;
use crate::cot_synth::{build_cot_prompt, finalize_sample, majority_select, DataSample, FinalizeInput};
use crate::exec;
use crate::export::{export, ExportReport, MatchConfig};
use crate::ingest::{finish_filter, judge_semantics, load_tables, prefilter, FilterReport, WebTable};
use crate::llm::{Gateway, LlmError, ModelPool, PoolMember, ProviderConfig, RequestLog};
use crate::query_synth::{generate_for_db, PostprocessReport, QueryParams, SqlSample};
use crate::question_synth::{generate_question, sample_style, StylizedQuestion};
use crate::schema::{build_generation_prompt, enhance, materialize, parse_schema, sample_table_count, SchemaDef, SynthesisParams};
use crate::sql::{corpus_stats, CorpusStats};
use crate::text::{item_rng, sanitize_identifier, sha256_hex};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("stage {stage} cannot start: {missing} is missing")]
    Precondition { stage: Stage, missing: String },
    #[error("config hash {found} differs from the run's {expected}")]
    ConfigDrift { expected: String, found: String },
    #[error("stopped in stage {stage} after the item limit was reached")]
    Halted { stage: Stage },
    #[error("stage {stage} failed: {message}")]
    Stage { stage: Stage, message: String },
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Schema,
    Query,
    Question,
    Cot,
    Export,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Ingest,
        Stage::Schema,
        Stage::Query,
        Stage::Question,
        Stage::Cot,
        Stage::Export,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Schema => "schema",
            Stage::Query => "query",
            Stage::Question => "question",
            Stage::Cot => "cot",
            Stage::Export => "export",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s.trim().to_ascii_lowercase())
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolMemberConfig {
    #[serde(default = "one")]
    pub weight: f64,
    #[serde(flatten)]
    pub provider: ProviderConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathsConfig {
    pub tables: PathBuf,
    pub work_dir: PathBuf,
    /// Where the training file goes; defaults to the work directory.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuestionStageParams {
    pub n_samples: u32,
    pub temperature: f64,
    /// Relative weights of the nine styles, in declaration order.
    pub style_weights: [f64; 9],
}

impl Default for QuestionStageParams {
    fn default() -> Self {
        Self {
            n_samples: 8,
            temperature: 0.8,
            style_weights: [1.0; 9],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CotStageParams {
    pub n_samples: u32,
    pub temperature: f64,
    pub timeout_ms: u64,
    /// Let the original query's result vote alongside the CoT candidates.
    pub original_votes: bool,
}

impl Default for CotStageParams {
    fn default() -> Self {
        Self {
            n_samples: 8,
            temperature: 0.8,
            timeout_ms: 30_000,
            original_votes: false,
        }
    }
}

/// The TOML run configuration. Relative paths resolve against the config
/// file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    pub paths: PathsConfig,
    /// Model pools keyed by stage name; `default` serves every stage
    /// without its own entry.
    pub providers: BTreeMap<String, Vec<PoolMemberConfig>>,
    #[serde(default)]
    pub schema: SynthesisParams,
    #[serde(default)]
    pub query: QueryParams,
    #[serde(default)]
    pub question: QuestionStageParams,
    #[serde(default)]
    pub cot: CotStageParams,
    #[serde(default)]
    pub export: MatchConfig,
    /// Directory of catalog overrides (prompts and data files).
    #[serde(default)]
    pub catalog_dir: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes"))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !self.providers.contains_key("default") {
            return bad("providers.default is required".into());
        }
        for (name, pool) in &self.providers {
            if name != "default" && name != "judge" && Stage::parse(name).is_none() {
                return bad(format!("unknown provider pool {name}"));
            }
            if pool.is_empty() {
                return bad(format!("provider pool {name} is empty"));
            }
            let total: f64 = pool.iter().map(|m| m.weight).sum();
            if (total - 1.0).abs() > 1e-6 || pool.iter().any(|m| !(m.weight > 0.0)) {
                return bad(format!("weights of pool {name} must be positive and sum to 1"));
            }
            for m in pool {
                m.provider.validate()?;
            }
        }
        self.schema.validate().map_err(PipelineError::Config)?;
        if self.query.budget == 0 || self.query.n_samples == 0 {
            return bad("query budget and n_samples must be positive".into());
        }
        if self.question.n_samples == 0 || self.cot.n_samples == 0 {
            return bad("question and cot n_samples must be positive".into());
        }
        if self.query.complexity_weights.iter().any(|w| !(*w >= 0.0)) || self.query.complexity_weights.iter().sum::<f64>() <= 0.0 {
            return bad("complexity weights must be non-negative with a positive sum".into());
        }
        if self.question.style_weights.iter().any(|w| !(*w >= 0.0)) || self.question.style_weights.iter().sum::<f64>() <= 0.0 {
            return bad("style weights must be non-negative with a positive sum".into());
        }
        Ok(())
    }

    fn pool_config(&self, name: &str) -> &[PoolMemberConfig] {
        self.providers
            .get(name)
            .or_else(|| self.providers.get("default"))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Pending,
    Running,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCheckpoint {
    pub stage: Stage,
    pub status: StageStatus,
    pub items_done: usize,
    pub items_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    /// Absolute path of the config file the run was started from.
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub requested_stages: Vec<Stage>,
    pub stages: Vec<StageCheckpoint>,
    /// Artifact name to path relative to the work directory.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    fn new(config: &PipelineConfig, config_path: Option<PathBuf>, stages: &[Stage]) -> Self {
        let hash = config.hash();
        Self {
            run_id: format!("run-{}", &hash[..12]),
            config_hash: hash,
            config_path,
            seed: config.seed,
            requested_stages: stages.to_vec(),
            stages: Stage::ALL
                .iter()
                .map(|&stage| StageCheckpoint {
                    stage,
                    status: StageStatus::Pending,
                    items_done: 0,
                    items_failed: 0,
                })
                .collect(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn stage(&self, stage: Stage) -> &StageCheckpoint {
        self.stages.iter().find(|s| s.stage == stage).expect("every stage is listed")
    }

    fn stage_mut(&mut self, stage: Stage) -> &mut StageCheckpoint {
        self.stages.iter_mut().find(|s| s.stage == stage).expect("every stage is listed")
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Writes via a temporary file and rename.
    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(self)? + "\n")?;
        fs::rename(tmp, path)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Stages to run; empty means all six.
    pub stages: Vec<Stage>,
    /// Stop after this many items have been processed in this invocation,
    /// leaving the checkpoints as a killed run would.
    pub halt_after_items: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbRecord {
    pub db_name: String,
    pub db_path: String,
    pub schema_path: String,
    pub source_table: String,
    pub n_tables: usize,
    pub table_count_requested: usize,
    pub enhance_rounds_accepted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryItemOutput {
    pub samples: Vec<SqlSample>,
    pub report: PostprocessReport,
    pub requests: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub sample_id: String,
    pub question: StylizedQuestion,
    pub n_candidates: usize,
    pub selected_index: usize,
    pub parse_failures: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ItemStatus {
    Done,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointRecord {
    item: String,
    status: ItemStatus,
    attempts: u32,
    #[serde(default)]
    output: Value,
    #[serde(default)]
    error: Option<String>,
}

const MANIFEST: &str = "manifest.json";
const TABLES: &str = "tables.jsonl";
const DATABASES: &str = "databases.jsonl";
const SQL_SAMPLES: &str = "sql_samples.jsonl";
const QUESTIONS: &str = "questions.jsonl";
pub const DATASET: &str = "dataset.jsonl";
const TRAIN: &str = "train.jsonl";

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Writes all records to a temporary file and renames it into place.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("jsonl.tmp");
    let mut w = BufWriter::new(File::create(&tmp)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    drop(w);
    fs::rename(tmp, path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_string_pretty(value)? + "\n")?;
    fs::rename(tmp, path)?;
    Ok(())
}

/// Schemas saved by the schema stage, keyed by database name.
pub fn load_schemas(work_dir: &Path) -> Result<HashMap<String, SchemaDef>, PipelineError> {
    let dir = work_dir.join("schemas");
    let mut out = HashMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "json") {
            let schema: SchemaDef = serde_json::from_str(&fs::read_to_string(&path)?)?;
            out.insert(schema.db_name.clone(), schema);
        }
    }
    Ok(out)
}

/// Items done, items failed, and artifacts to record in the manifest.
type StageOutcome = (usize, usize, Vec<(String, String)>);

/// Countdown shared by all items of one invocation.
struct HaltBudget(Option<AtomicUsize>);

impl HaltBudget {
    fn take(&self) -> bool {
        match &self.0 {
            None => true,
            Some(n) => n.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |v| v.checked_sub(1)).is_ok(),
        }
    }
}

fn build_pool(members: &[PoolMemberConfig], seed: u64, log: &Arc<RequestLog>) -> Result<ModelPool, PipelineError> {
    let members = members
        .iter()
        .map(|m| {
            Ok(PoolMember {
                weight: m.weight,
                gateway: Arc::new(Gateway::from_config(&m.provider)?.with_log(log.clone())),
            })
        })
        .collect::<Result<Vec<_>, LlmError>>()?;
    Ok(ModelPool::new(members, seed)?)
}

/// A configured run bound to its work directory.
pub struct Pipeline {
    config: PipelineConfig,
    config_path: Option<PathBuf>,
    base_dir: PathBuf,
    work: PathBuf,
    catalog: Catalog,
    pools: BTreeMap<&'static str, ModelPool>,
}

impl Pipeline {
    /// `base_dir` anchors the config's relative paths.
    pub fn new(config: PipelineConfig, base_dir: &Path, config_path: Option<PathBuf>) -> Result<Self, PipelineError> {
        config.validate()?;
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base_dir.join(p) };
        let work = resolve(&config.paths.work_dir);
        fs::create_dir_all(&work)?;
        let catalog = match &config.catalog_dir {
            Some(dir) => Catalog::from_dir(&resolve(dir)).map_err(|e| PipelineError::Config(e.to_string()))?,
            None => Catalog::bundled(),
        };
        let log = Arc::new(RequestLog::to_file(&work.join("llm_requests.jsonl"))?);
        let mut pools = BTreeMap::new();
        for stage in Stage::ALL {
            pools.insert(stage.name(), build_pool(config.pool_config(stage.name()), config.seed, &log)?);
        }
        pools.insert("judge", build_pool(config.pool_config("judge"), config.seed, &log)?);
        Ok(Self {
            config,
            config_path,
            base_dir: base_dir.to_path_buf(),
            work,
            catalog,
            pools,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let config = PipelineConfig::load(path)?;
        let abs = fs::canonicalize(path)?;
        let base = abs.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(config, &base, Some(abs))
    }

    pub fn work_dir(&self) -> &Path {
        &self.work
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn pool(&self, name: &str) -> &ModelPool {
        &self.pools[name]
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.work.join(MANIFEST)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn train_path(&self) -> PathBuf {
        match &self.config.paths.output_dir {
            Some(d) => self.resolve(d).join(TRAIN),
            None => self.work.join(TRAIN),
        }
    }

    /// The existing manifest (whose config hash must match) or a fresh one.
    fn open_manifest(&self, stages: &[Stage]) -> Result<RunManifest, PipelineError> {
        let path = self.manifest_path();
        if path.exists() {
            let m = RunManifest::load(&path)?;
            let found = self.config.hash();
            if m.config_hash != found {
                return Err(PipelineError::ConfigDrift {
                    expected: m.config_hash,
                    found,
                });
            }
            return Ok(m);
        }
        let m = RunManifest::new(&self.config, self.config_path.clone(), stages);
        m.save(&path)?;
        Ok(m)
    }

    /// Runs the requested stages in pipeline order. Completed stages are
    /// skipped, finished items are reused, and items that failed once are
    /// retried once.
    pub fn run(&self, opts: &RunOptions) -> Result<RunManifest, PipelineError> {
        let mut stages: Vec<Stage> = if opts.stages.is_empty() {
            Stage::ALL.to_vec()
        } else {
            opts.stages.clone()
        };
        stages.sort();
        stages.dedup();
        let mut manifest = self.open_manifest(&stages)?;
        let halt = HaltBudget(opts.halt_after_items.map(AtomicUsize::new));
        for stage in stages {
            if manifest.stage(stage).status == StageStatus::Complete {
                continue;
            }
            self.check_inputs(stage)?;
            if manifest.stage(stage).status != StageStatus::Running {
                manifest.stage_mut(stage).status = StageStatus::Running;
                manifest.save(&self.manifest_path())?;
            }
            let outcome = self.run_stage(stage, &halt, &mut manifest);
            manifest.save(&self.manifest_path())?;
            let (done, failed, artifacts) = outcome?;
            let cp = manifest.stage_mut(stage);
            cp.items_done = cp.items_done.max(done);
            cp.items_failed = failed;
            cp.status = StageStatus::Complete;
            for (name, path) in artifacts {
                manifest.artifacts.insert(name, path);
            }
            manifest.save(&self.manifest_path())?;
            tracing::info!("stage {stage} complete: {done} done, {failed} failed");
        }
        Ok(manifest)
    }

    fn check_inputs(&self, stage: Stage) -> Result<(), PipelineError> {
        let need = match stage {
            Stage::Ingest => {
                let tables = self.resolve(&self.config.paths.tables);
                return if tables.exists() {
                    Ok(())
                } else {
                    Err(PipelineError::Precondition {
                        stage,
                        missing: tables.display().to_string(),
                    })
                };
            }
            Stage::Schema => TABLES,
            Stage::Query => DATABASES,
            Stage::Question => SQL_SAMPLES,
            Stage::Cot => QUESTIONS,
            Stage::Export => DATASET,
        };
        if self.work.join(need).exists() {
            Ok(())
        } else {
            Err(PipelineError::Precondition {
                stage,
                missing: need.to_string(),
            })
        }
    }

    fn load_checkpoints(&self, stage: Stage) -> Result<HashMap<String, CheckpointRecord>, PipelineError> {
        let path = self.work.join("checkpoints").join(format!("{stage}.jsonl"));
        let mut out = HashMap::new();
        if !path.exists() {
            return Ok(out);
        }
        for line in BufReader::new(File::open(&path)?).lines() {
            let line = line?;
            // A torn final line from a killed writer is ignored.
            if let Ok(rec) = serde_json::from_str::<CheckpointRecord>(&line) {
                out.insert(rec.item.clone(), rec);
            }
        }
        Ok(out)
    }

    /// Processes `items` in parallel, appending one checkpoint record per
    /// finished item. Returns per-item results in input order.
    fn run_items<T, O, F>(
        &self,
        stage: Stage,
        items: &[(String, T)],
        halt: &HaltBudget,
        manifest: &mut RunManifest,
        f: F,
    ) -> Result<Vec<(String, Result<O, String>)>, PipelineError>
    where
        T: Sync,
        O: Serialize + DeserializeOwned + Send,
        F: Fn(&str, &T) -> Result<O, String> + Sync,
    {
        let previous = self.load_checkpoints(stage)?;
        let dir = self.work.join("checkpoints");
        fs::create_dir_all(&dir)?;
        let writer = Mutex::new(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join(format!("{stage}.jsonl")))?,
        );
        let halted = AtomicUsize::new(0);
        let write_error: Mutex<Option<std::io::Error>> = Mutex::new(None);

        let results: Vec<Option<Result<O, String>>> = items
            .par_iter()
            .map(|(key, item)| {
                let prior = previous.get(key);
                if let Some(rec) = prior {
                    let retry = rec.status == ItemStatus::Failed && rec.attempts < 2;
                    if !retry {
                        return Some(match rec.status {
                            ItemStatus::Done => serde_json::from_value(rec.output.clone()).map_err(|e| e.to_string()),
                            ItemStatus::Failed => Err(rec.error.clone().unwrap_or_default()),
                        });
                    }
                }
                if !halt.take() {
                    halted.fetch_add(1, Ordering::SeqCst);
                    return None;
                }
                let result = f(key, item);
                let rec = CheckpointRecord {
                    item: key.clone(),
                    status: if result.is_ok() { ItemStatus::Done } else { ItemStatus::Failed },
                    attempts: prior.map_or(0, |r| r.attempts) + 1,
                    output: match &result {
                        Ok(o) => serde_json::to_value(o).unwrap_or(Value::Null),
                        Err(_) => Value::Null,
                    },
                    error: result.as_ref().err().cloned(),
                };
                let line = serde_json::to_string(&rec).expect("record serializes");
                let mut w = writer.lock().unwrap();
                if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
                    *write_error.lock().unwrap() = Some(e);
                }
                Some(result)
            })
            .collect();

        if let Some(e) = write_error.into_inner().unwrap() {
            return Err(e.into());
        }
        let done = results.iter().filter(|r| matches!(r, Some(Ok(_)))).count();
        let failed = results.iter().filter(|r| matches!(r, Some(Err(_)))).count();
        let cp = manifest.stage_mut(stage);
        cp.items_done = cp.items_done.max(done);
        cp.items_failed = failed;
        if halted.load(Ordering::SeqCst) > 0 {
            return Err(PipelineError::Halted { stage });
        }
        Ok(items
            .iter()
            .zip(results)
            .map(|((k, _), r)| (k.clone(), r.expect("no item was skipped")))
            .collect())
    }

    fn run_stage(
        &self,
        stage: Stage,
        halt: &HaltBudget,
        manifest: &mut RunManifest,
    ) -> Result<StageOutcome, PipelineError> {
        match stage {
            Stage::Ingest => self.stage_ingest(halt, manifest),
            Stage::Schema => self.stage_schema(halt, manifest),
            Stage::Query => self.stage_query(halt, manifest),
            Stage::Question => self.stage_question(halt, manifest),
            Stage::Cot => self.stage_cot(halt, manifest),
            Stage::Export => self.stage_export(),
        }
    }

    fn stage_ingest(&self, halt: &HaltBudget, manifest: &mut RunManifest) -> Result<StageOutcome, PipelineError> {
        let tables = load_tables(&self.resolve(&self.config.paths.tables)).map_err(|e| PipelineError::Stage {
            stage: Stage::Ingest,
            message: e.to_string(),
        })?;
        let mut ids = std::collections::HashSet::new();
        if let Some(dup) = tables.iter().find(|t| !ids.insert(t.table_id.as_str())) {
            return Err(PipelineError::Stage {
                stage: Stage::Ingest,
                message: format!("duplicate table id {}", dup.table_id),
            });
        }
        let verdicts = prefilter(&tables, &self.catalog);
        let pending: Vec<(String, usize)> = (0..tables.len())
            .filter(|&i| verdicts[i].is_none())
            .map(|i| (tables[i].table_id.clone(), i))
            .collect();
        let pool = self.pool(Stage::Ingest.name());
        let judged = self.run_items(Stage::Ingest, &pending, halt, manifest, |key, &i| {
            judge_semantics(&tables[i], pool.pick(key), &self.catalog).map_err(|e| e.to_string())
        })?;
        let judged: Vec<(usize, _)> = pending.iter().map(|(_, i)| *i).zip(judged.into_iter().map(|(_, r)| r)).collect();
        let failed = judged.iter().filter(|(_, r)| r.is_err()).count();
        let (kept, report): (Vec<WebTable>, FilterReport) = finish_filter(&tables, verdicts, judged);
        write_jsonl(&self.work.join(TABLES), &kept)?;
        write_json(&self.work.join("reports/ingest.json"), &report)?;
        Ok((
            tables.len() - failed,
            failed,
            vec![("tables".into(), TABLES.into()), ("ingest_report".into(), "reports/ingest.json".into())],
        ))
    }

    fn stage_schema(&self, halt: &HaltBudget, manifest: &mut RunManifest) -> Result<StageOutcome, PipelineError> {
        let tables: Vec<WebTable> = read_jsonl(&self.work.join(TABLES))?;
        let items: Vec<(String, (usize, &WebTable))> = tables
            .iter()
            .enumerate()
            .map(|(i, t)| (t.table_id.clone(), (i, t)))
            .collect();
        fs::create_dir_all(self.work.join("schemas"))?;
        fs::create_dir_all(self.work.join("databases"))?;
        let params = &self.config.schema;
        let pool = self.pool(Stage::Schema.name());
        let results = self.run_items(Stage::Schema, &items, halt, manifest, |key, &(i, t)| {
            let mut rng = item_rng(self.config.seed, &format!("schema/{key}"));
            let k = sample_table_count(&mut rng, params);
            let gw = pool.pick(key);
            let prompt = build_generation_prompt(&self.catalog, &t.headers, &t.rows, k);
            let resp = gw.complete(&gw.request(prompt, params.temperature, 1)).map_err(|e| e.to_string())?;
            let text = resp.texts.first().ok_or("empty response")?;
            let parsed = parse_schema(text).map_err(|e| e.to_string())?;
            let enhanced = enhance(&parsed.schema, gw, &self.catalog, params.enhance_rounds, params.temperature);
            let mut schema = enhanced.schema;
            let stem = sanitize_identifier(&schema.db_name);
            schema.db_name = format!("{}_{i:04}", if stem.is_empty() { "db" } else { &stem });
            let db_rel = format!("databases/{}.sqlite", schema.db_name);
            let schema_rel = format!("schemas/{}.json", schema.db_name);
            materialize(&schema, &self.work.join(&db_rel)).map_err(|e| e.to_string())?;
            fs::write(self.work.join(&schema_rel), schema.to_json()).map_err(|e| e.to_string())?;
            Ok(DbRecord {
                db_name: schema.db_name.clone(),
                db_path: db_rel,
                schema_path: schema_rel,
                source_table: t.table_id.clone(),
                n_tables: schema.tables.len(),
                table_count_requested: k,
                enhance_rounds_accepted: enhanced.accepted_rounds,
            })
        })?;
        let (dbs, failed) = split_results(results);
        write_jsonl(&self.work.join(DATABASES), &dbs)?;
        Ok((dbs.len(), failed, vec![("databases".into(), DATABASES.into())]))
    }

    fn stage_query(&self, halt: &HaltBudget, manifest: &mut RunManifest) -> Result<StageOutcome, PipelineError> {
        let dbs: Vec<DbRecord> = read_jsonl(&self.work.join(DATABASES))?;
        let schemas = load_schemas(&self.work)?;
        let items: Vec<(String, &DbRecord)> = dbs.iter().map(|d| (d.db_name.clone(), d)).collect();
        let pool = self.pool(Stage::Query.name());
        let results = self.run_items(Stage::Query, &items, halt, manifest, |key, db| {
            let schema = schemas.get(key).ok_or_else(|| format!("schema of {key} is missing"))?;
            let mut rng = item_rng(self.config.seed, &format!("query/{key}"));
            let out = generate_for_db(
                &self.catalog,
                schema,
                &self.work.join(&db.db_path),
                pool.pick(key),
                &self.config.query,
                &mut rng,
            )
            .map_err(|e| e.to_string())?;
            Ok(QueryItemOutput {
                samples: out.samples,
                report: out.report,
                requests: out.requests,
            })
        })?;
        let (outputs, failed) = split_results(results);
        let mut total = PostprocessReport::default();
        for o in &outputs {
            total.input += o.report.input;
            total.non_select += o.report.non_select;
            total.exec_failed += o.report.exec_failed;
            total.duplicate_template += o.report.duplicate_template;
            total.retained += o.report.retained;
        }
        let samples: Vec<SqlSample> = outputs.into_iter().flat_map(|o| o.samples).collect();
        write_jsonl(&self.work.join(SQL_SAMPLES), &samples)?;
        write_json(&self.work.join("reports/query.json"), &total)?;
        Ok((
            items.len() - failed,
            failed,
            vec![("sql_samples".into(), SQL_SAMPLES.into()), ("query_report".into(), "reports/query.json".into())],
        ))
    }

    fn stage_question(&self, halt: &HaltBudget, manifest: &mut RunManifest) -> Result<StageOutcome, PipelineError> {
        let samples: Vec<SqlSample> = read_jsonl(&self.work.join(SQL_SAMPLES))?;
        let schemas = load_schemas(&self.work)?;
        let items: Vec<(String, &SqlSample)> = samples.iter().map(|s| (s.sample_id.clone(), s)).collect();
        let pool = self.pool(Stage::Question.name());
        let params = &self.config.question;
        let results = self.run_items(Stage::Question, &items, halt, manifest, |key, s| {
            let schema = schemas.get(&s.db_name).ok_or_else(|| format!("schema of {} is missing", s.db_name))?;
            let mut rng = item_rng(self.config.seed, &format!("question/{key}"));
            let style = sample_style(&mut rng, &params.style_weights);
            let out = generate_question(
                &self.catalog,
                &s.sql_text,
                schema,
                style,
                pool.pick(key),
                params.n_samples,
                params.temperature,
            )
            .map_err(|e| e.to_string())?;
            let set = out.set.ok_or("no candidate question parsed")?;
            Ok(QuestionRecord {
                sample_id: key.to_string(),
                question: set.selected().clone(),
                n_candidates: set.candidates.len(),
                selected_index: set.selected_index,
                parse_failures: out.parse_failures,
            })
        })?;
        let (records, failed) = split_results(results);
        write_jsonl(&self.work.join(QUESTIONS), &records)?;
        Ok((records.len(), failed, vec![("questions".into(), QUESTIONS.into())]))
    }

    fn stage_cot(&self, halt: &HaltBudget, manifest: &mut RunManifest) -> Result<StageOutcome, PipelineError> {
        let samples: Vec<SqlSample> = read_jsonl(&self.work.join(SQL_SAMPLES))?;
        let questions: Vec<QuestionRecord> = read_jsonl(&self.work.join(QUESTIONS))?;
        let schemas = load_schemas(&self.work)?;
        let dbs: HashMap<String, DbRecord> = read_jsonl::<DbRecord>(&self.work.join(DATABASES))?
            .into_iter()
            .map(|d| (d.db_name.clone(), d))
            .collect();
        let by_id: HashMap<&str, &SqlSample> = samples.iter().map(|s| (s.sample_id.as_str(), s)).collect();
        let items: Vec<(String, &QuestionRecord)> = questions.iter().map(|q| (q.sample_id.clone(), q)).collect();
        let pool = self.pool(Stage::Cot.name());
        let params = &self.config.cot;
        let results = self.run_items(Stage::Cot, &items, halt, manifest, |key, qr| {
            let s = by_id.get(key).ok_or_else(|| format!("SQL sample {key} is missing"))?;
            let schema = schemas.get(&s.db_name).ok_or_else(|| format!("schema of {} is missing", s.db_name))?;
            let db = dbs.get(&s.db_name).ok_or_else(|| format!("database {} is missing", s.db_name))?;
            let db_file = self.work.join(&db.db_path);
            let gw = pool.pick(key);
            let prompt = build_cot_prompt(&self.catalog, schema, &qr.question, &s.sql_text);
            let resp = gw
                .complete(&gw.request(prompt, params.temperature, params.n_samples))
                .map_err(|e| e.to_string())?;
            let original = params
                .original_votes
                .then(|| exec::execute(&db_file, &s.sql_text, params.timeout_ms));
            let vote = majority_select(&resp.texts, &db_file, params.timeout_ms, &s.exec.fingerprint, original.as_ref())
                .map_err(|e| e.to_string())?;
            let mut sample = finalize_sample(
                FinalizeInput {
                    sample: s,
                    question: &qr.question,
                    question_candidates: qr.n_candidates,
                    db_file: &db_file,
                    db_path_rel: &db.db_path,
                    timeout_ms: params.timeout_ms,
                },
                &vote,
            )
            .map_err(|e| e.to_string())?;
            let models = &mut sample.provenance.models;
            models.insert("sql".into(), self.pool(Stage::Query.name()).pick(&s.db_name).model_id().to_string());
            models.insert("question".into(), self.pool(Stage::Question.name()).pick(key).model_id().to_string());
            models.insert("cot".into(), gw.model_id().to_string());
            Ok(sample)
        })?;
        let (dataset, failed) = split_results(results);
        write_jsonl(&self.work.join(DATASET), &dataset)?;
        Ok((dataset.len(), failed, vec![("dataset".into(), DATASET.into())]))
    }

    fn stage_export(&self) -> Result<StageOutcome, PipelineError> {
        let samples: Vec<DataSample> = read_jsonl(&self.work.join(DATASET))?;
        let schemas = load_schemas(&self.work)?;
        let out = self.train_path();
        let report: ExportReport = export(&samples, &schemas, &self.work, &out, &self.config.export).map_err(|e| PipelineError::Stage {
            stage: Stage::Export,
            message: e.to_string(),
        })?;
        write_json(&self.work.join("reports/export.json"), &report)?;
        let rel = out
            .strip_prefix(&self.work)
            .map(|p| p.display().to_string())
            .unwrap_or_else(|_| out.display().to_string());
        Ok((report.written, report.excluded.len(), vec![("train".into(), rel)]))
    }
}

fn split_results<O>(results: Vec<(String, Result<O, String>)>) -> (Vec<O>, usize) {
    let mut ok = Vec::new();
    let mut failed = 0;
    for (key, r) in results {
        match r {
            Ok(o) => ok.push(o),
            Err(e) => {
                tracing::warn!("item {key} failed: {e}");
                failed += 1;
            }
        }
    }
    (ok, failed)
}

/// Continues the run recorded in `manifest_path`. The config is re-read from
/// `config_path` (or the path stored in the manifest) and must hash to the
/// manifest's value.
pub fn resume(manifest_path: &Path, config_path: Option<&Path>, halt_after_items: Option<usize>) -> Result<RunManifest, PipelineError> {
    let manifest = RunManifest::load(manifest_path)?;
    let path = config_path
        .map(Path::to_path_buf)
        .or_else(|| manifest.config_path.clone())
        .ok_or_else(|| PipelineError::Config("the manifest records no config path; pass one explicitly".into()))?;
    let config = PipelineConfig::load(&path)?;
    let found = config.hash();
    if found != manifest.config_hash {
        return Err(PipelineError::ConfigDrift {
            expected: manifest.config_hash,
            found,
        });
    }
    let pipeline = Pipeline::from_file(&path)?;
    let manifest_dir = fs::canonicalize(manifest_path.parent().unwrap_or(Path::new(".")))?;
    if fs::canonicalize(pipeline.work_dir())? != manifest_dir {
        return Err(PipelineError::Config(format!(
            "config work_dir {} does not contain manifest {}",
            pipeline.work_dir().display(),
            manifest_path.display()
        )));
    }
    pipeline.run(&RunOptions {
        stages: manifest.requested_stages.clone(),
        halt_after_items,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub n_databases: usize,
    pub tables_per_db: f64,
    pub columns_per_db: f64,
    pub primary_keys_per_db: f64,
    pub foreign_keys_per_db: f64,
    /// Which file the SQL statistics were computed over.
    pub sql_source: Option<String>,
    pub sql: Option<CorpusStats>,
    pub n_samples: usize,
    pub n_corrected: usize,
    pub style_histogram: BTreeMap<String, usize>,
    pub complexity_histogram: BTreeMap<String, usize>,
}

impl RunReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("Databases\n");
        out.push_str("| databases | tables/db | columns/db | PK/db | FK/db |\n| --- | --- | --- | --- | --- |\n");
        out.push_str(&format!(
            "| {} | {:.2} | {:.2} | {:.2} | {:.2} |\n",
            self.n_databases, self.tables_per_db, self.columns_per_db, self.primary_keys_per_db, self.foreign_keys_per_db
        ));
        if let (Some(src), Some(stats)) = (&self.sql_source, &self.sql) {
            out.push_str(&format!("\nSQL queries ({src})\n"));
            out.push_str(&stats.to_text_table());
        }
        if self.n_samples > 0 {
            out.push_str(&format!("\nSamples: {} ({} corrected by CoT voting)\n", self.n_samples, self.n_corrected));
            out.push_str("\n| style | count |\n| --- | --- |\n");
            for (k, v) in &self.style_histogram {
                out.push_str(&format!("| {k} | {v} |\n"));
            }
            out.push_str("\n| complexity | count |\n| --- | --- |\n");
            for (k, v) in &self.complexity_histogram {
                out.push_str(&format!("| {k} | {v} |\n"));
            }
        }
        out
    }
}

fn mean(values: impl Iterator<Item = usize>, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        values.sum::<usize>() as f64 / n as f64
    }
}

/// Statistics over whatever the work directory holds. SQL statistics use
/// the final dataset when present, else the retained SQL samples.
pub fn report(work_dir: &Path) -> Result<RunReport, PipelineError> {
    let mut r = RunReport::default();
    let schemas = load_schemas(work_dir)?;
    let mut schemas: Vec<&SchemaDef> = schemas.values().collect();
    schemas.sort_by(|a, b| a.db_name.cmp(&b.db_name));
    let n = schemas.len();
    r.n_databases = n;
    r.tables_per_db = mean(schemas.iter().map(|s| s.tables.len()), n);
    r.columns_per_db = mean(schemas.iter().map(|s| s.column_count()), n);
    r.primary_keys_per_db = mean(schemas.iter().map(|s| s.primary_key_count()), n);
    r.foreign_keys_per_db = mean(schemas.iter().map(|s| s.foreign_keys.len()), n);

    let dataset = work_dir.join(DATASET);
    let sql_samples = work_dir.join(SQL_SAMPLES);
    if dataset.exists() {
        let samples: Vec<DataSample> = read_jsonl(&dataset)?;
        let sqls: Vec<&str> = samples.iter().map(|s| s.sql.as_str()).collect();
        r.sql = Some(corpus_stats(&sqls));
        r.sql_source = Some(DATASET.into());
        r.n_samples = samples.len();
        r.n_corrected = samples.iter().filter(|s| s.provenance.corrected).count();
        for s in &samples {
            *r.style_histogram.entry(s.style.to_string()).or_default() += 1;
            *r.complexity_histogram.entry(s.complexity.to_string()).or_default() += 1;
        }
    } else if sql_samples.exists() {
        let samples: Vec<SqlSample> = read_jsonl(&sql_samples)?;
        let sqls: Vec<&str> = samples.iter().map(|s| s.sql_text.as_str()).collect();
        r.sql = Some(corpus_stats(&sqls));
        r.sql_source = Some(SQL_SAMPLES.into());
        for s in &samples {
            *r.complexity_histogram.entry(s.complexity.to_string()).or_default() += 1;
        }
    }
    Ok(r)
}

/// A minimal config serving every stage from the offline mock.
pub fn mock_config(tables: &Path, work_dir: &Path, seed: u64) -> PipelineConfig {
    PipelineConfig {
        seed,
        paths: PathsConfig {
            tables: tables.to_path_buf(),
            work_dir: work_dir.to_path_buf(),
            output_dir: None,
        },
        providers: [(
            "default".to_string(),
            vec![PoolMemberConfig {
                weight: 1.0,
                provider: ProviderConfig::mock("mock"),
            }],
        )]
        .into(),
        schema: SynthesisParams::default(),
        query: QueryParams::default(),
        question: QuestionStageParams::default(),
        cot: CotStageParams::default(),
        export: MatchConfig::default(),
        catalog_dir: None,
    }
}
