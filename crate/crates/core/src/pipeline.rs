//! Configuration, resumable run records and the end-to-end
//! extract → correct → evaluate flow behind the command line.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    load_hyperred_with, read_corpus_file, split_dataset, write_corpus, CorpusError, DatasetSplit, Document,
    LoadOptions, SplitIds,
};
use crate::correction::{correct_facts, CorrectionDiagnostics, CorrectionPolicy};
use crate::evaluation::{score_corpus, EvalError, ReportMetadata, ScoreReport};
use crate::extraction::{extract_document, AttemptLog, ParseDiagnostics, PromptSpec};
use crate::gateway::{
    ChatBackend, Embedder, EndpointConfig, Gateway, GatewayError, HttpEmbedder, MockBackend, MockFixtures,
    OpenAiChatBackend, ResponseCache, Role, StubEmbedder, UreqTransport,
};
use crate::hrkg::{ExportFormat, GraphError, HrkGraph, HyperRelationalFact, FORMAT_VERSION};
use crate::prompt_opt::{OptError, Optimizer, OptimizerConfig, SearchTrace};
use crate::stages::{parallel_try_map, StageSettings};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const SPLIT_FILE: &str = "split.json";
pub const BEST_PROMPT_FILE: &str = "best_prompt.json";
pub const TRACE_FILE: &str = "search_trace.json";

/// Failure classes; each maps to one process exit code.
#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Transport(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Validation(_) => 2,
            PipelineError::Transport(_) => 3,
        }
    }
}

impl From<CorpusError> for PipelineError {
    fn from(e: CorpusError) -> Self {
        PipelineError::Validation(e.to_string())
    }
}

impl From<GatewayError> for PipelineError {
    fn from(e: GatewayError) -> Self {
        PipelineError::Transport(e.to_string())
    }
}

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Embedding(_) => PipelineError::Transport(e.to_string()),
            _ => PipelineError::Validation(e.to_string()),
        }
    }
}

impl From<GraphError> for PipelineError {
    fn from(e: GraphError) -> Self {
        PipelineError::Validation(e.to_string())
    }
}

impl From<OptError> for PipelineError {
    fn from(e: OptError) -> Self {
        match e {
            OptError::Gateway(g) => g.into(),
            OptError::Eval(v) => v.into(),
            OptError::Config(_) => PipelineError::Config(e.to_string()),
            _ => PipelineError::Validation(e.to_string()),
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> PipelineError {
    PipelineError::Validation(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyperred: Option<PathBuf>,
    pub corpus: PathBuf,
    pub work_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_bank_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_spec: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock_fixtures: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EmbedderConfig {
    Stub,
    Http(EndpointConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_fractions")]
    pub fractions: [f64; 3],
}

fn default_fractions() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            fractions: default_fractions(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectionConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default)]
    pub policy: CorrectionPolicy,
}

fn yes() -> bool {
    true
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            policy: CorrectionPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractionConfig {
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    /// Overrides the prompt spec's output budget when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_budget: Option<usize>,
}

fn default_attempts() -> u32 {
    2
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            max_attempts: default_attempts(),
            output_budget: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    #[serde(default)]
    pub omit_timestamp: bool,
}

fn default_concurrency() -> usize {
    4
}

fn config_version() -> String {
    FORMAT_VERSION.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "config_version")]
    pub format_version: String,
    pub paths: PathsConfig,
    pub extractor: EndpointConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrector: Option<EndpointConfig>,
    #[serde(default = "stub_embedder")]
    pub embedder: EmbedderConfig,
    #[serde(default)]
    pub mock: bool,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub correction: CorrectionConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub extraction: ExtractionConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
}

fn stub_embedder() -> EmbedderConfig {
    EmbedderConfig::Stub
}

/// Command-line settings that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mock: bool,
    pub no_correct: bool,
    pub seed: Option<u64>,
}

impl PipelineConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self, PipelineError> {
        let config: PipelineConfig = serde_json::from_slice(bytes).map_err(|e| {
            PipelineError::Config(format!("config line {}, column {}: {e}", e.line(), e.column()))
        })?;
        if config.format_version != FORMAT_VERSION {
            return Err(PipelineError::Config(format!(
                "unsupported config format_version `{}`",
                config.format_version
            )));
        }
        Ok(config)
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        self.mock |= overrides.mock;
        if overrides.no_correct {
            self.correction.enabled = false;
        }
        if let Some(seed) = overrides.seed {
            self.split.seed = seed;
            self.optimizer.mutation_seed = seed;
        }
    }

    /// Resolves relative paths against `base` (the config file's directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let paths = &mut self.paths;
        join(&mut paths.corpus);
        join(&mut paths.work_dir);
        for p in [
            &mut paths.hyperred,
            &mut paths.cache_dir,
            &mut paths.prompt_bank_dir,
            &mut paths.prompt_spec,
            &mut paths.mock_fixtures,
        ]
        .into_iter()
        .flatten()
        {
            join(p);
        }
    }

    /// Structural checks plus existence of referenced input files. The
    /// corpus is checked by the commands that read it, since `ingest`
    /// creates it.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |m: String| Err(PipelineError::Config(m));
        if let Some(cache) = &self.paths.cache_dir {
            if same_path(cache, &self.paths.work_dir) {
                return fail(format!("work_dir and cache_dir must differ ({})", cache.display()));
            }
        }
        if self.concurrency == 0 {
            return fail("concurrency must be >= 1".into());
        }
        if self.extraction.max_attempts == 0 {
            return fail("extraction.max_attempts must be >= 1".into());
        }
        if self.extraction.output_budget == Some(0) {
            return fail("extraction.output_budget must be >= 1".into());
        }
        self.extractor.validate().map_err(PipelineError::Config)?;
        if let Some(c) = &self.corrector {
            c.validate().map_err(PipelineError::Config)?;
        }
        if let EmbedderConfig::Http(c) = &self.embedder {
            c.validate().map_err(PipelineError::Config)?;
        }
        if self.correction.enabled && self.corrector.is_none() {
            return fail("correction is enabled but no corrector endpoint is configured".into());
        }
        if self.mock && self.paths.mock_fixtures.is_none() {
            return fail("mock mode needs paths.mock_fixtures".into());
        }
        let mut required: Vec<(&str, &PathBuf)> = Vec::new();
        if let Some(p) = &self.paths.hyperred {
            required.push(("paths.hyperred", p));
        }
        if let Some(p) = &self.paths.prompt_spec {
            required.push(("paths.prompt_spec", p));
        }
        if let Some(p) = &self.paths.prompt_bank_dir {
            required.push(("paths.prompt_bank_dir", p));
        }
        if self.mock {
            if let Some(p) = &self.paths.mock_fixtures {
                required.push(("paths.mock_fixtures", p));
            }
        }
        for (key, path) in required {
            if !path.exists() {
                return fail(format!("{key}: {} does not exist", path.display()));
            }
        }
        Ok(())
    }

    /// SHA-256 over the effective settings as written (paths unresolved).
    pub fn digest(&self, prompt: &PromptSpec) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serialization is infallible"));
        h.update([0]);
        h.update(prompt.to_json());
        hex::encode(h.finalize())
    }

    pub fn stage_settings(&self) -> StageSettings {
        StageSettings {
            max_attempts: self.extraction.max_attempts,
            correction: self.correction.enabled.then_some(self.correction.policy),
            concurrency: self.concurrency,
        }
    }
}

fn same_path(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a.components().eq(b.components()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Extracted,
    Corrected,
}

/// One line of the append-only run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub doc_id: String,
    pub stage: Stage,
    pub config_digest: String,
    /// Prompt digest and raw response per LLM call, in order.
    pub attempts: Vec<AttemptLog>,
    pub facts: Vec<HyperRelationalFact>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse: Option<ParseDiagnostics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correction: Option<CorrectionDiagnostics>,
    pub wall_ms: u64,
}

/// Records recovered from a work directory, last write wins per stage.
#[derive(Debug, Clone, Default)]
pub struct RunState {
    pub extracted: BTreeMap<String, RunRecord>,
    pub corrected: BTreeMap<String, RunRecord>,
    /// Set when a torn final line was cut off.
    pub truncated_tail: bool,
}

impl RunState {
    pub fn completed(&self, correction_enabled: bool) -> BTreeSet<String> {
        let finals = if correction_enabled { &self.corrected } else { &self.extracted };
        finals.keys().cloned().collect()
    }

    fn insert(&mut self, record: RunRecord) {
        let map = match record.stage {
            Stage::Extracted => &mut self.extracted,
            Stage::Corrected => &mut self.corrected,
        };
        map.insert(record.doc_id.clone(), record);
    }

    pub fn final_record(&self, doc_id: &str, correction_enabled: bool) -> Option<&RunRecord> {
        if correction_enabled {
            self.corrected.get(doc_id)
        } else {
            self.extracted.get(doc_id)
        }
    }

    pub fn is_empty(&self) -> bool {
        self.extracted.is_empty() && self.corrected.is_empty()
    }
}

/// Scans `work_dir/records.jsonl`. A torn or unparseable final line is cut
/// from the file with a warning; a bad line anywhere else is an error.
pub fn resume_run(work_dir: &Path) -> Result<RunState, PipelineError> {
    let path = work_dir.join(RECORDS_FILE);
    let mut state = RunState::default();
    let bytes = match std::fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(state),
        Err(e) => return Err(io_error(&path, e)),
    };
    let mut offset = 0usize;
    let mut line_no = 0usize;
    while offset < bytes.len() {
        line_no += 1;
        let (line, next, complete) = match bytes[offset..].iter().position(|b| *b == b'\n') {
            Some(i) => (&bytes[offset..offset + i], offset + i + 1, true),
            None => (&bytes[offset..], bytes.len(), false),
        };
        let is_last = next >= bytes.len();
        if line.iter().all(u8::is_ascii_whitespace) {
            offset = next;
            continue;
        }
        let parsed = std::str::from_utf8(line)
            .map_err(|e| e.to_string())
            .and_then(|s| serde_json::from_str::<RunRecord>(s).map_err(|e| e.to_string()));
        match parsed {
            // a line without its newline is a torn write even if it parses
            Ok(record) if complete => state.insert(record),
            _ if is_last => {
                log::warn!(
                    "{}: line {line_no} is incomplete; truncating it and re-processing its document",
                    path.display()
                );
                let file = OpenOptions::new().write(true).open(&path).map_err(|e| io_error(&path, e))?;
                file.set_len(offset as u64).map_err(|e| io_error(&path, e))?;
                state.truncated_tail = true;
            }
            Ok(_) => unreachable!("only the last line can lack a newline"),
            Err(message) => {
                return Err(PipelineError::Validation(format!(
                    "{}: line {line_no} is corrupted: {message}",
                    path.display()
                )));
            }
        }
        offset = next;
    }
    Ok(state)
}

/// Serialized appender for run records.
pub struct RecordWriter {
    path: PathBuf,
    file: Mutex<File>,
}

impl RecordWriter {
    pub fn open(work_dir: &Path) -> Result<Self, PipelineError> {
        std::fs::create_dir_all(work_dir).map_err(|e| io_error(work_dir, e))?;
        let path = work_dir.join(RECORDS_FILE);
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| io_error(&path, e))?;
        file.seek(SeekFrom::End(0)).map_err(|e| io_error(&path, e))?;
        Ok(Self {
            path,
            file: Mutex::new(file),
        })
    }

    pub fn append(&self, record: &RunRecord) -> Result<(), PipelineError> {
        let mut line = serde_json::to_vec(record).expect("record serialization is infallible");
        line.push(b'\n');
        let mut file = self.file.lock().unwrap_or_else(|p| p.into_inner());
        file.write_all(&line)
            .and_then(|_| file.flush())
            .map_err(|e| io_error(&self.path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Part {
    #[default]
    All,
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, Default)]
pub struct Selection {
    pub part: Part,
    /// First N documents of the selection.
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub selected: usize,
    pub processed: usize,
    pub resumed: usize,
    pub report: ScoreReport,
}

/// A loaded configuration with its gateway, embedder and prompt.
pub struct Session {
    pub config: PipelineConfig,
    pub config_digest: String,
    pub prompt: PromptSpec,
    gateway: Gateway,
    embedder: Box<dyn Embedder>,
}

impl Session {
    pub fn load(config_path: &Path, overrides: &Overrides) -> Result<Self, PipelineError> {
        let bytes = std::fs::read(config_path)
            .map_err(|e| PipelineError::Config(format!("cannot read config {}: {e}", config_path.display())))?;
        let mut config = PipelineConfig::from_json(&bytes)?;
        config.apply(overrides);
        let written = config.clone();
        let base = config_path.parent().map(Path::to_path_buf).unwrap_or_default();
        config.resolve_paths(&base);
        config.validate()?;
        let prompt = load_prompt(&config)?;
        let digest = written.digest(&prompt);
        Self::build(config, digest, prompt)
    }

    /// Builds from an in-memory config whose paths are already resolved.
    pub fn from_config(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let prompt = load_prompt(&config)?;
        let digest = config.digest(&prompt);
        Self::build(config, digest, prompt)
    }

    fn build(config: PipelineConfig, config_digest: String, prompt: PromptSpec) -> Result<Self, PipelineError> {
        let (gateway, embedder) = build_gateway(&config)?;
        Ok(Self {
            config,
            config_digest,
            prompt,
            gateway,
            embedder,
        })
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }

    fn work_dir(&self) -> &Path {
        &self.config.paths.work_dir
    }

    fn correction_enabled(&self) -> bool {
        self.config.correction.enabled
    }

    pub fn read_corpus(&self) -> Result<Vec<Document>, PipelineError> {
        let path = &self.config.paths.corpus;
        if !path.exists() {
            return Err(PipelineError::Config(format!(
                "paths.corpus: {} does not exist (run `ingest` first)",
                path.display()
            )));
        }
        Ok(read_corpus_file(path).map_err(|e| PipelineError::Validation(format!("{}: {e}", path.display())))?)
    }

    /// HyperRED file → interchange corpus. Returns (documents, skipped).
    pub fn ingest(&self, lenient: bool, output: Option<&Path>) -> Result<(usize, usize), PipelineError> {
        let source = self
            .config
            .paths
            .hyperred
            .as_ref()
            .ok_or_else(|| PipelineError::Config("paths.hyperred is not set".into()))?;
        let loaded = load_hyperred_with(source, LoadOptions { lenient })
            .map_err(|e| PipelineError::Validation(format!("{}: {e}", source.display())))?;
        for skipped in &loaded.skipped {
            log::warn!("{}: skipped record {}: {}", source.display(), skipped.line, skipped.reason);
        }
        let target = output.unwrap_or(&self.config.paths.corpus);
        write_file(target, &write_corpus(&loaded.documents))?;
        Ok((loaded.documents.len(), loaded.skipped.len()))
    }

    pub fn split(&self, docs: &[Document]) -> Result<DatasetSplit, PipelineError> {
        let [a, b, c] = self.config.split.fractions;
        Ok(split_dataset(docs, self.config.split.seed, (a, b, c))?)
    }

    /// The saved split when present, else a fresh one from the config.
    fn current_split(&self, docs: &[Document]) -> Result<DatasetSplit, PipelineError> {
        let path = self.work_dir().join(SPLIT_FILE);
        if path.exists() {
            let bytes = std::fs::read(&path).map_err(|e| io_error(&path, e))?;
            let ids: SplitIds = serde_json::from_slice(&bytes)
                .map_err(|e| PipelineError::Validation(format!("{}: {e}", path.display())))?;
            return ids
                .resolve(docs)
                .map_err(|e| PipelineError::Validation(format!("{}: {e}", path.display())));
        }
        self.split(docs)
    }

    pub fn write_split(&self, split: &DatasetSplit, output: Option<&Path>) -> Result<PathBuf, PipelineError> {
        let target = output.map(Path::to_path_buf).unwrap_or_else(|| self.work_dir().join(SPLIT_FILE));
        let mut bytes = serde_json::to_vec_pretty(&split.ids()).expect("split serialization is infallible");
        bytes.push(b'\n');
        write_file(&target, &bytes)?;
        Ok(target)
    }

    pub fn select(&self, selection: &Selection) -> Result<Vec<Document>, PipelineError> {
        let docs = self.read_corpus()?;
        let mut chosen = match selection.part {
            Part::All => docs,
            part => {
                let split = self.current_split(&docs)?;
                match part {
                    Part::Train => split.train,
                    Part::Dev => split.dev,
                    _ => split.test,
                }
            }
        };
        if let Some(n) = selection.limit {
            chosen.truncate(n);
        }
        Ok(chosen)
    }

    fn open_state(&self) -> Result<RunState, PipelineError> {
        let state = resume_run(self.work_dir())?;
        let foreign = state
            .extracted
            .values()
            .chain(state.corrected.values())
            .find(|r| r.config_digest != self.config_digest);
        if let Some(r) = foreign {
            return Err(PipelineError::Validation(format!(
                "{}: record for `{}` was written with a different configuration; use a fresh work_dir",
                self.work_dir().join(RECORDS_FILE).display(),
                r.doc_id
            )));
        }
        Ok(state)
    }

    fn extract_one(&self, doc: &Document, writer: &RecordWriter) -> Result<RunRecord, PipelineError> {
        let started = Instant::now();
        let outcome = extract_document(&self.gateway, doc, &self.prompt, self.config.extraction.max_attempts)
            .map_err(|e| PipelineError::Transport(format!("document `{}`: {e}", doc.id)))?;
        let record = RunRecord {
            doc_id: doc.id.clone(),
            stage: Stage::Extracted,
            config_digest: self.config_digest.clone(),
            attempts: outcome.attempts,
            facts: outcome.facts,
            parse: Some(outcome.diagnostics),
            correction: None,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        writer.append(&record)?;
        Ok(record)
    }

    fn correct_one(&self, doc: &Document, extracted: &RunRecord, writer: &RecordWriter) -> Result<RunRecord, PipelineError> {
        let started = Instant::now();
        let outcome = correct_facts(&self.gateway, doc, &extracted.facts, &self.config.correction.policy)
            .map_err(|e| PipelineError::Transport(format!("document `{}`: {e}", doc.id)))?;
        let record = RunRecord {
            doc_id: doc.id.clone(),
            stage: Stage::Corrected,
            config_digest: self.config_digest.clone(),
            attempts: vec![outcome.attempt],
            facts: outcome.facts,
            parse: None,
            correction: Some(outcome.diagnostics),
            wall_ms: started.elapsed().as_millis() as u64,
        };
        writer.append(&record)?;
        Ok(record)
    }

    /// Extraction only, skipping documents that already have a record.
    pub fn extract(&self, docs: &[Document]) -> Result<usize, PipelineError> {
        let state = self.open_state()?;
        let writer = RecordWriter::open(self.work_dir())?;
        let todo: Vec<&Document> = docs.iter().filter(|d| !state.extracted.contains_key(&d.id)).collect();
        parallel_try_map(&todo, self.config.concurrency, |doc| self.extract_one(doc, &writer))?;
        Ok(todo.len())
    }

    /// Correction of extracted documents that have no corrected record yet.
    pub fn correct(&self, docs: &[Document]) -> Result<usize, PipelineError> {
        if !self.correction_enabled() {
            return Err(PipelineError::Config("correction is disabled for this configuration".into()));
        }
        let state = self.open_state()?;
        if state.extracted.is_empty() {
            return Err(PipelineError::Validation(format!(
                "{}: no extraction records; run `extract` first",
                self.work_dir().display()
            )));
        }
        let writer = RecordWriter::open(self.work_dir())?;
        let todo: Vec<(&Document, &RunRecord)> = docs
            .iter()
            .filter(|d| !state.corrected.contains_key(&d.id))
            .filter_map(|d| state.extracted.get(&d.id).map(|r| (d, r)))
            .collect();
        parallel_try_map(&todo, self.config.concurrency, |(doc, rec)| self.correct_one(doc, rec, &writer))?;
        Ok(todo.len())
    }

    /// Final-stage facts per selected document; documents without one are
    /// skipped with a warning.
    fn final_results(&self, docs: &[Document]) -> Result<Vec<(Document, Vec<HyperRelationalFact>)>, PipelineError> {
        let state = self.open_state()?;
        if state.extracted.is_empty() {
            return Err(PipelineError::Validation(format!(
                "{}: no extraction records; run `extract` or `run` first",
                self.work_dir().display()
            )));
        }
        let stage = if self.correction_enabled() { "corrected" } else { "extracted" };
        let mut results = Vec::new();
        let mut missing = Vec::new();
        for doc in docs {
            match state.final_record(&doc.id, self.correction_enabled()) {
                Some(r) => results.push((doc.clone(), r.facts.clone())),
                None => missing.push(doc.id.as_str()),
            }
        }
        if let (Some(first), false) = (missing.first(), results.is_empty()) {
            log::warn!(
                "{} selected document(s) have no {stage} record and are not scored (first: `{first}`)",
                missing.len()
            );
        }
        if results.is_empty() {
            return Err(PipelineError::Validation(format!(
                "{}: no {stage} records for the selected documents",
                self.work_dir().display()
            )));
        }
        Ok(results)
    }

    pub fn metadata(&self) -> ReportMetadata {
        let mut meta = ReportMetadata::new(self.embedder.model_id());
        meta.extractor_model = self.config.extractor.model.clone();
        if self.correction_enabled() {
            meta.corrector_model = self.config.corrector.as_ref().map(|c| c.model.clone());
        }
        meta.config_digest = self.config_digest.clone();
        if self.config.evaluation.omit_timestamp {
            meta.timestamp = None;
        }
        meta
    }

    /// Scores the recorded output and writes `report.json` to the work dir.
    pub fn evaluate(&self, docs: &[Document]) -> Result<ScoreReport, PipelineError> {
        let results = self.final_results(docs)?;
        let report = score_corpus(&results, self.embedder.as_ref(), self.metadata())?;
        write_file(&self.work_dir().join(REPORT_FILE), &report.to_json())?;
        Ok(report)
    }

    /// Extract → correct → evaluate, resuming from existing records.
    pub fn run(&self, docs: &[Document]) -> Result<RunSummary, PipelineError> {
        let state = self.open_state()?;
        let writer = RecordWriter::open(self.work_dir())?;
        let correcting = self.correction_enabled();
        let done = state.completed(correcting);
        let todo: Vec<&Document> = docs.iter().filter(|d| !done.contains(&d.id)).collect();
        parallel_try_map(&todo, self.config.concurrency, |doc| {
            let extracted = match state.extracted.get(&doc.id) {
                Some(r) => r.clone(),
                None => self.extract_one(doc, &writer)?,
            };
            if correcting {
                self.correct_one(doc, &extracted, &writer)?;
            }
            Ok::<_, PipelineError>(())
        })?;
        let report = self.evaluate(docs)?;
        Ok(RunSummary {
            selected: docs.len(),
            processed: todo.len(),
            resumed: docs.len() - todo.len(),
            report,
        })
    }

    /// Graph of the final-stage facts of the selected documents.
    pub fn graph(&self, docs: &[Document]) -> Result<HrkGraph, PipelineError> {
        let mut graph = HrkGraph::new();
        for (doc, facts) in self.final_results(docs)? {
            graph.add_source_id(doc.id);
            graph.extend(facts);
        }
        Ok(graph)
    }

    pub fn export(&self, docs: &[Document], format: ExportFormat) -> Result<Vec<u8>, PipelineError> {
        Ok(self.graph(docs)?.export(format))
    }

    /// Instruction bank: config list, else `*.txt` files of the prompt bank
    /// directory in name order, else the base instruction.
    pub fn instruction_bank(&self) -> Result<Vec<String>, PipelineError> {
        if !self.config.optimizer.instruction_bank.is_empty() {
            return Ok(self.config.optimizer.instruction_bank.clone());
        }
        if let Some(dir) = &self.config.paths.prompt_bank_dir {
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(|e| io_error(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "txt"))
                .collect();
            files.sort();
            let bank = files
                .iter()
                .map(|p| std::fs::read_to_string(p).map(|s| s.trim().to_string()).map_err(|e| io_error(p, e)))
                .collect::<Result<Vec<_>, _>>()?;
            if !bank.is_empty() {
                return Ok(bank);
            }
        }
        Ok(vec![self.prompt.instruction.clone()])
    }

    /// Prompt search on the train/dev split; writes the best prompt and the
    /// trace to the work dir.
    pub fn optimize(&self) -> Result<(PromptSpec, SearchTrace), PipelineError> {
        let docs = self.read_corpus()?;
        let split = self.current_split(&docs)?;
        let mut config = self.config.optimizer.clone();
        config.instruction_bank = self.instruction_bank()?;
        let optimizer = Optimizer {
            gateway: &self.gateway,
            embedder: self.embedder.as_ref(),
            settings: self.config.stage_settings(),
            base: self.prompt.clone(),
        };
        let (best, trace) = optimizer.optimize(&split.train, &split.dev, &config)?;
        write_file(&self.work_dir().join(BEST_PROMPT_FILE), &best.to_json())?;
        write_file(&self.work_dir().join(TRACE_FILE), &trace.to_json())?;
        Ok((best, trace))
    }
}

fn load_prompt(config: &PipelineConfig) -> Result<PromptSpec, PipelineError> {
    let mut spec = match &config.paths.prompt_spec {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
            PromptSpec::from_json(&bytes).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?
        }
        None => PromptSpec::default(),
    };
    if let Some(budget) = config.extraction.output_budget {
        spec.output_budget = budget;
    }
    spec.validate().map_err(PipelineError::Config)?;
    Ok(spec)
}

fn build_gateway(config: &PipelineConfig) -> Result<(Gateway, Box<dyn Embedder>), PipelineError> {
    let mut extractor = config.extractor.clone();
    let mut corrector = config.corrector.clone();
    let (backend, embedder): (Arc<dyn ChatBackend>, Box<dyn Embedder>) = if config.mock {
        let path = config.paths.mock_fixtures.as_ref().expect("validated");
        let fixtures = MockFixtures::load(path).map_err(|e| PipelineError::Config(e.to_string()))?;
        (Arc::new(MockBackend::new(fixtures)), Box::new(StubEmbedder))
    } else {
        extractor.resolve_api_key();
        if let Some(c) = corrector.as_mut() {
            c.resolve_api_key();
        }
        let transport = Arc::new(UreqTransport::default());
        let embedder: Box<dyn Embedder> = match &config.embedder {
            EmbedderConfig::Stub => Box::new(StubEmbedder),
            EmbedderConfig::Http(c) => {
                let mut c = c.clone();
                c.resolve_api_key();
                Box::new(HttpEmbedder::new(c, transport.clone()))
            }
        };
        (Arc::new(OpenAiChatBackend::new(transport)), embedder)
    };
    let mut gateway = Gateway::new(backend)
        .with_role(Role::Extractor, extractor)
        .with_max_in_flight(config.concurrency);
    if let Some(c) = corrector {
        gateway = gateway.with_role(Role::Corrector, c);
    }
    if let (false, Some(dir)) = (config.mock, &config.paths.cache_dir) {
        gateway = gateway.with_cache(ResponseCache::open(dir).map_err(|e| PipelineError::Config(e.to_string()))?);
    }
    Ok((gateway, embedder))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| io_error(path, e))
}
