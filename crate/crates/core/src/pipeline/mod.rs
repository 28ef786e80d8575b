//! Vanilla, baseline and explanation-feedback generation runs, and the
//! on-disk run store.

mod record;
mod split;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{Backend, BackendConfig, BackendError, ChatMessage, ConfigError};
use crate::demographics::{EthnicityCategory, Gender, IntersectionKey};
use crate::extraction::{extract_descriptors, ExtractionError, Extractor};
use crate::metrics::{tally_batch, target_distribution, Axis, BatchTally};
use crate::par::Exec;
use crate::stats::{proportion_ci, ProportionCI};
use crate::store::{self, DirLock};
use crate::templates::{PromptTemplates, TemplateError};

pub use record::{record_id, slug, BatchRecord, Exchange, Method, RecordStatus, Step};
pub use split::{split_stories, Split, SplitMethod};

pub const DEFAULT_BATCH_SIZE: usize = 24;

/// The 25 occupational groups, in their published order.
pub const DEFAULT_OCCUPATIONS: [&str; 25] = [
    "Architecture and Engineering",
    "Arts and Design",
    "Building and Grounds Cleaning",
    "Business and Financial",
    "Community and Social Service",
    "Computer and Information Technology",
    "Construction and Extraction",
    "Education, Training, and Library",
    "Entertainment and Sports",
    "Farming, Fishing, and Forestry",
    "Food Preparation and Serving",
    "Healthcare",
    "Installation, Maintenance, and Repair",
    "Legal",
    "Life, Physical, and Social Science",
    "Management",
    "Math",
    "Media and Communication",
    "Military",
    "Office and Administrative Support",
    "Personal Care and Service",
    "Production",
    "Protective Service",
    "Sales",
    "Transportation and Material Moving",
];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Backend(#[from] ConfigError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("{0}")]
    Precondition(String),
    #[error("run directory {0} is locked by another writer")]
    Locked(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Ordered, non-empty occupation list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct OccupationSet(Vec<String>);

impl OccupationSet {
    pub fn new(names: Vec<String>) -> Result<Self, String> {
        let names: Vec<String> = names.into_iter().map(|n| n.trim().to_string()).collect();
        if names.is_empty() || names.iter().any(String::is_empty) {
            return Err("occupation list must be non-empty and contain no blank names".into());
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = names.iter().find(|n| !seen.insert(n.to_lowercase())) {
            return Err(format!("duplicate occupation {dup:?}"));
        }
        Ok(Self(names))
    }

    /// Parses a command-line filter. A value naming a known occupation
    /// (which may itself contain commas) is taken whole; otherwise the value
    /// is split on commas.
    pub fn parse_filter(value: &str) -> Result<Self, String> {
        let v = value.trim();
        if let Some(known) = DEFAULT_OCCUPATIONS.iter().find(|o| o.eq_ignore_ascii_case(v)) {
            return Self::new(vec![known.to_string()]);
        }
        let parts = v.split(',').map(|p| {
            let p = p.trim();
            DEFAULT_OCCUPATIONS
                .iter()
                .find(|o| o.eq_ignore_ascii_case(p))
                .map_or_else(|| p.to_string(), |o| o.to_string())
        });
        Self::new(parts.collect())
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for OccupationSet {
    fn default() -> Self {
        Self(DEFAULT_OCCUPATIONS.iter().map(|s| s.to_string()).collect())
    }
}

impl TryFrom<Vec<String>> for OccupationSet {
    type Error = String;
    fn try_from(v: Vec<String>) -> Result<Self, String> {
        Self::new(v)
    }
}

impl From<OccupationSet> for Vec<String> {
    fn from(s: OccupationSet) -> Self {
        s.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMode {
    #[default]
    Agent,
    RuleBased,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptorMode {
    Off,
    #[default]
    Offline,
    Agent,
}

fn default_batch() -> usize {
    DEFAULT_BATCH_SIZE
}
fn default_min_chars() -> usize {
    200
}
fn default_superficial() -> Vec<String> {
    vec!["training data".into()]
}
fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}
fn yes() -> bool {
    true
}

/// Run configuration file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub backend: BackendConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub occupations: OccupationSet,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Explanations shorter than this trigger follow-up probes.
    #[serde(default = "default_min_chars")]
    pub min_explanation_chars: usize,
    /// Lowercase phrases marking a superficial explanation.
    #[serde(default = "default_superficial")]
    pub superficial_patterns: Vec<String>,
    /// Reuse this run's vanilla record for the same occupation when present.
    #[serde(default = "yes")]
    pub reuse_vanilla: bool,
    #[serde(default)]
    pub extraction: ExtractionMode,
    #[serde(default)]
    pub descriptors: DescriptorMode,
    /// Directory of template overrides (`<name>.txt`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(backend: BackendConfig) -> Self {
        Self {
            backend,
            batch_size: DEFAULT_BATCH_SIZE,
            occupations: OccupationSet::default(),
            methods: default_methods(),
            min_explanation_chars: default_min_chars(),
            superficial_patterns: default_superficial(),
            reuse_vanilla: true,
            extraction: ExtractionMode::default(),
            descriptors: DescriptorMode::default(),
            templates_dir: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        if let (Some(dir), Some(base)) = (&cfg.templates_dir, path.parent()) {
            if dir.is_relative() {
                cfg.templates_dir = Some(base.join(dir));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.batch_size == 0 {
            return Err(PipelineError::Config("batch_size must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(PipelineError::Config("at least one method is required".into()));
        }
        self.backend.params.validate().map_err(PipelineError::Config)?;
        Ok(())
    }

    /// Methods deduplicated, in vanilla, baseline, bame order.
    pub fn method_order(&self) -> Vec<Method> {
        Method::ALL.into_iter().filter(|m| self.methods.contains(m)).collect()
    }

    /// Stable id derived from the configuration content.
    pub fn derived_run_id(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(json);
        let hex: String = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
        format!("run-{hex}")
    }
}

/// `runs/<run_id>/` with its records and template copies.
#[derive(Debug)]
pub struct RunStore {
    root: PathBuf,
    _lock: Option<DirLock>,
}

impl RunStore {
    pub const CONFIG: &'static str = "config.json";
    pub const RECORDS: &'static str = "records";
    pub const SUPPORT: &'static str = "support";

    /// Opens `dir` for writing, holding its lock until dropped.
    pub fn create(dir: &Path) -> Result<Self, PipelineError> {
        let lock = DirLock::acquire(dir).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                PipelineError::Locked(dir.to_path_buf())
            } else {
                PipelineError::Io {
                    path: dir.to_path_buf(),
                    source: e,
                }
            }
        })?;
        Ok(Self {
            root: dir.to_path_buf(),
            _lock: Some(lock),
        })
    }

    pub fn open(dir: &Path) -> Self {
        Self {
            root: dir.to_path_buf(),
            _lock: None,
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records_dir(&self) -> PathBuf {
        self.root.join(Self::RECORDS)
    }

    pub fn record_path(&self, id: &str) -> PathBuf {
        self.records_dir().join(format!("{id}.json"))
    }

    fn support_path(&self, id: &str) -> PathBuf {
        self.records_dir().join(Self::SUPPORT).join(format!("{id}.json"))
    }

    pub fn save_config(&self, config: &RunConfig) -> Result<(), PipelineError> {
        let p = self.root.join(Self::CONFIG);
        store::write_json(&p, config).map_err(io_err(&p))
    }

    pub fn save_templates(&self, templates: &PromptTemplates) -> Result<(), PipelineError> {
        let p = self.root.join("templates");
        templates.write_dir(&p).map_err(io_err(&p))
    }

    pub fn save_record(&self, record: &BatchRecord) -> Result<(), PipelineError> {
        let p = self.record_path(&record.record_id);
        store::write_json(&p, record).map_err(io_err(&p))
    }

    /// Records generated only to feed another method (not part of the run grid).
    pub fn save_support(&self, record: &BatchRecord) -> Result<(), PipelineError> {
        let p = self.support_path(&record.record_id);
        store::write_json(&p, record).map_err(io_err(&p))
    }

    pub fn load_record(&self, id: &str) -> Option<BatchRecord> {
        [self.record_path(id), self.support_path(id)]
            .into_iter()
            .find(|p| p.exists())
            .and_then(|p| store::read_json(&p).ok())
    }

    /// Every top-level record, sorted by file name.
    pub fn load_records(&self) -> Result<Vec<BatchRecord>, PipelineError> {
        let dir = self.records_dir();
        let mut paths: Vec<PathBuf> = match std::fs::read_dir(&dir) {
            Ok(rd) => rd
                .filter_map(Result::ok)
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x == "json") && p.is_file())
                .collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(PipelineError::Io { path: dir, source: e }),
        };
        paths.sort();
        paths.iter().map(|p| store::read_json(p).map_err(io_err(p))).collect()
    }
}

/// Outcome of [`Pipeline::elicit_explanation`].
#[derive(Debug, Clone, PartialEq)]
pub struct Elicitation {
    pub text: String,
    pub exchanges: Vec<Exchange>,
    pub probed: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ElicitationError {
    #[error("source batch has no tally")]
    NoTally,
    #[error("the model gave no explanation, even after probing")]
    Empty { exchanges: Vec<Exchange> },
    #[error("backend error while eliciting an explanation: {error}")]
    Backend {
        error: BackendError,
        exchanges: Vec<Exchange>,
    },
}

/// Records from repeated runs plus pooled per-category proportion intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct Replication {
    pub records: Vec<BatchRecord>,
    pub pooled: BatchTally,
    /// Keyed `<axis>:<category>`; shares are within each axis.
    pub intervals: BTreeMap<String, ProportionCI>,
}

pub struct Pipeline {
    backend: Backend,
    config: RunConfig,
    templates: PromptTemplates,
    extractor: Extractor,
    run_id: String,
    store: Option<RunStore>,
}

impl Pipeline {
    pub fn new(config: RunConfig, run_id: impl Into<String>) -> Result<Self, PipelineError> {
        let backend = Backend::from_config(&config.backend)?;
        Self::with_backend(backend, config, run_id)
    }

    pub fn with_backend(backend: Backend, config: RunConfig, run_id: impl Into<String>) -> Result<Self, PipelineError> {
        config.validate()?;
        let templates = match &config.templates_dir {
            Some(dir) => PromptTemplates::load_dir(dir)?,
            None => PromptTemplates::default(),
        };
        Ok(Self {
            backend,
            config,
            templates,
            extractor: Extractor::default(),
            run_id: run_id.into(),
            store: None,
        })
    }

    /// Persists every record into `store` as it is produced.
    pub fn with_store(mut self, store: RunStore) -> Result<Self, PipelineError> {
        store.save_config(&self.config)?;
        store.save_templates(&self.templates)?;
        self.store = Some(store);
        Ok(self)
    }

    pub fn with_templates(mut self, templates: PromptTemplates) -> Self {
        self.templates = templates;
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn templates(&self) -> &PromptTemplates {
        &self.templates
    }

    pub fn store(&self) -> Option<&RunStore> {
        self.store.as_ref()
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    fn new_record(&self, method: Method, occupation: &str) -> BatchRecord {
        BatchRecord::new(
            record_id(self.backend.model(), method, occupation),
            self.run_id.clone(),
            self.backend.model().to_string(),
            method,
            occupation.to_string(),
            self.config.batch_size,
            self.backend.params().clone(),
        )
    }

    fn bindings(&self, occupation: &str) -> BTreeMap<&'static str, String> {
        BTreeMap::from([
            ("occupation", occupation.to_string()),
            ("batch_size", self.config.batch_size.to_string()),
        ])
    }

    pub fn render_generation_prompt(&self, method: Method, occupation: &str, explanation: Option<&str>) -> Result<String, TemplateError> {
        let mut b = self.bindings(occupation);
        let t = match method {
            Method::Vanilla => &self.templates.vanilla,
            Method::Baseline => &self.templates.baseline,
            Method::Bame => {
                b.insert("explanation", explanation.unwrap_or_default().to_string());
                &self.templates.bame
            }
        };
        t.render(&b)
    }

    /// Sends `messages` and logs the exchange on `record`.
    fn call(&self, record: &mut BatchRecord, step: Step, messages: Vec<ChatMessage>) -> Result<String, BackendError> {
        let tag = format!("{}#{}#{}", record.record_id, step, record.exchanges.len());
        let request = self.backend.request(messages, tag);
        let result = self.backend.complete(&request);
        record.exchanges.push(Exchange {
            step,
            messages: request.messages,
            params: request.params,
            response: result.as_ref().ok().map(|r| r.text.clone()),
            error: result.as_ref().err().cloned(),
        });
        result.map(|r| r.text)
    }

    /// Sends a generation prompt, then splits, labels and tallies the reply.
    fn generate_into(&self, record: &mut BatchRecord, step: Step, prompt: String) -> Result<(), ()> {
        let text = match self.call(record, step, vec![ChatMessage::user(prompt)]) {
            Ok(t) => t,
            Err(e) => {
                record.fail(step, e.to_string(), Some(e));
                return Err(());
            }
        };
        let split = split_stories(&text);
        record.raw_response = Some(text);
        let mut stories = split.stories;
        stories.truncate(self.config.batch_size);
        record.shortfall = stories.len() < self.config.batch_size;
        if stories.len() * 2 < self.config.batch_size {
            log::warn!(
                "{}: only {} of {} stories recovered from the response",
                record.record_id,
                stories.len(),
                self.config.batch_size
            );
        }
        if stories.is_empty() {
            record.fail(step, "response contained no stories", None);
            return Err(());
        }
        self.label_into(record, &stories);
        record.stories = stories;
        Ok(())
    }

    fn label_into(&self, record: &mut BatchRecord, stories: &[String]) {
        let extractions = match self.config.extraction {
            ExtractionMode::RuleBased => self.extractor.rule_based_batch(stories),
            ExtractionMode::Agent => {
                let tag = format!("{}#extract#{}", record.record_id, record.exchanges.len());
                match self.extractor.extract_labels(stories, &self.backend, &self.templates.extraction_agent, &tag) {
                    Ok(batch) => {
                        record.exchanges.push(Exchange {
                            step: Step::Extract,
                            messages: vec![ChatMessage::user(batch.prompt)],
                            params: self.backend.params().clone(),
                            response: batch.reply,
                            error: batch.error,
                        });
                        record.extraction_fallback = batch.fallback;
                        batch.extractions
                    }
                    Err(ExtractionError::EmptyBatch) => Vec::new(),
                    Err(e) => {
                        log::warn!("{}: {e}; using rule-based extraction", record.record_id);
                        record.extraction_fallback = true;
                        self.extractor.rule_based_batch(stories)
                    }
                }
            }
        };
        let labels: Vec<_> = extractions.iter().map(|x| x.resolved.clone()).collect();
        record.tally = Some(tally_batch(&labels, &record.occupation));
        record.extractions = extractions;
        if self.config.descriptors != DescriptorMode::Off {
            let backend = (self.config.descriptors == DescriptorMode::Agent).then_some(&self.backend);
            for (i, story) in stories.iter().enumerate() {
                let tag = format!("{}#descriptors#{i}", record.record_id);
                match extract_descriptors(i, story, backend, &self.templates.descriptor_agent, &self.extractor.lexicon, &tag) {
                    Ok((list, flagged)) => {
                        record.descriptor_fallback |= flagged;
                        record.descriptors.push(list);
                    }
                    Err(e) => log::warn!("{}: descriptors for story {}: {e}", record.record_id, i + 1),
                }
            }
        }
    }

    fn persist(&self, record: &BatchRecord, support: bool) {
        if let Some(store) = &self.store {
            let res = if support { store.save_support(record) } else { store.save_record(record) };
            if let Err(e) = res {
                log::error!("could not persist {}: {e}", record.record_id);
            }
        }
    }

    /// One vanilla or baseline batch. Failures are recorded on the returned
    /// record, which is persisted either way.
    pub fn run_method(&self, method: Method, occupation: &str) -> Result<BatchRecord, PipelineError> {
        if method == Method::Bame {
            return Err(PipelineError::Precondition("use run_bame for the explanation-feedback method".into()));
        }
        let record = self.generate_batch(method, occupation)?;
        self.persist(&record, false);
        Ok(record)
    }

    fn generate_batch(&self, method: Method, occupation: &str) -> Result<BatchRecord, PipelineError> {
        let prompt = self.render_generation_prompt(method, occupation, None)?;
        let mut record = self.new_record(method, occupation);
        let _ = self.generate_into(&mut record, Step::Generate, prompt);
        record.finish();
        Ok(record)
    }

    /// Tally summary shown to the model when asking for its explanation.
    pub fn render_tally(tally: &BatchTally) -> String {
        let pct = |c: u32, n: u32| if n == 0 { 0.0 } else { 100.0 * c as f64 / n as f64 };
        let n = tally.classified();
        let gender: Vec<String> = Gender::NAMED
            .iter()
            .zip(tally.gender)
            .map(|(g, c)| format!("{g} {c} ({:.1}%)", pct(c, n)))
            .collect();
        let eth: Vec<String> = EthnicityCategory::NAMED
            .iter()
            .zip(tally.ethnicity)
            .map(|(e, c)| format!("{} {c} ({:.1}%)", e.display_name(), pct(c, n)))
            .collect();
        let inter: Vec<String> = IntersectionKey::all()
            .iter()
            .zip(tally.intersection)
            .map(|(k, c)| format!("{} {c} ({:.1}%)", cell_name(*k), pct(c, n)))
            .collect();
        let mut out = format!(
            "Gender: {}\nEthnicity: {}\nGender within ethnicity: {}",
            gender.join(", "),
            eth.join(", "),
            inter.join(", ")
        );
        if tally.excluded > 0 {
            out.push_str(&format!("\nCharacters without a stated gender or ethnicity: {}", tally.excluded));
        }
        out
    }

    fn is_superficial(&self, reply: &str) -> bool {
        let lower = reply.to_lowercase();
        if reply.trim().chars().count() < self.config.min_explanation_chars {
            return true;
        }
        let flagged = self.config.superficial_patterns.iter().any(|p| lower.contains(&p.to_lowercase()));
        flagged && !axis_specific(&lower)
    }

    /// Step 2: shows the model its own stories and tally and asks why the
    /// distribution looks as it does, probing once per axis when the answer
    /// is short or superficial.
    pub fn elicit_explanation(&self, vanilla: &BatchRecord) -> Result<Elicitation, ElicitationError> {
        let tally = vanilla.tally.as_ref().ok_or(ElicitationError::NoTally)?;
        let mut scratch = vanilla.clone();
        scratch.exchanges.clear();
        let mut context = vec![];
        if let (Some(prompt), Some(raw)) = (vanilla.generation_prompt(), vanilla.raw_response.as_deref()) {
            if !raw.is_empty() {
                context.push(ChatMessage::user(prompt));
                context.push(ChatMessage::assistant(raw));
            }
        }
        let mut b = self.bindings(&vanilla.occupation);
        b.insert("tally", Self::render_tally(tally));
        let ask = self.templates.explanation.render(&b).map_err(|e| ElicitationError::Backend {
            error: BackendError::InvalidRequest(e.to_string()),
            exchanges: vec![],
        })?;
        let mut messages = context.clone();
        messages.push(ChatMessage::user(ask));
        let backend_err = |error: BackendError, scratch: &BatchRecord| ElicitationError::Backend {
            error,
            exchanges: scratch.exchanges.clone(),
        };
        let first = self.call(&mut scratch, Step::Explain, messages.clone()).map_err(|e| backend_err(e, &scratch))?;
        if !self.is_superficial(&first) {
            return Ok(Elicitation {
                text: first,
                exchanges: scratch.exchanges,
                probed: false,
            });
        }
        let mut replies = vec![first.clone()];
        let mut convo = messages;
        if !first.trim().is_empty() {
            convo.push(ChatMessage::assistant(first));
        } else {
            convo.pop();
        }
        for (category, count) in probe_targets(tally) {
            let mut b = self.bindings(&vanilla.occupation);
            b.insert("category", category);
            b.insert("count", count.to_string());
            let probe = self.templates.probe.render(&b).map_err(|e| ElicitationError::Backend {
                error: BackendError::InvalidRequest(e.to_string()),
                exchanges: scratch.exchanges.clone(),
            })?;
            let mut m = convo.clone();
            m.push(ChatMessage::user(probe));
            let reply = self.call(&mut scratch, Step::Probe, m).map_err(|e| backend_err(e, &scratch))?;
            replies.push(reply);
        }
        let text = replies
            .iter()
            .map(|r| r.trim())
            .filter(|r| !r.is_empty())
            .collect::<Vec<_>>()
            .join("\n\n");
        if text.is_empty() {
            return Err(ElicitationError::Empty {
                exchanges: scratch.exchanges,
            });
        }
        Ok(Elicitation {
            text,
            exchanges: scratch.exchanges,
            probed: true,
        })
    }

    fn source_vanilla(&self, occupation: &str) -> Result<(BatchRecord, bool), PipelineError> {
        let id = record_id(self.backend.model(), Method::Vanilla, occupation);
        if self.config.reuse_vanilla {
            if let Some(existing) = self.store.as_ref().and_then(|s| s.load_record(&id)) {
                if existing.is_ok() && existing.tally.is_some() {
                    return Ok((existing, false));
                }
            }
        }
        Ok((self.generate_batch(Method::Vanilla, occupation)?, true))
    }

    /// Steps 1 to 3 for one occupation. Failures at any step are recorded
    /// on the returned record with the step that failed.
    pub fn run_bame(&self, occupation: &str) -> Result<BatchRecord, PipelineError> {
        let (vanilla, fresh) = self.source_vanilla(occupation)?;
        if fresh {
            // Keep the grid's own vanilla record if this run includes one.
            let support = !self.config.methods.contains(&Method::Vanilla);
            self.persist(&vanilla, support);
        }
        let mut record = self.new_record(Method::Bame, occupation);
        record.source_vanilla_id = Some(vanilla.record_id.clone());
        if !vanilla.is_ok() {
            record.fail(Step::Source, format!("source batch {} failed", vanilla.record_id), None);
            return Ok(self.close(record));
        }
        match self.elicit_explanation(&vanilla) {
            Ok(el) => {
                record.exchanges.extend(el.exchanges);
                record.explanation_text = Some(el.text);
            }
            Err(e) => {
                let (step, backend_error, exchanges) = match &e {
                    ElicitationError::Backend { error, exchanges } => (Step::Explain, Some(error.clone()), exchanges.clone()),
                    ElicitationError::Empty { exchanges } => (Step::Probe, None, exchanges.clone()),
                    ElicitationError::NoTally => (Step::Source, None, vec![]),
                };
                record.exchanges.extend(exchanges);
                record.fail(step, e.to_string(), backend_error);
                return Ok(self.close(record));
            }
        }
        let prompt = self.render_generation_prompt(Method::Bame, occupation, record.explanation_text.as_deref())?;
        let _ = self.generate_into(&mut record, Step::Regenerate, prompt);
        Ok(self.close(record))
    }

    fn close(&self, mut record: BatchRecord) -> BatchRecord {
        record.finish();
        self.persist(&record, false);
        record
    }

    pub fn run_one(&self, method: Method, occupation: &str) -> Result<BatchRecord, PipelineError> {
        match method {
            Method::Bame => self.run_bame(occupation),
            m => self.run_method(m, occupation),
        }
    }

    /// Every configured method for every occupation. Occupations fan out
    /// according to `exec`; methods for one occupation run in order.
    pub fn run_all(&self, exec: Exec) -> Result<Vec<BatchRecord>, PipelineError> {
        let methods = self.config.method_order();
        let per_occ: Vec<Result<Vec<BatchRecord>, PipelineError>> = exec.map(self.config.occupations.names(), |occ| {
            methods.iter().map(|m| self.run_one(*m, occ)).collect()
        });
        let mut out = Vec::new();
        for r in per_occ {
            out.extend(r?);
        }
        Ok(out)
    }

    /// Independent repetitions of one method with pooled Wilson intervals
    /// (level 0.95) for every category on every axis.
    pub fn replicate(&self, method: Method, occupation: &str, repetitions: usize) -> Result<Replication, PipelineError> {
        if repetitions < 2 {
            return Err(PipelineError::Precondition(format!("replication needs at least 2 repetitions, got {repetitions}")));
        }
        let mut records = Vec::with_capacity(repetitions);
        for r in 0..repetitions {
            let mut rec = match method {
                Method::Bame => {
                    let v = self.generate_batch(Method::Vanilla, occupation)?;
                    let mut v = v;
                    v.record_id = format!("{}__r{r}", v.record_id);
                    let mut rec = self.new_record(Method::Bame, occupation);
                    rec.record_id = format!("{}__r{r}", rec.record_id);
                    rec.source_vanilla_id = Some(v.record_id.clone());
                    match self.elicit_explanation(&v) {
                        Ok(el) => {
                            rec.exchanges.extend(el.exchanges);
                            let prompt = self.render_generation_prompt(Method::Bame, occupation, Some(&el.text))?;
                            rec.explanation_text = Some(el.text);
                            let _ = self.generate_into(&mut rec, Step::Regenerate, prompt);
                        }
                        Err(e) => rec.fail(Step::Explain, e.to_string(), None),
                    }
                    rec
                }
                m => {
                    let prompt = self.render_generation_prompt(m, occupation, None)?;
                    let mut rec = self.new_record(m, occupation);
                    rec.record_id = format!("{}__r{r}", rec.record_id);
                    let _ = self.generate_into(&mut rec, Step::Generate, prompt);
                    rec
                }
            };
            rec.finish();
            records.push(rec);
        }
        let pooled = BatchTally::aggregate(occupation, records.iter().filter_map(|r| r.tally.as_ref()));
        let mut intervals = BTreeMap::new();
        for axis in Axis::ALL {
            let counts = pooled.counts(axis);
            let total: u64 = counts.iter().map(|&c| c as u64).sum();
            if total == 0 {
                continue;
            }
            for (label, &c) in axis.labels().iter().zip(counts) {
                let ci = proportion_ci(c as u64, total, 0.95).expect("valid counts");
                intervals.insert(format!("{axis}:{label}"), ci);
            }
        }
        Ok(Replication {
            records,
            pooled,
            intervals,
        })
    }
}

fn cell_name(k: IntersectionKey) -> String {
    format!("{} {}", k.ethnicity().display_name(), k.gender())
}

fn axis_specific(lower: &str) -> bool {
    let mut terms: Vec<String> = EthnicityCategory::NAMED.iter().map(|e| e.display_name().to_lowercase()).collect();
    terms.extend(["female", "male", "women", "men ", "asian", "latino", "latina", "hispanic", "white", "black"].map(String::from));
    terms.iter().any(|t| lower.contains(t.as_str()))
}

/// The most over-represented category on each axis, relative to its target.
fn probe_targets(tally: &BatchTally) -> Vec<(String, u32)> {
    let mut out = Vec::new();
    for axis in Axis::ALL {
        let counts = tally.counts(axis);
        let target = target_distribution(axis);
        let best = counts
            .iter()
            .zip(target.shares())
            .enumerate()
            .max_by(|a, b| {
                let ra = *a.1 .0 as f64 / a.1 .1;
                let rb = *b.1 .0 as f64 / b.1 .1;
                ra.total_cmp(&rb).then(b.0.cmp(&a.0))
            })
            .map(|(i, (c, _))| (i, *c));
        let Some((i, c)) = best else { continue };
        let name = match axis {
            Axis::Gender => Gender::NAMED[i].to_string(),
            Axis::Ethnicity => EthnicityCategory::NAMED[i].display_name().to_string(),
            Axis::Intersection => cell_name(IntersectionKey::all()[i]),
        };
        out.push((name, c));
    }
    out
}
