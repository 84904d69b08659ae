//! End-to-end question answering: extraction, masking, retrieval, generation
//! with self-repair, coding, execution and answer, recorded as one trace.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::coding::{CodingOptions, ConceptMap, MedicalCoder};
use crate::dataset::{EntityMention, QuestionSqlPair};
use crate::embedding::Embedder;
use crate::executor::{DbError, DbErrorCategory, ExecLimits, QueryEngine, QueryResult};
use crate::llm::{extract_sql, Completion, LlmError, LlmGateway, ModelConfig, SqlExtraction};
use crate::placeholder::{render_sql, DomainTag, SqlTemplate};
use crate::prompting::{Exemplar, PromptBuilder, PromptMode, PromptSpec, DEFAULT_ANSWER_ROW_CAP, MAX_REPAIR_ATTEMPTS};
use crate::retrieval::{mask_question, random_hits, top_k_vector, Exclusion, LeaveOut, RetrievalHit, RetrievalIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RagMode {
    None,
    Random { k: usize },
    TopK { k: usize },
    /// The evaluated question's own reference SQL as the only exemplar.
    Oracle,
}

/// How generated SQL is probed for executability during repair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    #[default]
    Execute,
    Compile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub prompt_mode: PromptMode,
    pub rag: RagMode,
    pub max_repair_attempts: u32,
    pub tolerance: f64,
    pub coding: CodingOptions,
    pub seed: u64,
    pub leave_out: LeaveOut,
    pub probe: ProbeMode,
    pub limits: ExecLimits,
    pub generator: ModelConfig,
    pub verifier: ModelConfig,
    /// Skip the natural-language answer (benchmarks only need the result).
    pub generate_answer: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            prompt_mode: PromptMode::Advanced,
            rag: RagMode::TopK { k: 1 },
            max_repair_attempts: MAX_REPAIR_ATTEMPTS,
            tolerance: 0.10,
            coding: CodingOptions::default(),
            seed: 1,
            leave_out: LeaveOut::default(),
            probe: ProbeMode::default(),
            limits: ExecLimits::default(),
            generator: ModelConfig::default(),
            verifier: ModelConfig::default(),
            generate_answer: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("rag k must be at least 1")]
    ZeroK,
    #[error("tolerance must be a finite value >= 0")]
    Tolerance,
    #[error("max_repair_attempts is {0}; at most {MAX_REPAIR_ATTEMPTS} are supported")]
    TooManyRepairs(u32),
    #[error("coding candidate count must be at least 1")]
    ZeroCandidates,
    #[error("unknown mode `{0}`")]
    UnknownMode(String),
    #[error("{0}")]
    Model(String),
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if let RagMode::TopK { k } | RagMode::Random { k } = self.rag {
            if k == 0 {
                return Err(ConfigError::ZeroK);
            }
        }
        if !(self.tolerance >= 0.0 && self.tolerance.is_finite()) {
            return Err(ConfigError::Tolerance);
        }
        if self.max_repair_attempts > MAX_REPAIR_ATTEMPTS {
            return Err(ConfigError::TooManyRepairs(self.max_repair_attempts));
        }
        if self.coding.n_candidates == 0 {
            return Err(ConfigError::ZeroCandidates);
        }
        self.generator.validate().map_err(|e| ConfigError::Model(e.to_string()))?;
        self.verifier.validate().map_err(|e| ConfigError::Model(e.to_string()))?;
        Ok(())
    }

    /// Applies a benchmark mode label: `simple`, `advanced`, `rag-topK`,
    /// `rag-randomK` or `oracle`. RAG modes use the advanced prompt.
    pub fn with_mode(mut self, label: &str) -> Result<Self, ConfigError> {
        let mode: ExperimentMode = label.parse()?;
        self.prompt_mode = mode.prompt_mode;
        self.rag = mode.rag;
        Ok(self)
    }

    pub fn experiment_mode(&self) -> ExperimentMode {
        ExperimentMode {
            prompt_mode: self.prompt_mode,
            rag: self.rag,
        }
    }
}

/// Prompt mode plus retrieval mode; one row of a benchmark report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentMode {
    pub prompt_mode: PromptMode,
    pub rag: RagMode,
}

impl ExperimentMode {
    /// Short label, the inverse of `FromStr`.
    pub fn label(&self) -> String {
        match self.rag {
            RagMode::None => self.prompt_mode.to_string(),
            RagMode::Random { k } => format!("rag-random{k}"),
            RagMode::TopK { k } => format!("rag-top{k}"),
            RagMode::Oracle => "oracle".into(),
        }
    }

    /// Row title in reports.
    pub fn title(&self) -> String {
        match self.rag {
            RagMode::None => format!("Prompt ({})", self.prompt_mode),
            RagMode::Random { k } => format!("RAG-random{k}"),
            RagMode::TopK { k } => format!("RAG-top{k}"),
            RagMode::Oracle => "RAG-top1-oracle".into(),
        }
    }
}

impl fmt::Display for ExperimentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for ExperimentMode {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let l = s.trim().to_ascii_lowercase();
        let bad = || ConfigError::UnknownMode(s.to_string());
        let num = |rest: &str| -> Result<usize, ConfigError> {
            let k: usize = rest.parse().map_err(|_| bad())?;
            if k == 0 {
                Err(ConfigError::ZeroK)
            } else {
                Ok(k)
            }
        };
        let (prompt_mode, rag) = match l.as_str() {
            "simple" | "prompt-simple" => (PromptMode::Simple, RagMode::None),
            "advanced" | "prompt-advanced" => (PromptMode::Advanced, RagMode::None),
            "oracle" | "rag-top1-oracle" => (PromptMode::Advanced, RagMode::Oracle),
            _ => {
                if let Some(rest) = l.strip_prefix("rag-random") {
                    (PromptMode::Advanced, RagMode::Random { k: num(rest)? })
                } else if let Some(rest) = l.strip_prefix("rag-top") {
                    (PromptMode::Advanced, RagMode::TopK { k: num(rest)? })
                } else {
                    return Err(bad());
                }
            }
        };
        Ok(ExperimentMode { prompt_mode, rag })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Extraction,
    Retrieval,
    Generation,
    Repair,
    Coding,
    Rendering,
    Execution,
    Answer,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        f.write_str(&s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    /// Codes resolved; waiting for approval before execution.
    AwaitingApproval,
    Completed,
    /// The final query did not execute.
    NotExecutable,
    /// A stage failed for infrastructure reasons (provider, store, config).
    Failed,
}

impl RunStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, RunStatus::Completed | RunStatus::NotExecutable | RunStatus::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub stage: Stage,
    pub prompt: PromptSpec,
    pub completion: Completion,
}

/// One generated query and its probe outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqlAttempt {
    pub sql: String,
    pub extraction: SqlExtraction,
    pub error: Option<DbError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub run_id: String,
    pub question: String,
    /// Dataset pair this run evaluates, if any.
    pub case_id: Option<String>,
    pub config: PipelineConfig,
    pub status: RunStatus,
    pub entities: Vec<EntityMention>,
    /// Set when the extraction answer could not be parsed.
    pub extraction_flag: Option<String>,
    pub masked_question: Option<String>,
    pub retrieval: Vec<RetrievalHit>,
    pub exemplar_ids: Vec<String>,
    pub exchanges: Vec<Exchange>,
    pub attempts: Vec<SqlAttempt>,
    pub repairs_used: u32,
    pub sql_template: Option<String>,
    pub concepts: ConceptMap,
    pub final_sql: Option<String>,
    pub result: Option<QueryResult>,
    pub db_error: Option<DbError>,
    pub answer: Option<String>,
    pub failure: Option<StageFailure>,
    pub timings_ms: BTreeMap<String, u64>,
}

impl PipelineRun {
    pub fn new(question: &str, config: PipelineConfig) -> Self {
        Self {
            run_id: uuid::Uuid::new_v4().to_string(),
            question: question.to_string(),
            case_id: None,
            config,
            status: RunStatus::Running,
            entities: vec![],
            extraction_flag: None,
            masked_question: None,
            retrieval: vec![],
            exemplar_ids: vec![],
            exchanges: vec![],
            attempts: vec![],
            repairs_used: 0,
            sql_template: None,
            concepts: ConceptMap::new(),
            final_sql: None,
            result: None,
            db_error: None,
            answer: None,
            failure: None,
            timings_ms: BTreeMap::new(),
        }
    }

    fn fail(&mut self, stage: Stage, message: impl fmt::Display) {
        self.status = RunStatus::Failed;
        self.failure = Some(StageFailure {
            stage,
            message: message.to_string(),
        });
    }

    fn time(&mut self, stage: Stage, since: Instant) {
        *self.timings_ms.entry(stage.to_string()).or_default() += since.elapsed().as_millis() as u64;
    }

    pub fn executable(&self) -> bool {
        self.result.is_some()
    }

    /// Hash of the trace with run id and wall-clock fields removed.
    pub fn fingerprint(&self) -> String {
        let mut v = serde_json::to_value(self).expect("trace serializes");
        strip_volatile(&mut v);
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> std::io::Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.json", self.run_id));
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        std::fs::rename(&tmp, &path)?;
        Ok(path)
    }

    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

const VOLATILE: [&str; 4] = ["run_id", "timings_ms", "latency_ms", "elapsed_ms"];

fn strip_volatile(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(m) => {
            for k in VOLATILE {
                m.remove(k);
            }
            m.values_mut().for_each(strip_volatile);
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(strip_volatile),
        _ => {}
    }
}

#[derive(Deserialize)]
struct RawEntity {
    mention: String,
    domain: String,
}

/// Parses the extraction answer. `None` when it is not a JSON array of
/// `{mention, domain}`; entries with unknown domains are dropped.
pub fn parse_entities(text: &str) -> Option<Vec<EntityMention>> {
    let start = text.find('[')?;
    let end = text.rfind(']')?;
    if end < start {
        return None;
    }
    let raw: Vec<RawEntity> = serde_json::from_str(&text[start..=end]).ok()?;
    let mut seen = HashSet::new();
    Some(
        raw.into_iter()
            .filter_map(|r| {
                let domain: DomainTag = r.domain.trim().to_ascii_lowercase().parse().ok()?;
                let mention = r.mention.trim().to_string();
                (!mention.is_empty() && seen.insert(mention.to_lowercase())).then_some(EntityMention { mention, domain })
            })
            .collect(),
    )
}

/// Medical mentions in `question`. An unparseable answer yields an empty
/// list and `Some(reason)`.
pub fn extract_entities(
    question: &str,
    gateway: &LlmGateway,
    model: &ModelConfig,
    prompts: &PromptBuilder,
) -> Result<(Vec<EntityMention>, Option<String>, Exchange), LlmError> {
    let prompt = prompts.extraction(question);
    let completion = gateway.complete(&prompt, model)?;
    let (entities, flag) = match parse_entities(&completion.text) {
        Some(e) => (e, None),
        None => (vec![], Some("extraction answer is not a JSON entity list".to_string())),
    };
    Ok((
        entities,
        flag,
        Exchange {
            stage: Stage::Extraction,
            prompt,
            completion,
        },
    ))
}

/// Shared, read-only services a run needs.
#[derive(Clone)]
pub struct Pipeline {
    pub pairs: Arc<Vec<QuestionSqlPair>>,
    pub index: Arc<RetrievalIndex>,
    pub question_embedder: Arc<dyn Embedder>,
    pub coder: MedicalCoder,
    pub engine: Arc<dyn QueryEngine>,
    pub gateway: Arc<LlmGateway>,
    pub prompts: PromptBuilder,
}

/// Outcome of generation with repair.
#[derive(Debug, Clone, PartialEq)]
pub enum GenerationOutcome {
    Executable { template: SqlTemplate, repairs: u32 },
    NotExecutable { sql: String, repairs: u32, error: DbError },
}

impl Pipeline {
    fn pair(&self, id: &str) -> Option<&QuestionSqlPair> {
        self.pairs.iter().find(|p| p.id == id)
    }

    fn coder_for(&self, config: &PipelineConfig) -> MedicalCoder {
        let mut c = self.coder.clone();
        c.options = config.coding;
        c
    }

    /// Answers a free-form question end to end.
    pub fn answer_question(&self, question: &str, config: &PipelineConfig) -> PipelineRun {
        let mut run = self.prepare(question, None, config);
        if run.status == RunStatus::AwaitingApproval {
            self.execute(&mut run);
        }
        run
    }

    /// Runs a dataset pair with leave-one-out retrieval.
    pub fn run_case(&self, pair: &QuestionSqlPair, config: &PipelineConfig) -> PipelineRun {
        let mut run = self.prepare(&pair.question, Some(pair), config);
        if run.status == RunStatus::AwaitingApproval {
            self.execute(&mut run);
        }
        run
    }

    /// Stages up to and including coding. Leaves the run awaiting approval
    /// unless a stage failed or no executable query was produced.
    pub fn prepare(&self, question: &str, case: Option<&QuestionSqlPair>, config: &PipelineConfig) -> PipelineRun {
        let mut run = PipelineRun::new(question, config.clone());
        run.case_id = case.map(|p| p.id.clone());
        if let Err(e) = config.validate() {
            run.fail(Stage::Extraction, e);
            return run;
        }

        let t = Instant::now();
        match extract_entities(question, &self.gateway, &config.generator, &self.prompts) {
            Ok((entities, flag, ex)) => {
                run.entities = entities;
                run.extraction_flag = flag;
                run.exchanges.push(ex);
            }
            Err(e) => {
                run.fail(Stage::Extraction, e);
                return run;
            }
        }
        run.time(Stage::Extraction, t);

        let t = Instant::now();
        let masked = mask_question(question, &run.entities);
        run.masked_question = Some(masked.clone());
        let exemplars = match self.exemplars(&masked, question, case, config, &mut run) {
            Ok(e) => e,
            Err(msg) => {
                run.fail(Stage::Retrieval, msg);
                return run;
            }
        };
        run.time(Stage::Retrieval, t);

        let t = Instant::now();
        let outcome = match self.generate_sql_with_repair(question, &exemplars, config, &mut run) {
            Ok(o) => o,
            Err((stage, e)) => {
                run.fail(stage, e);
                return run;
            }
        };
        run.time(Stage::Generation, t);
        let template = match outcome {
            GenerationOutcome::Executable { template, .. } => template,
            GenerationOutcome::NotExecutable { error, .. } => {
                run.db_error = Some(error);
                run.status = RunStatus::NotExecutable;
                return run;
            }
        };

        let t = Instant::now();
        match self
            .coder_for(config)
            .resolve(&template, &self.gateway, &config.verifier, &self.prompts)
        {
            Ok(c) => run.concepts = c,
            Err(e) => {
                run.fail(Stage::Coding, e);
                return run;
            }
        }
        run.time(Stage::Coding, t);
        run.status = RunStatus::AwaitingApproval;
        run
    }

    /// Renders, executes and answers a prepared run.
    pub fn execute(&self, run: &mut PipelineRun) {
        let concepts = run.concepts.clone();
        self.execute_with(run, &concepts);
    }

    /// Like [`Pipeline::execute`] with reviewer-approved codes in place of
    /// the automatic resolution, which stays in the trace unchanged.
    pub fn execute_with(&self, run: &mut PipelineRun, concepts: &ConceptMap) {
        let Some(template_sql) = run.sql_template.clone() else {
            run.fail(Stage::Rendering, "no SQL template");
            return;
        };
        let template = match SqlTemplate::parse(&template_sql) {
            Ok(t) => t,
            Err(e) => {
                run.fail(Stage::Rendering, e);
                return;
            }
        };
        let sql = match render_sql(&template, concepts) {
            Ok(s) => s,
            Err(e) => {
                run.fail(Stage::Rendering, e);
                return;
            }
        };
        run.final_sql = Some(sql.clone());

        let t = Instant::now();
        let result = self.engine.execute(&sql, &run.config.limits);
        run.time(Stage::Execution, t);
        let result = match result {
            Ok(r) => r,
            Err(e) => {
                run.db_error = Some(e);
                run.status = RunStatus::NotExecutable;
                return;
            }
        };
        run.result = Some(result.clone());

        if run.config.generate_answer {
            let t = Instant::now();
            let prompt = self.prompts.answer(&run.question, &result, DEFAULT_ANSWER_ROW_CAP);
            match self.gateway.complete(&prompt, &run.config.generator) {
                Ok(c) => {
                    run.answer = Some(c.text.trim().to_string());
                    run.exchanges.push(Exchange {
                        stage: Stage::Answer,
                        prompt,
                        completion: c,
                    });
                }
                Err(e) => {
                    run.fail(Stage::Answer, e);
                    return;
                }
            }
            run.time(Stage::Answer, t);
        }
        run.status = RunStatus::Completed;
    }

    fn exemplars(
        &self,
        masked: &str,
        question: &str,
        case: Option<&QuestionSqlPair>,
        config: &PipelineConfig,
        run: &mut PipelineRun,
    ) -> Result<Vec<Exemplar>, String> {
        let exclusion = case
            .map(|p| Exclusion::leave_one_out(p, config.leave_out))
            .unwrap_or_else(Exclusion::none);
        let hits = match config.rag {
            RagMode::None => return Ok(vec![]),
            RagMode::Oracle => {
                let pair = case.ok_or("oracle mode needs a dataset question")?;
                run.exemplar_ids = vec![pair.id.clone()];
                return Ok(vec![Exemplar {
                    question: pair.question.clone(),
                    sql_template: pair.sql_template.clone(),
                }]);
            }
            RagMode::TopK { k } => {
                let q = self.question_embedder.embed(masked).map_err(|e| e.to_string())?;
                top_k_vector(&self.index, &q, k, &exclusion).map_err(|e| e.to_string())?
            }
            RagMode::Random { k } => {
                let q = self.question_embedder.embed(masked).map_err(|e| e.to_string())?;
                let digest = Sha256::digest(question.as_bytes());
                let salt = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
                random_hits(&self.index, &q, k, &exclusion, config.seed ^ salt).map_err(|e| e.to_string())?
            }
        };
        let mut out = Vec::with_capacity(hits.len());
        for h in &hits {
            let p = self.pair(&h.pair_id).ok_or_else(|| format!("index entry {} not in dataset", h.pair_id))?;
            out.push(Exemplar {
                question: p.question.clone(),
                sql_template: p.sql_template.clone(),
            });
        }
        run.exemplar_ids = hits.iter().map(|h| h.pair_id.clone()).collect();
        run.retrieval = hits;
        Ok(out)
    }

    /// Generates SQL and repairs it against database errors. Probes use
    /// rank-1 codes without verification.
    pub fn generate_sql_with_repair(
        &self,
        question: &str,
        exemplars: &[Exemplar],
        config: &PipelineConfig,
        run: &mut PipelineRun,
    ) -> Result<GenerationOutcome, (Stage, LlmError)> {
        let coder = self.coder_for(config);
        let prompt = self.prompts.generation(question, config.prompt_mode, exemplars);
        let mut completion = self
            .gateway
            .complete(&prompt, &config.generator)
            .map_err(|e| (Stage::Generation, e))?;
        run.exchanges.push(Exchange {
            stage: Stage::Generation,
            prompt,
            completion: completion.clone(),
        });
        let mut repairs = 0;
        loop {
            let (sql, extraction) = extract_sql(&completion.text);
            run.sql_template = Some(sql.clone());
            let probe = self.probe(&sql, &coder, config);
            run.attempts.push(SqlAttempt {
                sql: sql.clone(),
                extraction,
                error: probe.as_ref().err().cloned(),
            });
            let error = match probe {
                Ok(template) => {
                    run.repairs_used = repairs;
                    return Ok(GenerationOutcome::Executable { template, repairs });
                }
                Err(e) => e,
            };
            if repairs >= config.max_repair_attempts {
                run.repairs_used = repairs;
                return Ok(GenerationOutcome::NotExecutable { sql, repairs, error });
            }
            repairs += 1;
            let prompt = self
                .prompts
                .repair(question, &sql, &error.message, repairs, config.prompt_mode)
                .expect("attempt within validated bound");
            completion = self
                .gateway
                .complete(&prompt, &config.generator)
                .map_err(|e| (Stage::Repair, e))?;
            run.exchanges.push(Exchange {
                stage: Stage::Repair,
                prompt,
                completion: completion.clone(),
            });
        }
    }

    fn probe(&self, sql: &str, coder: &MedicalCoder, config: &PipelineConfig) -> Result<SqlTemplate, DbError> {
        let template = SqlTemplate::parse(sql)
            .map_err(|e| DbError::new(DbErrorCategory::Syntax, format!("placeholder syntax: {e}")))?;
        let codes = coder
            .resolve_rank1(&template)
            .map_err(|e| DbError::new(DbErrorCategory::Other, e.to_string()))?;
        let rendered = render_sql(&template, &codes).map_err(|e| DbError::new(DbErrorCategory::Other, e.to_string()))?;
        match config.probe {
            ProbeMode::Execute => self.engine.execute(&rendered, &config.limits).map(|_| ()),
            ProbeMode::Compile => self.engine.check(&rendered),
        }?;
        Ok(template)
    }
}
