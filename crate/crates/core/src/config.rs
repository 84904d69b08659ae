//! TOML configuration and service assembly.
//!
//! ```toml
//! [llm]
//! provider = "openai"
//! model = "gpt-4-turbo"
//! temperature = 0.0
//!
//! [pipeline]
//! mode = "rag-top1"
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coding::{read_ancestors_tsv, read_concepts_tsv, with_embedding_file, CodingError, MedicalCoder, OntologyStore};
use crate::dataset::{load_dataset, DatasetError};
use crate::embedding::{load_precomputed, EmbedError, Embedder, HashEmbedder, HttpEmbedder};
use crate::executor::{open_database, DbTarget, InitError};
use crate::llm::{provider_from_config, GatewayMode, LlmError, LlmGateway, ModelConfig};
use crate::pipeline::{ConfigError, Pipeline, PipelineConfig};
use crate::prompting::{PromptBuilder, PromptError, PromptTemplates};
use crate::retrieval::{build_index, build_index_precomputed, RetrievalError};
use crate::schema::SchemaCatalog;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    /// `hash` (deterministic stub) or `http` (OpenAI-compatible endpoint).
    pub provider: String,
    pub model: String,
    pub base_url: Option<String>,
    pub api_key_env: Option<String>,
    pub dim: usize,
    pub timeout_ms: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            provider: "hash".into(),
            model: String::new(),
            base_url: None,
            api_key_env: None,
            dim: HashEmbedder::DEFAULT_DIM,
            timeout_ms: 60_000,
        }
    }
}

impl EmbedderConfig {
    pub fn build(&self) -> Result<Arc<dyn Embedder>, EmbedError> {
        match self.provider.as_str() {
            "hash" => Ok(Arc::new(HashEmbedder::new(self.dim.max(1)))),
            "http" => {
                let base = self
                    .base_url
                    .clone()
                    .ok_or_else(|| EmbedError::Provider("http embedder needs base_url".into()))?;
                let key = self.api_key_env.as_ref().and_then(|v| std::env::var(v).ok());
                Ok(Arc::new(HttpEmbedder::new(
                    base,
                    self.model.clone(),
                    key,
                    Duration::from_millis(self.timeout_ms),
                )?))
            }
            other => Err(EmbedError::Provider(format!("unknown embedder `{other}` (hash or http)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineSection {
    /// Benchmark-style label such as `advanced` or `rag-top1`.
    pub mode: String,
    pub max_repair_attempts: u32,
    pub tolerance: f64,
    pub n_candidates: usize,
    pub expand_descendants: bool,
    pub seed: u64,
    pub timeout_ms: u64,
    pub max_rows: usize,
}

impl Default for PipelineSection {
    fn default() -> Self {
        let d = PipelineConfig::default();
        Self {
            mode: d.experiment_mode().label(),
            max_repair_attempts: d.max_repair_attempts,
            tolerance: d.tolerance,
            n_candidates: d.coding.n_candidates,
            expand_descendants: d.coding.expand_descendants,
            seed: d.seed,
            timeout_ms: d.limits.timeout.as_millis() as u64,
            max_rows: d.limits.max_rows,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsSection {
    pub dataset: PathBuf,
    pub database: String,
    /// Concept TSV; the bundled subset when unset.
    pub concepts: Option<PathBuf>,
    /// `{concept_id, vector}` JSONL; concepts are embedded on load when unset.
    pub concept_embeddings: Option<PathBuf>,
    /// `{id, vector}` JSONL for dataset questions.
    pub question_embeddings: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub transcripts: PathBuf,
    pub runs: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            dataset: "data/corpus/epi_questions.jsonl".into(),
            database: "epiquery.db".into(),
            concepts: None,
            concept_embeddings: None,
            question_embeddings: None,
            templates: None,
            transcripts: "transcripts".into(),
            runs: "runs".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub llm: ModelConfig,
    /// Verification model; the generator's settings when unset.
    pub verifier: Option<ModelConfig>,
    pub question_embedder: EmbedderConfig,
    pub mention_embedder: EmbedderConfig,
    pub pipeline: PipelineSection,
    pub paths: PathsSection,
    /// Global cap on concurrent provider requests.
    pub max_concurrent_requests: usize,
    /// Provider request rate; 0 disables the limiter.
    pub requests_per_second: f64,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            llm: ModelConfig::default(),
            verifier: None,
            question_embedder: EmbedderConfig::default(),
            mention_embedder: EmbedderConfig::default(),
            pipeline: PipelineSection::default(),
            paths: PathsSection::default(),
            max_concurrent_requests: LlmGateway::DEFAULT_CONCURRENCY,
            requests_per_second: 0.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum AppError {
    #[error("config file {path}: {message}")]
    File { path: String, message: String },
    #[error(transparent)]
    Pipeline(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Coding(#[from] CodingError),
    #[error(transparent)]
    Database(#[from] InitError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

impl AppConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, AppError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| AppError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text).map_err(|e| match e {
            AppError::File { message, .. } => AppError::File {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, AppError> {
        toml::from_str(text).map_err(|e| AppError::File {
            path: "<string>".into(),
            message: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Pipeline settings for one run, with `mode` overriding the configured mode.
    pub fn pipeline_config(&self, mode: Option<&str>) -> Result<PipelineConfig, ConfigError> {
        let s = &self.pipeline;
        let mut c = PipelineConfig {
            max_repair_attempts: s.max_repair_attempts,
            tolerance: s.tolerance,
            seed: s.seed,
            generator: self.llm.clone(),
            verifier: self.verifier.clone().unwrap_or_else(|| self.llm.clone()),
            ..PipelineConfig::default()
        };
        c.coding.n_candidates = s.n_candidates;
        c.coding.expand_descendants = s.expand_descendants;
        c.limits.timeout = Duration::from_millis(s.timeout_ms);
        c.limits.max_rows = s.max_rows;
        let c = c.with_mode(mode.unwrap_or(&s.mode))?;
        c.validate()?;
        Ok(c)
    }

    /// Loads the dataset, builds the index and store, opens the database and
    /// connects the gateway.
    pub fn build_pipeline(&self, mode: GatewayMode) -> Result<Pipeline, AppError> {
        let pairs = load_dataset(&self.paths.dataset)?;
        let question_embedder = self.question_embedder.build()?;
        let index = match &self.paths.question_embeddings {
            Some(p) => build_index_precomputed(&pairs, &load_precomputed(p)?, "precomputed")?,
            None => build_index(&pairs, question_embedder.as_ref())?,
        };
        let mention_embedder = self.mention_embedder.build()?;
        let concepts = match &self.paths.concepts {
            Some(c) => {
                let f = std::fs::File::open(c).map_err(|e| CodingError::File {
                    path: c.display().to_string(),
                    message: e.to_string(),
                })?;
                read_concepts_tsv(f)?
            }
            None => read_concepts_tsv(crate::executor::bundled_concepts_tsv().as_bytes())?,
        };
        let mut store = match &self.paths.concept_embeddings {
            Some(e) => with_embedding_file(concepts, e)?,
            None => OntologyStore::embed_with(concepts, mention_embedder.as_ref())?,
        };
        store.set_hierarchy(read_ancestors_tsv(crate::executor::bundled_ancestors_tsv().as_bytes())?);
        let db = open_database(&DbTarget::parse(&self.paths.database))?;
        let gateway = match mode {
            GatewayMode::Replay(dir) => LlmGateway::replay(dir),
            other => LlmGateway::new(provider_from_config(&self.llm)?, other),
        }
        .with_concurrency(self.max_concurrent_requests)
        .with_rate_limit(self.requests_per_second);
        let templates = match &self.paths.templates {
            Some(d) => PromptTemplates::load_dir(d)?,
            None => PromptTemplates::bundled(),
        };
        Ok(Pipeline {
            pairs: Arc::new(pairs),
            index: Arc::new(index),
            question_embedder,
            coder: MedicalCoder::new(Arc::new(store), mention_embedder),
            engine: Arc::new(db),
            gateway: Arc::new(gateway),
            prompts: PromptBuilder::new(templates, SchemaCatalog::bundled().summary()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::RagMode;
    use crate::prompting::PromptMode;

    #[test]
    fn parses_llm_section() {
        let c = AppConfig::parse(
            "[llm]\nprovider = \"anthropic\"\nmodel = \"claude-2.1\"\ntemperature = 0.2\n\n[pipeline]\nmode = \"rag-top2\"\n",
        )
        .unwrap();
        assert_eq!(c.llm.provider, "anthropic");
        assert_eq!(c.llm.model, "claude-2.1");
        assert_eq!(c.llm.max_retries, 3);
        let p = c.pipeline_config(None).unwrap();
        assert_eq!(p.rag, RagMode::TopK { k: 2 });
        assert_eq!(p.prompt_mode, PromptMode::Advanced);
        assert_eq!(p.verifier.model, "claude-2.1");
        assert_eq!(c.pipeline_config(Some("simple")).unwrap().rag, RagMode::None);
    }

    #[test]
    fn defaults_round_trip() {
        let c = AppConfig::default();
        assert_eq!(AppConfig::parse(&c.to_toml()).unwrap(), c);
        assert_eq!(AppConfig::parse("").unwrap(), c);
        let p = c.pipeline_config(None).unwrap();
        assert_eq!(p.max_repair_attempts, 3);
        assert_eq!(p.coding.n_candidates, 50);
        assert!((p.tolerance - 0.10).abs() < 1e-12);
        assert_eq!(p.generator.temperature, 0.0);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(AppConfig::parse("[llm]\ntemperature = \"hot\"").is_err());
        let c = AppConfig::parse("[pipeline]\nmax_repair_attempts = 5").unwrap();
        assert!(matches!(c.pipeline_config(None), Err(ConfigError::TooManyRepairs(5))));
        let c = AppConfig::parse("[llm]\ntemperature = -1.0").unwrap();
        assert!(c.pipeline_config(None).is_err());
    }

    #[test]
    fn unknown_embedder_rejected() {
        let e = EmbedderConfig {
            provider: "sapbert-local".into(),
            ..Default::default()
        };
        assert!(e.build().is_err());
    }

}
