//! Text-to-SQL over OMOP CDM databases with retrieval-augmented prompting,
//! self-repair and LLM-verified medical coding.

pub mod coding;
pub mod config;
pub mod dataset;
pub mod embedding;
pub mod evaluation;
pub mod executor;
pub mod llm;
pub mod pipeline;
pub mod placeholder;
pub mod prompting;
pub mod retrieval;
pub mod schema;
pub mod sql_lex;

pub use coding::{ConceptMap, ConceptSet, MedicalCoder, OntologyConcept, OntologyStore};
pub use config::AppConfig;
pub use dataset::{EntityMention, QuestionSqlPair};
pub use embedding::{Embedder, EmbeddingVector, HashEmbedder};
pub use evaluation::{EvalReport, ModeReport, Verdict};
pub use executor::{Cell, Database, DbError, DbTarget, ExecLimits, QueryEngine, QueryResult};
pub use llm::{GatewayMode, LlmError, LlmGateway, ModelConfig};
pub use pipeline::{Pipeline, PipelineConfig, PipelineRun, RunStatus};
pub use placeholder::{DomainTag, PlaceholderKey, SqlTemplate};
pub use prompting::{PromptMode, PromptSpec};
pub use retrieval::{RetrievalHit, RetrievalIndex};
