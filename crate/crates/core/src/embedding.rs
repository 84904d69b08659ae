//! Embedding providers.
//!
//! Two implementations: a deterministic feature-hashing stub for offline use
//! and an HTTP client for OpenAI-compatible `/embeddings` endpoints.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Unit-length copy; `None` for a zero or non-finite vector.
    pub fn normalized(&self) -> Option<EmbeddingVector> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return None;
        }
        Some(EmbeddingVector::new(self.values.iter().map(|v| v / n).collect()))
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding provider error: {0}")]
    Provider(String),
    #[error("embedding provider returned {got} vectors for {expected} inputs")]
    Count { expected: usize, got: usize },
    #[error("embedding has dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("embedding contains non-finite or all-zero values")]
    Degenerate,
    #[error("no precomputed embedding for `{0}`")]
    Missing(String),
    #[error("embedding file {path} line {line}: {message}")]
    File { path: String, line: usize, message: String },
}

pub trait Embedder: Send + Sync {
    /// Identifier recorded in traces.
    fn model_id(&self) -> &str;

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError>;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let mut out = self.embed_batch(&[text.to_string()])?;
        out.pop().ok_or(EmbedError::Count { expected: 1, got: 0 })
    }
}

/// Deterministic hash-projection embedder.
///
/// Each lowercased word and each character trigram of a word is hashed with
/// SHA-256 into a signed bucket. Identical texts (up to ASCII case) embed
/// identically; texts sharing words or spelling fragments land nearby.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    model_id: String,
}

impl HashEmbedder {
    pub const DEFAULT_DIM: usize = 256;

    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "dimension must be positive");
        Self {
            dim,
            model_id: format!("hash-stub-{dim}"),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn add_feature(&self, values: &mut [f64], feature: &str, weight: f64) {
        let digest = Sha256::digest(feature.as_bytes());
        let mut idx_bytes = [0u8; 8];
        idx_bytes.copy_from_slice(&digest[..8]);
        let idx = (u64::from_le_bytes(idx_bytes) % self.dim as u64) as usize;
        let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
        values[idx] += sign * weight;
    }

    pub fn vector(&self, text: &str) -> EmbeddingVector {
        let mut values = vec![0.0; self.dim];
        let lower = text.to_lowercase();
        for word in lower
            .split(|c: char| !(c.is_alphanumeric() || c == '<' || c == '>'))
            .filter(|w| !w.is_empty())
        {
            self.add_feature(&mut values, &format!("w:{word}"), 1.0);
            let padded: Vec<char> = format!(" {word} ").chars().collect();
            for tri in padded.windows(3) {
                let t: String = tri.iter().collect();
                self.add_feature(&mut values, &format!("c:{t}"), 0.5);
            }
        }
        // Keeps empty or punctuation-only text away from the zero vector.
        self.add_feature(&mut values, "bias", 0.01);
        EmbeddingVector::new(values)
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIM)
    }
}

impl Embedder for HashEmbedder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

/// Client for an OpenAI-compatible `POST {base_url}/embeddings` endpoint.
pub struct HttpEmbedder {
    base_url: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
    #[serde(default)]
    index: Option<usize>,
}

impl HttpEmbedder {
    pub fn new(
        base_url: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Result<Self, EmbedError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| EmbedError::Provider(e.to_string()))?;
        Ok(Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key,
            client,
        })
    }
}

impl Embedder for HttpEmbedder {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let mut req = self
            .client
            .post(format!("{}/embeddings", self.base_url))
            .json(&EmbeddingRequest {
                model: &self.model,
                input: texts,
            });
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| EmbedError::Provider(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            return Err(EmbedError::Provider(format!("HTTP {status}: {body}")));
        }
        let mut parsed: EmbeddingResponse = resp.json().map_err(|e| EmbedError::Provider(e.to_string()))?;
        if parsed.data.len() != texts.len() {
            return Err(EmbedError::Count {
                expected: texts.len(),
                got: parsed.data.len(),
            });
        }
        parsed.data.sort_by_key(|d| d.index.unwrap_or(0));
        Ok(parsed.data.into_iter().map(|d| EmbeddingVector::new(d.embedding)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecomputedRecord {
    pub id: String,
    pub vector: Vec<f64>,
}

/// Reads a JSONL file of `{id, vector[]}` records.
///
/// `id_field` names the key column so the same reader serves `{concept_id, vector}`.
pub fn load_vectors_jsonl(
    path: impl AsRef<Path>,
    id_field: &str,
) -> Result<Vec<(String, EmbeddingVector)>, EmbedError> {
    let path = path.as_ref();
    let file_err = |line: usize, message: String| EmbedError::File {
        path: path.display().to_string(),
        line,
        message,
    };
    let file = File::open(path).map_err(|e| file_err(0, e.to_string()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| file_err(line_no, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| file_err(line_no, e.to_string()))?;
        let id = match value.get(id_field) {
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(serde_json::Value::Number(n)) => n.to_string(),
            _ => return Err(file_err(line_no, format!("missing `{id_field}`"))),
        };
        let vector: Vec<f64> = value
            .get("vector")
            .cloned()
            .ok_or_else(|| file_err(line_no, "missing `vector`".into()))
            .and_then(|v| serde_json::from_value(v).map_err(|e| file_err(line_no, e.to_string())))?;
        out.push((id, EmbeddingVector::new(vector)));
    }
    Ok(out)
}

/// Precomputed vectors keyed by id.
pub fn load_precomputed(path: impl AsRef<Path>) -> Result<HashMap<String, EmbeddingVector>, EmbedError> {
    Ok(load_vectors_jsonl(path, "id")?.into_iter().collect())
}
