//! Entity-masked exemplar retrieval.
//!
//! Questions are embedded after their medical mentions are replaced by domain
//! labels, so that retrieval matches the shape of a question rather than the
//! drug or condition it names. The index is a flat list scanned exhaustively.

use std::collections::{BTreeSet, HashMap};
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{EntityMention, QuestionSqlPair};
use crate::embedding::{EmbedError, Embedder, EmbeddingVector};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("embedding failed for pair `{pair_id}`: {source}")]
    Provider {
        pair_id: String,
        #[source]
        source: EmbedError,
    },
    #[error("embedding the query failed: {0}")]
    Query(#[source] EmbedError),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("no index entries left after exclusion")]
    EmptyAfterExclusion,
    #[error("vector dimension {got} does not match index dimension {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("zero-norm or non-finite vector")]
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum VectorError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero-norm vector")]
    ZeroNorm,
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, VectorError> {
    if u.len() != v.len() {
        return Err(VectorError::DimensionMismatch(u.len(), v.len()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|b| b * b).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(VectorError::ZeroNorm);
    }
    Ok(dot / (nu * nv))
}

fn mask_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<(?:CONDITION|DRUG|PROCEDURE|MEASUREMENT|OBSERVATION|DEVICE)>").unwrap())
}

fn mention_regex(mention: &str) -> Option<Regex> {
    let trimmed = mention.trim();
    if trimmed.is_empty() {
        return None;
    }
    let word = |c: Option<char>| c.is_some_and(|c| c.is_alphanumeric() || c == '_');
    let mut pat = String::from("(?i)");
    if word(trimmed.chars().next()) {
        pat.push_str(r"\b");
    }
    pat.push_str(&regex::escape(trimmed));
    if word(trimmed.chars().last()) {
        pat.push_str(r"\b");
    }
    Regex::new(&pat).ok()
}

/// Replaces each mention by its domain label, e.g. `<DRUG>`.
///
/// Matching is case-insensitive and on word boundaries. Longer mentions are
/// masked first, and text already inside a label is never touched, so masking
/// is idempotent.
pub fn mask_question(question: &str, entities: &[EntityMention]) -> String {
    let mut ordered: Vec<&EntityMention> = entities.iter().collect();
    ordered.sort_by(|a, b| {
        b.mention
            .trim()
            .chars()
            .count()
            .cmp(&a.mention.trim().chars().count())
            .then_with(|| a.mention.cmp(&b.mention))
    });
    let mut text = question.to_string();
    for e in ordered {
        let Some(re) = mention_regex(&e.mention) else { continue };
        let label = e.domain.mask_label();
        let mut out = String::with_capacity(text.len());
        let mut cursor = 0;
        for m in mask_pattern().find_iter(&text) {
            out.push_str(&re.replace_all(&text[cursor..m.start()], label.as_str()));
            out.push_str(m.as_str());
            cursor = m.end();
        }
        out.push_str(&re.replace_all(&text[cursor..], label.as_str()));
        text = out;
    }
    text
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub pair_id: String,
    pub paraphrase_group: String,
    pub masked_question: String,
    /// Unit length.
    pub vector: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalIndex {
    pub entries: Vec<IndexEntry>,
    pub dim: usize,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub pair_id: String,
    pub score: f64,
}

/// Which pairs a search must skip.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub groups: BTreeSet<String>,
    pub ids: BTreeSet<String>,
}

/// How much of the evaluated question leave-one-out removes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeaveOut {
    /// The question and all its paraphrases.
    #[default]
    Group,
    /// Only the question itself.
    QuestionOnly,
}

impl Exclusion {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn leave_one_out(pair: &QuestionSqlPair, mode: LeaveOut) -> Self {
        let mut ex = Exclusion::default();
        match mode {
            LeaveOut::Group => {
                ex.groups.insert(pair.paraphrase_group.clone());
            }
            LeaveOut::QuestionOnly => {
                ex.ids.insert(pair.id.clone());
            }
        }
        ex
    }

    pub fn excludes(&self, entry: &IndexEntry) -> bool {
        self.groups.contains(&entry.paraphrase_group) || self.ids.contains(&entry.pair_id)
    }
}

const BATCH: usize = 32;

fn unit(v: EmbeddingVector, expected_dim: Option<usize>) -> Result<EmbeddingVector, EmbedError> {
    if let Some(d) = expected_dim {
        if v.dim() != d {
            return Err(EmbedError::Dimension {
                expected: d,
                got: v.dim(),
            });
        }
    }
    if !v.is_finite() {
        return Err(EmbedError::Degenerate);
    }
    v.normalized().ok_or(EmbedError::Degenerate)
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, pair_id: &str) -> Option<&IndexEntry> {
        self.entries.iter().find(|e| e.pair_id == pair_id)
    }

    fn assemble(
        pairs: &[QuestionSqlPair],
        masked: Vec<String>,
        vectors: Vec<EmbeddingVector>,
        model_id: String,
    ) -> Result<Self, RetrievalError> {
        let dim = vectors.first().map_or(0, EmbeddingVector::dim);
        let mut entries = Vec::with_capacity(pairs.len());
        for ((p, m), v) in pairs.iter().zip(masked).zip(vectors) {
            let vector = unit(v, Some(dim)).map_err(|source| RetrievalError::Provider {
                pair_id: p.id.clone(),
                source,
            })?;
            entries.push(IndexEntry {
                pair_id: p.id.clone(),
                paraphrase_group: p.paraphrase_group.clone(),
                masked_question: m,
                vector,
            });
        }
        Ok(Self { entries, dim, model_id })
    }
}

/// Embeds each pair's masked question, in parallel batches.
///
/// When a batch fails its items are retried one by one so the error can name
/// the pair responsible.
pub fn build_index(pairs: &[QuestionSqlPair], embedder: &dyn Embedder) -> Result<RetrievalIndex, RetrievalError> {
    let masked: Vec<String> = pairs.iter().map(|p| mask_question(&p.question, &p.entities)).collect();
    let chunks: Vec<(usize, &[String])> = masked.chunks(BATCH).enumerate().collect();
    let results: Vec<Result<Vec<EmbeddingVector>, RetrievalError>> = std::thread::scope(|s| {
        let handles: Vec<_> = chunks
            .iter()
            .map(|&(ci, texts)| {
                s.spawn(move || match embedder.embed_batch(texts) {
                    Ok(v) if v.len() == texts.len() => Ok(v),
                    _ => texts
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            embedder.embed(t).map_err(|source| RetrievalError::Provider {
                                pair_id: pairs[ci * BATCH + j].id.clone(),
                                source,
                            })
                        })
                        .collect(),
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("embedding worker panicked")).collect()
    });
    let mut vectors = Vec::with_capacity(pairs.len());
    for r in results {
        vectors.extend(r?);
    }
    RetrievalIndex::assemble(pairs, masked, vectors, embedder.model_id().to_string())
}

/// Builds the index from precomputed vectors keyed by pair id.
pub fn build_index_precomputed(
    pairs: &[QuestionSqlPair],
    vectors: &HashMap<String, EmbeddingVector>,
    model_id: &str,
) -> Result<RetrievalIndex, RetrievalError> {
    let masked: Vec<String> = pairs.iter().map(|p| mask_question(&p.question, &p.entities)).collect();
    let vs = pairs
        .iter()
        .map(|p| {
            vectors.get(&p.id).cloned().ok_or_else(|| RetrievalError::Provider {
                pair_id: p.id.clone(),
                source: EmbedError::Missing(p.id.clone()),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    RetrievalIndex::assemble(pairs, masked, vs, model_id.to_string())
}

fn rank(mut hits: Vec<RetrievalHit>) -> Vec<RetrievalHit> {
    hits.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.pair_id.cmp(&b.pair_id)));
    hits
}

/// Top-k hits for an already embedded query.
pub fn top_k_vector(
    index: &RetrievalIndex,
    query: &EmbeddingVector,
    k: usize,
    exclude: &Exclusion,
) -> Result<Vec<RetrievalHit>, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    if query.dim() != index.dim && !index.is_empty() {
        return Err(RetrievalError::Dimension {
            expected: index.dim,
            got: query.dim(),
        });
    }
    let q = query.normalized().ok_or(RetrievalError::Degenerate)?;
    let hits: Vec<RetrievalHit> = index
        .entries
        .iter()
        .filter(|e| !exclude.excludes(e))
        .map(|e| RetrievalHit {
            pair_id: e.pair_id.clone(),
            score: q.dot(&e.vector).clamp(-1.0, 1.0),
        })
        .collect();
    if hits.is_empty() {
        return Err(RetrievalError::EmptyAfterExclusion);
    }
    let mut ranked = rank(hits);
    ranked.truncate(k);
    Ok(ranked)
}

/// The k most similar entries to `masked_query` that are not excluded.
pub fn top_k(
    index: &RetrievalIndex,
    masked_query: &str,
    k: usize,
    exclude: &Exclusion,
    embedder: &dyn Embedder,
) -> Result<Vec<RetrievalHit>, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    let q = embedder.embed(masked_query).map_err(RetrievalError::Query)?;
    top_k_vector(index, &q, k, exclude)
}

/// k entries drawn uniformly from the filtered index with a seeded generator.
///
/// Scores are the cosine to `query` so traces stay comparable with top-k runs.
pub fn random_hits(
    index: &RetrievalIndex,
    query: &EmbeddingVector,
    k: usize,
    exclude: &Exclusion,
    seed: u64,
) -> Result<Vec<RetrievalHit>, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    let q = query.normalized().ok_or(RetrievalError::Degenerate)?;
    let pool: Vec<&IndexEntry> = index.entries.iter().filter(|e| !exclude.excludes(e)).collect();
    if pool.is_empty() {
        return Err(RetrievalError::EmptyAfterExclusion);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(pool
        .choose_multiple(&mut rng, k.min(pool.len()))
        .map(|e| RetrievalHit {
            pair_id: e.pair_id.clone(),
            score: q.dot(&e.vector).clamp(-1.0, 1.0),
        })
        .collect())
}
