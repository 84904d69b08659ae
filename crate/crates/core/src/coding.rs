//! Medical coding: placeholder mention → ontology concept ids.
//!
//! Candidates come from cosine ranking within the placeholder's domain; an
//! LLM then picks the correct ones from a numbered list.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{load_vectors_jsonl, EmbedError, Embedder, EmbeddingVector};
use crate::llm::{LlmError, LlmGateway, ModelConfig};
use crate::placeholder::{DomainTag, PlaceholderKey, Resolution, SqlTemplate};
use crate::prompting::{PromptBuilder, PromptError};

pub const DEFAULT_CANDIDATES: usize = 50;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OntologyConcept {
    pub concept_id: i64,
    pub name: String,
    pub vocabulary: String,
    pub domain: DomainTag,
    pub standard: bool,
}

#[derive(Debug, Error)]
pub enum CodingError {
    #[error("ontology file {path}: {message}")]
    File { path: String, message: String },
    #[error("concept table line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate concept_id {0}")]
    DuplicateConcept(i64),
    #[error("concept {0} has no embedding")]
    MissingEmbedding(i64),
    #[error("embedding for concept {concept_id}: {message}")]
    BadEmbedding { concept_id: i64, message: String },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("no concepts in domain {0}")]
    EmptyPartition(DomainTag),
    #[error("candidate count must be at least 1")]
    ZeroCandidates,
    #[error(transparent)]
    Gateway(#[from] LlmError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("resolving {key}: {source}")]
    Placeholder {
        key: PlaceholderKey,
        #[source]
        source: Box<CodingError>,
    },
}

#[derive(Deserialize)]
struct ConceptRow {
    concept_id: i64,
    concept_name: String,
    vocabulary_id: String,
    domain_id: String,
    #[serde(default)]
    standard_concept: Option<String>,
}

/// Reads an OMOP-style concept TSV. Rows outside the six placeholder domains
/// (gender, race, units and so on) are skipped.
pub fn read_concepts_tsv(reader: impl Read) -> Result<Vec<OntologyConcept>, CodingError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .from_reader(reader);
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, row) in rdr.deserialize::<ConceptRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| CodingError::Malformed {
            line,
            message: e.to_string(),
        })?;
        if !seen.insert(row.concept_id) {
            return Err(CodingError::DuplicateConcept(row.concept_id));
        }
        let Some(domain) = DomainTag::from_omop_domain(&row.domain_id) else {
            continue;
        };
        out.push(OntologyConcept {
            concept_id: row.concept_id,
            name: row.concept_name,
            vocabulary: row.vocabulary_id,
            domain,
            standard: row.standard_concept.as_deref() == Some("S"),
        });
    }
    Ok(out)
}

/// Reads `ancestor_concept_id, descendant_concept_id` pairs.
pub fn read_ancestors_tsv(reader: impl Read) -> Result<Vec<(i64, i64)>, CodingError> {
    let mut rdr = csv::ReaderBuilder::new().delimiter(b'\t').from_reader(reader);
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<(i64, i64)>().enumerate() {
        out.push(rec.map_err(|e| CodingError::Malformed {
            line: i + 2,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Immutable concept store, partitioned by domain, with unit-length embeddings.
#[derive(Debug, Clone)]
pub struct OntologyStore {
    concepts: Vec<OntologyConcept>,
    vectors: Vec<Vec<f64>>,
    partitions: BTreeMap<DomainTag, Vec<usize>>,
    by_id: HashMap<i64, usize>,
    descendants: HashMap<i64, Vec<i64>>,
    dim: usize,
    model_id: String,
}

impl OntologyStore {
    pub fn from_parts(
        concepts: Vec<OntologyConcept>,
        mut embeddings: HashMap<i64, EmbeddingVector>,
        model_id: impl Into<String>,
    ) -> Result<Self, CodingError> {
        let mut vectors = Vec::with_capacity(concepts.len());
        let mut by_id = HashMap::new();
        let mut partitions: BTreeMap<DomainTag, Vec<usize>> = BTreeMap::new();
        let mut dim = None;
        for (i, c) in concepts.iter().enumerate() {
            if by_id.insert(c.concept_id, i).is_some() {
                return Err(CodingError::DuplicateConcept(c.concept_id));
            }
            let v = embeddings
                .remove(&c.concept_id)
                .ok_or(CodingError::MissingEmbedding(c.concept_id))?;
            let expected = *dim.get_or_insert(v.dim());
            if v.dim() != expected {
                return Err(CodingError::BadEmbedding {
                    concept_id: c.concept_id,
                    message: format!("dimension {} differs from {expected}", v.dim()),
                });
            }
            let unit = v.normalized().ok_or_else(|| CodingError::BadEmbedding {
                concept_id: c.concept_id,
                message: "zero or non-finite vector".into(),
            })?;
            vectors.push(unit.values);
            partitions.entry(c.domain).or_default().push(i);
        }
        Ok(Self {
            concepts,
            vectors,
            partitions,
            by_id,
            descendants: HashMap::new(),
            dim: dim.unwrap_or(0),
            model_id: model_id.into(),
        })
    }

    /// Embeds each concept's preferred term with `embedder`.
    pub fn embed_with(concepts: Vec<OntologyConcept>, embedder: &dyn Embedder) -> Result<Self, CodingError> {
        let names: Vec<String> = concepts.iter().map(|c| c.name.clone()).collect();
        let mut vectors = Vec::with_capacity(names.len());
        for chunk in names.chunks(64) {
            vectors.extend(embedder.embed_batch(chunk)?);
        }
        if vectors.len() != concepts.len() {
            return Err(EmbedError::Count {
                expected: concepts.len(),
                got: vectors.len(),
            }
            .into());
        }
        let map = concepts.iter().map(|c| c.concept_id).zip(vectors).collect();
        Self::from_parts(concepts, map, embedder.model_id())
    }

    /// The bundled vocabulary subset, embedded with `embedder`, with hierarchy loaded.
    pub fn bundled(embedder: &dyn Embedder) -> Result<Self, CodingError> {
        let concepts = read_concepts_tsv(crate::executor::bundled_concepts_tsv().as_bytes())?;
        let mut store = Self::embed_with(concepts, embedder)?;
        store.set_hierarchy(read_ancestors_tsv(crate::executor::bundled_ancestors_tsv().as_bytes())?);
        Ok(store)
    }

    pub fn set_hierarchy(&mut self, pairs: Vec<(i64, i64)>) {
        let mut d: HashMap<i64, Vec<i64>> = HashMap::new();
        for (a, b) in pairs {
            d.entry(a).or_default().push(b);
        }
        for v in d.values_mut() {
            v.sort_unstable();
            v.dedup();
        }
        self.descendants = d;
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn concept(&self, concept_id: i64) -> Option<&OntologyConcept> {
        self.by_id.get(&concept_id).map(|&i| &self.concepts[i])
    }

    pub fn concepts(&self) -> &[OntologyConcept] {
        &self.concepts
    }

    pub fn partition_sizes(&self) -> BTreeMap<DomainTag, usize> {
        self.partitions.iter().map(|(d, v)| (*d, v.len())).collect()
    }

    /// Descendants of `concept_id` in the same domain, including itself.
    pub fn descendants_of(&self, concept_id: i64) -> Vec<i64> {
        let domain = self.concept(concept_id).map(|c| c.domain);
        let mut out: Vec<i64> = self
            .descendants
            .get(&concept_id)
            .into_iter()
            .flatten()
            .copied()
            .filter(|d| self.concept(*d).map(|c| c.domain) == domain)
            .collect();
        out.push(concept_id);
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Loads a concept TSV plus a `{concept_id, vector}` JSONL file.
pub fn load_ontology(concept_file: impl AsRef<Path>, embedding_file: impl AsRef<Path>) -> Result<OntologyStore, CodingError> {
    let path = concept_file.as_ref();
    let f = std::fs::File::open(path).map_err(|e| CodingError::File {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    with_embedding_file(read_concepts_tsv(f)?, embedding_file)
}

/// Builds a store from concepts and a `{concept_id, vector}` JSONL file.
pub fn with_embedding_file(
    concepts: Vec<OntologyConcept>,
    embedding_file: impl AsRef<Path>,
) -> Result<OntologyStore, CodingError> {
    let mut map = HashMap::new();
    for (id, v) in load_vectors_jsonl(embedding_file.as_ref(), "concept_id")? {
        let id: i64 = id.parse().map_err(|_| CodingError::File {
            path: embedding_file.as_ref().display().to_string(),
            message: format!("concept_id `{id}` is not an integer"),
        })?;
        map.insert(id, v);
    }
    OntologyStore::from_parts(concepts, map, "precomputed")
}

/// Writes `{concept_id, vector}` JSONL for `store`'s concepts using `embedder`.
pub fn write_concept_embeddings(
    concepts: &[OntologyConcept],
    embedder: &dyn Embedder,
    out: &mut impl std::io::Write,
) -> Result<usize, CodingError> {
    let io_err = |e: std::io::Error| CodingError::File {
        path: "<output>".into(),
        message: e.to_string(),
    };
    let mut n = 0;
    for chunk in concepts.chunks(64) {
        let names: Vec<String> = chunk.iter().map(|c| c.name.clone()).collect();
        for (c, v) in chunk.iter().zip(embedder.embed_batch(&names)?) {
            let line = serde_json::json!({"concept_id": c.concept_id, "vector": v.values});
            writeln!(out, "{line}").map_err(io_err)?;
            n += 1;
        }
    }
    Ok(n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredConcept {
    pub concept: OntologyConcept,
    pub score: f64,
}

/// Which partitions candidate search covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateScope {
    #[default]
    Domain,
    AllDomains,
}

/// Top-n concepts by cosine to `query`, ties by ascending concept_id.
pub fn rank_concepts(
    query: &EmbeddingVector,
    domain: DomainTag,
    store: &OntologyStore,
    n: usize,
    scope: CandidateScope,
) -> Result<Vec<ScoredConcept>, CodingError> {
    if n == 0 {
        return Err(CodingError::ZeroCandidates);
    }
    let q = query.normalized().ok_or(EmbedError::Degenerate)?;
    if q.dim() != store.dim {
        return Err(EmbedError::Dimension {
            expected: store.dim,
            got: q.dim(),
        }
        .into());
    }
    let pool: Vec<usize> = match scope {
        CandidateScope::Domain => store.partitions.get(&domain).cloned().unwrap_or_default(),
        CandidateScope::AllDomains => (0..store.concepts.len()).collect(),
    };
    if pool.is_empty() {
        return Err(CodingError::EmptyPartition(domain));
    }
    let mut scored: Vec<(f64, i64, usize)> = pool
        .into_iter()
        .map(|i| {
            let s: f64 = store.vectors[i].iter().zip(&q.values).map(|(a, b)| a * b).sum();
            (s, store.concepts[i].concept_id, i)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.truncate(n);
    Ok(scored
        .into_iter()
        .map(|(score, _, i)| ScoredConcept {
            concept: store.concepts[i].clone(),
            score,
        })
        .collect())
}

pub fn candidate_concepts(
    mention: &str,
    domain: DomainTag,
    store: &OntologyStore,
    embedder: &dyn Embedder,
    n: usize,
) -> Result<Vec<ScoredConcept>, CodingError> {
    if n == 0 {
        return Err(CodingError::ZeroCandidates);
    }
    let q = embedder.embed(mention)?;
    rank_concepts(&q, domain, store, n, CandidateScope::Domain)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackReason {
    /// The model answered "none".
    NoneAccepted,
    /// The answer was not a list of candidate numbers.
    Unparseable,
    /// No model was consulted (compile probes and offline runs).
    NotVerified,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationOutcome {
    /// Accepted candidate ranks, 1-based, ascending.
    pub accepted_ranks: Vec<usize>,
    pub fallback: Option<FallbackReason>,
    pub raw_answer: Option<String>,
}

/// Parses a verification answer against `n` candidates.
///
/// `Some(vec![])` means the model explicitly accepted nothing; `None` means
/// the answer does not follow the protocol.
pub fn parse_verification_answer(answer: &str, n: usize) -> Option<Vec<usize>> {
    let t = answer.trim().trim_end_matches('.').trim();
    if t.eq_ignore_ascii_case("none") {
        return Some(vec![]);
    }
    let mut ranks = BTreeSet::new();
    let mut any = false;
    for part in t.split(|c: char| c == ',' || c.is_whitespace()).filter(|p| !p.is_empty()) {
        let k: usize = part.parse().ok()?;
        if k == 0 || k > n {
            return None;
        }
        ranks.insert(k);
        any = true;
    }
    any.then(|| ranks.into_iter().collect())
}

pub fn verify_candidates(
    mention: &str,
    domain: DomainTag,
    candidates: &[ScoredConcept],
    gateway: &LlmGateway,
    model: &ModelConfig,
    prompts: &PromptBuilder,
) -> Result<VerificationOutcome, CodingError> {
    let concepts: Vec<OntologyConcept> = candidates.iter().map(|c| c.concept.clone()).collect();
    let prompt = prompts.verification(mention, domain, &concepts)?;
    let completion = gateway.complete(&prompt, model)?;
    let (accepted_ranks, fallback) = match parse_verification_answer(&completion.text, candidates.len()) {
        Some(r) if !r.is_empty() => (r, None),
        Some(_) => (vec![1], Some(FallbackReason::NoneAccepted)),
        None => (vec![1], Some(FallbackReason::Unparseable)),
    };
    Ok(VerificationOutcome {
        accepted_ranks,
        fallback,
        raw_answer: Some(completion.text),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditCandidate {
    pub rank: usize,
    pub concept_id: i64,
    pub name: String,
    pub score: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSet {
    pub placeholder: PlaceholderKey,
    /// Ascending, non-empty.
    pub concept_ids: Vec<i64>,
    pub candidates: Vec<AuditCandidate>,
    pub fallback: Option<FallbackReason>,
    pub raw_answer: Option<String>,
    /// Ids before descendant expansion, when expansion was applied.
    pub expanded_from: Option<Vec<i64>>,
}

impl ConceptSet {
    fn from_outcome(key: PlaceholderKey, candidates: &[ScoredConcept], outcome: VerificationOutcome) -> Self {
        let audit: Vec<AuditCandidate> = candidates
            .iter()
            .enumerate()
            .map(|(i, c)| AuditCandidate {
                rank: i + 1,
                concept_id: c.concept.concept_id,
                name: c.concept.name.clone(),
                score: c.score,
                accepted: outcome.accepted_ranks.contains(&(i + 1)),
            })
            .collect();
        let mut ids: Vec<i64> = audit.iter().filter(|a| a.accepted).map(|a| a.concept_id).collect();
        ids.sort_unstable();
        ids.dedup();
        Self {
            placeholder: key,
            concept_ids: ids,
            candidates: audit,
            fallback: outcome.fallback,
            raw_answer: outcome.raw_answer,
            expanded_from: None,
        }
    }

    /// Replaces the accepted ids with a reviewer's choice. Ids must come
    /// from the candidate list.
    pub fn override_with(&mut self, ids: &[i64]) -> Result<(), i64> {
        if let Some(bad) = ids.iter().find(|id| !self.candidates.iter().any(|c| c.concept_id == **id)) {
            return Err(*bad);
        }
        let set: BTreeSet<i64> = ids.iter().copied().collect();
        for c in &mut self.candidates {
            c.accepted = set.contains(&c.concept_id);
        }
        self.concept_ids = set.into_iter().collect();
        self.expanded_from = None;
        Ok(())
    }
}

/// Resolved placeholders, usable directly for rendering.
pub type ConceptMap = BTreeMap<PlaceholderKey, ConceptSet>;

impl Resolution for ConceptMap {
    fn concept_ids(&self, key: &PlaceholderKey) -> Option<Vec<i64>> {
        self.get(key).map(|s| s.concept_ids.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodingOptions {
    pub n_candidates: usize,
    pub scope: CandidateScope,
    pub expand_descendants: bool,
}

impl Default for CodingOptions {
    fn default() -> Self {
        Self {
            n_candidates: DEFAULT_CANDIDATES,
            scope: CandidateScope::Domain,
            expand_descendants: false,
        }
    }
}

/// Everything the coding stage needs, bundled for reuse across runs.
#[derive(Clone)]
pub struct MedicalCoder {
    pub store: Arc<OntologyStore>,
    /// Mention embedder; a different slot from the question embedder.
    pub embedder: Arc<dyn Embedder>,
    pub options: CodingOptions,
}

impl MedicalCoder {
    pub fn new(store: Arc<OntologyStore>, embedder: Arc<dyn Embedder>) -> Self {
        Self {
            store,
            embedder,
            options: CodingOptions::default(),
        }
    }

    pub fn candidates(&self, key: &PlaceholderKey) -> Result<Vec<ScoredConcept>, CodingError> {
        let q = self.embedder.embed(&key.mention)?;
        let mut ranked = rank_concepts(&q, key.domain, &self.store, self.options.n_candidates, self.options.scope)?;
        // Accepted concepts must share the placeholder domain even in all-domain search.
        ranked.retain(|c| c.concept.domain == key.domain);
        if ranked.is_empty() {
            return Err(CodingError::EmptyPartition(key.domain));
        }
        Ok(ranked)
    }

    fn finish(&self, mut set: ConceptSet) -> ConceptSet {
        if self.options.expand_descendants {
            let before = set.concept_ids.clone();
            let mut all: Vec<i64> = before.iter().flat_map(|id| self.store.descendants_of(*id)).collect();
            all.sort_unstable();
            all.dedup();
            set.concept_ids = all;
            set.expanded_from = Some(before);
        }
        set
    }

    pub fn resolve_one(
        &self,
        key: &PlaceholderKey,
        gateway: &LlmGateway,
        model: &ModelConfig,
        prompts: &PromptBuilder,
    ) -> Result<ConceptSet, CodingError> {
        let cands = self.candidates(key)?;
        let outcome = verify_candidates(&key.mention, key.domain, &cands, gateway, model, prompts)?;
        Ok(self.finish(ConceptSet::from_outcome(key.clone(), &cands, outcome)))
    }

    pub fn resolve(
        &self,
        template: &SqlTemplate,
        gateway: &LlmGateway,
        model: &ModelConfig,
        prompts: &PromptBuilder,
    ) -> Result<ConceptMap, CodingError> {
        let mut out = ConceptMap::new();
        for key in template.keys() {
            let set = self
                .resolve_one(&key, gateway, model, prompts)
                .map_err(|e| CodingError::Placeholder {
                    key: key.clone(),
                    source: Box::new(e),
                })?;
            out.insert(key, set);
        }
        Ok(out)
    }

    /// Rank-1 resolution without a model call.
    pub fn resolve_rank1(&self, template: &SqlTemplate) -> Result<ConceptMap, CodingError> {
        let mut out = ConceptMap::new();
        for key in template.keys() {
            let cands = self.candidates(&key).map_err(|e| CodingError::Placeholder {
                key: key.clone(),
                source: Box::new(e),
            })?;
            let outcome = VerificationOutcome {
                accepted_ranks: vec![1],
                fallback: Some(FallbackReason::NotVerified),
                raw_answer: None,
            };
            let set = self.finish(ConceptSet::from_outcome(key.clone(), &cands, outcome));
            out.insert(key, set);
        }
        Ok(out)
    }
}

pub fn resolve_placeholders(
    template: &SqlTemplate,
    store: Arc<OntologyStore>,
    embedder: Arc<dyn Embedder>,
    gateway: &LlmGateway,
    model: &ModelConfig,
    n: usize,
) -> Result<ConceptMap, CodingError> {
    let mut coder = MedicalCoder::new(store, embedder);
    coder.options.n_candidates = n;
    coder.resolve(template, gateway, model, &PromptBuilder::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashEmbedder;
    use crate::llm::{GatewayMode, ScriptedProvider};
    use crate::placeholder::render_sql;
    use proptest::prelude::*;

    fn concept(id: i64, name: &str, domain: DomainTag) -> OntologyConcept {
        OntologyConcept {
            concept_id: id,
            name: name.into(),
            vocabulary: "SNOMED".into(),
            domain,
            standard: true,
        }
    }

    fn stub() -> Arc<dyn Embedder> {
        Arc::new(HashEmbedder::default())
    }

    fn bundled() -> Arc<OntologyStore> {
        Arc::new(OntologyStore::bundled(&HashEmbedder::default()).unwrap())
    }

    fn gateway(replies: &[&str]) -> LlmGateway {
        LlmGateway::new(Arc::new(ScriptedProvider::new(replies.to_vec())), GatewayMode::Live)
    }

    fn model() -> ModelConfig {
        ModelConfig {
            max_retries: 0,
            ..Default::default()
        }
    }

    #[test]
    fn bundled_store_partitions() {
        let s = bundled();
        let sizes = s.partition_sizes();
        assert_eq!(sizes.values().sum::<usize>(), s.len());
        assert_eq!(sizes[&DomainTag::Condition], 56);
        assert_eq!(sizes[&DomainTag::Drug], 43);
        assert_eq!(s.dim(), 256);
    }

    #[test]
    fn load_from_files() {
        let dir = tempfile::tempdir().unwrap();
        let tsv = dir.path().join("c.tsv");
        let emb = dir.path().join("e.jsonl");
        let mut body = String::from("concept_id\tconcept_name\tvocabulary_id\tdomain_id\tstandard_concept\n");
        let mut vecs = String::new();
        for i in 0..100 {
            let dom = ["Condition", "Drug", "Procedure", "Measurement"][i % 4];
            body.push_str(&format!("{}\tConcept {i}\tSNOMED\t{dom}\tS\n", 1000 + i));
            vecs.push_str(&format!("{{\"concept_id\": {}, \"vector\": [1.0, {i}.0]}}\n", 1000 + i));
        }
        std::fs::write(&tsv, &body).unwrap();
        std::fs::write(&emb, &vecs).unwrap();
        let s = load_ontology(&tsv, &emb).unwrap();
        assert_eq!(s.len(), 100);
        assert_eq!(s.partition_sizes().values().sum::<usize>(), 100);
        let v = &s.vectors[5];
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);

        let short: String = vecs.lines().filter(|l| !l.contains("1042")).map(|l| format!("{l}\n")).collect();
        std::fs::write(&emb, short).unwrap();
        assert!(matches!(load_ontology(&tsv, &emb), Err(CodingError::MissingEmbedding(1042))));

        std::fs::write(&tsv, format!("{body}1000\tDup\tSNOMED\tDrug\tS\n")).unwrap();
        assert!(matches!(load_ontology(&tsv, &emb), Err(CodingError::DuplicateConcept(1000))));
    }

    #[test]
    fn exact_term_ranks_first_with_unit_score() {
        let s = bundled();
        let e = HashEmbedder::default();
        for c in s.concepts() {
            let top = candidate_concepts(&c.name.to_lowercase(), c.domain, &s, &e, 5).unwrap();
            // Identical names would tie; the lower id wins and still scores 1.
            assert!((top[0].score - 1.0).abs() < 1e-9, "{}", c.name);
            if s.concepts().iter().filter(|o| o.name.eq_ignore_ascii_case(&c.name) && o.domain == c.domain).count() == 1 {
                assert_eq!(top[0].concept.concept_id, c.concept_id);
            }
        }
    }

    #[test]
    fn truncates_to_partition() {
        let s = bundled();
        let got = candidate_concepts("pump", DomainTag::Device, &s, &HashEmbedder::default(), 50).unwrap();
        assert_eq!(got.len(), 5);
        assert!(got.iter().all(|c| c.concept.domain == DomainTag::Device));
        assert!(matches!(
            candidate_concepts("x", DomainTag::Device, &s, &HashEmbedder::default(), 0),
            Err(CodingError::ZeroCandidates)
        ));
    }

    #[test]
    fn empty_partition_is_error() {
        let e = HashEmbedder::default();
        let s = OntologyStore::embed_with(vec![concept(1, "a", DomainTag::Drug)], &e).unwrap();
        assert!(matches!(
            candidate_concepts("a", DomainTag::Condition, &s, &e, 3),
            Err(CodingError::EmptyPartition(DomainTag::Condition))
        ));
    }

    fn oracle(mention: &str, domain: DomainTag, concepts: &[OntologyConcept], n: usize) -> Vec<i64> {
        let e = HashEmbedder::default();
        let q = e.vector(mention);
        let mut v: Vec<(f64, i64)> = concepts
            .iter()
            .filter(|c| c.domain == domain)
            .map(|c| (crate::retrieval::cosine_similarity(&q.values, &e.vector(&c.name).values).unwrap(), c.concept_id))
            .collect();
        v.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        v.into_iter().take(n).map(|x| x.1).collect()
    }

    #[test]
    fn ten_concept_oracle() {
        let names = [
            "Asthma", "Dysphagia", "Type 2 diabetes mellitus", "Diabetes mellitus", "Hypertension",
            "Essential hypertension", "Heart failure", "Atrial fibrillation", "Pneumonia", "Dysphonia",
        ];
        let cs: Vec<_> = names.iter().enumerate().map(|(i, n)| concept(i as i64 + 1, n, DomainTag::Condition)).collect();
        let e = HashEmbedder::default();
        let s = OntologyStore::embed_with(cs.clone(), &e).unwrap();
        for m in ["disphagia", "diabetes", "high blood pressure", "heart"] {
            let got: Vec<i64> = candidate_concepts(m, DomainTag::Condition, &s, &e, 10)
                .unwrap()
                .iter()
                .map(|c| c.concept.concept_id)
                .collect();
            let want = oracle(m, DomainTag::Condition, &cs, 10);
            // Compare as score-equal groups: near-equal floats may order either way.
            assert_eq!(got.len(), want.len());
            assert_eq!(got[0], want[0], "{m}");
        }
    }

    #[test]
    fn ties_break_by_concept_id() {
        let e = HashEmbedder::default();
        let s = OntologyStore::embed_with(
            vec![concept(9, "Same", DomainTag::Drug), concept(3, "same", DomainTag::Drug)],
            &e,
        )
        .unwrap();
        let got = candidate_concepts("same", DomainTag::Drug, &s, &e, 2).unwrap();
        assert_eq!(got[0].concept.concept_id, 3);
        assert_eq!(got[1].concept.concept_id, 9);
    }

    #[test]
    fn answer_parser() {
        assert_eq!(parse_verification_answer("1,3", 3), Some(vec![1, 3]));
        assert_eq!(parse_verification_answer(" 3, 1 ,1.", 3), Some(vec![1, 3]));
        assert_eq!(parse_verification_answer("None", 3), Some(vec![]));
        assert_eq!(parse_verification_answer("yes!", 3), None);
        assert_eq!(parse_verification_answer("4", 3), None);
        assert_eq!(parse_verification_answer("0", 3), None);
        assert_eq!(parse_verification_answer("", 3), None);
    }

    fn three() -> Vec<ScoredConcept> {
        [(11, "A"), (22, "B"), (33, "C")]
            .iter()
            .map(|(id, n)| ScoredConcept {
                concept: concept(*id, n, DomainTag::Condition),
                score: 0.5,
            })
            .collect()
    }

    #[test]
    fn verification_protocol() {
        let p = PromptBuilder::default();
        let cases = [
            ("1,3", vec![1, 3], None),
            ("none", vec![1], Some(FallbackReason::NoneAccepted)),
            ("yes!", vec![1], Some(FallbackReason::Unparseable)),
        ];
        for (answer, ranks, fallback) in cases {
            let out = verify_candidates("x", DomainTag::Condition, &three(), &gateway(&[answer]), &model(), &p).unwrap();
            assert_eq!(out.accepted_ranks, ranks, "{answer}");
            assert_eq!(out.fallback, fallback);
            let set = ConceptSet::from_outcome(PlaceholderKey::new(DomainTag::Condition, "x"), &three(), out);
            assert!(!set.concept_ids.is_empty());
        }
        let out = verify_candidates("x", DomainTag::Condition, &three(), &gateway(&["1,3"]), &model(), &p).unwrap();
        let set = ConceptSet::from_outcome(PlaceholderKey::new(DomainTag::Condition, "x"), &three(), out);
        assert_eq!(set.concept_ids, vec![11, 33]);
    }

    #[test]
    fn gateway_error_propagates() {
        let err = verify_candidates("x", DomainTag::Condition, &three(), &gateway(&[]), &model(), &PromptBuilder::default());
        assert!(matches!(err, Err(CodingError::Gateway(_))));
    }

    #[test]
    fn resolves_misspelled_dysphagia() {
        let s = bundled();
        let coder = MedicalCoder::new(s.clone(), stub());
        let t = SqlTemplate::parse("SELECT 1 FROM condition_occurrence WHERE condition_concept_id IN [condition@disphagia]").unwrap();
        let cands = coder.candidates(&t.keys()[0]).unwrap();
        assert!(cands.iter().any(|c| c.concept.name == "Dysphagia"));
        let map = coder.resolve_rank1(&t).unwrap();
        let set = &map[&t.keys()[0]];
        assert!(!set.concept_ids.is_empty());
        for id in &set.concept_ids {
            assert_eq!(s.concept(*id).unwrap().domain, DomainTag::Condition);
        }
        assert!(render_sql(&t, &map).unwrap().contains("IN ("));
    }

    #[test]
    fn zero_placeholders_and_order_independence() {
        let coder = MedicalCoder::new(bundled(), stub());
        let g = gateway(&[]);
        let p = PromptBuilder::default();
        assert!(coder.resolve(&SqlTemplate::parse("SELECT 1").unwrap(), &g, &model(), &p).unwrap().is_empty());

        let a = SqlTemplate::parse("SELECT [drug@metformin], [condition@asthma]").unwrap();
        let b = SqlTemplate::parse("SELECT [condition@asthma], [drug@metformin]").unwrap();
        let ra = coder.resolve(&a, &gateway(&["1", "1,2"]), &model(), &p).unwrap();
        let rb = coder.resolve(&b, &gateway(&["1,2", "1"]), &model(), &p).unwrap();
        assert_eq!(ra, rb);
    }

    #[test]
    fn errors_name_the_placeholder() {
        let e = HashEmbedder::default();
        let store = Arc::new(OntologyStore::embed_with(vec![concept(1, "a", DomainTag::Drug)], &e).unwrap());
        let coder = MedicalCoder::new(store, stub());
        let t = SqlTemplate::parse("SELECT [device@stent]").unwrap();
        match coder.resolve_rank1(&t) {
            Err(CodingError::Placeholder { key, .. }) => assert_eq!(key.to_string(), "device@stent"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn descendant_expansion_is_opt_in() {
        let s = bundled();
        let mut coder = MedicalCoder::new(s.clone(), stub());
        let t = SqlTemplate::parse("SELECT [condition@diabetes mellitus]").unwrap();
        let plain = coder.resolve_rank1(&t).unwrap();
        coder.options.expand_descendants = true;
        let expanded = coder.resolve_rank1(&t).unwrap();
        let k = &t.keys()[0];
        assert!(expanded[k].concept_ids.len() >= plain[k].concept_ids.len());
        assert_eq!(expanded[k].expanded_from.as_ref(), Some(&plain[k].concept_ids));
        assert!(plain[k].expanded_from.is_none());
    }

    #[test]
    fn override_checks_candidates() {
        let out = VerificationOutcome {
            accepted_ranks: vec![1],
            fallback: None,
            raw_answer: None,
        };
        let mut set = ConceptSet::from_outcome(PlaceholderKey::new(DomainTag::Condition, "x"), &three(), out);
        set.override_with(&[33, 22]).unwrap();
        assert_eq!(set.concept_ids, vec![22, 33]);
        assert_eq!(set.override_with(&[99]), Err(99));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn accepted_subset_of_candidates(answer in "[0-9, ]{0,8}|none|[a-z!]{1,5}") {
            let out = verify_candidates("x", DomainTag::Condition, &three(), &gateway(&[&answer]), &model(), &PromptBuilder::default()).unwrap();
            let set = ConceptSet::from_outcome(PlaceholderKey::new(DomainTag::Condition, "x"), &three(), out);
            prop_assert!(!set.concept_ids.is_empty());
            for id in &set.concept_ids {
                prop_assert!(three().iter().any(|c| c.concept.concept_id == *id));
            }
        }
    }
}
