//! Question/SQL corpus: loading, validation and summary statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::placeholder::{extract_placeholders, DomainTag, PlaceholderError};
use crate::schema::SchemaCatalog;
use crate::sql_lex;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntityMention {
    pub mention: String,
    pub domain: DomainTag,
}

impl EntityMention {
    pub fn new(mention: impl Into<String>, domain: DomainTag) -> Self {
        Self {
            mention: mention.into(),
            domain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionSqlPair {
    pub id: String,
    pub question: String,
    pub sql_template: String,
    pub paraphrase_group: String,
    pub entities: Vec<EntityMention>,
    #[serde(default)]
    pub tags: Vec<String>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read dataset {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate id `{id}` (first seen on line {first_line})")]
    DuplicateId { line: usize, id: String, first_line: usize },
    #[error("line {line}: record `{id}` has an empty {field}")]
    EmptyField { line: usize, id: String, field: &'static str },
    #[error("line {line}: record `{id}`: {source}")]
    Template {
        line: usize,
        id: String,
        #[source]
        source: PlaceholderError,
    },
    #[error("line {line}: record `{id}`: placeholder `{placeholder}` has no matching entity")]
    EntityMismatch { line: usize, id: String, placeholder: String },
}

impl DatasetError {
    /// 1-based line number of the offending record, if any.
    pub fn line(&self) -> Option<usize> {
        match self {
            DatasetError::Io { .. } => None,
            DatasetError::Malformed { line, .. }
            | DatasetError::DuplicateId { line, .. }
            | DatasetError::EmptyField { line, .. }
            | DatasetError::Template { line, .. }
            | DatasetError::EntityMismatch { line, .. } => Some(*line),
        }
    }
}

fn check_pair(pair: &QuestionSqlPair, line: usize) -> Result<(), DatasetError> {
    for (field, value) in [
        ("id", &pair.id),
        ("question", &pair.question),
        ("paraphrase_group", &pair.paraphrase_group),
    ] {
        if value.trim().is_empty() {
            return Err(DatasetError::EmptyField {
                line,
                id: pair.id.clone(),
                field,
            });
        }
    }
    let template = extract_placeholders(&pair.sql_template).map_err(|source| DatasetError::Template {
        line,
        id: pair.id.clone(),
        source,
    })?;
    for p in &template.placeholders {
        let matched = pair
            .entities
            .iter()
            .any(|e| e.domain == p.domain && e.mention == p.mention);
        if !matched {
            return Err(DatasetError::EntityMismatch {
                line,
                id: pair.id.clone(),
                placeholder: p.token(),
            });
        }
    }
    Ok(())
}

/// Parses JSONL from a reader. Blank lines are skipped but still counted.
pub fn read_dataset(reader: impl BufRead) -> Result<Vec<QuestionSqlPair>, DatasetError> {
    let mut pairs = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let text = line.map_err(|e| DatasetError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if text.trim().is_empty() {
            continue;
        }
        let pair: QuestionSqlPair = serde_json::from_str(&text).map_err(|e| DatasetError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if let Some(&first_line) = seen.get(&pair.id) {
            return Err(DatasetError::DuplicateId {
                line: line_no,
                id: pair.id,
                first_line,
            });
        }
        check_pair(&pair, line_no)?;
        seen.insert(pair.id.clone(), line_no);
        pairs.push(pair);
    }
    Ok(pairs)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<QuestionSqlPair>, DatasetError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_dataset(BufReader::new(file))
}

pub fn write_dataset(path: impl AsRef<Path>, pairs: &[QuestionSqlPair]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
}

impl Summary {
    /// Computed from integer sums so the result does not depend on input order.
    pub fn of_counts(values: &[u64]) -> Summary {
        let n = values.len() as u128;
        if n == 0 {
            return Summary::default();
        }
        let sum: u128 = values.iter().map(|&v| v as u128).sum();
        let sum_sq: u128 = values.iter().map(|&v| (v as u128) * (v as u128)).sum();
        let mean = sum as f64 / n as f64;
        let sd = if n < 2 {
            0.0
        } else {
            let num = n * sum_sq - sum * sum;
            (num as f64 / (n * (n - 1)) as f64).sqrt()
        };
        Summary { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlaggedRecord {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_pairs: usize,
    pub n_distinct_tables: usize,
    pub n_distinct_columns: usize,
    /// Sum over queries of the distinct tables each one uses.
    pub total_table_refs: usize,
    pub logical_conditions: Summary,
    pub nesting_levels: Summary,
    pub tables: Summary,
    pub columns: Summary,
    pub medical_entities: Summary,
    pub question_length_chars: Summary,
    pub sql_length_chars: Summary,
    /// Records excluded from structural counts.
    pub flagged: Vec<FlaggedRecord>,
}

impl DatasetStats {
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("pairs: {}\n", self.n_pairs));
        out.push_str(&format!("distinct tables: {}\n", self.n_distinct_tables));
        out.push_str(&format!("distinct columns: {}\n\n", self.n_distinct_columns));
        out.push_str("| per query | mean | sd |\n|---|---|---|\n");
        for (name, s) in [
            ("logical conditions", self.logical_conditions),
            ("nesting levels", self.nesting_levels),
            ("tables", self.tables),
            ("columns", self.columns),
            ("medical entities", self.medical_entities),
            ("question length (chars)", self.question_length_chars),
            ("SQL length (chars)", self.sql_length_chars),
        ] {
            out.push_str(&format!("| {name} | {:.1} | {:.1} |\n", s.mean, s.sd));
        }
        if !self.flagged.is_empty() {
            out.push_str("\nflagged:\n");
            for f in &self.flagged {
                out.push_str(&format!("- {}: {}\n", f.id, f.reason));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StatsError {
    #[error("cannot compute statistics of an empty dataset")]
    Empty,
}

/// Statistics against the bundled schema catalog.
pub fn compute_stats(pairs: &[QuestionSqlPair]) -> Result<DatasetStats, StatsError> {
    compute_stats_with(pairs, &SchemaCatalog::bundled())
}

pub fn compute_stats_with(pairs: &[QuestionSqlPair], catalog: &SchemaCatalog) -> Result<DatasetStats, StatsError> {
    if pairs.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut all_tables = BTreeSet::new();
    let mut all_columns = BTreeSet::new();
    let mut total_table_refs = 0;
    let (mut conds, mut nest, mut tabs, mut cols) = (vec![], vec![], vec![], vec![]);
    let mut entities = Vec::with_capacity(pairs.len());
    let mut qlen = Vec::with_capacity(pairs.len());
    let mut slen = Vec::with_capacity(pairs.len());
    let mut flagged = Vec::new();

    for p in pairs {
        qlen.push(p.question.chars().count() as u64);
        slen.push(p.sql_template.chars().count() as u64);
        entities.push(p.entities.len() as u64);
        match sql_lex::analyze(&p.sql_template, catalog) {
            Ok(shape) => {
                conds.push(shape.conditions as u64);
                nest.push(shape.nesting as u64);
                tabs.push(shape.tables.len() as u64);
                cols.push(shape.columns.len() as u64);
                total_table_refs += shape.tables.len();
                all_tables.extend(shape.tables);
                all_columns.extend(shape.columns);
            }
            Err(e) => flagged.push(FlaggedRecord {
                id: p.id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    flagged.sort_by(|a, b| a.id.cmp(&b.id));

    Ok(DatasetStats {
        n_pairs: pairs.len(),
        n_distinct_tables: all_tables.len(),
        n_distinct_columns: all_columns.len(),
        total_table_refs,
        logical_conditions: Summary::of_counts(&conds),
        nesting_levels: Summary::of_counts(&nest),
        tables: Summary::of_counts(&tabs),
        columns: Summary::of_counts(&cols),
        medical_entities: Summary::of_counts(&entities),
        question_length_chars: Summary::of_counts(&qlen),
        sql_length_chars: Summary::of_counts(&slen),
        flagged,
    })
}

/// Group id to member ids, members in input order.
pub fn paraphrase_groups(pairs: &[QuestionSqlPair]) -> BTreeMap<String, Vec<String>> {
    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for p in pairs {
        groups.entry(p.paraphrase_group.clone()).or_default().push(p.id.clone());
    }
    groups
}
