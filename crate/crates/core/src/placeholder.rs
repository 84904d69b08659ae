//! The `[domain@mention]` placeholder grammar.
//!
//! Generated SQL refers to medical entities through placeholders so that the
//! query can be written before concept ids are known:
//!
//! ```text
//! placeholder := "[" domain "@" mention "]"
//! domain      := condition | drug | procedure | measurement | observation | device
//! mention     := 1+ chars excluding "]" and "@"
//! ```
//!
//! Square brackets that do not follow the grammar (for example SQLite's
//! bracket-quoted identifiers) are left alone.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sql_lex::{self, TokenKind};

/// OMOP clinical domain carried by a placeholder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Condition,
    Drug,
    Procedure,
    Measurement,
    Observation,
    Device,
}

impl DomainTag {
    pub const ALL: [DomainTag; 6] = [
        DomainTag::Condition,
        DomainTag::Drug,
        DomainTag::Procedure,
        DomainTag::Measurement,
        DomainTag::Observation,
        DomainTag::Device,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DomainTag::Condition => "condition",
            DomainTag::Drug => "drug",
            DomainTag::Procedure => "procedure",
            DomainTag::Measurement => "measurement",
            DomainTag::Observation => "observation",
            DomainTag::Device => "device",
        }
    }

    /// Mask label used when entity mentions are hidden from retrieval, e.g. `<DRUG>`.
    pub fn mask_label(self) -> String {
        format!("<{}>", self.as_str().to_ascii_uppercase())
    }

    /// The `domain_id` value used by the OMOP concept table.
    pub fn omop_domain_id(self) -> &'static str {
        match self {
            DomainTag::Condition => "Condition",
            DomainTag::Drug => "Drug",
            DomainTag::Procedure => "Procedure",
            DomainTag::Measurement => "Measurement",
            DomainTag::Observation => "Observation",
            DomainTag::Device => "Device",
        }
    }

    /// Maps an OMOP `domain_id` onto a tag; non-clinical domains return `None`.
    pub fn from_omop_domain(domain_id: &str) -> Option<DomainTag> {
        DomainTag::ALL
            .into_iter()
            .find(|d| d.omop_domain_id().eq_ignore_ascii_case(domain_id.trim()))
    }
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown domain tag `{0}`")]
pub struct UnknownDomain(pub String);

impl FromStr for DomainTag {
    type Err = UnknownDomain;

    /// Only the lowercase canonical spelling is accepted.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DomainTag::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| UnknownDomain(s.to_string()))
    }
}

/// Identity of a placeholder independent of where it occurs: `(domain, mention)`.
///
/// Serialized as the text between the brackets, `condition@dysphagia`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PlaceholderKey {
    pub domain: DomainTag,
    pub mention: String,
}

impl PlaceholderKey {
    pub fn new(domain: DomainTag, mention: impl Into<String>) -> Self {
        Self {
            domain,
            mention: mention.into(),
        }
    }

    /// The full `[domain@mention]` token.
    pub fn token(&self) -> String {
        format!("[{}@{}]", self.domain, self.mention)
    }
}

impl fmt::Display for PlaceholderKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.domain, self.mention)
    }
}

impl FromStr for PlaceholderKey {
    type Err = PlaceholderError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let inner = s
            .strip_prefix('[')
            .and_then(|r| r.strip_suffix(']'))
            .unwrap_or(s);
        let (domain, mention) = inner.split_once('@').ok_or_else(|| PlaceholderError::Malformed {
            offset: 0,
            text: s.to_string(),
        })?;
        let domain = domain.parse::<DomainTag>().map_err(|_| PlaceholderError::UnknownDomain {
            tag: domain.to_string(),
            offset: 0,
        })?;
        if mention.is_empty() || mention.contains(['@', ']']) {
            return Err(PlaceholderError::Malformed {
                offset: 0,
                text: s.to_string(),
            });
        }
        Ok(PlaceholderKey::new(domain, mention))
    }
}

impl Serialize for PlaceholderKey {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PlaceholderKey {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Half-open `[start, end)` offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

/// One placeholder occurrence inside a SQL template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityPlaceholder {
    pub domain: DomainTag,
    pub mention: String,
    /// Character offsets (Unicode scalar values) in the template.
    pub span: Span,
    /// Byte offsets in the template, for slicing.
    pub byte_span: Span,
}

impl EntityPlaceholder {
    pub fn key(&self) -> PlaceholderKey {
        PlaceholderKey::new(self.domain, self.mention.clone())
    }

    pub fn token(&self) -> String {
        self.key().token()
    }
}

/// SQL text plus the placeholders found in it, in order of appearance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SqlTemplate {
    pub raw: String,
    pub placeholders: Vec<EntityPlaceholder>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlaceholderError {
    #[error("unknown domain tag `{tag}` in placeholder at offset {offset}")]
    UnknownDomain { tag: String, offset: usize },
    #[error("unterminated placeholder starting at offset {offset}")]
    Unterminated { offset: usize },
    #[error("malformed placeholder `{text}` at offset {offset}")]
    Malformed { offset: usize, text: String },
}

impl PlaceholderError {
    pub fn offset(&self) -> usize {
        match self {
            PlaceholderError::UnknownDomain { offset, .. }
            | PlaceholderError::Unterminated { offset }
            | PlaceholderError::Malformed { offset, .. } => *offset,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RenderError {
    #[error("no resolution for placeholder {0}")]
    MissingResolution(PlaceholderKey),
    #[error("empty concept set for placeholder {0}")]
    EmptyConceptSet(PlaceholderKey),
}

/// Anything that can hand out concept ids for a placeholder.
pub trait Resolution {
    fn concept_ids(&self, key: &PlaceholderKey) -> Option<Vec<i64>>;
}

impl Resolution for BTreeMap<PlaceholderKey, Vec<i64>> {
    fn concept_ids(&self, key: &PlaceholderKey) -> Option<Vec<i64>> {
        self.get(key).cloned()
    }
}

impl Resolution for std::collections::HashMap<PlaceholderKey, Vec<i64>> {
    fn concept_ids(&self, key: &PlaceholderKey) -> Option<Vec<i64>> {
        self.get(key).cloned()
    }
}

fn is_domain_word(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_alphabetic())
}

/// Finds every placeholder in `sql_text`.
///
/// A bracket whose content starts with a run of ASCII letters followed by `@`
/// is placeholder syntax and must be valid; anything else in brackets is
/// ignored.
pub fn extract_placeholders(sql_text: &str) -> Result<SqlTemplate, PlaceholderError> {
    let mut placeholders = Vec::new();
    let bytes = sql_text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'[' {
            i += 1;
            continue;
        }
        let start = i;
        let rest = &sql_text[start + 1..];
        let word_len = rest.bytes().take_while(|b| b.is_ascii_alphabetic()).count();
        let after_word = rest.as_bytes().get(word_len).copied();
        if word_len == 0 || after_word != Some(b'@') {
            i += 1;
            continue;
        }
        let tag = &rest[..word_len];
        debug_assert!(is_domain_word(tag));
        let mention_start = start + 1 + word_len + 1;
        let Some(close_rel) = sql_text[mention_start..].find(']') else {
            return Err(PlaceholderError::Unterminated { offset: start });
        };
        let end = mention_start + close_rel + 1;
        let domain = tag.parse::<DomainTag>().map_err(|_| PlaceholderError::UnknownDomain {
            tag: tag.to_string(),
            offset: start,
        })?;
        let mention = &sql_text[mention_start..end - 1];
        if mention.is_empty() || mention.contains('@') {
            return Err(PlaceholderError::Malformed {
                offset: start,
                text: sql_text[start..end].to_string(),
            });
        }
        placeholders.push(EntityPlaceholder {
            domain,
            mention: mention.to_string(),
            span: Span { start, end },
            byte_span: Span { start, end },
        });
        i = end;
    }
    if sql_text.is_ascii() {
        return Ok(SqlTemplate {
            raw: sql_text.to_string(),
            placeholders,
        });
    }
    // Convert byte offsets into character offsets.
    for p in &mut placeholders {
        let start = sql_text[..p.byte_span.start].chars().count();
        let len = sql_text[p.byte_span.start..p.byte_span.end].chars().count();
        p.span = Span {
            start,
            end: start + len,
        };
    }
    Ok(SqlTemplate {
        raw: sql_text.to_string(),
        placeholders,
    })
}

impl SqlTemplate {
    pub fn parse(sql_text: &str) -> Result<Self, PlaceholderError> {
        extract_placeholders(sql_text)
    }

    /// Distinct placeholder keys in order of first appearance.
    pub fn keys(&self) -> Vec<PlaceholderKey> {
        let mut keys: Vec<PlaceholderKey> = Vec::new();
        for p in &self.placeholders {
            let k = p.key();
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        keys
    }

    /// Replaces every placeholder with `f(placeholder)`, keeping the rest verbatim.
    pub fn substitute<E>(
        &self,
        mut f: impl FnMut(&EntityPlaceholder) -> Result<String, E>,
    ) -> Result<String, E> {
        let mut out = String::with_capacity(self.raw.len());
        let mut cursor = 0;
        for p in &self.placeholders {
            out.push_str(&self.raw[cursor..p.byte_span.start]);
            out.push_str(&f(p)?);
            cursor = p.byte_span.end;
        }
        out.push_str(&self.raw[cursor..]);
        Ok(out)
    }
}

/// Formats concept ids as an inline SQL list, ascending and de-duplicated.
pub fn concept_id_list(ids: &[i64]) -> String {
    let mut ids = ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let joined = ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(", ");
    format!("({joined})")
}

/// Renders executable SQL by replacing each placeholder with `(id, id, ...)`.
pub fn render_sql(template: &SqlTemplate, resolution: &dyn Resolution) -> Result<String, RenderError> {
    template.substitute(|p| {
        let key = p.key();
        let ids = resolution
            .concept_ids(&key)
            .ok_or_else(|| RenderError::MissingResolution(key.clone()))?;
        if ids.is_empty() {
            return Err(RenderError::EmptyConceptSet(key));
        }
        Ok(concept_id_list(&ids))
    })
}

/// True if `text` still contains something that looks like the start of a placeholder.
pub fn contains_placeholder_syntax(text: &str) -> bool {
    DomainTag::ALL
        .iter()
        .any(|d| text.contains(&format!("[{}@", d.as_str())))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TemplateIssue {
    UnbalancedParentheses { offset: usize },
    UnknownDomain { tag: String, offset: usize },
    StrayPlaceholder { offset: usize, message: String },
    NonSelectStatement { keyword: String },
    MultipleStatements,
    EmptyStatement,
    Lexical { message: String },
}

impl fmt::Display for TemplateIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TemplateIssue::UnbalancedParentheses { offset } => {
                write!(f, "unbalanced parentheses near offset {offset}")
            }
            TemplateIssue::UnknownDomain { tag, offset } => {
                write!(f, "unknown placeholder domain `{tag}` at offset {offset}")
            }
            TemplateIssue::StrayPlaceholder { offset, message } => {
                write!(f, "invalid placeholder syntax at offset {offset}: {message}")
            }
            TemplateIssue::NonSelectStatement { keyword } => {
                write!(f, "only SELECT statements are allowed, found `{keyword}`")
            }
            TemplateIssue::MultipleStatements => f.write_str("more than one SQL statement"),
            TemplateIssue::EmptyStatement => f.write_str("empty SQL statement"),
            TemplateIssue::Lexical { message } => write!(f, "{message}"),
        }
    }
}

/// Checks a template for problems that would stop it from being rendered or
/// executed. Issues are returned as data; an empty list means the template is usable.
pub fn validate_template(sql_text: &str) -> Vec<TemplateIssue> {
    let mut issues = Vec::new();
    if let Err(e) = extract_placeholders(sql_text) {
        issues.push(match e {
            PlaceholderError::UnknownDomain { tag, offset } => TemplateIssue::UnknownDomain { tag, offset },
            other => TemplateIssue::StrayPlaceholder {
                offset: other.offset(),
                message: other.to_string(),
            },
        });
    }
    let tokens = match sql_lex::tokenize(sql_text) {
        Ok(t) => t,
        Err(e) => {
            issues.push(TemplateIssue::Lexical { message: e.to_string() });
            return issues;
        }
    };

    let mut depth: i64 = 0;
    for t in &tokens {
        match t.kind {
            TokenKind::LParen => depth += 1,
            TokenKind::RParen => {
                depth -= 1;
                if depth < 0 {
                    issues.push(TemplateIssue::UnbalancedParentheses { offset: t.offset });
                    depth = 0;
                }
            }
            _ => {}
        }
    }
    if depth > 0 {
        issues.push(TemplateIssue::UnbalancedParentheses { offset: sql_text.len() });
    }

    let statements: Vec<&[sql_lex::Token]> = tokens
        .split(|t| t.kind == TokenKind::Semicolon)
        .filter(|s| !s.is_empty())
        .collect();
    match statements.len() {
        0 => issues.push(TemplateIssue::EmptyStatement),
        1 => {}
        _ => issues.push(TemplateIssue::MultipleStatements),
    }
    for stmt in statements {
        let first = stmt.iter().find(|t| t.kind != TokenKind::LParen);
        match first {
            Some(t) if t.is_keyword("SELECT") || t.is_keyword("WITH") || t.is_keyword("VALUES") => {}
            Some(t) => issues.push(TemplateIssue::NonSelectStatement {
                keyword: t.text.to_ascii_uppercase(),
            }),
            None => issues.push(TemplateIssue::EmptyStatement),
        }
    }
    issues
}
