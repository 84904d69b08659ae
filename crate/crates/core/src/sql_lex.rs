//! Small SQL tokenizer and structural counter.
//!
//! This is not a SQL parser. It understands enough of the SELECT dialect used by
//! the corpus to count nesting depth, predicates, tables and columns.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::placeholder::DomainTag;
use crate::schema::SchemaCatalog;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Word,
    QuotedIdent,
    Number,
    String,
    Placeholder,
    LParen,
    RParen,
    Comma,
    Semicolon,
    Dot,
    Op,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub kind: TokenKind,
    pub text: String,
    /// Byte offset into the source.
    pub offset: usize,
}

impl Token {
    pub fn is_keyword(&self, kw: &str) -> bool {
        self.kind == TokenKind::Word && self.text.eq_ignore_ascii_case(kw)
    }

    fn is_any_keyword(&self, kws: &[&str]) -> bool {
        kws.iter().any(|k| self.is_keyword(k))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LexError {
    #[error("unterminated string literal at offset {0}")]
    UnterminatedString(usize),
    #[error("unterminated quoted identifier at offset {0}")]
    UnterminatedIdent(usize),
    #[error("unterminated block comment at offset {0}")]
    UnterminatedComment(usize),
    #[error("unexpected character `{ch}` at offset {offset}")]
    Unexpected { ch: char, offset: usize },
}

fn placeholder_len(rest: &str) -> Option<usize> {
    // rest starts with '['
    let inner = &rest[1..];
    let word_len = inner.bytes().take_while(|b| b.is_ascii_alphabetic()).count();
    if word_len == 0 || inner.as_bytes().get(word_len) != Some(&b'@') {
        return None;
    }
    inner[..word_len].parse::<DomainTag>().ok()?;
    let close = inner[word_len + 1..].find(']')?;
    Some(1 + word_len + 1 + close + 1)
}

pub fn tokenize(sql: &str) -> Result<Vec<Token>, LexError> {
    let mut tokens = Vec::new();
    let bytes = sql.as_bytes();
    let mut i = 0;
    let push = |tokens: &mut Vec<Token>, kind, start: usize, end: usize| {
        tokens.push(Token {
            kind,
            text: sql[start..end].to_string(),
            offset: start,
        })
    };
    while i < bytes.len() {
        let b = bytes[i];
        let start = i;
        match b {
            b' ' | b'\t' | b'\n' | b'\r' => i += 1,
            b'-' if bytes.get(i + 1) == Some(&b'-') => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            b'/' if bytes.get(i + 1) == Some(&b'*') => {
                let end = sql[i + 2..]
                    .find("*/")
                    .ok_or(LexError::UnterminatedComment(start))?;
                i += 2 + end + 2;
            }
            b'\'' => {
                i += 1;
                loop {
                    match bytes.get(i) {
                        None => return Err(LexError::UnterminatedString(start)),
                        Some(b'\'') if bytes.get(i + 1) == Some(&b'\'') => i += 2,
                        Some(b'\'') => {
                            i += 1;
                            break;
                        }
                        Some(_) => i += 1,
                    }
                }
                push(&mut tokens, TokenKind::String, start, i);
            }
            b'"' | b'`' => {
                let close = sql[i + 1..]
                    .find(b as char)
                    .ok_or(LexError::UnterminatedIdent(start))?;
                i += 1 + close + 1;
                push(&mut tokens, TokenKind::QuotedIdent, start, i);
            }
            b'[' => {
                if let Some(len) = placeholder_len(&sql[i..]) {
                    i += len;
                    push(&mut tokens, TokenKind::Placeholder, start, i);
                } else {
                    let close = sql[i + 1..]
                        .find(']')
                        .ok_or(LexError::UnterminatedIdent(start))?;
                    i += 1 + close + 1;
                    push(&mut tokens, TokenKind::QuotedIdent, start, i);
                }
            }
            b'(' => {
                i += 1;
                push(&mut tokens, TokenKind::LParen, start, i);
            }
            b')' => {
                i += 1;
                push(&mut tokens, TokenKind::RParen, start, i);
            }
            b',' => {
                i += 1;
                push(&mut tokens, TokenKind::Comma, start, i);
            }
            b';' => {
                i += 1;
                push(&mut tokens, TokenKind::Semicolon, start, i);
            }
            b'.' if !bytes.get(i + 1).is_some_and(u8::is_ascii_digit) => {
                i += 1;
                push(&mut tokens, TokenKind::Dot, start, i);
            }
            b'0'..=b'9' | b'.' => {
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && bytes[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                push(&mut tokens, TokenKind::Number, start, i);
            }
            b'<' | b'>' | b'!' | b'=' | b'|' => {
                let two = sql.get(i..i + 2).unwrap_or("");
                i += if matches!(two, "<=" | ">=" | "<>" | "!=" | "==" | "||") { 2 } else { 1 };
                push(&mut tokens, TokenKind::Op, start, i);
            }
            b'+' | b'-' | b'*' | b'/' | b'%' | b'?' | b':' => {
                i += 1;
                push(&mut tokens, TokenKind::Op, start, i);
            }
            _ if b == b'_' || b.is_ascii_alphabetic() || b >= 0x80 => {
                while i < bytes.len()
                    && (bytes[i] == b'_' || bytes[i] == b'$' || bytes[i].is_ascii_alphanumeric() || bytes[i] >= 0x80)
                {
                    i += 1;
                }
                push(&mut tokens, TokenKind::Word, start, i);
            }
            _ => {
                let ch = sql[i..].chars().next().unwrap_or('?');
                return Err(LexError::Unexpected { ch, offset: i });
            }
        }
    }
    Ok(tokens)
}

/// Structural counts for one query.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryShape {
    /// Maximum SELECT depth; a flat query is 1.
    pub nesting: usize,
    /// Predicates in WHERE, HAVING and ON clauses.
    pub conditions: usize,
    pub tables: BTreeSet<String>,
    pub columns: BTreeSet<String>,
    pub placeholders: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Clause {
    Other,
    From,
    Predicate,
}

struct Frame {
    subquery: bool,
    clause: Clause,
}

const CLAUSE_RESET: &[&str] = &[
    "SELECT", "GROUP", "ORDER", "LIMIT", "OFFSET", "UNION", "INTERSECT", "EXCEPT", "WINDOW", "AS",
];
const PREDICATE_KEYWORDS: &[&str] = &["LIKE", "GLOB", "IN", "BETWEEN", "IS", "EXISTS"];
const COMPARISONS: &[&str] = &["=", "==", "<>", "!=", "<", ">", "<=", ">="];

/// Counts nesting, predicates, tables and columns of `sql`.
///
/// Tables and columns are only counted when they name something in `catalog`,
/// so aliases and CTE names are ignored.
pub fn analyze(sql: &str, catalog: &SchemaCatalog) -> Result<QueryShape, LexError> {
    let tokens = tokenize(sql)?;
    let mut shape = QueryShape::default();
    let mut frames = vec![Frame {
        subquery: true,
        clause: Clause::Other,
    }];
    let mut expect_table = false;

    for (idx, t) in tokens.iter().enumerate() {
        let next = tokens.get(idx + 1);
        let select_depth = frames.iter().filter(|f| f.subquery).count();
        let frame = frames.last_mut().expect("root frame");
        match t.kind {
            TokenKind::LParen => {
                expect_table = false;
                let sub = next.is_some_and(|n| n.is_keyword("SELECT") || n.is_keyword("WITH"));
                let clause = if sub { Clause::Other } else { frame.clause };
                frames.push(Frame { subquery: sub, clause });
            }
            TokenKind::RParen => {
                if frames.len() > 1 {
                    frames.pop();
                }
            }
            TokenKind::Comma => {
                if frame.clause == Clause::From {
                    expect_table = true;
                }
            }
            TokenKind::Placeholder => shape.placeholders += 1,
            TokenKind::Op if frame.clause == Clause::Predicate && COMPARISONS.contains(&t.text.as_str()) => {
                shape.conditions += 1;
            }
            TokenKind::Word => {
                if t.is_keyword("SELECT") {
                    shape.nesting = shape.nesting.max(select_depth);
                }
                if t.is_any_keyword(&["WHERE", "HAVING", "ON"]) {
                    frame.clause = Clause::Predicate;
                    expect_table = false;
                } else if t.is_any_keyword(&["FROM", "JOIN"]) {
                    frame.clause = Clause::From;
                    expect_table = true;
                } else if t.is_any_keyword(CLAUSE_RESET) && !(t.is_keyword("AS") && frame.clause == Clause::From) {
                    frame.clause = Clause::Other;
                    expect_table = false;
                } else if frame.clause == Clause::Predicate && t.is_any_keyword(PREDICATE_KEYWORDS) {
                    shape.conditions += 1;
                } else {
                    let lower = t.text.to_ascii_lowercase();
                    let qualified_next = next.is_some_and(|n| n.kind == TokenKind::Dot);
                    if expect_table && !qualified_next {
                        if catalog.has_table(&lower) {
                            shape.tables.insert(lower.clone());
                        }
                        expect_table = false;
                    }
                    let is_call = next.is_some_and(|n| n.kind == TokenKind::LParen);
                    if !is_call && !qualified_next && catalog.has_column(&lower) {
                        shape.columns.insert(lower);
                    }
                }
            }
            _ => {}
        }
    }
    if shape.nesting == 0 && !tokens.is_empty() {
        shape.nesting = 1;
    }
    Ok(shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cat() -> SchemaCatalog {
        SchemaCatalog::bundled()
    }

    #[test]
    fn tokenizes_basic_statement() {
        let toks = tokenize("SELECT a.b, 'it''s' FROM t WHERE x >= 1.5 -- c\n").unwrap();
        let kinds: Vec<TokenKind> = toks.iter().map(|t| t.kind).collect();
        assert_eq!(
            kinds,
            vec![
                TokenKind::Word,
                TokenKind::Word,
                TokenKind::Dot,
                TokenKind::Word,
                TokenKind::Comma,
                TokenKind::String,
                TokenKind::Word,
                TokenKind::Word,
                TokenKind::Word,
                TokenKind::Word,
                TokenKind::Op,
                TokenKind::Number,
            ]
        );
        assert_eq!(toks[5].text, "'it''s'");
    }

    #[test]
    fn placeholder_is_one_token() {
        let toks = tokenize("x IN [condition@type 2 diabetes]").unwrap();
        assert_eq!(toks[2].kind, TokenKind::Placeholder);
        assert_eq!(toks[2].text, "[condition@type 2 diabetes]");
    }

    #[test]
    fn lex_errors() {
        assert_eq!(tokenize("SELECT 'abc").unwrap_err(), LexError::UnterminatedString(7));
        assert!(matches!(tokenize("/* x"), Err(LexError::UnterminatedComment(0))));
    }

    #[test]
    fn degenerate_count_query() {
        let s = analyze("SELECT COUNT(*) FROM person", &cat()).unwrap();
        assert_eq!(s.nesting, 1);
        assert_eq!(s.conditions, 0);
        assert_eq!(s.tables.len(), 1);
        assert!(s.columns.is_empty());
    }

    #[test]
    fn nested_select_and_predicates() {
        let sql = "SELECT COUNT(DISTINCT co.person_id) FROM condition_occurrence co \
                   WHERE co.condition_concept_id IN (SELECT ca.descendant_concept_id FROM concept_ancestor ca \
                   WHERE ca.ancestor_concept_id IN [condition@x]) \
                   AND co.condition_start_date BETWEEN '2009-01-01' AND '2009-12-31'";
        let s = analyze(sql, &cat()).unwrap();
        assert_eq!(s.nesting, 2);
        // IN, IN, BETWEEN
        assert_eq!(s.conditions, 3);
        assert_eq!(
            s.tables.iter().cloned().collect::<Vec<_>>(),
            vec!["concept_ancestor", "condition_occurrence"]
        );
        assert_eq!(s.columns.len(), 5);
        assert_eq!(s.placeholders, 1);
    }

    #[test]
    fn join_on_and_comma_tables() {
        let sql = "SELECT p.gender_concept_id, COUNT(*) FROM location l, person p \
                   JOIN death d ON d.person_id = p.person_id WHERE l.location_id = p.location_id AND p.year_of_birth < 1940 \
                   GROUP BY p.gender_concept_id HAVING COUNT(*) > 10";
        let s = analyze(sql, &cat()).unwrap();
        assert_eq!(s.tables.len(), 3);
        assert_eq!(s.conditions, 4);
        assert_eq!(s.nesting, 1);
    }

    #[test]
    fn cte_names_are_not_tables() {
        let sql = "WITH cohort AS (SELECT person_id FROM drug_exposure WHERE drug_concept_id IN (1)) \
                   SELECT COUNT(*) FROM cohort c JOIN person p ON p.person_id = c.person_id";
        let s = analyze(sql, &cat()).unwrap();
        assert_eq!(
            s.tables.iter().cloned().collect::<Vec<_>>(),
            vec!["drug_exposure", "person"]
        );
        assert_eq!(s.nesting, 2);
        assert_eq!(s.conditions, 2);
    }

    #[test]
    fn select_list_case_is_not_a_condition() {
        let sql = "SELECT CASE WHEN year_of_birth < 1950 THEN 'old' ELSE 'young' END AS g FROM person";
        assert_eq!(analyze(sql, &cat()).unwrap().conditions, 0);
    }

    #[test]
    fn not_null_and_exists_count_once() {
        let sql = "SELECT 1 FROM person p WHERE p.location_id IS NOT NULL AND NOT EXISTS \
                   (SELECT 1 FROM death d WHERE d.person_id = p.person_id)";
        let s = analyze(sql, &cat()).unwrap();
        assert_eq!(s.conditions, 3);
        assert_eq!(s.nesting, 2);
    }
}
