//! Prompt assembly.
//!
//! Prompt texts live in `templates/*.txt` with `{{slot}}` markers. Slots are
//! filled in a single pass, so a value that itself contains `{{...}}` is
//! inserted verbatim. Builders are pure: equal inputs give byte-identical prompts.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::coding::OntologyConcept;
use crate::executor::QueryResult;
use crate::placeholder::DomainTag;
use crate::schema::SchemaCatalog;

/// Upper bound on self-repair attempts.
pub const MAX_REPAIR_ATTEMPTS: u32 = 3;
pub const DEFAULT_ANSWER_ROW_CAP: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Simple,
    Advanced,
}

impl FromStr for PromptMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "simple" => Ok(PromptMode::Simple),
            "advanced" => Ok(PromptMode::Advanced),
            other => Err(format!("unknown prompt mode `{other}` (simple or advanced)")),
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptMode::Simple => "simple",
            PromptMode::Advanced => "advanced",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Generation,
    Repair,
    Verification,
    Answer,
    Extraction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub question: String,
    pub sql_template: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub kind: PromptKind,
    pub system: String,
    pub user: String,
    /// Set for generation and repair prompts.
    pub mode: Option<PromptMode>,
    pub exemplars: Vec<Exemplar>,
    pub metadata: BTreeMap<String, String>,
}

impl PromptSpec {
    /// The exact text a provider receives, used for transcript keys.
    pub fn render(&self) -> String {
        format!("[system]\n{}\n[user]\n{}", self.system, self.user)
    }

    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.render().as_bytes()))
    }
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("repair attempt {0} is outside 1..={MAX_REPAIR_ATTEMPTS}")]
    AttemptOutOfRange(u32),
    #[error("verification needs at least one candidate")]
    NoCandidates,
    #[error("template file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Fills `{{name}}` slots in one left-to-right pass. Unknown slots stay as written.
pub fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find("{{") {
        out.push_str(&rest[..open]);
        let after = &rest[open + 2..];
        match after.find("}}") {
            Some(close) => {
                let name = &after[..close];
                match slots.iter().find(|(k, _)| *k == name) {
                    Some((_, v)) => out.push_str(v),
                    None => {
                        out.push_str("{{");
                        out.push_str(name);
                        out.push_str("}}");
                    }
                }
                rest = &after[close + 2..];
            }
            None => {
                out.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub version: String,
    generation_system: String,
    advanced_directives: String,
    generation_user: String,
    exemplar: String,
    repair_user: String,
    verification_system: String,
    verification_user: String,
    answer_system: String,
    answer_user: String,
    extraction_system: String,
    extraction_user: String,
}

macro_rules! bundled {
    ($name:literal) => {
        include_str!(concat!("../templates/", $name, ".txt"))
    };
}

const FILES: [&str; 11] = [
    "generation_system",
    "advanced_directives",
    "generation_user",
    "exemplar",
    "repair_user",
    "verification_system",
    "verification_user",
    "answer_system",
    "answer_user",
    "extraction_system",
    "extraction_user",
];

impl PromptTemplates {
    pub fn bundled() -> Self {
        Self {
            version: include_str!("../templates/VERSION").trim().to_string(),
            generation_system: bundled!("generation_system").to_string(),
            advanced_directives: bundled!("advanced_directives").to_string(),
            generation_user: bundled!("generation_user").to_string(),
            exemplar: bundled!("exemplar").to_string(),
            repair_user: bundled!("repair_user").to_string(),
            verification_system: bundled!("verification_system").to_string(),
            verification_user: bundled!("verification_user").to_string(),
            answer_system: bundled!("answer_system").to_string(),
            answer_user: bundled!("answer_user").to_string(),
            extraction_system: bundled!("extraction_system").to_string(),
            extraction_user: bundled!("extraction_user").to_string(),
        }
    }

    /// Loads a template directory with the same file names as the bundled set.
    /// Missing files fall back to the bundled text.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, PromptError> {
        let dir = dir.as_ref();
        let mut t = Self::bundled();
        let read = |name: &str| -> Result<Option<String>, PromptError> {
            let path = dir.join(name);
            match std::fs::read_to_string(&path) {
                Ok(s) => Ok(Some(s)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                Err(source) => Err(PromptError::Io {
                    path: path.display().to_string(),
                    source,
                }),
            }
        };
        if let Some(v) = read("VERSION")? {
            t.version = v.trim().to_string();
        }
        for name in FILES {
            if let Some(text) = read(&format!("{name}.txt"))? {
                *t.slot_mut(name) = text;
            }
        }
        Ok(t)
    }

    fn slot_mut(&mut self, name: &str) -> &mut String {
        match name {
            "generation_system" => &mut self.generation_system,
            "advanced_directives" => &mut self.advanced_directives,
            "generation_user" => &mut self.generation_user,
            "exemplar" => &mut self.exemplar,
            "repair_user" => &mut self.repair_user,
            "verification_system" => &mut self.verification_system,
            "verification_user" => &mut self.verification_user,
            "answer_system" => &mut self.answer_system,
            "answer_user" => &mut self.answer_user,
            "extraction_system" => &mut self.extraction_system,
            _ => &mut self.extraction_user,
        }
    }
}

/// Prompt builder bound to a template set and a schema summary.
#[derive(Debug, Clone)]
pub struct PromptBuilder {
    pub templates: PromptTemplates,
    pub schema_summary: String,
}

impl Default for PromptBuilder {
    fn default() -> Self {
        Self {
            templates: PromptTemplates::bundled(),
            schema_summary: SchemaCatalog::bundled().summary(),
        }
    }
}

impl PromptBuilder {
    pub fn new(templates: PromptTemplates, schema_summary: impl Into<String>) -> Self {
        Self {
            templates,
            schema_summary: schema_summary.into(),
        }
    }

    fn meta(&self, extra: &[(&str, String)]) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("template_version".to_string(), self.templates.version.clone());
        for (k, v) in extra {
            m.insert(k.to_string(), v.clone());
        }
        m
    }

    fn generation_system(&self, mode: PromptMode) -> String {
        let core = fill(&self.templates.generation_system, &[("schema", &self.schema_summary)]);
        match mode {
            PromptMode::Simple => core,
            PromptMode::Advanced => format!("{}\n{}", core.trim_end(), self.templates.advanced_directives),
        }
    }

    pub fn generation(&self, question: &str, mode: PromptMode, exemplars: &[Exemplar]) -> PromptSpec {
        let block: String = exemplars
            .iter()
            .map(|e| fill(&self.templates.exemplar, &[("question", &e.question), ("sql", e.sql_template.trim())]))
            .collect();
        PromptSpec {
            kind: PromptKind::Generation,
            system: self.generation_system(mode),
            user: fill(&self.templates.generation_user, &[("exemplars", &block), ("question", question)]),
            mode: Some(mode),
            exemplars: exemplars.to_vec(),
            metadata: self.meta(&[("mode", mode.to_string()), ("exemplars", exemplars.len().to_string())]),
        }
    }

    pub fn repair(
        &self,
        question: &str,
        failed_sql: &str,
        db_error_text: &str,
        attempt_number: u32,
        mode: PromptMode,
    ) -> Result<PromptSpec, PromptError> {
        if !(1..=MAX_REPAIR_ATTEMPTS).contains(&attempt_number) {
            return Err(PromptError::AttemptOutOfRange(attempt_number));
        }
        let attempt = attempt_number.to_string();
        let max = MAX_REPAIR_ATTEMPTS.to_string();
        Ok(PromptSpec {
            kind: PromptKind::Repair,
            system: self.generation_system(mode),
            user: fill(
                &self.templates.repair_user,
                &[
                    ("question", question),
                    ("failed_sql", failed_sql),
                    ("error", db_error_text),
                    ("attempt", &attempt),
                    ("max_attempts", &max),
                ],
            ),
            mode: Some(mode),
            exemplars: vec![],
            metadata: self.meta(&[("mode", mode.to_string()), ("attempt", attempt)]),
        })
    }

    pub fn verification(
        &self,
        mention: &str,
        domain: DomainTag,
        candidates: &[OntologyConcept],
    ) -> Result<PromptSpec, PromptError> {
        if candidates.is_empty() {
            return Err(PromptError::NoCandidates);
        }
        let list = candidates
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{}. {} | {} | {}", i + 1, c.concept_id, c.name, c.vocabulary))
            .collect::<Vec<_>>()
            .join("\n");
        Ok(PromptSpec {
            kind: PromptKind::Verification,
            system: self.templates.verification_system.clone(),
            user: fill(
                &self.templates.verification_user,
                &[("mention", mention), ("domain", domain.as_str()), ("candidates", &list)],
            ),
            mode: None,
            exemplars: vec![],
            metadata: self.meta(&[("candidates", candidates.len().to_string())]),
        })
    }

    pub fn answer(&self, question: &str, result: &QueryResult, row_cap: usize) -> PromptSpec {
        let shown = result.rows.len().min(row_cap);
        let more_in_db = result.truncated;
        let row_summary = if result.rows.is_empty() {
            "0 rows returned".to_string()
        } else if shown < result.rows.len() || more_in_db {
            format!(
                "truncated: showing the first {shown} of {}{} rows",
                result.rows.len(),
                if more_in_db { "+" } else { "" }
            )
        } else {
            format!("{} rows", result.rows.len())
        };
        let mut table = String::new();
        if result.rows.is_empty() {
            table.push_str("(no rows)\n");
        } else {
            table.push_str(&result.columns.join(" | "));
            table.push('\n');
            for row in result.rows.iter().take(shown) {
                table.push_str(&row.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" | "));
                table.push('\n');
            }
        }
        PromptSpec {
            kind: PromptKind::Answer,
            system: self.templates.answer_system.clone(),
            user: fill(
                &self.templates.answer_user,
                &[("question", question), ("row_summary", &row_summary), ("table", &table)],
            ),
            mode: None,
            exemplars: vec![],
            metadata: self.meta(&[("rows_shown", shown.to_string())]),
        }
    }

    pub fn extraction(&self, question: &str) -> PromptSpec {
        PromptSpec {
            kind: PromptKind::Extraction,
            system: self.templates.extraction_system.clone(),
            user: fill(&self.templates.extraction_user, &[("question", question)]),
            mode: None,
            exemplars: vec![],
            metadata: self.meta(&[]),
        }
    }
}

pub fn build_generation_prompt(
    question: &str,
    mode: PromptMode,
    exemplars: &[Exemplar],
    schema_summary: &str,
) -> PromptSpec {
    PromptBuilder::new(PromptTemplates::bundled(), schema_summary).generation(question, mode, exemplars)
}

pub fn build_repair_prompt(
    question: &str,
    failed_sql: &str,
    db_error_text: &str,
    attempt_number: u32,
) -> Result<PromptSpec, PromptError> {
    PromptBuilder::default().repair(question, failed_sql, db_error_text, attempt_number, PromptMode::Simple)
}

pub fn build_verification_prompt(
    mention: &str,
    domain: DomainTag,
    candidates: &[OntologyConcept],
) -> Result<PromptSpec, PromptError> {
    PromptBuilder::default().verification(mention, domain, candidates)
}

pub fn build_answer_prompt(question: &str, result: &QueryResult, row_cap: usize) -> PromptSpec {
    PromptBuilder::default().answer(question, result, row_cap)
}

pub fn build_extraction_prompt(question: &str) -> PromptSpec {
    PromptBuilder::default().extraction(question)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::Cell;

    const DIRECTIVE_HEADINGS: [&str; 8] = [
        "1. Concept ids",
        "2. Race analysis",
        "3. Geographical analysis",
        "4. Date filters",
        "5. Column naming",
        "6. Patient count",
        "7. Age calculation",
        "8. Query validity review",
    ];

    fn schema() -> String {
        SchemaCatalog::bundled().summary()
    }

    fn ex(q: &str, s: &str) -> Exemplar {
        Exemplar {
            question: q.into(),
            sql_template: s.into(),
        }
    }

    #[test]
    fn simple_zero_shot() {
        let p = build_generation_prompt("How many patients?", PromptMode::Simple, &[], &schema());
        assert!(p.system.contains("[domain@mention]"));
        assert!(p.system.contains("person(person_id"));
        assert!(!p.system.contains("Additional directives"));
        assert!(p.user.ends_with("Question: How many patients?\nSQL:\n"));
        assert_eq!(p.metadata["template_version"], "prompts-v1");
    }

    #[test]
    fn advanced_has_all_directive_sections_and_exemplar() {
        let p = build_generation_prompt(
            "q",
            PromptMode::Advanced,
            &[ex("How many take <DRUG>?", "SELECT 1 WHERE x IN [drug@metformin]")],
            &schema(),
        );
        for h in DIRECTIVE_HEADINGS {
            assert!(p.system.contains(h), "missing {h}");
        }
        assert!(p.user.contains("Question: How many take <DRUG>?\nSQL:\n```sql\nSELECT 1 WHERE x IN [drug@metformin]\n```"));
    }

    #[test]
    fn advanced_contains_simple_conventions() {
        let s = build_generation_prompt("q", PromptMode::Simple, &[], &schema());
        let a = build_generation_prompt("q", PromptMode::Advanced, &[], &schema());
        assert!(a.system.contains(s.system.trim_end()));
        assert!(a.system.len() > s.system.len());
    }

    #[test]
    fn exemplars_keep_given_order() {
        let p = build_generation_prompt(
            "q",
            PromptMode::Simple,
            &[ex("first question", "SELECT 1"), ex("second question", "SELECT 2")],
            &schema(),
        );
        let a = p.user.find("first question").unwrap();
        let b = p.user.find("second question").unwrap();
        assert!(a < b);
    }

    #[test]
    fn builders_are_pure() {
        let a = build_generation_prompt("q", PromptMode::Advanced, &[ex("a", "b")], &schema());
        let b = build_generation_prompt("q", PromptMode::Advanced, &[ex("a", "b")], &schema());
        assert_eq!(a.render(), b.render());
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn repair_embeds_sql_and_error() {
        let p = build_repair_prompt("q", "SELEC 1", "syntax error near SELEC", 1).unwrap();
        assert!(p.user.contains("SELEC 1"));
        assert!(p.user.contains("syntax error near SELEC"));
        assert!(matches!(
            build_repair_prompt("q", "x", "y", 4),
            Err(PromptError::AttemptOutOfRange(4))
        ));
        assert!(build_repair_prompt("q", "x", "y", 0).is_err());
    }

    #[test]
    fn repair_error_text_survives_braces_and_quotes() {
        let err = r#"near "{{question}}": syntax error {x} 'quoted' "dq""#;
        let p = build_repair_prompt("the question", "SELECT '{{error}}'", err, 2).unwrap();
        assert!(p.user.contains(err));
        assert!(p.user.contains("SELECT '{{error}}'"));
    }

    fn concept(id: i64, name: &str) -> OntologyConcept {
        OntologyConcept {
            concept_id: id,
            name: name.into(),
            vocabulary: "SNOMED".into(),
            domain: DomainTag::Condition,
            standard: true,
        }
    }

    #[test]
    fn verification_lists_candidates() {
        let cs: Vec<_> = (1..=3).map(|i| concept(i, &format!("c{i}"))).collect();
        let p = build_verification_prompt("x", DomainTag::Condition, &cs).unwrap();
        assert!(p.user.contains("1. 1 | c1 | SNOMED\n2. 2 | c2 | SNOMED\n3. 3 | c3 | SNOMED"));
        assert!(p.user.contains("comma-separated"));
        assert!(matches!(
            build_verification_prompt("x", DomainTag::Drug, &[]),
            Err(PromptError::NoCandidates)
        ));
    }

    #[test]
    fn verification_numbers_fifty_and_keeps_duplicate_terms() {
        let cs: Vec<_> = (0..50).map(|i| concept(1000 + i, if i < 2 { "Dysphagia" } else { "Other" })).collect();
        let p = build_verification_prompt("dysphagia", DomainTag::Condition, &cs).unwrap();
        assert!(p.user.contains("50. 1049 | Other"));
        assert!(p.user.contains("1. 1000 | Dysphagia"));
        assert!(p.user.contains("2. 1001 | Dysphagia"));
    }

    #[test]
    fn answer_tables() {
        let one = QueryResult::new(vec!["n".into()], vec![vec![Cell::Integer(42)]]);
        let p = build_answer_prompt("How many?", &one, 100);
        assert!(p.user.contains("n\n42\n"));
        let empty = QueryResult::new(vec!["n".into()], vec![]);
        assert!(build_answer_prompt("q", &empty, 100).user.contains("0 rows returned"));
        let big = QueryResult::new(vec!["i".into()], (0..150).map(|i| vec![Cell::Integer(i)]).collect());
        let p = build_answer_prompt("q", &big, DEFAULT_ANSWER_ROW_CAP);
        assert!(p.user.contains("truncated: showing the first 100 of 150 rows"));
        assert!(p.user.contains("\n99\n"));
        assert!(!p.user.contains("\n100\n"));
    }

    #[test]
    fn fill_is_single_pass() {
        assert_eq!(fill("{{a}}-{{b}}", &[("a", "{{b}}"), ("b", "x")]), "{{b}}-x");
        assert_eq!(fill("{{missing}} {{", &[]), "{{missing}} {{");
    }

    #[test]
    fn template_dir_override() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("VERSION"), "custom-9\n").unwrap();
        std::fs::write(dir.path().join("extraction_user.txt"), "Q={{question}}").unwrap();
        let b = PromptBuilder::new(PromptTemplates::load_dir(dir.path()).unwrap(), "s");
        let p = b.extraction("hi");
        assert_eq!(p.user, "Q=hi");
        assert_eq!(p.metadata["template_version"], "custom-9");
    }
}
