//! Table/column catalog for the bundled OMOP subset.

use std::collections::{BTreeMap, BTreeSet};

use crate::sql_lex::{self, LexError, TokenKind};

/// DDL for the OMOP CDM subset, applied by `executor::init_database`.
pub const OMOP_DDL: &str = include_str!("../sql/omop_subset_v1.sql");
/// Stored in `PRAGMA user_version` so a re-init can detect a foreign schema.
pub const SCHEMA_VERSION: i64 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SchemaCatalog {
    tables: BTreeMap<String, Vec<String>>,
    columns: BTreeSet<String>,
}

impl SchemaCatalog {
    /// Catalog of the bundled DDL.
    pub fn bundled() -> Self {
        Self::from_ddl(OMOP_DDL).expect("bundled DDL is well formed")
    }

    /// Reads `CREATE TABLE` statements; everything else is skipped.
    pub fn from_ddl(ddl: &str) -> Result<Self, LexError> {
        let tokens = sql_lex::tokenize(ddl)?;
        let mut catalog = SchemaCatalog::default();
        let mut i = 0;
        while i < tokens.len() {
            if !(tokens[i].is_keyword("CREATE") && tokens.get(i + 1).is_some_and(|t| t.is_keyword("TABLE"))) {
                i += 1;
                continue;
            }
            i += 2;
            if tokens.get(i).is_some_and(|t| t.is_keyword("IF")) {
                i += 3;
            }
            let Some(name) = tokens.get(i) else { break };
            let table = name.text.to_ascii_lowercase();
            i += 1;
            if tokens.get(i).map(|t| t.kind) != Some(TokenKind::LParen) {
                continue;
            }
            i += 1;
            let mut depth = 1;
            let mut at_element_start = true;
            let mut cols = Vec::new();
            while i < tokens.len() && depth > 0 {
                let t = &tokens[i];
                match t.kind {
                    TokenKind::LParen => depth += 1,
                    TokenKind::RParen => depth -= 1,
                    TokenKind::Comma if depth == 1 => {
                        at_element_start = true;
                        i += 1;
                        continue;
                    }
                    TokenKind::Word if depth == 1 && at_element_start => {
                        let constraint = ["PRIMARY", "FOREIGN", "UNIQUE", "CHECK", "CONSTRAINT"]
                            .iter()
                            .any(|k| t.is_keyword(k));
                        if !constraint {
                            cols.push(t.text.to_ascii_lowercase());
                        }
                    }
                    _ => {}
                }
                at_element_start = false;
                i += 1;
            }
            catalog.columns.extend(cols.iter().cloned());
            catalog.tables.insert(table, cols);
        }
        Ok(catalog)
    }

    pub fn has_table(&self, name: &str) -> bool {
        self.tables.contains_key(name)
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.columns.contains(name)
    }

    pub fn table_names(&self) -> impl Iterator<Item = &str> {
        self.tables.keys().map(String::as_str)
    }

    pub fn columns_of(&self, table: &str) -> Option<&[String]> {
        self.tables.get(table).map(Vec::as_slice)
    }

    pub fn n_tables(&self) -> usize {
        self.tables.len()
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    /// One `table(col, col, ...)` line per table, in DDL order of columns.
    pub fn summary(&self) -> String {
        self.tables
            .iter()
            .map(|(t, cols)| format!("{t}({})", cols.join(", ")))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_has_thirteen_tables() {
        let c = SchemaCatalog::bundled();
        assert_eq!(c.n_tables(), 13);
        for t in [
            "person",
            "observation_period",
            "visit_occurrence",
            "condition_occurrence",
            "drug_exposure",
            "procedure_occurrence",
            "measurement",
            "observation",
            "death",
            "location",
            "provider",
            "concept",
            "concept_ancestor",
        ] {
            assert!(c.has_table(t), "{t}");
        }
        assert_eq!(c.n_columns(), 50);
    }

    #[test]
    fn constraints_are_not_columns() {
        let c = SchemaCatalog::from_ddl("CREATE TABLE t (a INT, b TEXT, PRIMARY KEY (a, b));").unwrap();
        assert_eq!(c.columns_of("t").unwrap(), ["a", "b"]);
        assert!(!c.has_column("primary"));
    }

    #[test]
    fn summary_lists_columns() {
        let s = SchemaCatalog::bundled().summary();
        assert!(s.contains("death(person_id, death_date, cause_concept_id)"));
    }
}
