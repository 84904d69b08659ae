//! Criterion benchmarks for retrieval, concept ranking, placeholder parsing and answer comparison.
//!
//! Run with `cargo bench -p epiquery-bench`.

/// Path of the bundled corpus.
pub const CORPUS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/corpus/epi_questions.jsonl");
