//! Benchmark harness: run dataset questions through configured pipelines,
//! compare against reference results, aggregate accuracy and executability.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::QuestionSqlPair;
use crate::executor::{Cell, ExecLimits, QueryResult};
use crate::pipeline::{ConfigError, Pipeline, PipelineConfig, RunStatus};
use crate::placeholder::{render_sql, SqlTemplate};

pub const DEFAULT_TOLERANCE: f64 = 0.10;

/// Which comparison rule decided a case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompareRule {
    Scalar,
    Table,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Comparison {
    pub correct: bool,
    pub rule: CompareRule,
    pub detail: String,
}

/// Relative tolerance test; a zero reference needs an exact zero.
pub fn within_tolerance(reference: f64, generated: f64, tau: f64) -> bool {
    if reference == 0.0 {
        return generated == 0.0;
    }
    // The tiny slack keeps the bound inclusive under rounding, e.g. 100 vs 110.
    (generated - reference).abs() <= tau * reference.abs() * (1.0 + 1e-12)
}

fn single_numeric(r: &QueryResult) -> Option<f64> {
    match r.rows.as_slice() {
        [row] if row.len() == 1 => row[0].as_f64(),
        _ => None,
    }
}

fn cell_order(a: &Cell, b: &Cell) -> Ordering {
    fn rank(c: &Cell) -> u8 {
        match c {
            Cell::Null => 0,
            Cell::Integer(_) | Cell::Real(_) => 1,
            Cell::Text(_) | Cell::Date(_) => 2,
        }
    }
    match (a.as_f64(), b.as_f64()) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        _ => rank(a).cmp(&rank(b)).then_with(|| a.to_string().cmp(&b.to_string())),
    }
}

fn row_order(a: &[Cell], b: &[Cell]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| cell_order(x, y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn cells_match(r: &Cell, g: &Cell, tau: f64) -> bool {
    match (r.as_f64(), g.as_f64()) {
        (Some(x), Some(y)) => within_tolerance(x, y, tau),
        (None, None) => r.to_string() == g.to_string() && matches!(r, Cell::Null) == matches!(g, Cell::Null),
        _ => false,
    }
}

/// Compares a generated result with the reference.
///
/// Single numeric cells on both sides use the scalar rule. Otherwise columns
/// are matched by name (case-insensitive, any order), rows are sorted, shapes
/// must agree, numeric cells use the scalar rule and other cells must be equal.
pub fn compare_answers(reference: &QueryResult, generated: &QueryResult, tau: f64) -> Comparison {
    if let (Some(r), Some(g)) = (single_numeric(reference), single_numeric(generated)) {
        let correct = within_tolerance(r, g, tau);
        return Comparison {
            correct,
            rule: CompareRule::Scalar,
            detail: format!("reference {r}, generated {g}"),
        };
    }
    let table = |correct: bool, detail: String| Comparison {
        correct,
        rule: CompareRule::Table,
        detail,
    };
    let norm = |c: &String| c.to_lowercase();
    if reference.columns.len() != generated.columns.len() {
        return table(
            false,
            format!("column count {} vs {}", reference.columns.len(), generated.columns.len()),
        );
    }
    let mut mapping = Vec::with_capacity(reference.columns.len());
    let mut used = vec![false; generated.columns.len()];
    for rc in &reference.columns {
        let pos = generated
            .columns
            .iter()
            .enumerate()
            .position(|(i, gc)| !used[i] && norm(gc) == norm(rc));
        match pos {
            Some(i) => {
                used[i] = true;
                mapping.push(i);
            }
            None => return table(false, format!("column `{rc}` missing from generated result")),
        }
    }
    if reference.rows.len() != generated.rows.len() {
        return table(
            false,
            format!("row count {} vs {}", reference.rows.len(), generated.rows.len()),
        );
    }
    let mut r_rows = reference.rows.clone();
    let mut g_rows: Vec<Vec<Cell>> = generated
        .rows
        .iter()
        .map(|row| mapping.iter().map(|&i| row.get(i).cloned().unwrap_or(Cell::Null)).collect())
        .collect();
    r_rows.sort_by(|a, b| row_order(a, b));
    g_rows.sort_by(|a, b| row_order(a, b));
    for (i, (r, g)) in r_rows.iter().zip(&g_rows).enumerate() {
        for (j, (rc, gc)) in r.iter().zip(g).enumerate() {
            if !cells_match(rc, gc, tau) {
                return table(
                    false,
                    format!("row {i} column `{}`: reference {rc}, generated {gc}", reference.columns[j]),
                );
            }
        }
    }
    table(true, format!("{} rows match", r_rows.len()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub case_id: String,
    pub executable: bool,
    pub correct: bool,
    /// Set when the case failed for reasons outside the model's control.
    pub infrastructure_failure: bool,
    pub rule: Option<CompareRule>,
    pub detail: String,
    pub repairs_used: u32,
    /// Fingerprint of the run trace.
    pub trace: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: String,
    pub title: String,
    pub total: usize,
    pub correct: usize,
    pub executable: usize,
    pub infrastructure_failures: usize,
    pub verdicts: Vec<Verdict>,
}

impl ModeReport {
    fn from_verdicts(mode: String, title: String, verdicts: Vec<Verdict>) -> Self {
        Self {
            mode,
            title,
            total: verdicts.len(),
            correct: verdicts.iter().filter(|v| v.correct).count(),
            executable: verdicts.iter().filter(|v| v.executable).count(),
            infrastructure_failures: verdicts.iter().filter(|v| v.infrastructure_failure).count(),
            verdicts,
        }
    }

    fn denominator(&self) -> usize {
        self.total - self.infrastructure_failures
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.correct, self.denominator())
    }

    pub fn executability(&self) -> f64 {
        ratio(self.executable, self.denominator())
    }
}

fn ratio(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Generator model, the column group in rendered tables.
    pub model: String,
    pub tolerance: f64,
    pub config: PipelineConfig,
    pub modes: Vec<ModeReport>,
}

impl EvalReport {
    pub fn empty(model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            tolerance: DEFAULT_TOLERANCE,
            config: PipelineConfig::default(),
            modes: vec![],
        }
    }

    /// Checks `correct ⇒ executable` per case and `Acc ≤ Exec` per mode.
    pub fn check_invariants(&self) -> Result<(), String> {
        for m in &self.modes {
            if let Some(v) = m.verdicts.iter().find(|v| v.correct && !v.executable) {
                return Err(format!("{}: case {} correct but not executable", m.mode, v.case_id));
            }
            if m.accuracy() > m.executability() {
                return Err(format!("{}: accuracy exceeds executability", m.mode));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, self.to_json())
    }

    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("benchmark needs at least one mode")]
    NoModes,
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Reference results computed once per pair. A failed reference is kept as
/// its error text.
#[derive(Debug, Clone, Default)]
pub struct ReferenceCache {
    results: BTreeMap<String, Result<QueryResult, String>>,
}

impl ReferenceCache {
    /// Resolves each reference template with rank-1 codes and executes it.
    pub fn build(pipeline: &Pipeline, pairs: &[QuestionSqlPair], limits: &ExecLimits, parallelism: usize) -> Self {
        let out = Mutex::new(BTreeMap::new());
        parallel_for(pairs.len(), parallelism, |i| {
            let p = &pairs[i];
            let r = reference_result(pipeline, p, limits);
            out.lock().insert(p.id.clone(), r);
        });
        Self {
            results: out.into_inner(),
        }
    }

    pub fn get(&self, pair_id: &str) -> Option<&Result<QueryResult, String>> {
        self.results.get(pair_id)
    }

    pub fn failures(&self) -> Vec<(&str, &str)> {
        self.results
            .iter()
            .filter_map(|(k, v)| v.as_ref().err().map(|e| (k.as_str(), e.as_str())))
            .collect()
    }
}

/// Rendered reference SQL for `pair`, codes chosen by rank-1 candidates.
pub fn render_reference(pipeline: &Pipeline, pair: &QuestionSqlPair) -> Result<String, String> {
    let t = SqlTemplate::parse(&pair.sql_template).map_err(|e| e.to_string())?;
    let codes = pipeline.coder.resolve_rank1(&t).map_err(|e| e.to_string())?;
    render_sql(&t, &codes).map_err(|e| e.to_string())
}

fn reference_result(pipeline: &Pipeline, pair: &QuestionSqlPair, limits: &ExecLimits) -> Result<QueryResult, String> {
    let sql = render_reference(pipeline, pair)?;
    pipeline.engine.execute(&sql, limits).map_err(|e| e.to_string())
}

fn parallel_for(n: usize, parallelism: usize, f: impl Fn(usize) + Sync) {
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..parallelism.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, AtomicOrdering::SeqCst);
                if i >= n {
                    break;
                }
                f(i);
            });
        }
    });
}

#[derive(Debug, Clone, Default)]
pub struct BenchOptions {
    pub parallelism: usize,
    /// Where per-case traces and verdicts are written, one subdirectory per mode.
    pub audit_dir: Option<PathBuf>,
}

/// Runs every pair under every mode with leave-one-out retrieval.
pub fn run_benchmark(
    pipeline: &Pipeline,
    pairs: &[QuestionSqlPair],
    modes: &[PipelineConfig],
    references: &ReferenceCache,
    options: &BenchOptions,
) -> Result<EvalReport, EvalError> {
    let first = modes.first().ok_or(EvalError::NoModes)?;
    for m in modes {
        m.validate()?;
    }
    let io = |path: &Path, source| EvalError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut reports = Vec::with_capacity(modes.len());
    for config in modes {
        let mut config = config.clone();
        config.generate_answer = false;
        let mode = config.experiment_mode();
        let slots: Vec<Mutex<Option<Verdict>>> = pairs.iter().map(|_| Mutex::new(None)).collect();
        let audit = options.audit_dir.as_ref().map(|d| d.join(mode.label()));
        if let Some(d) = &audit {
            std::fs::create_dir_all(d).map_err(|e| io(d, e))?;
        }
        let write_errors = Mutex::new(Vec::new());
        parallel_for(pairs.len(), options.parallelism.max(1), |i| {
            let pair = &pairs[i];
            let run = pipeline.run_case(pair, &config);
            let mut v = Verdict {
                case_id: pair.id.clone(),
                executable: run.executable(),
                correct: false,
                infrastructure_failure: run.status == RunStatus::Failed,
                rule: None,
                detail: String::new(),
                repairs_used: run.repairs_used,
                trace: run.fingerprint(),
            };
            match (&run.result, references.get(&pair.id)) {
                (Some(g), Some(Ok(r))) => {
                    let c = compare_answers(r, g, config.tolerance);
                    v.correct = c.correct;
                    v.rule = Some(c.rule);
                    v.detail = c.detail;
                }
                (Some(_), other) => {
                    v.infrastructure_failure = true;
                    v.detail = match other {
                        Some(Err(e)) => format!("reference failed: {e}"),
                        _ => "no reference result".into(),
                    };
                }
                (None, _) => {
                    v.detail = match (&run.db_error, &run.failure) {
                        (Some(e), _) => e.to_string(),
                        (None, Some(f)) => format!("{} stage: {}", f.stage, f.message),
                        _ => "no result".into(),
                    };
                }
            }
            if let Some(d) = &audit {
                let res = run
                    .save(d.join("traces"))
                    .and_then(|_| std::fs::write(d.join(format!("{}.verdict.json", pair.id)), serde_json::to_vec_pretty(&v)?));
                if let Err(e) = res {
                    write_errors.lock().push((d.clone(), e));
                }
            }
            *slots[i].lock() = Some(v);
        });
        if let Some((p, e)) = write_errors.into_inner().into_iter().next() {
            return Err(io(&p, e));
        }
        let verdicts = slots.into_iter().map(|s| s.into_inner().expect("every case ran")).collect();
        reports.push(ModeReport::from_verdicts(mode.label(), mode.title(), verdicts));
    }
    Ok(EvalReport {
        model: first.generator.model.clone(),
        tolerance: first.tolerance,
        config: first.clone(),
        modes: reports,
    })
}

fn pct(x: f64) -> String {
    format!("{:.1}", x * 100.0)
}

/// `(mode, model) -> (Acc, Exec)`.
type Cells = BTreeMap<(String, String), (f64, f64)>;

/// Rows in first-seen order across reports; one `(Acc, Exec)` column pair per model.
fn layout(reports: &[EvalReport]) -> (Vec<String>, Vec<(String, String)>, Cells) {
    let mut models: Vec<String> = Vec::new();
    let mut rows: Vec<(String, String)> = Vec::new();
    let mut cells = BTreeMap::new();
    for r in reports {
        if !models.contains(&r.model) {
            models.push(r.model.clone());
        }
        for m in &r.modes {
            if !rows.iter().any(|(l, _)| l == &m.mode) {
                rows.push((m.mode.clone(), m.title.clone()));
            }
            cells.insert((m.mode.clone(), r.model.clone()), (m.accuracy(), m.executability()));
        }
    }
    (models, rows, cells)
}

/// Markdown table: rows are modes, each model contributes Acc and Exec columns.
pub fn render_markdown(reports: &[EvalReport]) -> String {
    let (models, rows, cells) = layout(reports);
    let mut out = String::from("| Mode |");
    let mut rule = String::from("|---|");
    for m in &models {
        out.push_str(&format!(" {m} Acc | {m} Exec |"));
        rule.push_str("---:|---:|");
    }
    out.push('\n');
    out.push_str(&rule);
    out.push('\n');
    for (label, title) in rows {
        out.push_str(&format!("| {title} |"));
        for m in &models {
            match cells.get(&(label.clone(), m.clone())) {
                Some((a, e)) => out.push_str(&format!(" {} | {} |", pct(*a), pct(*e))),
                None => out.push_str(" - | - |"),
            }
        }
        out.push('\n');
    }
    out
}

pub fn render_csv(reports: &[EvalReport]) -> String {
    let (models, rows, cells) = layout(reports);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["mode".to_string()];
    for m in &models {
        header.push(format!("{m} acc"));
        header.push(format!("{m} exec"));
    }
    w.write_record(&header).expect("in-memory write");
    for (label, title) in rows {
        let mut rec = vec![title];
        for m in &models {
            match cells.get(&(label.clone(), m.clone())) {
                Some((a, e)) => {
                    rec.push(pct(*a));
                    rec.push(pct(*e));
                }
                None => {
                    rec.push(String::new());
                    rec.push(String::new());
                }
            }
        }
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar(v: Cell) -> QueryResult {
        QueryResult::new(vec!["n".into()], vec![vec![v]])
    }

    fn ok(r: f64, g: f64) -> bool {
        compare_answers(&scalar(Cell::Real(r)), &scalar(Cell::Real(g)), 0.10).correct
    }

    #[test]
    fn scalar_boundaries() {
        assert!(ok(100.0, 109.0));
        assert!(ok(100.0, 110.0));
        assert!(!ok(100.0, 111.0));
        assert!(ok(100.0, 90.0));
        assert!(!ok(100.0, 89.9));
        assert!(ok(0.0, 0.0));
        assert!(!ok(0.0, 1.0));
        assert!(!ok(0.0, f64::MIN_POSITIVE));
        assert!(ok(-50.0, -55.0));
        let c = compare_answers(&scalar(Cell::Integer(100)), &scalar(Cell::Real(104.0)), 0.10);
        assert_eq!(c.rule, CompareRule::Scalar);
        assert!(c.correct);
    }

    fn by_gender(rows: &[(&str, i64)], cols: [&str; 2]) -> QueryResult {
        QueryResult::new(
            cols.iter().map(|c| c.to_string()).collect(),
            rows.iter().map(|(g, n)| vec![Cell::Text(g.to_string()), Cell::Integer(*n)]).collect(),
        )
    }

    #[test]
    fn table_rule() {
        let r = by_gender(&[("FEMALE", 120), ("MALE", 80)], ["gender", "n"]);
        let permuted = by_gender(&[("MALE", 80), ("FEMALE", 120)], ["gender", "n"]);
        let c = compare_answers(&r, &permuted, 0.10);
        assert!(c.correct && c.rule == CompareRule::Table);

        let swapped_cols = QueryResult::new(
            vec!["N".into(), "Gender".into()],
            vec![vec![Cell::Integer(85), Cell::Text("MALE".into())], vec![Cell::Integer(119), Cell::Text("FEMALE".into())]],
        );
        assert!(compare_answers(&r, &swapped_cols, 0.10).correct);
        assert!(!compare_answers(&r, &by_gender(&[("FEMALE", 120), ("MALE", 95)], ["gender", "n"]), 0.10).correct);
        assert!(!compare_answers(&r, &by_gender(&[("FEMALE", 120), ("male", 80)], ["gender", "n"]), 0.10).correct);
        assert!(!compare_answers(&r, &by_gender(&[("FEMALE", 120)], ["gender", "n"]), 0.10).correct);
        assert!(!compare_answers(&r, &by_gender(&[("FEMALE", 120), ("MALE", 80)], ["sex", "n"]), 0.10).correct);
        let empty = QueryResult::new(vec!["n".into()], vec![]);
        assert!(compare_answers(&empty, &empty, 0.1).correct);
        assert!(!compare_answers(&scalar(Cell::Integer(3)), &empty, 0.1).correct);
    }

    #[test]
    fn nulls_and_text_compare_exactly() {
        let a = scalar(Cell::Null);
        assert!(compare_answers(&a, &a, 0.1).correct);
        assert!(!compare_answers(&a, &scalar(Cell::Text("NULL".into())), 0.1).correct);
        assert!(!compare_answers(&scalar(Cell::Text("5".into())), &scalar(Cell::Integer(5)), 0.1).correct);
    }

    fn arb_cell() -> impl Strategy<Value = Cell> {
        prop_oneof![
            Just(Cell::Null),
            (-1000i64..1000).prop_map(Cell::Integer),
            (-1e6f64..1e6).prop_map(Cell::Real),
            "[a-z]{0,4}".prop_map(Cell::Text),
        ]
    }

    fn arb_result() -> impl Strategy<Value = QueryResult> {
        (1usize..4).prop_flat_map(|w| {
            prop::collection::vec(prop::collection::vec(arb_cell(), w), 0..6).prop_map(move |rows| {
                QueryResult::new((0..w).map(|i| format!("c{i}")).collect(), rows)
            })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn tau_monotone(r in -1e6f64..1e6, g in -1e6f64..1e6, t1 in 0.0f64..2.0, dt in 0.0f64..2.0) {
            if within_tolerance(r, g, t1) {
                prop_assert!(within_tolerance(r, g, t1 + dt));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn reflexive(res in arb_result(), tau in 0.0f64..1.0) {
            prop_assert!(compare_answers(&res, &res, tau).correct);
        }

        #[test]
        fn row_permutation_invariant(res in arb_result(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = res.clone();
            shuffled.rows.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert!(compare_answers(&res, &shuffled, 0.0).correct);
        }
    }

    fn report(model: &str, modes: &[(&str, &str, usize, usize, usize)]) -> EvalReport {
        let mut r = EvalReport::empty(model);
        for (mode, title, total, correct, exec) in modes {
            let verdicts = (0..*total)
                .map(|i| Verdict {
                    case_id: format!("c{i}"),
                    executable: i < *exec,
                    correct: i < *correct,
                    infrastructure_failure: false,
                    rule: None,
                    detail: String::new(),
                    repairs_used: 0,
                    trace: String::new(),
                })
                .collect();
            r.modes.push(ModeReport::from_verdicts(mode.to_string(), title.to_string(), verdicts));
        }
        r
    }

    #[test]
    fn render_single_row() {
        let r = report("gpt-4-turbo", &[("rag-top1", "RAG-top1", 1000, 725, 971)]);
        let md = render_markdown(std::slice::from_ref(&r));
        assert!(md.contains("| RAG-top1 | 72.5 | 97.1 |"), "{md}");
        assert!(render_csv(&[r]).contains("RAG-top1,72.5,97.1"));
    }

    #[test]
    fn render_empty() {
        assert_eq!(render_markdown(&[]), "| Mode |\n|---|\n");
        assert_eq!(render_csv(&[]).trim(), "mode");
        let md = render_markdown(&[EvalReport::empty("m")]);
        assert_eq!(md.lines().count(), 2);
    }

    #[test]
    fn csv_and_markdown_agree() {
        let a = report("m1", &[("simple", "Prompt (simple)", 102, 2, 8), ("rag-top1", "RAG-top1", 102, 34, 53)]);
        let b = report("m2", &[("rag-top1", "RAG-top1", 102, 74, 99)]);
        let md = render_markdown(&[a.clone(), b.clone()]);
        let csv_text = render_csv(&[a, b]);
        let md_rows: Vec<Vec<String>> = md
            .lines()
            .skip(2)
            .map(|l| l.trim_matches('|').split('|').map(|c| c.trim().to_string()).collect())
            .collect();
        let mut rdr = csv::Reader::from_reader(csv_text.as_bytes());
        let csv_rows: Vec<Vec<String>> = rdr
            .records()
            .map(|r| r.unwrap().iter().map(|c| if c.is_empty() { "-".to_string() } else { c.to_string() }).collect())
            .collect();
        assert_eq!(md_rows, csv_rows);
        assert_eq!(md_rows[0], vec!["Prompt (simple)", "2.0", "7.8", "-", "-"]);
    }

    #[test]
    fn infrastructure_failures_leave_denominator() {
        let mut r = report("m", &[("simple", "Prompt (simple)", 10, 6, 8)]);
        let m = &mut r.modes[0];
        m.verdicts[9].infrastructure_failure = true;
        let m2 = ModeReport::from_verdicts(m.mode.clone(), m.title.clone(), m.verdicts.clone());
        assert_eq!(m2.infrastructure_failures, 1);
        assert!((m2.accuracy() - 6.0 / 9.0).abs() < 1e-12);
        r.check_invariants().unwrap();
    }

    #[test]
    fn report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = report("m", &[("oracle", "RAG-top1-oracle", 4, 3, 4)]);
        let p = dir.path().join("r.json");
        r.save(&p).unwrap();
        assert_eq!(EvalReport::load(&p).unwrap(), r);
    }
}
