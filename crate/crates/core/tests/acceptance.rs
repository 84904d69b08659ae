//! Acceptance checks. Prints one `PASS`/`FAIL` line per criterion.
//!
//! Run with `cargo test -p epiquery --test acceptance -- --nocapture`.
//! Criteria listed in `KNOWN_RED` are reported but do not fail the test;
//! everything else must pass.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use epiquery::coding::{
    candidate_concepts, rank_concepts, verify_candidates, CandidateScope, FallbackReason, MedicalCoder, OntologyConcept,
    OntologyStore,
};
use epiquery::dataset::{compute_stats, load_dataset, QuestionSqlPair};
use epiquery::embedding::{Embedder, HashEmbedder};
use epiquery::evaluation::{
    compare_answers, render_csv, render_markdown, run_benchmark, within_tolerance, BenchOptions, EvalReport, ModeReport,
    ReferenceCache, Verdict,
};
use epiquery::executor::{
    execute_sql, generate_synthetic_data, init_database, Cell, Database, DbTarget, ExecLimits, QueryEngine, QueryResult,
};
use epiquery::llm::{ChatProvider, FnProvider, GatewayMode, LlmGateway, ModelConfig, ProviderError, ScriptedProvider};
use epiquery::pipeline::{Pipeline, PipelineConfig, RunStatus};
use epiquery::placeholder::{contains_placeholder_syntax, render_sql, DomainTag, SqlTemplate};
use epiquery::prompting::PromptBuilder;
use epiquery::retrieval::{build_index, mask_question, top_k, Exclusion, LeaveOut, RetrievalIndex};

const CORPUS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/corpus/epi_questions.jsonl");

/// The bundled corpus is a stand-in for the released one; its per-query
/// distributions differ, so this criterion is expected to report FAIL.
const KNOWN_RED: &[&str] = &["dataset-statistics"];

/// Pinned tolerances.
const STATS_MEAN_TOL: f64 = 0.3;
const SCORE_TOL: f64 = 1e-12;
const SELF_MATCH_TOL: f64 = 1e-9;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(name: &'static str, failures: Vec<String>, summary: String) -> Outcome {
    Outcome {
        name,
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            summary
        } else {
            format!("{summary}; {}", failures.join("; "))
        },
    }
}

struct World {
    pairs: Arc<Vec<QuestionSqlPair>>,
    index: Arc<RetrievalIndex>,
    store: Arc<OntologyStore>,
    db: Arc<Database>,
}

fn world() -> &'static World {
    static W: OnceLock<World> = OnceLock::new();
    W.get_or_init(|| {
        let pairs = load_dataset(CORPUS).unwrap();
        let e = HashEmbedder::default();
        let index = build_index(&pairs, &e).unwrap();
        let db = init_database(&DbTarget::parse("mem:acceptance")).unwrap();
        generate_synthetic_data(&db, 1, 1000).unwrap();
        World {
            pairs: Arc::new(pairs),
            index: Arc::new(index),
            store: Arc::new(OntologyStore::bundled(&e).unwrap()),
            db: Arc::new(db),
        }
    })
}

fn pipeline(gateway: LlmGateway) -> Pipeline {
    let w = world();
    let e: Arc<dyn Embedder> = Arc::new(HashEmbedder::default());
    Pipeline {
        pairs: w.pairs.clone(),
        index: w.index.clone(),
        question_embedder: e.clone(),
        coder: MedicalCoder::new(w.store.clone(), e),
        engine: w.db.clone() as Arc<dyn QueryEngine>,
        gateway: Arc::new(gateway.with_backoff(Duration::ZERO)),
        prompts: PromptBuilder::default(),
    }
}

fn model(name: &str) -> ModelConfig {
    ModelConfig {
        provider: "test".into(),
        model: name.into(),
        max_retries: 0,
        ..Default::default()
    }
}

fn config(mode: &str) -> PipelineConfig {
    let m = model("scripted");
    PipelineConfig {
        generator: m.clone(),
        verifier: m,
        ..Default::default()
    }
    .with_mode(mode)
    .unwrap()
}

fn dataset_statistics() -> Outcome {
    let t = Instant::now();
    let pairs = load_dataset(CORPUS).unwrap();
    let s = compute_stats(&pairs).unwrap();
    let elapsed = t.elapsed();
    let mut f = Vec::new();
    for (what, got, want) in [
        ("pairs", s.n_pairs, 306),
        ("tables", s.n_distinct_tables, 13),
        ("columns", s.n_distinct_columns, 44),
    ] {
        if got != want {
            f.push(format!("{what} {got} != {want}"));
        }
    }
    for (what, got, want) in [
        ("conditions", s.logical_conditions.mean, 6.4),
        ("nesting", s.nesting_levels.mean, 1.5),
        ("tables/query", s.tables.mean, 2.7),
        ("columns/query", s.columns.mean, 6.3),
        ("entities", s.medical_entities.mean, 2.0),
        ("question chars", s.question_length_chars.mean, 91.7),
        ("sql chars", s.sql_length_chars.mean, 796.4),
    ] {
        if (got - want).abs() > STATS_MEAN_TOL {
            f.push(format!("{what} mean {got:.2} vs {want}"));
        }
    }
    if elapsed > Duration::from_secs(5) {
        f.push(format!("took {elapsed:?}"));
    }
    outcome(
        "dataset-statistics",
        f,
        format!("306/13/44 counts, means within +-{STATS_MEAN_TOL}, {} ms", elapsed.as_millis()),
    )
}

fn tolerance_comparator() -> Outcome {
    let scalar = |v: f64| QueryResult::new(vec!["n".into()], vec![vec![Cell::Real(v)]]);
    let mut f = Vec::new();
    for (r, g, want) in [
        (100.0, 109.0, true),
        (100.0, 110.0, true),
        (100.0, 111.0, false),
        (0.0, 0.0, true),
        (0.0, f64::EPSILON, false),
        (-100.0, -110.0, true),
        (-100.0, -111.0, false),
    ] {
        let got = compare_answers(&scalar(r), &scalar(g), 0.10).correct;
        if got != want || within_tolerance(r, g, 0.10) != want {
            f.push(format!("({r},{g}) gave {got}"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut violations = 0;
    for _ in 0..1000 {
        let r: f64 = rng.gen_range(-1000.0..1000.0);
        let g = r * (1.0 + rng.gen_range(-0.5..0.5));
        let t1: f64 = rng.gen_range(0.0..0.5);
        let t2 = t1 + rng.gen_range(0.0..0.5);
        if within_tolerance(r, g, t1) && !within_tolerance(r, g, t2) {
            violations += 1;
        }
    }
    if violations > 0 {
        f.push(format!("{violations} monotonicity violations"));
    }
    outcome("tolerance-comparator", f, "7 boundary cases, 1000 random triples".into())
}

/// Cosine over independently embedded questions, ranked by score then pair id.
fn oracle_top_k(corpus: &[(String, Vec<f64>)], query: &[f64], k: usize) -> Vec<(String, f64)> {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut scored: Vec<(String, f64)> = corpus.iter().map(|(id, v)| (id.clone(), cos(query, v))).collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

fn retrieval_exactness() -> Outcome {
    let w = world();
    let e = HashEmbedder::default();
    let corpus: Vec<(String, Vec<f64>)> = w
        .pairs
        .iter()
        .map(|p| (p.id.clone(), e.embed(&mask_question(&p.question, &p.entities)).unwrap().values))
        .collect();
    let group: HashMap<&str, &str> = w.pairs.iter().map(|x| (x.id.as_str(), x.paraphrase_group.as_str())).collect();
    let mut f = Vec::new();
    let mut compared = 0;
    let mut spent = Duration::ZERO;
    for (p, (_, q)) in w.pairs.iter().zip(&corpus) {
        let masked = mask_question(&p.question, &p.entities);
        for k in [1, 2, 5] {
            let t = Instant::now();
            let got = top_k(&w.index, &masked, k, &Exclusion::none(), &e).unwrap();
            spent += t.elapsed();
            let want = oracle_top_k(&corpus, q, k);
            compared += 1;
            let same = got.len() == want.len()
                && got.iter().zip(&want).all(|(g, (id, s))| g.pair_id == *id && (g.score - s).abs() <= SCORE_TOL);
            if !same {
                f.push(format!("{} k={k} differs", p.id));
            }
        }
        let t = Instant::now();
        let hits = top_k(&w.index, &masked, 5, &Exclusion::leave_one_out(p, LeaveOut::Group), &e).unwrap();
        spent += t.elapsed();
        if hits.len() != 5 || hits.iter().any(|h| group[h.pair_id.as_str()] == p.paraphrase_group) {
            f.push(format!("{} leave-one-out returned its own paraphrase group", p.id));
        }
    }
    if spent > Duration::from_secs(10) {
        f.push(format!("took {spent:?}"));
    }
    f.truncate(5);
    outcome(
        "retrieval-exactness",
        f,
        format!("{compared} queries vs brute-force oracle, leave-one-out over {}, {} ms", w.pairs.len(), spent.as_millis()),
    )
}

/// `got` equals the top `n` of the full oracle ranking `want`. Scores must
/// agree within `SCORE_TOL`; ids may only reorder among oracle entries whose
/// scores tie within that tolerance, since two cosine formulas can order an
/// exact tie differently in the last ulp.
fn matches_oracle<K: PartialEq + Copy>(got: &[(K, f64)], want: &[(K, f64)], n: usize) -> bool {
    if got.len() != n.min(want.len()) {
        return false;
    }
    got.iter().enumerate().all(|(i, &(id, score))| {
        (score - want[i].1).abs() <= SCORE_TOL
            && want.iter().any(|&(w, s)| w == id && (s - score).abs() <= SCORE_TOL)
            && got[..i].iter().all(|&(prev, _)| prev != id)
    })
}

fn concept_fixture(n: usize) -> Vec<OntologyConcept> {
    const WORDS: &[&str] = &[
        "acute", "chronic", "renal", "hepatic", "cardiac", "failure", "infection", "syndrome", "disorder", "type",
        "tablet", "oral", "injection", "insulin", "pump", "stent", "lesion", "pain", "fever", "neoplasm", "ulcer",
        "benign", "malignant", "left", "right", "upper", "lower", "pulmonary", "vascular", "metformin",
    ];
    let domains = [DomainTag::Condition, DomainTag::Drug, DomainTag::Device, DomainTag::Procedure];
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    // Distinct word bags: the stub embedder ignores word order, and permuted
    // names would tie up to float summation order.
    let mut bags = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let len = rng.gen_range(1..5);
        let words: Vec<&str> = (0..len).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect();
        let mut bag = words.clone();
        bag.sort_unstable();
        if !bags.insert(bag) {
            continue;
        }
        let name = words.join(" ");
        let i = out.len();
        out.push(OntologyConcept {
            concept_id: 1_000_000 + i as i64,
            name,
            vocabulary: "TEST".into(),
            domain: domains[i % domains.len()],
            standard: true,
        });
    }
    out
}

fn coding() -> Outcome {
    let e = HashEmbedder::default();
    let w = world();
    let mut f = Vec::new();

    // Self-match over the bundled ontology; a concept sharing its name with a
    // lower id in the same partition is expected to lose the tie.
    let mut seen: BTreeMap<(DomainTag, String), i64> = BTreeMap::new();
    let mut self_checked = 0;
    for c in w.store.concepts() {
        let first = *seen.entry((c.domain, c.name.to_lowercase())).or_insert(c.concept_id);
        let top = &candidate_concepts(&c.name, c.domain, &w.store, &e, 1).unwrap()[0];
        self_checked += 1;
        if top.concept.concept_id != first || (top.score - 1.0).abs() > SELF_MATCH_TOL {
            f.push(format!("{} ranked {} at {:.12}", c.concept_id, top.concept.concept_id, top.score));
        }
    }

    // Exhaustive oracle on a 500-concept fixture.
    let fixture = concept_fixture(500);
    let store = OntologyStore::embed_with(fixture.clone(), &e).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let c = &fixture[rng.gen_range(0..fixture.len())];
        let mention = format!("{} {}", c.name, fixture[rng.gen_range(0..fixture.len())].name);
        let q = e.embed(&mention).unwrap();
        let mut want: Vec<(i64, f64)> = fixture
            .iter()
            .filter(|x| x.domain == c.domain)
            .map(|x| {
                let v = e.embed(&x.name).unwrap();
                let dot: f64 = q.values.iter().zip(&v.values).map(|(a, b)| a * b).sum();
                (x.concept_id, dot / (q.norm() * v.norm()))
            })
            .collect();
        want.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let got = candidate_concepts(&mention, c.domain, &store, &e, 50).unwrap();
        let got_all = rank_concepts(&q, c.domain, &store, 50, CandidateScope::Domain).unwrap();
        let ids: Vec<(i64, f64)> = got.iter().map(|g| (g.concept.concept_id, g.score)).collect();
        let ok = matches_oracle(&ids, &want, 50)
            && got.iter().zip(&got_all).all(|(a, b)| a.concept.concept_id == b.concept.concept_id);
        if !ok {
            f.push(format!("fixture mention `{mention}` differs from exhaustive ranking"));
            break;
        }
    }

    // Verification fallbacks.
    let cands = candidate_concepts("diabetes", DomainTag::Condition, &w.store, &e, 5).unwrap();
    let prompts = PromptBuilder::default();
    for (answer, ranks, fallback) in [
        ("1,3", vec![1, 3], None),
        ("none", vec![1], Some(FallbackReason::NoneAccepted)),
        ("I think the second one looks right", vec![1], Some(FallbackReason::Unparseable)),
    ] {
        let gw = LlmGateway::new(Arc::new(ScriptedProvider::new([answer.to_string()])), GatewayMode::Live);
        let out = verify_candidates("diabetes", DomainTag::Condition, &cands, &gw, &model("v"), &prompts).unwrap();
        if out.accepted_ranks != ranks || out.fallback != fallback {
            f.push(format!("answer `{answer}` gave {:?} {:?}", out.accepted_ranks, out.fallback));
        }
    }
    f.truncate(5);
    outcome(
        "coding",
        f,
        format!("{self_checked} self-matches, 100 mentions on a 500-concept fixture, 3 verification answers"),
    )
}

fn corpus_compatibility() -> Outcome {
    let w = world();
    let coder = MedicalCoder::new(w.store.clone(), Arc::new(HashEmbedder::default()));
    let mut f = Vec::new();
    for p in w.pairs.iter() {
        let res = SqlTemplate::parse(&p.sql_template)
            .map_err(|e| e.to_string())
            .and_then(|t| coder.resolve_rank1(&t).map(|c| (t, c)).map_err(|e| e.to_string()))
            .and_then(|(t, c)| render_sql(&t, &c).map_err(|e| e.to_string()))
            .and_then(|sql| {
                if contains_placeholder_syntax(&sql) {
                    return Err("placeholder left after rendering".into());
                }
                execute_sql(&w.db, &sql, &ExecLimits::default()).map_err(|e| e.to_string())
            });
        if let Err(e) = res {
            f.push(format!("{}: {e}", p.id));
        }
    }
    let n = f.len();
    f.truncate(5);
    outcome(
        "corpus-compatibility",
        f,
        format!("{} of {} templates parse, resolve and execute (seed 1, scale 1000)", w.pairs.len() - n, w.pairs.len()),
    )
}

fn self_repair_bound() -> Outcome {
    let script = |n_fail: usize| {
        let mut replies = vec!["[]".to_string()];
        replies.extend((0..n_fail).map(|i| format!("SELECT missing_{i} FROM person")));
        replies.push("SELECT COUNT(*) AS n FROM person".into());
        replies.push("Some patients.".into());
        LlmGateway::new(Arc::new(ScriptedProvider::new(replies)), GatewayMode::Live)
    };
    let mut f = Vec::new();
    let run = pipeline(script(2)).answer_question("How many patients are there?", &config("advanced"));
    if run.status != RunStatus::Completed || run.repairs_used != 2 {
        f.push(format!("two failures: {:?} after {} repairs", run.status, run.repairs_used));
    }
    let run = pipeline(script(4)).answer_question("How many patients are there?", &config("advanced"));
    if run.status != RunStatus::NotExecutable || run.repairs_used != 3 || run.attempts.len() != 4 {
        f.push(format!("four failures: {:?} after {} repairs", run.status, run.repairs_used));
    }
    outcome("self-repair-bound", f, "2 failures repaired, 4 failures stop after 3 repairs".into())
}

/// Scripted generator: per block of ten cases, six answer with the reference
/// template, two with an executable wrong query, two with broken SQL.
fn scripted_provider(cases: &[QuestionSqlPair]) -> Arc<dyn ChatProvider> {
    let by_question: HashMap<String, (usize, String)> = cases
        .iter()
        .enumerate()
        .map(|(i, p)| (format!("Question: {}\nSQL:", p.question), (i, p.sql_template.clone())))
        .collect();
    Arc::new(FnProvider::new(move |system: &str, user: &str| -> Result<String, ProviderError> {
        if system.starts_with("You find medical entities") {
            return Ok("[]".into());
        }
        if system.starts_with("You are a clinical coding") {
            return Ok("1".into());
        }
        if user.starts_with("The SQL below") {
            return Ok("SELECT FROM WHERE broken".into());
        }
        let (i, sql) = by_question
            .iter()
            .find(|(k, _)| user.trim_end().ends_with(k.as_str()))
            .map(|(_, v)| v.clone())
            .ok_or_else(|| ProviderError::Rejected(format!("unscripted prompt: {user}")))?;
        Ok(match i % 10 {
            0..=5 => format!("```sql\n{sql}\n```"),
            6 | 7 => "SELECT -987654321 AS wrong".into(),
            _ => "SELECT FROM WHERE broken".into(),
        })
    }))
}

fn harness_reports() -> &'static (EvalReport, EvalReport, EvalReport) {
    static R: OnceLock<(EvalReport, EvalReport, EvalReport)> = OnceLock::new();
    R.get_or_init(|| {
        let w = world();
        let cases: Vec<QuestionSqlPair> = w.pairs.iter().take(20).cloned().collect();
        let dir = tempfile::tempdir().unwrap();
        let modes = [config("advanced")];
        let opts = BenchOptions {
            parallelism: 4,
            audit_dir: None,
        };
        let recorder = pipeline(LlmGateway::new(scripted_provider(&cases), GatewayMode::Record(dir.path().into())));
        let refs = ReferenceCache::build(&recorder, &cases, &ExecLimits::default(), 4);
        let recorded = run_benchmark(&recorder, &cases, &modes, &refs, &opts).unwrap();
        let replay = || {
            let p = pipeline(LlmGateway::replay(dir.path()));
            run_benchmark(&p, &cases, &modes, &refs, &opts).unwrap()
        };
        (recorded, replay(), replay())
    })
}

fn harness_determinism() -> Outcome {
    let (recorded, a, b) = harness_reports();
    let mut f = Vec::new();
    if a.to_json() != b.to_json() {
        f.push("replays differ".into());
    }
    let verdicts = |r: &EvalReport| r.modes[0].verdicts.iter().map(|v| (v.correct, v.executable)).collect::<Vec<_>>();
    if verdicts(recorded) != verdicts(a) {
        f.push("replay verdicts differ from the recorded run".into());
    }
    let m = &a.modes[0];
    let (acc, exec) = (m.accuracy() * 100.0, m.executability() * 100.0);
    if (acc - 60.0).abs() > 1e-9 || (exec - 80.0).abs() > 1e-9 || m.infrastructure_failures != 0 {
        f.push(format!("Acc {acc:.1} Exec {exec:.1}, {} infrastructure failures", m.infrastructure_failures));
    }
    outcome(
        "harness-determinism",
        f,
        format!("20 cases replayed twice, Acc {acc:.1} Exec {exec:.1}"),
    )
}

fn report_layout() -> Outcome {
    let mode = |label: &str, title: &str, total: usize, correct: usize, exec: usize| ModeReport {
        mode: label.into(),
        title: title.into(),
        total,
        correct,
        executable: exec,
        infrastructure_failures: 0,
        verdicts: (0..total)
            .map(|i| Verdict {
                case_id: format!("c{i}"),
                executable: i < exec,
                correct: i < correct,
                infrastructure_failure: false,
                rule: None,
                detail: String::new(),
                repairs_used: 0,
                trace: String::new(),
            })
            .collect(),
    };
    let mut gpt = EvalReport::empty("gpt-4-turbo");
    gpt.modes = vec![
        mode("simple", "Prompt (simple)", 1000, 20, 78),
        mode("advanced", "Prompt (advanced)", 1000, 333, 520),
        mode("rag-top1", "RAG-top1", 1000, 725, 971),
        mode("oracle", "RAG-top1-oracle", 1000, 804, 990),
    ];
    let mut claude = EvalReport::empty("claude-2.1");
    claude.modes = vec![mode("rag-top1", "RAG-top1", 1000, 601, 900)];
    let md = render_markdown(&[gpt.clone(), claude.clone()]);
    let csv = render_csv(&[gpt.clone(), claude.clone()]);
    let mut f = Vec::new();
    let lines: Vec<&str> = md.lines().collect();
    let expect = [
        "| Mode | gpt-4-turbo Acc | gpt-4-turbo Exec | claude-2.1 Acc | claude-2.1 Exec |",
        "| Prompt (simple) | 2.0 | 7.8 | - | - |",
        "| RAG-top1 | 72.5 | 97.1 | 60.1 | 90.0 |",
        "| RAG-top1-oracle | 80.4 | 99.0 | - | - |",
    ];
    for e in expect {
        if !lines.contains(&e) {
            f.push(format!("missing row `{e}`"));
        }
    }
    if lines.len() != 6 || !csv.contains("RAG-top1,72.5,97.1,60.1,90.0") {
        f.push("layout shape".into());
    }
    let (_, live, _) = harness_reports();
    for r in [&gpt, &claude, live] {
        if let Err(e) = r.check_invariants() {
            f.push(e);
        }
    }
    outcome(
        "report-layout",
        f,
        "modes x (model Acc, Exec) table from stored verdicts; Acc <= Exec on every report".into(),
    )
}

#[test]
fn acceptance() {
    let outcomes = [
        dataset_statistics(),
        tolerance_comparator(),
        retrieval_exactness(),
        coding(),
        corpus_compatibility(),
        self_repair_bound(),
        harness_determinism(),
        report_layout(),
    ];
    let mut unexpected = Vec::new();
    for o in &outcomes {
        println!("{} {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.name, o.detail);
        if !o.pass && !KNOWN_RED.contains(&o.name) {
            unexpected.push(o.name);
        }
    }
    assert!(unexpected.is_empty(), "failing criteria: {unexpected:?}");
}
