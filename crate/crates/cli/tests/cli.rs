use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;

use assert_cmd::Command;

const CORPUS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/corpus/epi_questions.jsonl");

fn epiquery(dir: &Path) -> Command {
    let mut c = Command::cargo_bin("epiquery").unwrap();
    c.current_dir(dir).env("RUST_BACKTRACE", "0");
    c
}

/// OpenAI-compatible mock answering by prompt kind.
fn mock_openai() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let req: serde_json::Value = serde_json::from_slice(&body).unwrap();
            let system = req["messages"][0]["content"].as_str().unwrap_or("");
            let text = if system.starts_with("You find medical entities") {
                r#"[{"mention": "disphagia", "domain": "condition"}]"#
            } else if system.starts_with("You write SQLite") {
                "```sql\nSELECT COUNT(DISTINCT person_id) AS n FROM condition_occurrence WHERE condition_concept_id IN [condition@disphagia]\n```"
            } else if system.starts_with("You are a clinical coding") {
                "1"
            } else {
                "Twelve patients had dysphagia."
            };
            let reply = serde_json::json!({
                "choices": [{"message": {"role": "assistant", "content": text}}],
                "usage": {"prompt_tokens": 10, "completion_tokens": 5}
            })
            .to_string();
            let _ = write!(
                stream,
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{reply}",
                reply.len()
            );
        }
    });
    format!("http://{addr}")
}

fn write_config(dir: &Path, base_url: &str) {
    let cfg = format!(
        "[llm]\nprovider = \"openai\"\nmodel = \"mock\"\nbase_url = \"{base_url}\"\napi_key_env = \"MOCK_KEY\"\nmax_retries = 0\n\n[paths]\ndataset = \"{CORPUS}\"\ndatabase = \"t.db\"\nruns = \"runs\"\n"
    );
    std::fs::write(dir.join("epiquery.toml"), cfg).unwrap();
}

#[test]
fn db_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    epiquery(dir.path()).args(["db", "init", "--target", "x.db"]).assert().success();
    let out = epiquery(dir.path()).args(["db", "seed", "--target", "x.db", "--seed", "3", "--scale", "40"]).assert().success();
    assert!(String::from_utf8_lossy(&out.get_output().stdout).contains("person\t40"));
    let out = epiquery(dir.path())
        .args(["db", "query", "--target", "x.db", "--sql", "SELECT COUNT(*) AS n FROM person"])
        .assert()
        .success();
    assert_eq!(String::from_utf8_lossy(&out.get_output().stdout), "n\n40\n");
    epiquery(dir.path())
        .args(["db", "query", "--target", "x.db", "--sql", "SELECT * FROM nowhere"])
        .assert()
        .failure();
}

#[test]
fn dataset_stats_and_import() {
    let dir = tempfile::tempdir().unwrap();
    let out = epiquery(dir.path()).args(["dataset", "stats", "--file", CORPUS]).assert().success();
    assert!(String::from_utf8_lossy(&out.get_output().stdout).starts_with("pairs: 306\n"));

    let first = std::fs::read_to_string(CORPUS).unwrap().lines().next().unwrap().to_string();
    let target = dir.path().join("c.jsonl");
    std::fs::write(dir.path().join("one.jsonl"), format!("{first}\n")).unwrap();
    epiquery(dir.path())
        .args(["dataset", "import", "one.jsonl", "--file", "c.jsonl"])
        .assert()
        .success();
    // Importing the same id twice is rejected and leaves the corpus untouched.
    epiquery(dir.path())
        .args(["dataset", "import", "one.jsonl", "--file", "c.jsonl"])
        .assert()
        .failure();
    assert_eq!(std::fs::read_to_string(&target).unwrap().lines().count(), 1);
}

#[test]
fn ontology_embed_writes_one_vector_per_concept() {
    let dir = tempfile::tempdir().unwrap();
    epiquery(dir.path()).args(["ontology", "embed", "--out", "e.jsonl"]).assert().success();
    let text = std::fs::read_to_string(dir.path().join("e.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["vector"].as_array().unwrap().len(), 256);
    assert!(text.lines().count() > 100);
}

#[test]
fn ask_writes_trace_and_answer() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &mock_openai());
    epiquery(dir.path()).args(["db", "init"]).assert().success();
    epiquery(dir.path()).args(["db", "seed", "--scale", "100"]).assert().success();
    let out = epiquery(dir.path())
        .env("MOCK_KEY", "k")
        .args(["ask", "--question", "How many patients were diagnosed with disphagia?", "--mode", "advanced", "--rag", "top1", "--record", "tx"])
        .assert()
        .success();
    let stdout = String::from_utf8_lossy(&out.get_output().stdout).to_string();
    let trace = stdout.lines().next().unwrap().strip_prefix("trace: ").unwrap();
    assert!(stdout.ends_with("Twelve patients had dysphagia.\n"), "{stdout}");
    let run: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join(trace)).unwrap()).unwrap();
    assert_eq!(run["status"], "completed");
    assert_eq!(run["exemplar_ids"].as_array().unwrap().len(), 1);
    assert!(std::fs::read_dir(dir.path().join("tx")).unwrap().count() >= 4);

    // The recorded transcripts replay without the provider.
    epiquery(dir.path())
        .args(["ask", "--question", "How many patients were diagnosed with disphagia?", "--mode", "advanced", "--rag", "top1", "--replay", "tx"])
        .assert()
        .success();
    epiquery(dir.path())
        .args(["ask", "--question", "something new", "--replay", "tx"])
        .assert()
        .failure();
    epiquery(dir.path())
        .args(["ask", "--question", "q", "--mode", "simple", "--rag", "top1"])
        .assert()
        .failure();
}

#[test]
fn bench_writes_report_files() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &mock_openai());
    epiquery(dir.path()).args(["db", "init"]).assert().success();
    epiquery(dir.path()).args(["db", "seed", "--scale", "100"]).assert().success();
    let out = epiquery(dir.path())
        .env("MOCK_KEY", "k")
        .args(["bench", "--modes", "simple,rag-top1", "--limit", "3", "--out", "r.md", "--audit-dir", "audit"])
        .assert()
        .success();
    let md = String::from_utf8_lossy(&out.get_output().stdout).to_string();
    assert!(md.starts_with("| Mode | mock Acc | mock Exec |"), "{md}");
    assert!(md.contains("| Prompt (simple) |"));
    assert!(md.contains("| RAG-top1 |"));
    assert!(dir.path().join("r.csv").exists());
    assert!(dir.path().join("r.json").exists());
    assert!(dir.path().join("audit").is_dir());
}
