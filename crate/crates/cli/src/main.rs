use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use epiquery::config::AppConfig;
use epiquery::dataset::{compute_stats, load_dataset, read_dataset, write_dataset};
use epiquery::evaluation::{render_csv, render_markdown, run_benchmark, BenchOptions, ReferenceCache};
use epiquery::executor::{execute_sql, generate_synthetic_data, init_database, open_database, DbTarget, QueryResult};
use epiquery::llm::GatewayMode;
use epiquery::pipeline::RunStatus;

#[derive(Parser)]
#[command(name = "epiquery", version, about = "Natural-language questions over OMOP CDM databases")]
struct Cli {
    /// TOML config; `epiquery.toml` in the working directory when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create, seed and query the database.
    #[command(subcommand)]
    Db(DbCommand),
    /// Answer one question and write its trace.
    Ask(AskArgs),
    /// Run the benchmark over the corpus.
    Bench(BenchArgs),
    /// Start the review service.
    Serve(ServeArgs),
    #[command(subcommand)]
    Dataset(DatasetCommand),
    #[command(subcommand)]
    Ontology(OntologyCommand),
}

#[derive(Subcommand)]
enum DbCommand {
    /// Create the schema (OMOP CDM subset plus the bundled vocabulary).
    Init {
        #[arg(long)]
        target: Option<String>,
    },
    /// Fill clinical tables with seeded synthetic patients.
    Seed {
        #[arg(long)]
        target: Option<String>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Number of persons.
        #[arg(long, default_value_t = 1000)]
        scale: usize,
    },
    Query {
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        sql: String,
    },
}

#[derive(Args)]
struct LlmArgs {
    /// Record provider replies into this transcript directory.
    #[arg(long, conflicts_with = "replay")]
    record: Option<PathBuf>,
    /// Serve replies only from this transcript directory.
    #[arg(long)]
    replay: Option<PathBuf>,
}

impl LlmArgs {
    fn gateway_mode(&self) -> GatewayMode {
        match (&self.record, &self.replay) {
            (Some(d), _) => GatewayMode::Record(d.clone()),
            (_, Some(d)) => GatewayMode::Replay(d.clone()),
            _ => GatewayMode::Live,
        }
    }
}

#[derive(Args)]
struct AskArgs {
    #[arg(long)]
    question: String,
    /// `simple` or `advanced`.
    #[arg(long)]
    mode: Option<String>,
    /// `none`, `topK`, `randomK` or `oracle`.
    #[arg(long)]
    rag: Option<String>,
    #[command(flatten)]
    llm: LlmArgs,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "simple,advanced,rag-top1,rag-top2,rag-top5,rag-random1,oracle")]
    modes: Vec<String>,
    /// Markdown table; a `.csv` file and a `.json` report are written next to it.
    #[arg(long, default_value = "report.md")]
    out: PathBuf,
    /// Per-case traces and verdicts.
    #[arg(long)]
    audit_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    parallelism: usize,
    /// Evaluate only the first N pairs.
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    llm: LlmArgs,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: String,
    /// Skip the code-review and SQL-approval checkpoints.
    #[arg(long)]
    auto_approve: bool,
    /// Review UI assets to serve at `/`.
    #[arg(long)]
    static_dir: Option<PathBuf>,
    /// Env var holding a bearer token that clients must send.
    #[arg(long)]
    token_env: Option<String>,
    #[command(flatten)]
    llm: LlmArgs,
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Corpus statistics as a markdown table.
    Stats {
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Validate a JSONL file and append its pairs to the corpus.
    Import {
        input: PathBuf,
        #[arg(long)]
        file: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum OntologyCommand {
    /// Write concept embeddings as `{concept_id, vector}` JSONL.
    Embed {
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Db(c) => db(&config, c),
        Command::Ask(a) => ask(&config, a),
        Command::Bench(b) => bench(&config, b),
        Command::Serve(s) => serve(&config, s),
        Command::Dataset(d) => dataset(&config, d),
        Command::Ontology(o) => ontology(&config, o),
    }
}

fn load_config(path: Option<&Path>) -> Result<AppConfig> {
    match path {
        Some(p) => Ok(AppConfig::load(p)?),
        None if Path::new("epiquery.toml").exists() => Ok(AppConfig::load("epiquery.toml")?),
        None => Ok(AppConfig::default()),
    }
}

fn target(config: &AppConfig, t: Option<String>) -> DbTarget {
    DbTarget::parse(t.as_deref().unwrap_or(&config.paths.database))
}

fn db(config: &AppConfig, cmd: DbCommand) -> Result<()> {
    match cmd {
        DbCommand::Init { target: t } => {
            let t = target(config, t);
            init_database(&t)?;
            println!("initialised {t}");
        }
        DbCommand::Seed { target: t, seed, scale } => {
            let db = open_database(&target(config, t))?;
            for (table, n) in generate_synthetic_data(&db, seed, scale)? {
                println!("{table}\t{n}");
            }
        }
        DbCommand::Query { target: t, sql } => {
            let db = open_database(&target(config, t))?;
            let limits = config.pipeline_config(None)?.limits;
            print!("{}", format_table(&execute_sql(&db, &sql, &limits)?));
        }
    }
    Ok(())
}

fn format_table(r: &QueryResult) -> String {
    let mut out = r.columns.join("\t");
    out.push('\n');
    for row in &r.rows {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        out.push_str(&cells.join("\t"));
        out.push('\n');
    }
    if r.truncated {
        out.push_str(&format!("(truncated at {} rows)\n", r.rows.len()));
    }
    out
}

/// Maps `--mode`/`--rag` onto a benchmark mode label.
fn mode_label(mode: Option<&str>, rag: Option<&str>) -> Result<Option<String>> {
    Ok(match (mode, rag) {
        (m, None | Some("none")) => m.map(str::to_string),
        (Some("simple"), Some(_)) => bail!("retrieval modes use the advanced prompt"),
        (_, Some(r)) => Some(format!("rag-{r}")),
    })
}

fn ask(config: &AppConfig, a: AskArgs) -> Result<()> {
    let label = mode_label(a.mode.as_deref(), a.rag.as_deref())?;
    let cfg = config.pipeline_config(label.as_deref())?;
    let pipeline = config.build_pipeline(a.llm.gateway_mode())?;
    let run = pipeline.answer_question(&a.question, &cfg);
    let path = run.save(&config.paths.runs)?;
    println!("trace: {}", path.display());
    match run.status {
        RunStatus::Completed => {
            if let Some(r) = &run.result {
                print!("{}", format_table(r));
            }
            println!("{}", run.answer.as_deref().unwrap_or(""));
            Ok(())
        }
        _ => {
            let why = run
                .failure
                .as_ref()
                .map(|f| format!("{} stage: {}", f.stage, f.message))
                .or_else(|| run.db_error.as_ref().map(|e| e.to_string()))
                .unwrap_or_default();
            bail!("run {} ended {:?}: {why}", run.run_id, run.status)
        }
    }
}

fn bench(config: &AppConfig, b: BenchArgs) -> Result<()> {
    let pipeline = config.build_pipeline(b.llm.gateway_mode())?;
    let mut pairs: Vec<_> = pipeline.pairs.as_ref().clone();
    if let Some(n) = b.limit {
        pairs.truncate(n);
    }
    let modes = b
        .modes
        .iter()
        .map(|m| config.pipeline_config(Some(m)))
        .collect::<Result<Vec<_>, _>>()?;
    let refs = ReferenceCache::build(&pipeline, &pairs, &modes[0].limits, b.parallelism);
    for (id, e) in refs.failures() {
        eprintln!("reference {id} failed: {e}");
    }
    let opts = BenchOptions {
        parallelism: b.parallelism,
        audit_dir: b.audit_dir.clone(),
    };
    let report = run_benchmark(&pipeline, &pairs, &modes, &refs, &opts)?;
    let reports = [report];
    let md = render_markdown(&reports);
    std::fs::write(&b.out, &md).with_context(|| format!("writing {}", b.out.display()))?;
    std::fs::write(b.out.with_extension("csv"), render_csv(&reports))?;
    reports[0].save(b.out.with_extension("json"))?;
    print!("{md}");
    Ok(())
}

fn serve(config: &AppConfig, s: ServeArgs) -> Result<()> {
    let pipeline = match config.build_pipeline(s.llm.gateway_mode()) {
        Ok(p) => Some(Arc::new(p)),
        Err(e) => {
            eprintln!("pipeline unavailable, questions will be refused: {e}");
            None
        }
    };
    let api_token = match &s.token_env {
        Some(v) => Some(std::env::var(v).with_context(|| format!("{v} is not set"))?),
        None => None,
    };
    let options = epiquery_service::ServiceOptions {
        runs_dir: config.paths.runs.clone(),
        auto_approve: s.auto_approve,
        base_config: config.pipeline_config(None)?,
        api_token,
        static_dir: s.static_dir,
    };
    let state = epiquery_service::AppState::new(pipeline, options)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&s.bind).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, epiquery_service::router(state)).await?;
        Ok(())
    })
}

fn dataset(config: &AppConfig, cmd: DatasetCommand) -> Result<()> {
    match cmd {
        DatasetCommand::Stats { file } => {
            let pairs = load_dataset(file.as_ref().unwrap_or(&config.paths.dataset))?;
            let stats = compute_stats(&pairs)?;
            print!("{}", stats.to_markdown());
            for f in &stats.flagged {
                eprintln!("flagged: {f:?}");
            }
        }
        DatasetCommand::Import { input, file } => {
            let target = file.unwrap_or_else(|| config.paths.dataset.clone());
            let mut pairs = if target.exists() { load_dataset(&target)? } else { vec![] };
            let reader = std::io::BufReader::new(std::fs::File::open(&input).with_context(|| input.display().to_string())?);
            let new = read_dataset(reader)?;
            let n = new.len();
            pairs.extend(new);
            // Re-read the merged corpus so duplicate ids are caught before writing.
            let tmp = target.with_extension("jsonl.tmp");
            write_dataset(&tmp, &pairs)?;
            if let Err(e) = load_dataset(&tmp) {
                std::fs::remove_file(&tmp)?;
                return Err(e.into());
            }
            std::fs::rename(&tmp, &target)?;
            println!("imported {n} pairs into {}", target.display());
        }
    }
    Ok(())
}

fn ontology(config: &AppConfig, cmd: OntologyCommand) -> Result<()> {
    match cmd {
        OntologyCommand::Embed { out } => {
            let concepts = match &config.paths.concepts {
                Some(p) => epiquery::coding::read_concepts_tsv(std::fs::File::open(p)?)?,
                None => epiquery::coding::read_concepts_tsv(epiquery::executor::bundled_concepts_tsv().as_bytes())?,
            };
            let embedder = config.mention_embedder.build()?;
            let mut w = std::io::BufWriter::new(std::fs::File::create(&out)?);
            let n = epiquery::coding::write_concept_embeddings(&concepts, embedder.as_ref(), &mut w)?;
            println!("wrote {n} vectors to {}", out.display());
        }
    }
    Ok(())
}
