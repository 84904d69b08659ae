//! OMOP subset database: schema creation, synthetic data and guarded execution.
//!
//! The built-in engine is SQLite. Queries run on a separate read-only
//! connection with `query_only` set, a wall-clock budget enforced through the
//! progress handler, and a row cap.

mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use rusqlite::types::ValueRef;
use rusqlite::{Connection, ErrorCode, OpenFlags};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::placeholder::{validate_template, TemplateIssue};
use crate::schema::{SchemaCatalog, OMOP_DDL, SCHEMA_VERSION};

pub use synth::generate_synthetic_data;

const CONCEPTS_TSV: &str = include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/ontology/concepts.tsv"));
const ANCESTORS_TSV: &str = include_str!(concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/../../data/ontology/concept_ancestor.tsv"
));

/// Bundled concept table as TSV (OMOP concept column names).
pub fn bundled_concepts_tsv() -> &'static str {
    CONCEPTS_TSV
}

/// Bundled `concept_ancestor` table as TSV.
pub fn bundled_ancestors_tsv() -> &'static str {
    ANCESTORS_TSV
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cell {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
    /// ISO `YYYY-MM-DD` text.
    Date(String),
}

impl Cell {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Integer(i) => Some(*i as f64),
            Cell::Real(r) => Some(*r),
            _ => None,
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, Cell::Integer(_) | Cell::Real(_))
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Null => f.write_str("NULL"),
            Cell::Integer(i) => write!(f, "{i}"),
            Cell::Real(r) => write!(f, "{r}"),
            Cell::Text(s) | Cell::Date(s) => f.write_str(s),
        }
    }
}

fn is_iso_date(s: &str) -> bool {
    let b = s.as_bytes();
    b.len() == 10
        && b[4] == b'-'
        && b[7] == b'-'
        && b.iter().enumerate().all(|(i, c)| i == 4 || i == 7 || c.is_ascii_digit())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    pub row_count: usize,
    /// Set when the row cap cut the result short.
    pub truncated: bool,
    pub elapsed_ms: u64,
}

impl QueryResult {
    pub fn new(columns: Vec<String>, rows: Vec<Vec<Cell>>) -> Self {
        let row_count = rows.len();
        Self {
            columns,
            rows,
            row_count,
            truncated: false,
            elapsed_ms: 0,
        }
    }

    /// The value of a 1x1 result.
    pub fn scalar(&self) -> Option<&Cell> {
        match (self.columns.len(), self.rows.as_slice()) {
            (1, [row]) => row.first(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DbErrorCategory {
    Syntax,
    MissingObject,
    Type,
    Timeout,
    Other,
}

/// A failed statement. `message` is the engine's text, unmodified.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{message}")]
pub struct DbError {
    pub category: DbErrorCategory,
    pub message: String,
}

impl DbError {
    pub fn new(category: DbErrorCategory, message: impl Into<String>) -> Self {
        Self {
            category,
            message: message.into(),
        }
    }

    fn from_sqlite(e: &rusqlite::Error) -> Self {
        let message = e.to_string();
        let lower = message.to_ascii_lowercase();
        let category = match e {
            rusqlite::Error::SqliteFailure(f, _) if f.code == ErrorCode::OperationInterrupted => DbErrorCategory::Timeout,
            rusqlite::Error::SqliteFailure(f, _) if f.code == ErrorCode::TypeMismatch => DbErrorCategory::Type,
            rusqlite::Error::InvalidColumnType(..) | rusqlite::Error::FromSqlConversionFailure(..) => DbErrorCategory::Type,
            _ if lower.contains("syntax error") || lower.contains("incomplete input") || lower.contains("unrecognized token") => {
                DbErrorCategory::Syntax
            }
            _ if lower.contains("no such ") => DbErrorCategory::MissingObject,
            _ if lower.contains("mismatch") || lower.contains("wrong number of arguments") => DbErrorCategory::Type,
            _ if lower.contains("interrupted") => DbErrorCategory::Timeout,
            _ => DbErrorCategory::Other,
        };
        DbError { category, message }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecLimits {
    #[serde(with = "duration_ms")]
    pub timeout: Duration,
    pub max_rows: usize,
}

impl Default for ExecLimits {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(30),
            max_rows: 10_000,
        }
    }
}

mod duration_ms {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

/// Backend seam. The pipeline only talks to this trait.
pub trait QueryEngine: Send + Sync {
    fn execute(&self, sql: &str, limits: &ExecLimits) -> Result<QueryResult, DbError>;
    /// Compiles without reading rows.
    fn check(&self, sql: &str) -> Result<(), DbError>;
    fn describe(&self) -> String;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DbTarget {
    File(PathBuf),
    /// Named in-memory database, shared between connections of this process.
    Memory(String),
    /// Server descriptor such as `postgres://...`; no driver is built in.
    Server(String),
}

impl DbTarget {
    pub fn parse(s: &str) -> DbTarget {
        let s = s.trim();
        if s == ":memory:" {
            static N: AtomicU64 = AtomicU64::new(0);
            return DbTarget::Memory(format!("anon{}", N.fetch_add(1, Ordering::Relaxed)));
        }
        if let Some(name) = s.strip_prefix("memory:") {
            return DbTarget::Memory(name.to_string());
        }
        if s.contains("://") {
            return DbTarget::Server(s.to_string());
        }
        DbTarget::File(PathBuf::from(s))
    }

    fn uri(&self) -> Option<String> {
        match self {
            DbTarget::File(p) => Some(format!("file:{}", p.display())),
            DbTarget::Memory(name) => Some(format!("file:epiquery-{name}?mode=memory&cache=shared")),
            DbTarget::Server(_) => None,
        }
    }
}

impl fmt::Display for DbTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DbTarget::File(p) => write!(f, "{}", p.display()),
            DbTarget::Memory(n) => write!(f, "memory:{n}"),
            DbTarget::Server(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Error)]
pub enum InitError {
    #[error("cannot connect to {target}: {message}")]
    Connection { target: String, message: String },
    #[error("incompatible existing schema: {0}")]
    IncompatibleSchema(String),
    #[error("schema not initialized (missing table `{0}`)")]
    SchemaMissing(String),
    #[error("database error: {0}")]
    Sqlite(#[from] rusqlite::Error),
}

/// Handle to an initialized database.
pub struct Database {
    target: DbTarget,
    uri: String,
    /// Single writer, also keeps a named in-memory database alive.
    writer: Mutex<Connection>,
}

impl fmt::Debug for Database {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Database").field("target", &self.target).finish()
    }
}

fn open_flags(read_only: bool) -> OpenFlags {
    let base = OpenFlags::SQLITE_OPEN_URI | OpenFlags::SQLITE_OPEN_NO_MUTEX;
    if read_only {
        base | OpenFlags::SQLITE_OPEN_READ_ONLY
    } else {
        base | OpenFlags::SQLITE_OPEN_READ_WRITE | OpenFlags::SQLITE_OPEN_CREATE
    }
}

fn table_columns(conn: &Connection, table: &str) -> rusqlite::Result<Vec<String>> {
    let mut stmt = conn.prepare(&format!("PRAGMA table_info(\"{table}\")"))?;
    let cols = stmt
        .query_map([], |r| r.get::<_, String>(1))?
        .collect::<rusqlite::Result<Vec<_>>>()?;
    Ok(cols.into_iter().map(|c| c.to_ascii_lowercase()).collect())
}

/// Creates the OMOP subset schema (idempotent) and loads the bundled vocabulary.
pub fn init_database(target: &DbTarget) -> Result<Database, InitError> {
    let uri = target.uri().ok_or_else(|| InitError::Connection {
        target: target.to_string(),
        message: "server databases need an external driver; only embedded targets are built in".into(),
    })?;
    let conn = Connection::open_with_flags(&uri, open_flags(false)).map_err(|e| InitError::Connection {
        target: target.to_string(),
        message: e.to_string(),
    })?;
    conn.busy_timeout(Duration::from_secs(10))?;

    let version: i64 = conn.query_row("PRAGMA user_version", [], |r| r.get(0))?;
    if version != 0 && version != SCHEMA_VERSION {
        return Err(InitError::IncompatibleSchema(format!(
            "schema version {version}, expected {SCHEMA_VERSION}"
        )));
    }
    let catalog = SchemaCatalog::bundled();
    for table in catalog.table_names() {
        let existing = table_columns(&conn, table)?;
        if existing.is_empty() {
            continue;
        }
        let expected = catalog.columns_of(table).unwrap_or_default();
        if existing != expected {
            return Err(InitError::IncompatibleSchema(format!(
                "table `{table}` has columns ({}), expected ({})",
                existing.join(", "),
                expected.join(", ")
            )));
        }
    }
    conn.execute_batch(OMOP_DDL)?;
    conn.pragma_update(None, "user_version", SCHEMA_VERSION)?;
    load_vocabulary(&conn)?;

    Ok(Database {
        target: target.clone(),
        uri,
        writer: Mutex::new(conn),
    })
}

/// Opens an existing database, failing if the schema is absent.
pub fn open_database(target: &DbTarget) -> Result<Database, InitError> {
    if let DbTarget::File(p) = target {
        if !p.exists() {
            return Err(InitError::Connection {
                target: target.to_string(),
                message: "file does not exist".into(),
            });
        }
    }
    let db = init_database(target)?;
    Ok(db)
}

fn load_vocabulary(conn: &Connection) -> rusqlite::Result<()> {
    let existing: i64 = conn.query_row("SELECT COUNT(*) FROM concept", [], |r| r.get(0))?;
    if existing > 0 {
        return Ok(());
    }
    let tx = conn.unchecked_transaction()?;
    {
        let mut ins = tx.prepare(
            "INSERT OR IGNORE INTO concept (concept_id, concept_name, domain_id, vocabulary_id, standard_concept) \
             VALUES (?1, ?2, ?3, ?4, NULLIF(?5, ''))",
        )?;
        for line in CONCEPTS_TSV.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            let id: i64 = f[0].parse().expect("bundled concept id");
            ins.execute(rusqlite::params![id, f[1], f[3], f[2], f.get(4).copied().unwrap_or("")])?;
        }
        let mut anc = tx.prepare("INSERT OR IGNORE INTO concept_ancestor (ancestor_concept_id, descendant_concept_id) VALUES (?1, ?2)")?;
        for line in ANCESTORS_TSV.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let (a, d) = line.split_once('\t').expect("bundled ancestor row");
            anc.execute([a.parse::<i64>().expect("id"), d.trim().parse::<i64>().expect("id")])?;
        }
    }
    tx.commit()
}

const STATEMENT_VERBS: &[&str] = &[
    "INSERT", "UPDATE", "DELETE", "REPLACE", "UPSERT", "MERGE", "DROP", "CREATE", "ALTER", "TRUNCATE", "ATTACH",
    "DETACH", "PRAGMA", "VACUUM", "REINDEX", "ANALYZE", "BEGIN", "COMMIT", "ROLLBACK", "SAVEPOINT", "RELEASE",
    "GRANT", "REVOKE", "EXPLAIN",
];

/// Rejects statements that are not a single read. Unknown leading words are
/// left for the engine to report as syntax errors.
fn policy_error(sql: &str) -> Option<DbError> {
    let issues = validate_template(sql);
    let blocking = issues.iter().find(|i| match i {
        TemplateIssue::NonSelectStatement { keyword } => STATEMENT_VERBS.contains(&keyword.as_str()),
        TemplateIssue::MultipleStatements | TemplateIssue::EmptyStatement => true,
        _ => false,
    })?;
    Some(DbError::new(DbErrorCategory::Other, format!("rejected: {blocking}")))
}

impl Database {
    pub fn target(&self) -> &DbTarget {
        &self.target
    }

    pub(crate) fn with_writer<T>(&self, f: impl FnOnce(&mut Connection) -> T) -> T {
        f(&mut self.writer.lock())
    }

    fn reader(&self) -> Result<Connection, DbError> {
        let conn = Connection::open_with_flags(&self.uri, open_flags(true))
            .map_err(|e| DbError::new(DbErrorCategory::Other, e.to_string()))?;
        conn.pragma_update(None, "query_only", true)
            .map_err(|e| DbError::from_sqlite(&e))?;
        conn.busy_timeout(Duration::from_secs(5)).map_err(|e| DbError::from_sqlite(&e))?;
        Ok(conn)
    }

    /// Row count per table, sorted by table name.
    pub fn table_counts(&self) -> rusqlite::Result<BTreeMap<String, usize>> {
        let conn = self.writer.lock();
        let mut out = BTreeMap::new();
        for t in SchemaCatalog::bundled().table_names() {
            let n: i64 = conn.query_row(&format!("SELECT COUNT(*) FROM {t}"), [], |r| r.get(0))?;
            out.insert(t.to_string(), n as usize);
        }
        Ok(out)
    }

    /// SHA-256 over every row of every schema table.
    pub fn checksum(&self) -> rusqlite::Result<String> {
        let conn = self.writer.lock();
        let mut hasher = Sha256::new();
        for t in SchemaCatalog::bundled().table_names() {
            hasher.update(t.as_bytes());
            let mut stmt = conn.prepare(&format!("SELECT * FROM {t} ORDER BY rowid"))?;
            let n = stmt.column_count();
            let mut rows = stmt.query([])?;
            while let Some(row) = rows.next()? {
                for i in 0..n {
                    let cell = cell_from(row.get_ref(i)?);
                    hasher.update(format!("{cell:?}\u{1f}").as_bytes());
                }
                hasher.update(b"\x1e");
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }
}

fn cell_from(v: ValueRef<'_>) -> Cell {
    match v {
        ValueRef::Null => Cell::Null,
        ValueRef::Integer(i) => Cell::Integer(i),
        ValueRef::Real(r) => Cell::Real(r),
        ValueRef::Text(t) => {
            let s = String::from_utf8_lossy(t).into_owned();
            if is_iso_date(&s) {
                Cell::Date(s)
            } else {
                Cell::Text(s)
            }
        }
        ValueRef::Blob(b) => Cell::Text(hex::encode(b)),
    }
}

/// Runs one SELECT under `limits`. Every failure is a `DbError`.
pub fn execute_sql(db: &Database, sql: &str, limits: &ExecLimits) -> Result<QueryResult, DbError> {
    if let Some(e) = policy_error(sql) {
        return Err(e);
    }
    let conn = db.reader()?;
    let started = Instant::now();
    let deadline = started + limits.timeout;
    conn.progress_handler(1_000, Some(move || Instant::now() > deadline));
    let run = || -> Result<QueryResult, rusqlite::Error> {
        let mut stmt = conn.prepare(sql)?;
        let columns: Vec<String> = stmt.column_names().iter().map(|c| c.to_string()).collect();
        let n = columns.len();
        let mut rows = Vec::new();
        let mut truncated = false;
        let mut cursor = stmt.query([])?;
        while let Some(row) = cursor.next()? {
            if rows.len() == limits.max_rows {
                truncated = true;
                break;
            }
            let mut cells = Vec::with_capacity(n);
            for i in 0..n {
                cells.push(cell_from(row.get_ref(i)?));
            }
            rows.push(cells);
        }
        let row_count = rows.len();
        Ok(QueryResult {
            columns,
            rows,
            row_count,
            truncated,
            elapsed_ms: started.elapsed().as_millis() as u64,
        })
    };
    let out = run().map_err(|e| DbError::from_sqlite(&e));
    conn.progress_handler(0, None::<fn() -> bool>);
    out
}

/// Compiles `sql` against the schema without stepping it.
pub fn check_sql(db: &Database, sql: &str) -> Result<(), DbError> {
    if let Some(e) = policy_error(sql) {
        return Err(e);
    }
    let conn = db.reader()?;
    conn.prepare(sql).map(|_| ()).map_err(|e| DbError::from_sqlite(&e))
}

impl QueryEngine for Database {
    fn execute(&self, sql: &str, limits: &ExecLimits) -> Result<QueryResult, DbError> {
        execute_sql(self, sql, limits)
    }

    fn check(&self, sql: &str) -> Result<(), DbError> {
        check_sql(self, sql)
    }

    fn describe(&self) -> String {
        format!("sqlite {}", self.target)
    }
}
