//! Read-only query execution against SQLite files with an interrupt-based
//! timeout, result canonicalization, the EX comparator, result fingerprints
//! and execution-grouped majority voting.

use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use rusqlite::types::ValueRef;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::sha256_hex;

/// Result rows beyond this count turn the outcome into `Error("oversized")`.
pub const MAX_ROWS: usize = 100_000;

const FLOAT_DECIMALS: i32 = 6;
const PROGRESS_OPS: i32 = 1_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecStatus {
    Rows,
    Error,
    Timeout,
}

/// A normalized result value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Cell {
    Null,
    Int(i64),
    /// Rounded to six decimals; never integral.
    Real(f64),
    Text(String),
    Blob(Vec<u8>),
}

impl Cell {
    /// Collapses integral reals to integers, rounds other reals to six
    /// decimals and strips trailing NUL characters from text.
    pub fn normalized(self) -> Cell {
        match self {
            Cell::Real(x) if x.is_finite() && x.fract() == 0.0 && x.abs() < 9.0e15 => Cell::Int(x as i64),
            Cell::Real(x) if x.is_finite() => {
                let scale = 10f64.powi(FLOAT_DECIMALS);
                let r = (x * scale).round() / scale;
                if r.fract() == 0.0 && r.abs() < 9.0e15 {
                    Cell::Int(r as i64)
                } else {
                    Cell::Real(r)
                }
            }
            Cell::Text(s) => Cell::Text(s.trim_end_matches('\0').to_string()),
            other => other,
        }
    }

    /// Injective text encoding of a normalized cell.
    pub fn encode(&self) -> String {
        match self {
            Cell::Null => "N".into(),
            Cell::Int(i) => format!("I:{i}"),
            Cell::Real(x) => format!("R:{x:.6}"),
            Cell::Text(s) => format!("T:{}:{s}", s.len()),
            Cell::Blob(b) => format!("B:{}", hex::encode(b)),
        }
    }
}

fn encode_row(row: &[Cell]) -> String {
    row.iter().map(Cell::encode).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecOutcome {
    pub status: ExecStatus,
    pub rows: Vec<Vec<Cell>>,
    pub column_count: usize,
    pub error_text: String,
    /// Error class (engine result code or a local tag); empty unless `Error`.
    pub error_class: String,
    pub elapsed_ms: u64,
}

impl ExecOutcome {
    pub fn rows(column_count: usize, rows: Vec<Vec<Cell>>) -> Self {
        Self {
            status: ExecStatus::Rows,
            rows: rows
                .into_iter()
                .map(|r| r.into_iter().map(Cell::normalized).collect())
                .collect(),
            column_count,
            error_text: String::new(),
            error_class: String::new(),
            elapsed_ms: 0,
        }
    }

    pub fn error(class: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            status: ExecStatus::Error,
            rows: Vec::new(),
            column_count: 0,
            error_text: text.into(),
            error_class: class.into(),
            elapsed_ms: 0,
        }
    }

    pub fn timeout() -> Self {
        Self {
            status: ExecStatus::Timeout,
            rows: Vec::new(),
            column_count: 0,
            error_text: "interrupted after timeout".into(),
            error_class: String::new(),
            elapsed_ms: 0,
        }
    }

    pub fn is_rows(&self) -> bool {
        self.status == ExecStatus::Rows
    }

    /// Sorted canonical row encodings: the row multiset as a comparable value.
    pub fn canonical_rows(&self) -> Vec<String> {
        let mut enc: Vec<String> = self.rows.iter().map(|r| encode_row(r)).collect();
        enc.sort();
        enc
    }

    pub fn fingerprint(&self) -> ResultFingerprint {
        fingerprint(self)
    }

    pub fn summary(&self) -> ExecSummary {
        ExecSummary {
            status: self.status,
            column_count: self.column_count,
            row_count: self.rows.len(),
            fingerprint: self.fingerprint().0,
        }
    }
}

/// The persisted part of an outcome. Timing is left out so records are
/// reproducible.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecSummary {
    pub status: ExecStatus,
    pub column_count: usize,
    pub row_count: usize,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ResultFingerprint(pub String);

/// Runs `sql` on a read-only connection to `db_path`. Only statements the
/// engine reports as read-only are stepped; running past `timeout_ms`
/// interrupts the statement and yields `Timeout`.
pub fn execute(db_path: &Path, sql: &str, timeout_ms: u64) -> ExecOutcome {
    let start = Instant::now();
    let mut out = execute_inner(db_path, sql, Duration::from_millis(timeout_ms));
    out.elapsed_ms = start.elapsed().as_millis() as u64;
    out
}

fn error_class(e: &rusqlite::Error) -> String {
    match e {
        rusqlite::Error::SqliteFailure(code, _) => format!("{:?}", code.code),
        other => format!("{:?}", std::mem::discriminant(other))
            .chars()
            .filter(|c| c.is_alphanumeric())
            .collect(),
    }
}

fn execute_inner(db_path: &Path, sql: &str, timeout: Duration) -> ExecOutcome {
    if !db_path.is_file() {
        return ExecOutcome::error("missing_database", format!("no database at {}", db_path.display()));
    }
    let flags = OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX;
    let conn = match Connection::open_with_flags(db_path, flags) {
        Ok(c) => c,
        Err(e) => return ExecOutcome::error(error_class(&e), e.to_string()),
    };
    let deadline = Instant::now() + timeout;
    let timed_out = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&timed_out);
    let installed = conn.progress_handler(
        PROGRESS_OPS,
        Some(move || {
            if Instant::now() >= deadline {
                flag.store(true, Ordering::SeqCst);
                true
            } else {
                false
            }
        }),
    );
    if let Err(e) = installed {
        return ExecOutcome::error(error_class(&e), e.to_string());
    }
    let classify = |e: rusqlite::Error| {
        if timed_out.load(Ordering::SeqCst) {
            ExecOutcome::timeout()
        } else {
            ExecOutcome::error(error_class(&e), e.to_string())
        }
    };
    let mut stmt = match conn.prepare(sql) {
        Ok(s) => s,
        Err(e) => return classify(e),
    };
    if !stmt.readonly() {
        return ExecOutcome::error("not_read_only", "statement would modify the database");
    }
    let column_count = stmt.column_count();
    let mut rows_iter = match stmt.query([]) {
        Ok(r) => r,
        Err(e) => return classify(e),
    };
    let mut rows = Vec::new();
    loop {
        match rows_iter.next() {
            Ok(Some(row)) => {
                if rows.len() == MAX_ROWS {
                    return ExecOutcome::error("oversized", "oversized");
                }
                let mut cells = Vec::with_capacity(column_count);
                for i in 0..column_count {
                    let cell = match row.get_ref(i) {
                        Ok(ValueRef::Null) => Cell::Null,
                        Ok(ValueRef::Integer(v)) => Cell::Int(v),
                        Ok(ValueRef::Real(v)) => Cell::Real(v),
                        Ok(ValueRef::Text(t)) => Cell::Text(String::from_utf8_lossy(t).into_owned()),
                        Ok(ValueRef::Blob(b)) => Cell::Blob(b.to_vec()),
                        Err(e) => return classify(e),
                    };
                    cells.push(cell);
                }
                rows.push(cells);
            }
            Ok(None) => break,
            Err(e) => return classify(e),
        }
    }
    ExecOutcome::rows(column_count, rows)
}

/// Executes every query in parallel, each on its own connection.
pub fn execute_all<S: AsRef<str> + Sync>(db_path: &Path, sqls: &[S], timeout_ms: u64) -> Vec<ExecOutcome> {
    sqls.par_iter()
        .map(|s| execute(db_path, s.as_ref(), timeout_ms))
        .collect()
}

/// The EX comparator: both outcomes are rows with the same column count and
/// the same row multiset (row order ignored, column order significant,
/// NULL equal to NULL). Errors and timeouts never match.
pub fn same_result(a: &ExecOutcome, b: &ExecOutcome) -> bool {
    a.is_rows()
        && b.is_rows()
        && a.column_count == b.column_count
        && a.rows.len() == b.rows.len()
        && a.canonical_rows() == b.canonical_rows()
}

pub fn fingerprint(outcome: &ExecOutcome) -> ResultFingerprint {
    let material = match outcome.status {
        ExecStatus::Rows => format!(
            "rows\n{}\n{}",
            outcome.column_count,
            outcome.canonical_rows().join("\n")
        ),
        ExecStatus::Error => format!("error\n{}", outcome.error_class),
        ExecStatus::Timeout => "timeout".to_string(),
    };
    ResultFingerprint(sha256_hex(material))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VoteError {
    #[error("no candidate produced a valid result")]
    VoteFailed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteResult {
    /// Index of the chosen candidate.
    pub winner: usize,
    /// Candidate indices of the winning group, ascending.
    pub group: Vec<usize>,
    /// All groups of valid candidates in order of first appearance.
    pub groups: Vec<(ResultFingerprint, Vec<usize>)>,
}

/// Execution-grouped majority vote. `None` marks a candidate with nothing to
/// run. Candidates whose outcome is not `Rows` are discarded; the rest are
/// grouped by fingerprint. The largest group wins, ties going to the group
/// holding the lowest index; the winner is that group's lowest index.
pub fn majority_vote(outcomes: &[Option<ExecOutcome>]) -> Result<VoteResult, VoteError> {
    let mut groups: Vec<(ResultFingerprint, Vec<usize>)> = Vec::new();
    for (i, outcome) in outcomes.iter().enumerate() {
        let Some(o) = outcome.as_ref().filter(|o| o.is_rows()) else {
            continue;
        };
        let fp = o.fingerprint();
        match groups.iter_mut().find(|(g, _)| *g == fp) {
            Some((_, members)) => members.push(i),
            None => groups.push((fp, vec![i])),
        }
    }
    let mut best: Option<usize> = None;
    for (gi, (_, members)) in groups.iter().enumerate() {
        if best.is_none_or(|b| members.len() > groups[b].1.len()) {
            best = Some(gi);
        }
    }
    let best = best.ok_or(VoteError::VoteFailed)?;
    let group = groups[best].1.clone();
    Ok(VoteResult {
        winner: group[0],
        group,
        groups,
    })
}
