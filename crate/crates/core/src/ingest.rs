//! Web-table loading and the four-step seed filter: language, size,
//! header deduplication and an LLM judgment of semantic richness.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::catalog::Catalog;
use crate::llm::{Gateway, LlmError, ModelPool};
use crate::schema::render_web_table;
use crate::text::fill_template;

pub const MIN_COLUMNS: usize = 5;
pub const MIN_ROWS: usize = 5;
/// Rows shown to the semantic judge.
pub const JUDGE_ROWS: usize = 3;

const LATIN_RATIO: f64 = 0.8;
const LEXICON_HIT_RATE: f64 = 0.3;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed table in {path}: {message}")]
    Malformed { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WebTable {
    pub table_id: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
    #[serde(default)]
    pub source_ref: String,
}

impl WebTable {
    pub fn validate(&self) -> Result<(), String> {
        if self.headers.is_empty() {
            return Err(format!("table {} has no headers", self.table_id));
        }
        if let Some((i, row)) = self
            .rows
            .iter()
            .enumerate()
            .find(|(_, r)| r.len() != self.headers.len())
        {
            return Err(format!(
                "table {} row {i} has {} cells for {} headers",
                self.table_id,
                row.len(),
                self.headers.len()
            ));
        }
        Ok(())
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> IngestError {
    IngestError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// One CSV file is one table: first record headers, the rest rows. Records
/// whose width differs from the header are skipped.
pub fn load_csv(path: &Path) -> Result<WebTable, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| io_err(path, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| io_err(path, e))?;
        if record.len() != headers.len() {
            tracing::debug!("{}: skipping record {i} of width {}", path.display(), record.len());
            continue;
        }
        rows.push(record.iter().map(|c| c.trim().to_string()).collect());
    }
    let table = WebTable {
        table_id: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        headers,
        rows,
        source_ref: path.display().to_string(),
    };
    table.validate().map_err(|message| IngestError::Malformed {
        path: path.display().to_string(),
        message,
    })?;
    Ok(table)
}

fn cell_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

#[derive(Deserialize)]
struct RawTable {
    #[serde(default)]
    table_id: Option<String>,
    headers: Vec<String>,
    #[serde(default)]
    rows: Vec<Vec<Value>>,
    #[serde(default)]
    source_ref: Option<String>,
}

/// Line-delimited JSON tables (`table_id`, `headers`, `rows`, `source_ref`).
/// Missing ids default to `<file stem>-<line>`.
pub fn load_jsonl(path: &Path) -> Result<Vec<WebTable>, IngestError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawTable = serde_json::from_str(line).map_err(|e| IngestError::Malformed {
            path: format!("{}:{}", path.display(), i + 1),
            message: e.to_string(),
        })?;
        let table = WebTable {
            table_id: raw.table_id.unwrap_or_else(|| format!("{stem}-{}", i + 1)),
            headers: raw.headers,
            rows: raw
                .rows
                .iter()
                .map(|r| r.iter().map(cell_text).collect())
                .collect(),
            source_ref: raw
                .source_ref
                .unwrap_or_else(|| format!("{}:{}", path.display(), i + 1)),
        };
        table.validate().map_err(|message| IngestError::Malformed {
            path: format!("{}:{}", path.display(), i + 1),
            message,
        })?;
        out.push(table);
    }
    Ok(out)
}

/// A `.csv` or `.jsonl` file, or every such file in a directory in name order.
pub fn load_tables(path: &Path) -> Result<Vec<WebTable>, IngestError> {
    if path.is_dir() {
        let mut entries: Vec<_> = std::fs::read_dir(path)
            .map_err(|e| io_err(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "jsonl")))
            .collect();
        entries.sort();
        let mut out = Vec::new();
        for p in entries {
            out.extend(load_tables(&p)?);
        }
        return Ok(out);
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => Ok(vec![load_csv(path)?]),
        _ => load_jsonl(path),
    }
}

fn is_latin_letter(c: char) -> bool {
    c.is_ascii_alphabetic()
        || matches!(c as u32, 0x00C0..=0x024F | 0x1E00..=0x1EFF)
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphabetic())
        .filter(|w| w.chars().count() >= 2)
        .map(|w| w.to_lowercase())
}

fn in_lexicon(word: &str, lexicon: &HashSet<String>) -> bool {
    if lexicon.contains(word) {
        return true;
    }
    ["s", "es", "ed", "ing"]
        .iter()
        .filter_map(|suffix| word.strip_suffix(suffix))
        .any(|stem| stem.len() >= 2 && lexicon.contains(stem))
}

/// English-language heuristic over the headers and the first row.
///
/// Rejects when half or more of the headers carry non-Latin letters; then
/// requires that at least 80% of all letters are Latin and at least 30% of
/// the words are in the English lexicon (with plural/-ed/-ing stripping).
pub fn filter_language(table: &WebTable, lexicon: &HashSet<String>) -> bool {
    let non_latin_headers = table
        .headers
        .iter()
        .filter(|h| h.chars().any(|c| c.is_alphabetic() && !is_latin_letter(c)))
        .count();
    if non_latin_headers * 2 >= table.headers.len() {
        return false;
    }
    let mut sample: Vec<&str> = table.headers.iter().map(String::as_str).collect();
    if let Some(row) = table.rows.first() {
        sample.extend(row.iter().map(String::as_str));
    }
    let (mut letters, mut latin) = (0usize, 0usize);
    for c in sample.iter().flat_map(|s| s.chars()).filter(|c| c.is_alphabetic()) {
        letters += 1;
        if is_latin_letter(c) {
            latin += 1;
        }
    }
    if letters == 0 || (latin as f64) < LATIN_RATIO * letters as f64 {
        return false;
    }
    let all: Vec<String> = sample.iter().flat_map(|s| words(s)).collect();
    if all.is_empty() {
        return false;
    }
    let hits = all.iter().filter(|w| in_lexicon(w, lexicon)).count();
    hits as f64 >= LEXICON_HIT_RATE * all.len() as f64
}

pub fn filter_size(table: &WebTable) -> bool {
    table.headers.len() >= MIN_COLUMNS && table.rows.len() >= MIN_ROWS
}

/// Lowercased, whitespace-collapsed, sorted header tuple.
pub fn header_key(headers: &[String]) -> Vec<String> {
    let mut key: Vec<String> = headers
        .iter()
        .map(|h| h.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase())
        .collect();
    key.sort();
    key
}

/// Keeps the first table for each header key.
pub fn dedup_headers(tables: &[WebTable]) -> Vec<WebTable> {
    let mut seen = HashSet::new();
    tables
        .iter()
        .filter(|t| seen.insert(header_key(&t.headers)))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Rich,
    Poor,
    /// Neither or both verdict words present; treated as a rejection.
    Unparsable,
}

impl Verdict {
    pub fn keep(self) -> bool {
        self == Verdict::Rich
    }
}

pub fn parse_verdict(text: &str) -> Verdict {
    let mut yes = false;
    let mut no = false;
    for word in text.split(|c: char| !c.is_ascii_alphabetic()) {
        match word.to_ascii_uppercase().as_str() {
            "YES" => yes = true,
            "NO" => no = true,
            _ => {}
        }
    }
    match (yes, no) {
        (true, false) => Verdict::Rich,
        (false, true) => Verdict::Poor,
        _ => Verdict::Unparsable,
    }
}

pub fn build_judge_prompt(catalog: &Catalog, table: &WebTable) -> String {
    fill_template(
        &catalog.prompts.semantic_judge,
        &[("web_table", &render_web_table(&table.headers, &table.rows, JUDGE_ROWS))],
    )
}

/// Asks the judge model for a YES/NO verdict at temperature 0.
pub fn judge_semantics(table: &WebTable, gateway: &Gateway, catalog: &Catalog) -> Result<Verdict, LlmError> {
    let request = gateway.request(build_judge_prompt(catalog, table), 0.0, 1);
    let response = gateway.complete(&request)?;
    let verdict = response
        .texts
        .first()
        .map(|t| parse_verdict(t))
        .unwrap_or(Verdict::Unparsable);
    if verdict == Verdict::Unparsable {
        tracing::warn!("table {}: unparsable semantic verdict", table.table_id);
    }
    Ok(verdict)
}

pub mod stage {
    pub const INVALID: &str = "invalid";
    pub const LANGUAGE: &str = "language";
    pub const SIZE: &str = "size";
    pub const DEDUP: &str = "dedup";
    pub const SEMANTIC: &str = "semantic";
    pub const KEPT: &str = "kept";
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FilterReport {
    pub input_count: usize,
    pub kept_count: usize,
    pub rejections: BTreeMap<String, usize>,
    /// `(table_id, stage)`: the first failing stage, or `kept`.
    pub per_table_verdicts: Vec<(String, String)>,
    /// Semantic rejections caused by an unparsable verdict.
    pub unparsable_verdicts: usize,
    /// Semantic rejections caused by a failed judge request.
    pub judge_errors: usize,
}

impl FilterReport {
    pub fn is_consistent(&self) -> bool {
        self.input_count == self.kept_count + self.rejections.values().sum::<usize>()
            && self.per_table_verdicts.len() == self.input_count
    }
}

/// First failing cheap filter per table (validity, language, size, header
/// dedup); `None` marks a table that goes on to the semantic judge.
pub fn prefilter(tables: &[WebTable], catalog: &Catalog) -> Vec<Option<&'static str>> {
    let mut seen = HashSet::new();
    tables
        .iter()
        .map(|t| {
            if t.validate().is_err() {
                Some(stage::INVALID)
            } else if !filter_language(t, &catalog.english_words) {
                Some(stage::LANGUAGE)
            } else if !filter_size(t) {
                Some(stage::SIZE)
            } else if !seen.insert(header_key(&t.headers)) {
                Some(stage::DEDUP)
            } else {
                None
            }
        })
        .collect()
}

/// Folds judge outcomes (by table index) into the prefilter verdicts and
/// builds the report. A failed judge request rejects the table.
pub fn finish_filter(
    tables: &[WebTable],
    mut verdicts: Vec<Option<&'static str>>,
    judged: Vec<(usize, Result<Verdict, String>)>,
) -> (Vec<WebTable>, FilterReport) {
    let mut report = FilterReport {
        input_count: tables.len(),
        ..Default::default()
    };
    for (i, outcome) in judged {
        match outcome {
            Ok(v) if v.keep() => {}
            Ok(v) => {
                if v == Verdict::Unparsable {
                    report.unparsable_verdicts += 1;
                }
                verdicts[i] = Some(stage::SEMANTIC);
            }
            Err(e) => {
                tracing::warn!("table {}: judge request failed: {e}", tables[i].table_id);
                report.judge_errors += 1;
                verdicts[i] = Some(stage::SEMANTIC);
            }
        }
    }
    let mut kept = Vec::new();
    for (t, v) in tables.iter().zip(&verdicts) {
        let label = v.unwrap_or(stage::KEPT);
        if v.is_none() {
            kept.push(t.clone());
        } else {
            *report.rejections.entry(label.to_string()).or_default() += 1;
        }
        report.per_table_verdicts.push((t.table_id.clone(), label.to_string()));
    }
    report.kept_count = kept.len();
    (kept, report)
}

/// Applies the filters in order (language, size, header dedup, semantic
/// judgment); each table is billed to the first stage it fails. Judge calls
/// run in parallel.
pub fn run_ingest(tables: &[WebTable], pool: &ModelPool, catalog: &Catalog) -> (Vec<WebTable>, FilterReport) {
    let verdicts = prefilter(tables, catalog);
    let pending: Vec<usize> = (0..tables.len()).filter(|&i| verdicts[i].is_none()).collect();
    let judged: Vec<(usize, Result<Verdict, String>)> = pending
        .par_iter()
        .map(|&i| {
            let t = &tables[i];
            (i, judge_semantics(t, pool.pick(&t.table_id), catalog).map_err(|e| e.to_string()))
        })
        .collect();
    finish_filter(tables, verdicts, judged)
}
