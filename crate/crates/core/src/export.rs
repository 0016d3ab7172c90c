//! Training-pair construction. The input is an enriched DDL rendering of
//! the sample's database (column descriptions, representative values and
//! question-relevant values as line comments) followed by the question; the
//! output is the CoT solution.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::cot_synth::DataSample;
use crate::exec::{self, Cell};
use crate::schema::{always_quote, render_table_ddl, DdlStyle, SchemaDef};

#[derive(Debug, Error)]
pub enum ExportError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Thresholds of the question/value substring match.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    pub min_len: usize,
    pub min_ratio: f64,
    pub per_column: usize,
    /// Distinct values scanned per column.
    pub scan_limit: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            min_len: 4,
            min_ratio: 0.8,
            per_column: 2,
            scan_limit: 10_000,
        }
    }
}

const SCAN_TIMEOUT_MS: u64 = 10_000;

fn cell_literal(c: &Cell) -> Option<String> {
    match c {
        Cell::Null | Cell::Blob(_) => None,
        Cell::Int(i) => Some(i.to_string()),
        Cell::Real(x) => Some(x.to_string()),
        Cell::Text(s) => Some(s.clone()),
    }
}

/// The two most frequent distinct non-NULL values of a column; equal
/// frequencies are ordered by their text form.
pub fn representative_values(db_path: &Path, table: &str, column: &str) -> Vec<String> {
    let sql = format!(
        "SELECT {c}, COUNT(*) FROM {t} WHERE {c} IS NOT NULL GROUP BY {c}",
        c = always_quote(column),
        t = always_quote(table)
    );
    let out = exec::execute(db_path, &sql, SCAN_TIMEOUT_MS);
    let mut counted: Vec<(i64, String)> = out
        .rows
        .iter()
        .filter_map(|r| {
            let n = match r.get(1) {
                Some(Cell::Int(n)) => *n,
                _ => return None,
            };
            r.first().and_then(cell_literal).map(|v| (n, v))
        })
        .collect();
    counted.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    counted.dedup_by(|a, b| a.1 == b.1);
    counted.into_iter().take(2).map(|(_, v)| v).collect()
}

/// Length in characters of the longest common substring.
pub fn longest_common_substring(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev = vec![0usize; b.len() + 1];
    let mut best = 0;
    for x in &a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            if x == y {
                cur[j + 1] = prev[j] + 1;
                best = best.max(cur[j + 1]);
            }
        }
        prev = cur;
    }
    best
}

/// Match length when `value` counts as mentioned in `question`: the shared
/// substring must reach both `min_len` and `min_ratio` of the value.
pub fn value_match(question_lower: &str, value: &str, cfg: &MatchConfig) -> Option<usize> {
    let v = value.to_lowercase();
    let len = v.chars().count();
    let need = cfg.min_len.max((cfg.min_ratio * len as f64).ceil() as usize);
    if len < need {
        return None;
    }
    let m = longest_common_substring(question_lower, &v);
    (m >= need).then_some(m)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueMatch {
    pub table: String,
    pub column: String,
    pub value: String,
}

/// Stored text values that the question mentions, at most
/// `cfg.per_column` per column, longest match first.
pub fn relevant_values(question: &str, db_path: &Path, schema: &SchemaDef, cfg: &MatchConfig) -> Vec<ValueMatch> {
    let q = question.to_lowercase();
    let mut out = Vec::new();
    for t in &schema.tables {
        for c in &t.columns {
            let sql = format!(
                "SELECT DISTINCT {c} FROM {t} WHERE typeof({c}) = 'text' LIMIT {n}",
                c = always_quote(&c.name),
                t = always_quote(&t.name),
                n = cfg.scan_limit
            );
            let rows = exec::execute(db_path, &sql, SCAN_TIMEOUT_MS).rows;
            let mut hits: Vec<(usize, String)> = rows
                .iter()
                .filter_map(|r| match r.first() {
                    Some(Cell::Text(v)) => value_match(&q, v, cfg).map(|m| (m, v.clone())),
                    _ => None,
                })
                .collect();
            hits.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
            out.extend(hits.into_iter().take(cfg.per_column).map(|(_, v)| ValueMatch {
                table: t.name.clone(),
                column: c.name.clone(),
                value: v,
            }));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnComment {
    pub table: String,
    pub column: String,
    pub description: Option<String>,
    pub representative: Vec<String>,
    pub matched: Vec<String>,
}

impl ColumnComment {
    fn text(&self) -> Option<String> {
        let quote = |vs: &[String]| {
            vs.iter()
                .map(|v| format!("'{}'", v.replace('\'', "''")))
                .collect::<Vec<_>>()
                .join(", ")
        };
        let mut parts = Vec::new();
        if let Some(d) = &self.description {
            parts.push(d.clone());
        }
        if !self.representative.is_empty() {
            parts.push(format!("example values: {}", quote(&self.representative)));
        }
        if !self.matched.is_empty() {
            parts.push(format!("values mentioned in the question: {}", quote(&self.matched)));
        }
        (!parts.is_empty()).then(|| parts.join("; "))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaRendering {
    pub ddl_text: String,
    pub included_comments: Vec<ColumnComment>,
}

/// CREATE TABLE statements in schema order, each column followed by a
/// `--` comment with whatever of description, representative values and
/// question-matched values it has.
pub fn render_schema(schema: &SchemaDef, db_path: &Path, question: &str, cfg: &MatchConfig) -> SchemaRendering {
    let matches = relevant_values(question, db_path, schema, cfg);
    let mut comments = Vec::new();
    for t in &schema.tables {
        for c in &t.columns {
            let description = c.description.trim();
            comments.push(ColumnComment {
                table: t.name.clone(),
                column: c.name.clone(),
                description: (!description.is_empty()).then(|| description.replace(['\n', '\r'], " ")),
                representative: representative_values(db_path, &t.name, &c.name)
                    .into_iter()
                    .map(|v| v.replace(['\n', '\r'], " "))
                    .collect(),
                matched: matches
                    .iter()
                    .filter(|m| m.table == t.name && m.column == c.name)
                    .map(|m| m.value.replace(['\n', '\r'], " "))
                    .collect(),
            });
        }
    }
    let lookup: HashMap<(&str, &str), &ColumnComment> = comments
        .iter()
        .map(|c| ((c.table.as_str(), c.column.as_str()), c))
        .collect();
    let ddl_text = schema
        .tables
        .iter()
        .map(|t| {
            render_table_ddl(schema, t, DdlStyle::PROMPT, &|c| {
                lookup.get(&(t.name.as_str(), c.name.as_str())).and_then(|cc| cc.text())
            })
        })
        .collect::<Vec<_>>()
        .join("\n\n");
    SchemaRendering {
        ddl_text,
        included_comments: comments,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainExample {
    pub input: String,
    pub output: String,
    pub meta: Value,
}

pub fn build_input(rendering: &SchemaRendering, sample: &DataSample) -> String {
    let mut s = format!("Database schema:\n{}\n\n", rendering.ddl_text);
    if let Some(k) = &sample.external_knowledge {
        s.push_str(&format!("External knowledge: {k}\n\n"));
    }
    s.push_str(&format!("Question: {}", sample.question));
    s
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExportReport {
    pub input: usize,
    pub written: usize,
    /// `(sample_id, reason)` for every gated sample.
    pub excluded: Vec<(String, String)>,
}

/// Builds one example, or the reason the sample is gated.
pub fn build_example(
    sample: &DataSample,
    schema: Option<&SchemaDef>,
    base_dir: &Path,
    cfg: &MatchConfig,
) -> Result<TrainExample, String> {
    if !sample.cot_matches_sql() {
        return Err("final SQL block of the CoT differs from the sql field".into());
    }
    let schema = schema.ok_or_else(|| format!("no schema for database {}", sample.db_name))?;
    let db = base_dir.join(&sample.db_path);
    if !db.is_file() {
        return Err(format!("database file {} is missing", db.display()));
    }
    let rendering = render_schema(schema, &db, &sample.question, cfg);
    Ok(TrainExample {
        input: build_input(&rendering, sample),
        output: sample.cot.clone(),
        meta: serde_json::json!({
            "sample_id": sample.sample_id,
            "db_name": sample.db_name,
            "db_path": sample.db_path,
            "style": sample.style,
            "complexity": sample.complexity,
            "sql": sample.sql,
            "corrected": sample.provenance.corrected,
        }),
    })
}

/// Writes one JSON line per exportable sample, in input order. Database
/// paths in samples are resolved against `base_dir`. The file is written to
/// a temporary name and renamed into place.
pub fn export(
    samples: &[DataSample],
    schemas: &HashMap<String, SchemaDef>,
    base_dir: &Path,
    out_path: &Path,
    cfg: &MatchConfig,
) -> Result<ExportReport, ExportError> {
    let built: Vec<Result<TrainExample, String>> = samples
        .par_iter()
        .map(|s| build_example(s, schemas.get(&s.db_name), base_dir, cfg))
        .collect();
    let mut report = ExportReport {
        input: samples.len(),
        ..Default::default()
    };
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = out_path.with_extension("partial");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
    for (s, b) in samples.iter().zip(built) {
        match b {
            Ok(ex) => {
                serde_json::to_writer(&mut w, &ex)?;
                w.write_all(b"\n")?;
                report.written += 1;
            }
            Err(reason) => {
                tracing::warn!("export: skipping {}: {reason}", s.sample_id);
                report.excluded.push((s.sample_id.clone(), reason));
            }
        }
    }
    w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    std::fs::rename(&tmp, out_path)?;
    Ok(report)
}

pub fn read_examples(path: &Path) -> Result<Vec<TrainExample>, ExportError> {
    let mut out = Vec::new();
    for line in BufReader::new(std::fs::File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
