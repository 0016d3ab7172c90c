//! Complexity-aware SQL generation for one database and the post-processing
//! that keeps executable, template-unique SELECT queries.

use std::collections::HashSet;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::Catalog;
use crate::exec::{self, Cell, ExecSummary};
use crate::llm::Gateway;
use crate::schema::{always_quote, render_prompt_ddl, SchemaDef};
use crate::sql::{is_select_statement, skeleton_of, template_of};
use crate::text::{fenced_blocks, fill_template};

pub const SELECT_COUNT_P: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ComplexityLevel {
    Simple,
    Moderate,
    Complex,
    #[serde(rename = "Highly Complex")]
    HighlyComplex,
}

impl ComplexityLevel {
    pub const ALL: [ComplexityLevel; 4] = [
        ComplexityLevel::Simple,
        ComplexityLevel::Moderate,
        ComplexityLevel::Complex,
        ComplexityLevel::HighlyComplex,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ComplexityLevel::Simple => "Simple",
            ComplexityLevel::Moderate => "Moderate",
            ComplexityLevel::Complex => "Complex",
            ComplexityLevel::HighlyComplex => "Highly Complex",
        }
    }
}

impl std::fmt::Display for ComplexityLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum QueryError {
    #[error("database {0} has no tables")]
    EmptyDatabase(String),
    #[error("generation for {db} aborted after {failures} consecutive failed requests: {last}")]
    Aborted { db: String, failures: usize, last: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueryParams {
    /// Raw candidates to draw per database.
    pub budget: usize,
    pub n_samples: u32,
    pub temperature: f64,
    pub timeout_ms: u64,
    pub select_cap: usize,
    pub n_functions: usize,
    pub n_value_columns: usize,
    pub values_per_column: usize,
    /// Relative weights of Simple, Moderate, Complex, Highly Complex.
    pub complexity_weights: [f64; 4],
    pub consecutive_failure_limit: usize,
}

impl Default for QueryParams {
    fn default() -> Self {
        Self {
            budget: 300,
            n_samples: 8,
            temperature: 0.8,
            timeout_ms: 30_000,
            select_cap: 8,
            n_functions: 4,
            n_value_columns: 5,
            values_per_column: 3,
            complexity_weights: [1.0; 4],
            consecutive_failure_limit: 5,
        }
    }
}

/// `1 + Geometric(p)`: the number of trials up to the first success.
pub fn sample_select_count_uncapped<R: Rng + ?Sized>(rng: &mut R) -> usize {
    let geo = Geometric::new(SELECT_COUNT_P).expect("valid probability");
    1 + geo.sample(rng) as usize
}

/// Column count for the selection constraint, `P(k) = 0.6 * 0.4^(k-1)`,
/// capped at `cap`.
pub fn sample_select_count<R: Rng + ?Sized>(rng: &mut R, cap: usize) -> usize {
    sample_select_count_uncapped(rng).min(cap.max(1))
}

pub fn sample_complexity<R: Rng + ?Sized>(rng: &mut R, weights: &[f64; 4]) -> ComplexityLevel {
    let dist = WeightedIndex::new(weights).expect("complexity weights are positive");
    ComplexityLevel::ALL[dist.sample(rng)]
}

fn display_cell(c: &Cell) -> Option<String> {
    match c {
        Cell::Null => None,
        Cell::Int(i) => Some(i.to_string()),
        Cell::Real(x) => Some(x.to_string()),
        Cell::Text(s) => Some(format!("'{}'", s.replace('\'', "''"))),
        Cell::Blob(_) => None,
    }
}

/// `n_columns` randomly chosen columns with up to `per_column` distinct
/// stored values each, one `table.column: [v, ...]` line per column.
pub fn sample_db_values<R: Rng + ?Sized>(
    schema: &SchemaDef,
    db_path: &Path,
    rng: &mut R,
    n_columns: usize,
    per_column: usize,
) -> String {
    let all: Vec<(&str, &str)> = schema
        .tables
        .iter()
        .flat_map(|t| t.columns.iter().map(move |c| (t.name.as_str(), c.name.as_str())))
        .collect();
    let picked: Vec<&(&str, &str)> = all.choose_multiple(rng, n_columns).collect();
    let mut lines = Vec::new();
    for (table, column) in picked {
        let sql = format!(
            "SELECT DISTINCT {c} FROM {t} WHERE {c} IS NOT NULL LIMIT {per_column}",
            c = always_quote(column),
            t = always_quote(table)
        );
        let out = exec::execute(db_path, &sql, 5_000);
        let values: Vec<String> = out
            .rows
            .iter()
            .filter_map(|r| r.first().and_then(display_cell))
            .collect();
        lines.push(format!("{table}.{column}: [{}]", values.join(", ")));
    }
    lines.join("\n")
}

/// Builds the six-part SQL generation prompt. All random choices (functions,
/// value columns) come from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn build_sql_prompt<R: Rng + ?Sized>(
    catalog: &Catalog,
    schema: &SchemaDef,
    db_path: &Path,
    complexity: ComplexityLevel,
    select_count: usize,
    params: &QueryParams,
    rng: &mut R,
) -> Result<String, QueryError> {
    if schema.tables.is_empty() {
        return Err(QueryError::EmptyDatabase(schema.db_name.clone()));
    }
    let functions = catalog
        .functions
        .entries
        .choose_multiple(rng, params.n_functions)
        .map(|f| format!("- {}: {}", f.name, f.description))
        .collect::<Vec<_>>()
        .join("\n");
    let values = sample_db_values(schema, db_path, rng, params.n_value_columns, params.values_per_column);
    let info = catalog.complexity(complexity);
    Ok(fill_template(
        &catalog.prompts.sql_generation,
        &[
            ("schema", &render_prompt_ddl(schema)),
            ("functions", &functions),
            ("values", &values),
            ("complexity", complexity.name()),
            ("criteria", &info.criteria),
            ("example", &info.example),
            ("select_count", &select_count.to_string()),
        ],
    ))
}

/// The last ```sql (or untagged) fenced block, trimmed and without trailing
/// semicolons.
pub fn extract_sql(text: &str) -> Option<String> {
    fenced_blocks(text)
        .into_iter()
        .rev()
        .find(|b| b.lang == "sql" || b.lang == "sqlite" || b.lang.is_empty())
        .map(|b| b.body.trim().trim_end_matches(';').trim_end().to_string())
        .filter(|s| !s.is_empty())
}

/// One raw query drawn from the generator, with the conditions it was asked under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub sql: String,
    pub complexity: ComplexityLevel,
    pub requested_select_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqlSample {
    pub sample_id: String,
    pub db_name: String,
    pub sql_text: String,
    pub complexity: ComplexityLevel,
    pub requested_select_count: usize,
    pub template: String,
    pub skeleton: String,
    pub exec: ExecSummary,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostprocessReport {
    pub input: usize,
    pub non_select: usize,
    pub exec_failed: usize,
    pub duplicate_template: usize,
    pub retained: usize,
}

/// Keeps SELECT statements that execute without error or timeout, then the
/// first query of each template. Executions run in parallel; the dedup pass
/// is sequential in candidate order.
pub fn postprocess(
    candidates: &[Candidate],
    db_name: &str,
    db_path: &Path,
    timeout_ms: u64,
) -> (Vec<SqlSample>, PostprocessReport) {
    let mut report = PostprocessReport {
        input: candidates.len(),
        ..Default::default()
    };
    let selects: Vec<&Candidate> = candidates
        .iter()
        .filter(|c| is_select_statement(&c.sql))
        .collect();
    report.non_select = candidates.len() - selects.len();
    let sqls: Vec<&str> = selects.iter().map(|c| c.sql.as_str()).collect();
    let outcomes = exec::execute_all(db_path, &sqls, timeout_ms);

    let mut seen = HashSet::new();
    let mut retained = Vec::new();
    for (c, outcome) in selects.into_iter().zip(outcomes) {
        if !outcome.is_rows() {
            report.exec_failed += 1;
            continue;
        }
        let (Ok(template), Ok(skeleton)) = (template_of(&c.sql), skeleton_of(&c.sql)) else {
            report.non_select += 1;
            continue;
        };
        if !seen.insert(template.clone()) {
            report.duplicate_template += 1;
            continue;
        }
        retained.push(SqlSample {
            sample_id: format!("{db_name}/q{}", retained.len()),
            db_name: db_name.to_string(),
            sql_text: c.sql.clone(),
            complexity: c.complexity,
            requested_select_count: c.requested_select_count,
            template,
            skeleton,
            exec: outcome.summary(),
        });
    }
    report.retained = retained.len();
    (retained, report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationOutcome {
    pub samples: Vec<SqlSample>,
    /// Every completion drawn, in request order.
    pub raw_candidates: Vec<Candidate>,
    pub report: PostprocessReport,
    pub requests: usize,
}

/// Draws `params.budget` raw candidates for one database, each request with a
/// freshly sampled complexity level and select count, then post-processes
/// them. A completion without a SQL block still counts toward the budget.
/// A request that fails or yields no SQL at all is a failure; too many in a
/// row abort the database.
pub fn generate_for_db<R: Rng + ?Sized>(
    catalog: &Catalog,
    schema: &SchemaDef,
    db_path: &Path,
    gateway: &Gateway,
    params: &QueryParams,
    rng: &mut R,
) -> Result<GenerationOutcome, QueryError> {
    let mut raw = Vec::with_capacity(params.budget);
    let mut failures = 0;
    let mut requests = 0;
    while raw.len() < params.budget {
        let complexity = sample_complexity(rng, &params.complexity_weights);
        let select_count = sample_select_count(rng, params.select_cap);
        let prompt = build_sql_prompt(catalog, schema, db_path, complexity, select_count, params, rng)?;
        let n = params.n_samples.min((params.budget - raw.len()) as u32).max(1);
        requests += 1;
        let outcome = gateway
            .complete(&gateway.request(prompt, params.temperature, n))
            .map_err(|e| e.to_string())
            .and_then(|resp| {
                if resp.texts.is_empty() {
                    Err("no completions returned".to_string())
                } else {
                    Ok(resp.texts)
                }
            });
        let texts = match outcome {
            Ok(t) => t,
            Err(e) => {
                failures += 1;
                if failures >= params.consecutive_failure_limit {
                    return Err(QueryError::Aborted {
                        db: schema.db_name.clone(),
                        failures,
                        last: e,
                    });
                }
                continue;
            }
        };
        let before = raw.len();
        let mut extracted = 0;
        for text in texts.into_iter().take(params.budget - before) {
            let sql = extract_sql(&text).unwrap_or_default();
            extracted += usize::from(!sql.is_empty());
            raw.push(Candidate {
                sql,
                complexity,
                requested_select_count: select_count,
            });
        }
        if extracted == 0 {
            failures += 1;
            if failures >= params.consecutive_failure_limit {
                return Err(QueryError::Aborted {
                    db: schema.db_name.clone(),
                    failures,
                    last: "completions held no SQL block".into(),
                });
            }
        } else {
            failures = 0;
        }
    }
    let (samples, report) = postprocess(&raw, &schema.db_name, db_path, params.timeout_ms);
    Ok(GenerationOutcome {
        samples,
        raw_candidates: raw,
        report,
        requests,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{install_mock, MockScript};
    use crate::schema::{fixtures::school_schema, materialize};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cand(sql: &str) -> Candidate {
        Candidate {
            sql: sql.into(),
            complexity: ComplexityLevel::Simple,
            requested_select_count: 1,
        }
    }

    fn school_db(dir: &Path) -> std::path::PathBuf {
        let path = dir.join("school_records.sqlite");
        materialize(&school_schema(), &path).unwrap();
        path
    }

    #[test]
    fn level_names_round_trip() {
        for level in ComplexityLevel::ALL {
            let json = serde_json::to_string(&level).unwrap();
            assert_eq!(json, format!("\"{}\"", level.name()));
            assert_eq!(ComplexityLevel::ALL[level.index()], level);
        }
    }

    #[test]
    fn select_count_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 200_000;
        let draws: Vec<usize> = (0..n).map(|_| sample_select_count(&mut rng, 8)).collect();
        let p1 = draws.iter().filter(|&&k| k == 1).count() as f64 / n as f64;
        assert!((p1 - 0.6).abs() < 0.005, "P(1) = {p1}");
        assert!(draws.iter().all(|&k| (1..=8).contains(&k)));
        let mut again = ChaCha8Rng::seed_from_u64(11);
        assert!(draws[..100].iter().all(|&k| k == sample_select_count(&mut again, 8)));
    }

    #[test]
    fn complexity_is_uniform_by_default() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 4];
        let n = 100_000;
        for _ in 0..n {
            counts[sample_complexity(&mut rng, &[1.0; 4]).index()] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn prompt_components() {
        let dir = tempfile::tempdir().unwrap();
        let db = school_db(dir.path());
        let catalog = Catalog::bundled();
        let schema = school_schema();
        let params = QueryParams::default();
        let build = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            build_sql_prompt(&catalog, &schema, &db, ComplexityLevel::HighlyComplex, 3, &params, &mut rng).unwrap()
        };
        let p = build(1);
        assert_eq!(p, build(1));
        let info = catalog.complexity(ComplexityLevel::HighlyComplex);
        assert!(p.contains(&info.criteria) && p.contains(&info.example));
        assert!(p.contains("exactly 3 column(s)"));
        assert_eq!(p.matches("CREATE TABLE").count(), 2);
        let sections = [
            "### Instruction",
            "### Database Schema",
            "### Advanced SQL Functions",
            "### Database Values",
            "### SQL Complexity",
            "### Column Selection Constraint",
        ];
        let pos: Vec<usize> = sections.iter().map(|s| p.find(s).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        let functions = &p[pos[2]..pos[3]];
        assert_eq!(functions.lines().filter(|l| l.starts_with("- ")).count(), 4);
        let values = &p[pos[3]..pos[4]];
        assert_eq!(values.lines().filter(|l| l.contains(": [")).count(), 5);
    }

    #[test]
    fn postprocess_examples() {
        let dir = tempfile::tempdir().unwrap();
        let db = school_db(dir.path());
        let (kept, report) = postprocess(
            &[
                cand("SELECT name FROM students WHERE age > 18"),
                cand("SELECT name FROM students WHERE age > 55"),
            ],
            "school_records",
            &db,
            1000,
        );
        assert_eq!(kept.len(), 1);
        assert_eq!(report.duplicate_template, 1);
        assert_eq!(kept[0].sql_text, "SELECT name FROM students WHERE age > 18");
        let (kept, report) = postprocess(&[cand("DROP TABLE students")], "s", &db, 1000);
        assert!(kept.is_empty());
        assert_eq!(report.non_select, 1);
        let (kept, report) = postprocess(&[cand("SELECT * FROM nonexistent")], "s", &db, 1000);
        assert!(kept.is_empty());
        assert_eq!(report.exec_failed, 1);
    }

    #[test]
    fn extraction_takes_last_block() {
        assert_eq!(
            extract_sql("Goal.\n```sql\nSELECT 1;\n```\nBetter:\n```sql\nSELECT 2;\n```").as_deref(),
            Some("SELECT 2")
        );
        assert_eq!(extract_sql("SELECT 1"), None);
    }

    #[test]
    fn budget_and_identical_candidates() {
        let dir = tempfile::tempdir().unwrap();
        let db = school_db(dir.path());
        let catalog = Catalog::bundled();
        let gw = install_mock(MockScript::new().fallback(["```sql\nSELECT name FROM schools\n```"]));
        let params = QueryParams {
            budget: 300,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = generate_for_db(&catalog, &school_schema(), &db, &gw, &params, &mut rng).unwrap();
        assert_eq!(out.raw_candidates.len(), 300);
        assert_eq!(out.requests, 38);
        assert_eq!(out.samples.len(), 1);
    }

    #[test]
    fn consecutive_failures_abort() {
        let dir = tempfile::tempdir().unwrap();
        let db = school_db(dir.path());
        let gw = install_mock(MockScript::new().fallback(["I cannot help with that."]));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = QueryParams {
            budget: 300,
            consecutive_failure_limit: 3,
            ..Default::default()
        };
        let err = generate_for_db(&Catalog::bundled(), &school_schema(), &db, &gw, &params, &mut rng).unwrap_err();
        assert!(matches!(err, QueryError::Aborted { failures: 3, .. }));
    }
}
