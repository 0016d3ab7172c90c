//! Execution-accuracy evaluation of text-to-SQL predictions, benchmark
//! loaders, and LLM-judge quality scoring of synthesized samples.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::catalog::{Catalog, JudgeAspect};
use crate::cot_synth::{question_with_knowledge, DataSample};
use crate::exec::{self, majority_vote, same_result, VoteError};
use crate::llm::{Gateway, LlmError};
use crate::schema::{render_prompt_ddl, SchemaDef};
use crate::text::{fenced_blocks, fill_template, item_rng};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("gold query failed on {db}: {message}")]
    GoldExecution { db: String, message: String },
    #[error("rating tally is empty")]
    EmptyTally,
    #[error("benchmark layout: {0}")]
    Layout(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Whether `pred` returns the same result as `gold`. A failing prediction
/// scores false; a failing gold query is a benchmark defect.
pub fn eval_ex(pred: &str, gold: &str, db_path: &Path, timeout_ms: u64) -> Result<bool, EvalError> {
    let gold_out = exec::execute(db_path, gold, timeout_ms);
    if !gold_out.is_rows() {
        return Err(EvalError::GoldExecution {
            db: db_path.display().to_string(),
            message: gold_out.error_text,
        });
    }
    let pred_out = exec::execute(db_path, pred, timeout_ms);
    Ok(same_result(&pred_out, &gold_out))
}

/// Index of the candidate chosen by execution-grouped majority vote.
pub fn majority_vote_infer<S: AsRef<str> + Sync>(
    candidates: &[S],
    db_path: &Path,
    timeout_ms: u64,
) -> Result<usize, VoteError> {
    let outcomes = exec::execute_all(db_path, candidates, timeout_ms);
    let wrapped: Vec<_> = outcomes.into_iter().map(Some).collect();
    Ok(majority_vote(&wrapped)?.winner)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub item_id: String,
    pub db_path: PathBuf,
    pub question: String,
    pub external_knowledge: Option<String>,
    pub gold_sql: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchmarkFormat {
    /// `dev.json` entries `{db_id, question, query}`, databases under
    /// `database/<db_id>/<db_id>.sqlite`.
    Spider,
    /// `dev.json` entries `{question_id, db_id, question, evidence, SQL}`,
    /// databases under `dev_databases/<db_id>/<db_id>.sqlite`.
    Bird,
}

impl BenchmarkFormat {
    pub fn detect(dir: &Path) -> Self {
        if dir.join("dev_databases").is_dir() {
            BenchmarkFormat::Bird
        } else {
            BenchmarkFormat::Spider
        }
    }

    fn db_dir(self) -> &'static str {
        match self {
            BenchmarkFormat::Spider => "database",
            BenchmarkFormat::Bird => "dev_databases",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadedBenchmark {
    pub items: Vec<BenchmarkItem>,
    /// Items dropped at load because their gold query does not execute.
    pub gold_defects: Vec<String>,
}

fn str_field<'a>(entry: &'a Value, names: &[&str]) -> Option<&'a str> {
    names.iter().find_map(|n| entry.get(*n).and_then(Value::as_str))
}

/// Loads `dev.json` (or `questions_file`) from a benchmark directory and
/// keeps the items whose gold query executes.
pub fn load_benchmark(
    dir: &Path,
    format: Option<BenchmarkFormat>,
    questions_file: Option<&str>,
    timeout_ms: u64,
) -> Result<LoadedBenchmark, EvalError> {
    let format = format.unwrap_or_else(|| BenchmarkFormat::detect(dir));
    let path = dir.join(questions_file.unwrap_or("dev.json"));
    let entries: Vec<Value> = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
    let mut candidates = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let db_id = str_field(e, &["db_id"])
            .ok_or_else(|| EvalError::Layout(format!("{}: entry {i} has no db_id", path.display())))?;
        let question = str_field(e, &["question"])
            .ok_or_else(|| EvalError::Layout(format!("{}: entry {i} has no question", path.display())))?;
        let gold = str_field(e, &["SQL", "query", "sql"])
            .ok_or_else(|| EvalError::Layout(format!("{}: entry {i} has no gold SQL", path.display())))?;
        let item_id = match (format, e.get("question_id").and_then(Value::as_u64)) {
            (BenchmarkFormat::Bird, Some(id)) => id.to_string(),
            _ => i.to_string(),
        };
        let knowledge = match format {
            BenchmarkFormat::Bird => str_field(e, &["evidence"])
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from),
            BenchmarkFormat::Spider => None,
        };
        candidates.push(BenchmarkItem {
            item_id,
            db_path: dir.join(format.db_dir()).join(db_id).join(format!("{db_id}.sqlite")),
            question: question.to_string(),
            external_knowledge: knowledge,
            gold_sql: gold.to_string(),
        });
    }
    let checks: Vec<bool> = candidates
        .par_iter()
        .map(|it| exec::execute(&it.db_path, &it.gold_sql, timeout_ms).is_rows())
        .collect();
    let mut out = LoadedBenchmark::default();
    for (item, ok) in candidates.into_iter().zip(checks) {
        if ok {
            out.items.push(item);
        } else {
            tracing::warn!("benchmark item {}: gold query does not execute", item.item_id);
            out.gold_defects.push(item.item_id);
        }
    }
    Ok(out)
}

/// Predictions file: a JSON object mapping item id to a candidate list (a
/// bare string counts as a single candidate).
pub fn load_predictions(path: &Path) -> Result<BTreeMap<String, Vec<String>>, EvalError> {
    let raw: BTreeMap<String, Value> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    raw.into_iter()
        .map(|(k, v)| match v {
            Value::String(s) => Ok((k, vec![s])),
            Value::Array(items) => items
                .into_iter()
                .map(|x| match x {
                    Value::String(s) => Ok(s),
                    other => Err(EvalError::Layout(format!("item {k}: non-string candidate {other}"))),
                })
                .collect::<Result<Vec<_>, _>>()
                .map(|c| (k, c)),
            other => Err(EvalError::Layout(format!("item {k}: expected a list, got {other}"))),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemVerdict {
    pub item_id: String,
    pub greedy: bool,
    pub majority: bool,
    /// Index of the candidate majority voting picked, if any executed.
    pub majority_choice: Option<usize>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_items: usize,
    pub ex_greedy: f64,
    pub ex_majority: f64,
    pub verdicts: Vec<ItemVerdict>,
    pub gold_defects: Vec<String>,
    pub missing_predictions: usize,
}

impl EvalReport {
    pub fn summary_table(&self) -> String {
        format!(
            "| items | EX greedy | EX majority |\n| --- | --- | --- |\n| {} | {:.4} | {:.4} |\n",
            self.n_items, self.ex_greedy, self.ex_majority
        )
    }
}

fn score_item(item: &BenchmarkItem, candidates: Option<&Vec<String>>, timeout_ms: u64) -> ItemVerdict {
    let mut v = ItemVerdict {
        item_id: item.item_id.clone(),
        greedy: false,
        majority: false,
        majority_choice: None,
        note: None,
    };
    let Some(cands) = candidates.filter(|c| !c.is_empty()) else {
        v.note = Some("no prediction".into());
        return v;
    };
    match eval_ex(&cands[0], &item.gold_sql, &item.db_path, timeout_ms) {
        Ok(ok) => v.greedy = ok,
        Err(e) => {
            v.note = Some(e.to_string());
            return v;
        }
    }
    match majority_vote_infer(cands, &item.db_path, timeout_ms) {
        Ok(i) => {
            v.majority_choice = Some(i);
            v.majority = eval_ex(&cands[i], &item.gold_sql, &item.db_path, timeout_ms).unwrap_or(false);
        }
        Err(e) => v.note = Some(e.to_string()),
    }
    v
}

/// Scores every item under both inference strategies. Greedy takes the first
/// candidate; majority votes over all of them.
pub fn evaluate(items: &[BenchmarkItem], predictions: &BTreeMap<String, Vec<String>>, timeout_ms: u64) -> EvalReport {
    let verdicts: Vec<ItemVerdict> = items
        .par_iter()
        .map(|it| score_item(it, predictions.get(&it.item_id), timeout_ms))
        .collect();
    let n = verdicts.len();
    let frac = |f: fn(&ItemVerdict) -> bool| {
        if n == 0 {
            0.0
        } else {
            verdicts.iter().filter(|v| f(v)).count() as f64 / n as f64
        }
    };
    EvalReport {
        n_items: n,
        ex_greedy: frac(|v| v.greedy),
        ex_majority: frac(|v| v.majority),
        missing_predictions: items.iter().filter(|i| !predictions.contains_key(&i.item_id)).count(),
        verdicts,
        gold_defects: Vec::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rating {
    Poor,
    Average,
    Good,
    Excellent,
}

impl Rating {
    pub const ALL: [Rating; 4] = [Rating::Excellent, Rating::Good, Rating::Average, Rating::Poor];

    pub fn weight(self) -> f64 {
        match self {
            Rating::Excellent => 1.0,
            Rating::Good => 0.75,
            Rating::Average => 0.5,
            Rating::Poor => 0.25,
        }
    }

    pub fn parse(s: &str) -> Option<Rating> {
        match s.trim().trim_matches(|c: char| !c.is_ascii_alphabetic()).to_ascii_lowercase().as_str() {
            "excellent" => Some(Rating::Excellent),
            "good" => Some(Rating::Good),
            "average" => Some(Rating::Average),
            "poor" => Some(Rating::Poor),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingTally {
    pub n_excellent: u64,
    pub n_good: u64,
    pub n_average: u64,
    pub n_poor: u64,
}

impl RatingTally {
    pub fn new(n_excellent: u64, n_good: u64, n_average: u64, n_poor: u64) -> Self {
        Self {
            n_excellent,
            n_good,
            n_average,
            n_poor,
        }
    }

    pub fn add(&mut self, r: Rating) {
        match r {
            Rating::Excellent => self.n_excellent += 1,
            Rating::Good => self.n_good += 1,
            Rating::Average => self.n_average += 1,
            Rating::Poor => self.n_poor += 1,
        }
    }

    pub fn merge(&mut self, other: &RatingTally) {
        self.n_excellent += other.n_excellent;
        self.n_good += other.n_good;
        self.n_average += other.n_average;
        self.n_poor += other.n_poor;
    }

    pub fn total(&self) -> u64 {
        self.n_excellent + self.n_good + self.n_average + self.n_poor
    }
}

/// Weighted average of the ratings: excellent 1.0, good 0.75, average 0.5,
/// poor 0.25.
pub fn quality_score(t: &RatingTally) -> Result<f64, EvalError> {
    let total = t.total();
    if total == 0 {
        return Err(EvalError::EmptyTally);
    }
    let weighted = t.n_excellent as f64 * 1.0
        + t.n_good as f64 * 0.75
        + t.n_average as f64 * 0.5
        + t.n_poor as f64 * 0.25;
    Ok(weighted / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectJudgement {
    pub aspect: String,
    pub tally: RatingTally,
    /// Criteria whose rating was missing or not one of the four levels.
    pub skipped: usize,
    pub explanations: BTreeMap<String, String>,
}

/// The sample as the judge sees it: schema, question, SQL and solution.
pub fn render_sample_for_judge(sample: &DataSample, schema: &SchemaDef) -> String {
    format!(
        "Database:\n{}\n\nQuestion ({} style):\n{}\n\nSQL:\n{}\n\nSolution:\n{}",
        render_prompt_ddl(schema),
        sample.style,
        question_with_knowledge(&sample.stylized_question()),
        sample.sql,
        sample.cot
    )
}

pub fn build_quality_prompt(catalog: &Catalog, aspect: &JudgeAspect, sample_text: &str) -> String {
    let criteria = aspect
        .criteria
        .iter()
        .map(|c| format!("- {}: {}", c.name, c.description))
        .collect::<Vec<_>>()
        .join("\n");
    fill_template(
        &catalog.prompts.quality_judge,
        &[
            ("aspect", &aspect.aspect),
            ("criteria", &criteria),
            ("sample", sample_text),
        ],
    )
}

/// Reads one rating per criterion from the judge's JSON answer. Keys match
/// criterion names case-insensitively; a value may be a bare rating string
/// or an object with `rating` and `explanation`.
pub fn parse_ratings(text: &str, aspect: &JudgeAspect) -> AspectJudgement {
    let parsed: Option<serde_json::Map<String, Value>> = fenced_blocks(text)
        .into_iter()
        .rev()
        .filter(|b| b.lang == "json" || b.lang.is_empty())
        .find_map(|b| serde_json::from_str(&b.body).ok())
        .or_else(|| serde_json::from_str(text.trim()).ok());
    let lowered: HashMap<String, &Value> = parsed
        .as_ref()
        .map(|m| m.iter().map(|(k, v)| (k.trim().to_lowercase(), v)).collect())
        .unwrap_or_default();
    let mut out = AspectJudgement {
        aspect: aspect.aspect.clone(),
        tally: RatingTally::default(),
        skipped: 0,
        explanations: BTreeMap::new(),
    };
    for c in &aspect.criteria {
        let entry = lowered.get(&c.name.to_lowercase());
        let (rating, explanation) = match entry {
            Some(Value::String(s)) => (Rating::parse(s), None),
            Some(Value::Object(o)) => (
                o.get("rating").and_then(Value::as_str).and_then(Rating::parse),
                o.get("explanation").and_then(Value::as_str),
            ),
            _ => (None, None),
        };
        match rating {
            Some(r) => {
                out.tally.add(r);
                if let Some(e) = explanation {
                    out.explanations.insert(c.name.clone(), e.to_string());
                }
            }
            None => out.skipped += 1,
        }
    }
    out
}

/// One judge call per aspect, each at temperature 0. Errors are kept per
/// aspect so a single failed call does not void the others.
pub fn judge_sample(
    catalog: &Catalog,
    sample: &DataSample,
    schema: &SchemaDef,
    gateway: &Gateway,
) -> BTreeMap<String, Result<AspectJudgement, LlmError>> {
    let text = render_sample_for_judge(sample, schema);
    catalog
        .judge_aspects
        .iter()
        .map(|aspect| {
            let req = gateway.request(build_quality_prompt(catalog, aspect, &text), 0.0, 1);
            let result = gateway.complete(&req).map(|resp| {
                parse_ratings(resp.texts.first().map(String::as_str).unwrap_or(""), aspect)
            });
            (aspect.aspect.clone(), result)
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AspectSummary {
    pub tally: RatingTally,
    pub score: Option<f64>,
    pub skipped: usize,
    pub failed_requests: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub n_samples: usize,
    pub aspects: BTreeMap<String, AspectSummary>,
    /// Samples whose database schema could not be found.
    pub missing_schema: usize,
}

impl QualityReport {
    pub fn to_text_table(&self) -> String {
        let mut out = String::from("| aspect | excellent | good | average | poor | skipped | score |\n");
        out.push_str("| --- | --- | --- | --- | --- | --- | --- |\n");
        for (name, a) in &self.aspects {
            out.push_str(&format!(
                "| {name} | {} | {} | {} | {} | {} | {} |\n",
                a.tally.n_excellent,
                a.tally.n_good,
                a.tally.n_average,
                a.tally.n_poor,
                a.skipped,
                a.score.map(|s| format!("{s:.4}")).unwrap_or_else(|| "-".into())
            ));
        }
        out
    }
}

pub fn judge_dataset(
    catalog: &Catalog,
    samples: &[DataSample],
    schemas: &HashMap<String, SchemaDef>,
    gateway: &Gateway,
) -> QualityReport {
    let judged: Vec<Option<BTreeMap<String, Result<AspectJudgement, LlmError>>>> = samples
        .par_iter()
        .map(|s| schemas.get(&s.db_name).map(|schema| judge_sample(catalog, s, schema, gateway)))
        .collect();
    let mut report = QualityReport {
        n_samples: samples.len(),
        ..Default::default()
    };
    for aspect in &catalog.judge_aspects {
        report.aspects.insert(aspect.aspect.clone(), AspectSummary::default());
    }
    for j in judged {
        let Some(j) = j else {
            report.missing_schema += 1;
            continue;
        };
        for (name, result) in j {
            let entry = report.aspects.entry(name).or_default();
            match result {
                Ok(a) => {
                    entry.tally.merge(&a.tally);
                    entry.skipped += a.skipped;
                }
                Err(_) => entry.failed_requests += 1,
            }
        }
    }
    for a in report.aspects.values_mut() {
        a.score = quality_score(&a.tally).ok();
    }
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AuditChoice {
    Cot,
    Original,
    Unparsable,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub n_corrected: usize,
    pub n_audited: usize,
    pub prefers_cot: usize,
    pub prefers_original: usize,
    pub unparsable: usize,
    pub failed_requests: usize,
}

/// A single `A` or `B` token, ignoring case and punctuation.
pub fn parse_ab(text: &str) -> Option<char> {
    let words: Vec<String> = text
        .split(|c: char| !c.is_ascii_alphabetic())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_ascii_uppercase())
        .collect();
    let a = words.iter().any(|w| w == "A");
    let b = words.iter().any(|w| w == "B");
    match (a, b) {
        (true, false) => Some('A'),
        (false, true) => Some('B'),
        _ => None,
    }
}

/// Asks the judge, for up to `max_samples` corrected samples, whether the
/// CoT SQL or the original SQL answers the question better. Which query is
/// shown as `A` is drawn per sample from `seed`.
pub fn audit_corrections(
    catalog: &Catalog,
    samples: &[DataSample],
    schemas: &HashMap<String, SchemaDef>,
    gateway: &Gateway,
    max_samples: usize,
    seed: u64,
) -> AuditReport {
    let corrected: Vec<&DataSample> = samples.iter().filter(|s| s.provenance.corrected).collect();
    let picked: Vec<&DataSample> = corrected
        .iter()
        .copied()
        .filter(|s| schemas.contains_key(&s.db_name))
        .take(max_samples)
        .collect();
    let choices: Vec<Result<AuditChoice, LlmError>> = picked
        .par_iter()
        .map(|s| {
            let cot_first: bool = item_rng(seed, &format!("audit/{}", s.sample_id)).random();
            let (a, b) = if cot_first {
                (&s.sql, &s.provenance.original_sql)
            } else {
                (&s.provenance.original_sql, &s.sql)
            };
            let prompt = fill_template(
                &catalog.prompts.correction_audit,
                &[
                    ("schema", &render_prompt_ddl(&schemas[&s.db_name])),
                    ("question", &question_with_knowledge(&s.stylized_question())),
                    ("sql_a", a),
                    ("sql_b", b),
                ],
            );
            let resp = gateway.complete(&gateway.request(prompt, 0.0, 1))?;
            Ok(match resp.texts.first().and_then(|t| parse_ab(t)) {
                Some('A') if cot_first => AuditChoice::Cot,
                Some('B') if !cot_first => AuditChoice::Cot,
                Some(_) => AuditChoice::Original,
                None => AuditChoice::Unparsable,
            })
        })
        .collect();
    let mut report = AuditReport {
        n_corrected: corrected.len(),
        n_audited: picked.len(),
        ..Default::default()
    };
    for c in choices {
        match c {
            Ok(AuditChoice::Cot) => report.prefers_cot += 1,
            Ok(AuditChoice::Original) => report.prefers_original += 1,
            Ok(AuditChoice::Unparsable) => report.unparsable += 1,
            Err(_) => report.failed_requests += 1,
        }
    }
    report
}
