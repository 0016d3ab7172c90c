//! Chain-of-thought synthesis: prompts, final-SQL extraction, the
//! execution-grouped vote over candidate solutions, and assembly of the
//! terminal `<database, question, SQL, CoT>` sample.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::Catalog;
use crate::exec::{self, majority_vote, ExecOutcome, ExecSummary, VoteError};
use crate::query_synth::{ComplexityLevel, SqlSample};
use crate::question_synth::{LanguageStyle, StylizedQuestion, Turn};
use crate::schema::{render_prompt_ddl, SchemaDef};
use crate::text::{fenced_blocks, fill_template};

#[derive(Debug, Error, PartialEq)]
pub enum CotError {
    #[error(transparent)]
    Vote(#[from] VoteError),
    #[error("sample invariant violated: {0}")]
    Invariant(String),
}

/// The question as shown to the CoT model: the text, then any external
/// knowledge on its own line.
pub fn question_with_knowledge(question: &StylizedQuestion) -> String {
    match &question.external_knowledge {
        Some(k) => format!("{}\nExternal knowledge: {k}", question.text),
        None => question.text.clone(),
    }
}

pub fn build_cot_prompt(catalog: &Catalog, schema: &SchemaDef, question: &StylizedQuestion, sql: &str) -> String {
    fill_template(
        &catalog.prompts.cot_generation,
        &[
            ("schema", &render_prompt_ddl(schema)),
            ("question", &question_with_knowledge(question)),
            ("sql", sql),
        ],
    )
}

/// Body of the last ```sql fenced block, verbatim.
pub fn extract_final_sql(cot_text: &str) -> Option<String> {
    fenced_blocks(cot_text)
        .into_iter()
        .rev()
        .find(|b| b.lang == "sql" || b.lang == "sqlite")
        .map(|b| b.body)
        .filter(|s| !s.trim().is_empty())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotCandidate {
    pub cot_text: String,
    pub extracted_sql: Option<String>,
    pub exec: Option<ExecSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotResult {
    pub chosen: CotCandidate,
    pub chosen_index: usize,
    pub final_sql: String,
    /// The chosen SQL's result differs from the original query's.
    pub corrected: bool,
    pub group_size: usize,
    /// Candidates whose SQL executed to rows.
    pub n_valid: usize,
    pub n_candidates: usize,
}

/// Executes each candidate's final SQL and takes the execution-grouped
/// majority. With `original` given, its result votes alongside the
/// candidates but can never be chosen itself.
pub fn majority_select(
    cot_texts: &[String],
    db_path: &Path,
    timeout_ms: u64,
    original_fingerprint: &str,
    original_votes: Option<&ExecOutcome>,
) -> Result<CotResult, CotError> {
    let extracted: Vec<Option<String>> = cot_texts.iter().map(|t| extract_final_sql(t)).collect();
    let runnable: Vec<(usize, &str)> = extracted
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.as_deref().map(|s| (i, s)))
        .collect();
    let sqls: Vec<&str> = runnable.iter().map(|(_, s)| *s).collect();
    let ran = exec::execute_all(db_path, &sqls, timeout_ms);
    let mut outcomes: Vec<Option<ExecOutcome>> = vec![None; cot_texts.len()];
    for ((i, _), o) in runnable.iter().zip(ran) {
        outcomes[*i] = Some(o);
    }
    let n_valid = outcomes.iter().flatten().filter(|o| o.is_rows()).count();

    let vote = match original_votes {
        None => majority_vote(&outcomes)?,
        Some(orig) => {
            let mut with_orig = outcomes.clone();
            with_orig.push(Some(orig.clone()));
            let v = majority_vote(&with_orig)?;
            if v.winner == cot_texts.len() {
                majority_vote(&outcomes)?
            } else {
                let mut v = v;
                v.group.retain(|&i| i < cot_texts.len());
                v
            }
        }
    };
    let i = vote.winner;
    let outcome = outcomes[i].as_ref().expect("winner has an outcome");
    let summary = outcome.summary();
    let corrected = summary.fingerprint != original_fingerprint;
    let chosen = CotCandidate {
        cot_text: cot_texts[i].clone(),
        extracted_sql: extracted[i].clone(),
        exec: Some(summary),
    };
    Ok(CotResult {
        final_sql: extracted[i].clone().expect("winner has SQL"),
        chosen,
        chosen_index: i,
        corrected,
        group_size: vote.group.len(),
        n_valid,
        n_candidates: cot_texts.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub sql_sample_id: String,
    pub original_sql: String,
    pub corrected: bool,
    pub template: String,
    pub skeleton: String,
    pub requested_select_count: usize,
    pub question_candidates: usize,
    pub cot_candidates: usize,
    pub cot_valid: usize,
    pub vote_group_size: usize,
    #[serde(default)]
    pub models: std::collections::BTreeMap<String, String>,
}

/// The terminal dataset record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSample {
    pub sample_id: String,
    pub db_name: String,
    /// Database file path, relative to the run's work directory.
    pub db_path: String,
    pub question: String,
    pub external_knowledge: Option<String>,
    pub style: LanguageStyle,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dialogue: Option<Vec<Turn>>,
    pub sql: String,
    pub cot: String,
    pub complexity: ComplexityLevel,
    pub provenance: Provenance,
}

impl DataSample {
    pub fn stylized_question(&self) -> StylizedQuestion {
        StylizedQuestion {
            text: self.question.clone(),
            style: self.style,
            external_knowledge: self.external_knowledge.clone(),
            dialogue: self.dialogue.clone(),
        }
    }

    /// The CoT's final SQL block equals `sql`.
    pub fn cot_matches_sql(&self) -> bool {
        extract_final_sql(&self.cot).as_deref() == Some(self.sql.as_str())
    }

    /// Both sample invariants, against the database at `db_file`.
    pub fn check(&self, db_file: &Path, timeout_ms: u64) -> Result<ExecOutcome, CotError> {
        if !self.cot_matches_sql() {
            return Err(CotError::Invariant(format!(
                "{}: final SQL block of the CoT differs from the sql field",
                self.sample_id
            )));
        }
        let outcome = exec::execute(db_file, &self.sql, timeout_ms);
        if !outcome.is_rows() {
            return Err(CotError::Invariant(format!(
                "{}: SQL no longer executes: {}",
                self.sample_id, outcome.error_text
            )));
        }
        Ok(outcome)
    }
}

/// Context for [`finalize_sample`] that is not carried by the vote itself.
pub struct FinalizeInput<'a> {
    pub sample: &'a SqlSample,
    pub question: &'a StylizedQuestion,
    pub question_candidates: usize,
    pub db_file: &'a Path,
    pub db_path_rel: &'a str,
    pub timeout_ms: u64,
}

/// Adopts the voted CoT's SQL, re-executes it, and records whether it
/// corrected the original query.
pub fn finalize_sample(input: FinalizeInput<'_>, vote: &CotResult) -> Result<DataSample, CotError> {
    let mut out = DataSample {
        sample_id: input.sample.sample_id.clone(),
        db_name: input.sample.db_name.clone(),
        db_path: input.db_path_rel.to_string(),
        question: input.question.text.clone(),
        external_knowledge: input.question.external_knowledge.clone(),
        style: input.question.style,
        dialogue: input.question.dialogue.clone(),
        sql: vote.final_sql.clone(),
        cot: vote.chosen.cot_text.clone(),
        complexity: input.sample.complexity,
        provenance: Provenance {
            sql_sample_id: input.sample.sample_id.clone(),
            original_sql: input.sample.sql_text.clone(),
            corrected: false,
            template: input.sample.template.clone(),
            skeleton: input.sample.skeleton.clone(),
            requested_select_count: input.sample.requested_select_count,
            question_candidates: input.question_candidates,
            cot_candidates: vote.n_candidates,
            cot_valid: vote.n_valid,
            vote_group_size: vote.group_size,
            models: Default::default(),
        },
    };
    let outcome = out.check(input.db_file, input.timeout_ms)?;
    out.provenance.corrected = outcome.fingerprint().0 != input.sample.exec.fingerprint;
    Ok(out)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::fixtures::toy_db;
    use crate::schema::fixtures::school_schema;

    fn cot(sql: &str) -> String {
        format!("Step 1: find the rows.\n```sql\n{sql}\n```")
    }

    #[test]
    fn extraction_rules() {
        let two = "First try:\n```sql\nSELECT 1\n```\nFinal:\n```sql\nSELECT 2;\n```";
        assert_eq!(extract_final_sql(two).as_deref(), Some("SELECT 2;"));
        assert_eq!(extract_final_sql("just words"), None);
        assert_eq!(extract_final_sql("```python\nprint(1)\n```"), None);
    }

    #[test]
    fn prompt_contents() {
        let catalog = Catalog::bundled();
        let mut schema = school_schema();
        let mut third = schema.tables[0].clone();
        third.name = "districts".into();
        schema.tables.push(third);
        let q = StylizedQuestion {
            text: "Which students are seasoned?".into(),
            style: LanguageStyle::Vague,
            external_knowledge: Some("Seasoned means older than 18.".into()),
            dialogue: None,
        };
        let p = build_cot_prompt(&catalog, &schema, &q, "SELECT name FROM students WHERE age > 18");
        assert_eq!(p.matches("CREATE TABLE").count(), 3);
        assert!(p.contains("Seasoned means older than 18."));
        assert_eq!(p, build_cot_prompt(&catalog, &schema, &q, "SELECT name FROM students WHERE age > 18"));
    }

    #[test]
    fn vote_examples() {
        let dir = tempfile::tempdir().unwrap();
        let db = toy_db(dir.path());
        let a = "SELECT name FROM people WHERE age > 40";
        let a2 = "SELECT name FROM people WHERE age >= 45";
        let b = "SELECT name FROM people";
        let texts = vec![cot(a), cot(a2), cot(b)];
        let r = majority_select(&texts, &db, 1000, "", None).unwrap();
        assert_eq!((r.chosen_index, r.group_size), (0, 2));
        assert_eq!(r.final_sql, a);

        let tie = vec![cot(a), cot(b)];
        assert_eq!(majority_select(&tie, &db, 1000, "", None).unwrap().chosen_index, 0);

        let errs = vec![cot("SELECT nope FROM people"), "no sql".to_string(), cot(b)];
        let r = majority_select(&errs, &db, 1000, "", None).unwrap();
        assert_eq!((r.chosen_index, r.n_valid), (2, 1));

        let none = vec!["nothing".to_string()];
        assert_eq!(
            majority_select(&none, &db, 1000, "", None),
            Err(CotError::Vote(VoteError::VoteFailed))
        );
    }

    fn sample(db_sql: &str, db: &Path) -> SqlSample {
        SqlSample {
            sample_id: "toy/q0".into(),
            db_name: "toy".into(),
            sql_text: db_sql.into(),
            complexity: ComplexityLevel::Simple,
            requested_select_count: 1,
            template: String::new(),
            skeleton: String::new(),
            exec: exec::execute(db, db_sql, 1000).summary(),
        }
    }

    fn finalize(s: &SqlSample, db: &Path, texts: &[String]) -> Result<DataSample, CotError> {
        let q = StylizedQuestion {
            text: "Who is older than 40?".into(),
            style: LanguageStyle::Formal,
            external_knowledge: None,
            dialogue: None,
        };
        let vote = majority_select(texts, db, 1000, &s.exec.fingerprint, None)?;
        finalize_sample(
            FinalizeInput {
                sample: s,
                question: &q,
                question_candidates: 1,
                db_file: db,
                db_path_rel: "toy.sqlite",
                timeout_ms: 1000,
            },
            &vote,
        )
    }

    #[test]
    fn corrected_flag() {
        let dir = tempfile::tempdir().unwrap();
        let db = toy_db(dir.path());
        let s = sample("SELECT name FROM people WHERE age > 40", &db);
        let same = finalize(&s, &db, &[cot("SELECT name FROM people WHERE age >= 41")]).unwrap();
        assert!(!same.provenance.corrected);
        assert!(same.cot_matches_sql());
        let diff = finalize(&s, &db, &[cot("SELECT name, age FROM people WHERE age > 40")]).unwrap();
        assert!(diff.provenance.corrected);
    }

    #[test]
    fn re_execution_failure_is_invariant_error() {
        let dir = tempfile::tempdir().unwrap();
        let db = toy_db(dir.path());
        let s = sample("SELECT kind FROM pets", &db);
        let vote = majority_select(&[cot("SELECT kind FROM pets")], &db, 1000, &s.exec.fingerprint, None).unwrap();
        let conn = rusqlite::Connection::open(&db).unwrap();
        conn.execute_batch("DROP TABLE pets").unwrap();
        drop(conn);
        let q = StylizedQuestion {
            text: "Pets?".into(),
            style: LanguageStyle::Concise,
            external_knowledge: None,
            dialogue: None,
        };
        let err = finalize_sample(
            FinalizeInput {
                sample: &s,
                question: &q,
                question_candidates: 1,
                db_file: &db,
                db_path_rel: "toy.sqlite",
                timeout_ms: 1000,
            },
            &vote,
        )
        .unwrap_err();
        assert!(matches!(err, CotError::Invariant(_)));
    }

    #[test]
    fn original_votes_but_never_wins() {
        let dir = tempfile::tempdir().unwrap();
        let db = toy_db(dir.path());
        let a = "SELECT name FROM people WHERE age > 40";
        let b = "SELECT name FROM people";
        let orig = exec::execute(&db, b, 1000);
        let texts = vec![cot(a), cot(b)];
        let r = majority_select(&texts, &db, 1000, &orig.fingerprint().0, Some(&orig)).unwrap();
        assert_eq!((r.chosen_index, r.group_size), (1, 1));
        assert!(!r.corrected);
    }
}
