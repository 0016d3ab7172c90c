//! SQL-to-question back-translation in nine language styles, and the
//! semantic-consistency selector that picks the embedding centroid among
//! the sampled candidates.

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::Catalog;
use crate::llm::{Gateway, LlmError};
use crate::schema::SchemaDef;
use crate::sql::{referenced_columns, SqlError};
use crate::text::fill_template;

pub const QUESTION_START: &str = "[QUESTION-START]";
pub const QUESTION_END: &str = "[QUESTION-END]";
pub const EXPLANATION_START: &str = "[EXPLANATION-START]";
pub const EXPLANATION_END: &str = "[EXPLANATION-END]";
pub const KNOWLEDGE_START: &str = "[EXTERNAL-KNOWLEDGE-START]";
pub const KNOWLEDGE_END: &str = "[EXTERNAL-KNOWLEDGE-END]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LanguageStyle {
    Formal,
    Colloquial,
    Imperative,
    Interrogative,
    Descriptive,
    Concise,
    Vague,
    Metaphorical,
    Conversational,
}

impl LanguageStyle {
    pub const ALL: [LanguageStyle; 9] = [
        LanguageStyle::Formal,
        LanguageStyle::Colloquial,
        LanguageStyle::Imperative,
        LanguageStyle::Interrogative,
        LanguageStyle::Descriptive,
        LanguageStyle::Concise,
        LanguageStyle::Vague,
        LanguageStyle::Metaphorical,
        LanguageStyle::Conversational,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn requires_knowledge(self) -> bool {
        matches!(self, LanguageStyle::Vague | LanguageStyle::Metaphorical)
    }

    pub fn is_dialogue(self) -> bool {
        self == LanguageStyle::Conversational
    }
}

impl std::fmt::Display for LanguageStyle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Speaker {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StylizedQuestion {
    pub text: String,
    pub style: LanguageStyle,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external_knowledge: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dialogue: Option<Vec<Turn>>,
}

impl StylizedQuestion {
    pub fn validate(&self) -> Result<(), String> {
        if self.text.trim().is_empty() {
            return Err("empty question".into());
        }
        if self.external_knowledge.is_some() != self.style.requires_knowledge() {
            return Err(format!("external knowledge presence does not fit style {}", self.style));
        }
        if self.dialogue.is_some() != self.style.is_dialogue() {
            return Err(format!("dialogue presence does not fit style {}", self.style));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub candidates: Vec<StylizedQuestion>,
    pub selected_index: usize,
}

impl CandidateSet {
    pub fn selected(&self) -> &StylizedQuestion {
        &self.candidates[self.selected_index]
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum QuestionError {
    #[error("question parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Sql(#[from] SqlError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

pub fn sample_style<R: Rng + ?Sized>(rng: &mut R, weights: &[f64; 9]) -> LanguageStyle {
    let dist = WeightedIndex::new(weights).expect("style weights are positive");
    LanguageStyle::ALL[dist.sample(rng)]
}

fn style_requirement(style: LanguageStyle) -> &'static str {
    match style {
        LanguageStyle::Vague | LanguageStyle::Metaphorical => {
            "The question depends on external knowledge that is not stated in it. State that knowledge explicitly in the external knowledge section of the output."
        }
        LanguageStyle::Conversational => {
            "Write the question as a multi-turn dialogue between <User> and <Assistant>, one turn per line starting with \"<User>:\" or \"<Assistant>:\". The dialogue as a whole must pin down exactly what the query returns."
        }
        _ => "",
    }
}

/// The question prompt: the SQL, the name and description of every schema
/// column it references, and the style's description and example.
pub fn build_question_prompt(
    catalog: &Catalog,
    sql: &str,
    schema: &SchemaDef,
    style: LanguageStyle,
) -> Result<String, QuestionError> {
    let columns = referenced_columns(sql, schema)?
        .into_iter()
        .map(|(t, c)| {
            let col = schema
                .table(&t)
                .and_then(|tab| tab.column(&c))
                .expect("resolved column exists");
            let desc = if col.description.trim().is_empty() {
                "(no description)"
            } else {
                col.description.trim()
            };
            format!("- {t}.{c} ({}): {desc}", col.sql_type)
        })
        .collect::<Vec<_>>()
        .join("\n");
    let info = catalog.style(style);
    let mut example = info.example.clone();
    if let Some(k) = &info.knowledge_example {
        example.push_str(&format!("\nExternal knowledge: {k}"));
    }
    let knowledge_format = if style.requires_knowledge() {
        format!("{KNOWLEDGE_START}\n(the external knowledge the question relies on)\n{KNOWLEDGE_END}")
    } else {
        String::new()
    };
    Ok(fill_template(
        &catalog.prompts.question_generation,
        &[
            ("sql", sql),
            ("columns", &columns),
            ("style", &style.to_string()),
            ("style_description", &info.description),
            ("style_example", &example),
            ("style_requirement", style_requirement(style)),
            ("knowledge_format", &knowledge_format),
        ],
    )
    .trim_end()
    .to_string())
}

/// Text between the last `start` marker and the following `end` marker.
fn section<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let from = text.rfind(start)? + start.len();
    let len = text[from..].find(end)?;
    Some(text[from..from + len].trim())
}

fn parse_dialogue(body: &str) -> Result<Vec<Turn>, QuestionError> {
    let mut turns: Vec<Turn> = Vec::new();
    for line in body.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let tagged = [
            ("<User>:", Speaker::User),
            ("User:", Speaker::User),
            ("<Assistant>:", Speaker::Assistant),
            ("Assistant:", Speaker::Assistant),
        ]
        .into_iter()
        .find_map(|(tag, who)| line.strip_prefix(tag).map(|rest| (who, rest.trim())));
        match (tagged, turns.last_mut()) {
            (Some((speaker, text)), _) => turns.push(Turn {
                speaker,
                text: text.to_string(),
            }),
            (None, Some(last)) => {
                last.text.push(' ');
                last.text.push_str(line);
            }
            (None, None) => return Err(QuestionError::Parse("dialogue text before the first turn".into())),
        }
    }
    let has = |s: Speaker| turns.iter().any(|t| t.speaker == s && !t.text.is_empty());
    if turns.len() < 2 || !has(Speaker::User) || !has(Speaker::Assistant) {
        return Err(QuestionError::Parse("dialogue needs turns from both <User> and <Assistant>".into()));
    }
    Ok(turns)
}

fn flatten(turns: &[Turn]) -> String {
    turns
        .iter()
        .map(|t| match t.speaker {
            Speaker::User => format!("<User>: {}", t.text),
            Speaker::Assistant => format!("<Assistant>: {}", t.text),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Extracts the question (and knowledge or dialogue, per style) from a
/// response. Any violation of the style's output contract rejects the
/// candidate; nothing is repaired.
pub fn parse_question(text: &str, style: LanguageStyle) -> Result<StylizedQuestion, QuestionError> {
    let body = section(text, QUESTION_START, QUESTION_END)
        .ok_or_else(|| QuestionError::Parse("no question section".into()))?;
    if body.is_empty() {
        return Err(QuestionError::Parse("empty question section".into()));
    }
    let knowledge = section(text, KNOWLEDGE_START, KNOWLEDGE_END)
        .filter(|k| !k.is_empty())
        .map(str::to_string);
    match (style.requires_knowledge(), &knowledge) {
        (true, None) => {
            return Err(QuestionError::Parse(format!("style {style} requires external knowledge")))
        }
        (false, Some(_)) => {
            return Err(QuestionError::Parse(format!("style {style} must not carry external knowledge")))
        }
        _ => {}
    }
    let (text, dialogue) = if style.is_dialogue() {
        let turns = parse_dialogue(body)?;
        (flatten(&turns), Some(turns))
    } else {
        (body.split_whitespace().collect::<Vec<_>>().join(" "), None)
    };
    let q = StylizedQuestion {
        text,
        style,
        external_knowledge: knowledge,
        dialogue,
    };
    q.validate().map_err(QuestionError::Parse)?;
    Ok(q)
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean cosine similarity of each vector to all others.
pub fn consistency_scores(vectors: &[Vec<f32>]) -> Vec<f64> {
    let n = vectors.len();
    if n < 2 {
        return vec![0.0; n];
    }
    (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| cosine(&vectors[i], &vectors[j]))
                .sum::<f64>()
                / (n - 1) as f64
        })
        .collect()
}

/// Index of the highest mean similarity; ties go to the lowest index.
/// Scores within 1e-12 count as tied so float noise cannot reorder them.
pub fn select_by_embeddings(vectors: &[Vec<f32>]) -> usize {
    let scores = consistency_scores(vectors);
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] + 1e-12 {
            best = i;
        }
    }
    best
}

/// The semantic-consistency selector over candidate texts.
pub fn select_consistent(candidates: &[StylizedQuestion], gateway: &Gateway) -> Result<usize, LlmError> {
    match candidates.len() {
        0 => Err(LlmError::InvalidRequest("no candidates to select from".into())),
        1 => Ok(0),
        _ => {
            let texts: Vec<String> = candidates.iter().map(|c| c.text.clone()).collect();
            let vectors: Vec<Vec<f32>> = gateway.embed(&texts)?.into_iter().map(|e| e.values).collect();
            Ok(select_by_embeddings(&vectors))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuestionOutcome {
    /// `None` when no candidate parsed; the SQL sample is dropped.
    pub set: Option<CandidateSet>,
    pub parse_failures: usize,
}

/// Samples `n_samples` candidates for one query, keeps those that parse and
/// selects the most consistent one.
pub fn generate_question(
    catalog: &Catalog,
    sql: &str,
    schema: &SchemaDef,
    style: LanguageStyle,
    gateway: &Gateway,
    n_samples: u32,
    temperature: f64,
) -> Result<QuestionOutcome, QuestionError> {
    let prompt = build_question_prompt(catalog, sql, schema, style)?;
    let response = gateway.complete(&gateway.request(prompt, temperature, n_samples))?;
    let total = response.texts.len() + response.failures.len();
    let candidates: Vec<StylizedQuestion> = response
        .texts
        .iter()
        .filter_map(|t| parse_question(t, style).ok())
        .collect();
    let parse_failures = total - candidates.len();
    if candidates.is_empty() {
        return Ok(QuestionOutcome {
            set: None,
            parse_failures,
        });
    }
    let selected_index = select_consistent(&candidates, gateway)?;
    Ok(QuestionOutcome {
        set: Some(CandidateSet {
            candidates,
            selected_index,
        }),
        parse_failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{install_mock, MockScript};
    use crate::schema::fixtures::school_schema;
    use proptest::prelude::*;

    fn response(question: &str, knowledge: Option<&str>) -> String {
        let mut s = format!(
            "{EXPLANATION_START}\nLists names.\n{EXPLANATION_END}\n{QUESTION_START}\n{question}\n{QUESTION_END}\n"
        );
        if let Some(k) = knowledge {
            s.push_str(&format!("{KNOWLEDGE_START}\n{k}\n{KNOWLEDGE_END}\n"));
        }
        s
    }

    #[test]
    fn prompt_lists_exactly_the_referenced_columns() {
        let catalog = Catalog::bundled();
        let schema = school_schema();
        let p = build_question_prompt(&catalog, "SELECT name FROM students WHERE age > 18", &schema, LanguageStyle::Formal).unwrap();
        let listed: Vec<&str> = p.lines().filter(|l| l.starts_with("- students.") || l.starts_with("- schools.")).collect();
        assert_eq!(listed, vec!["- students.name (TEXT): The name.", "- students.age (INTEGER): The age."]);
        let e = p.find("explanation").unwrap();
        assert!(e < p.find("question").unwrap());
        assert!(!p.contains(KNOWLEDGE_START));
        let m = build_question_prompt(&catalog, "SELECT name FROM students", &schema, LanguageStyle::Metaphorical).unwrap();
        assert!(m.contains(KNOWLEDGE_START));
        assert!(matches!(
            build_question_prompt(&catalog, "SELECT gpa FROM students", &schema, LanguageStyle::Formal),
            Err(QuestionError::Sql(SqlError::ColumnResolution(_)))
        ));
    }

    #[test]
    fn parse_examples() {
        assert!(matches!(
            parse_question(&response("Which ones are the old hands?", None), LanguageStyle::Vague),
            Err(QuestionError::Parse(_))
        ));
        let conv = response(
            "<User>: I need some student info.\n<Assistant>: Which students?\n<User>: Names of those over 18.",
            None,
        );
        let q = parse_question(&conv, LanguageStyle::Conversational).unwrap();
        assert_eq!(q.dialogue.as_ref().unwrap().len(), 3);
        assert_eq!(
            q.text,
            "<User>: I need some student info.\n<Assistant>: Which students?\n<User>: Names of those over 18."
        );
        let f = parse_question(&response("What are the names of students older than 18?", None), LanguageStyle::Formal).unwrap();
        assert_eq!(
            f,
            StylizedQuestion {
                text: "What are the names of students older than 18?".into(),
                style: LanguageStyle::Formal,
                external_knowledge: None,
                dialogue: None,
            }
        );
        assert!(parse_question("free text", LanguageStyle::Formal).is_err());
        assert!(parse_question(&response("q?", Some("k")), LanguageStyle::Formal).is_err());
        assert!(parse_question(&response("<User>: hi there", None), LanguageStyle::Conversational).is_err());
    }

    #[test]
    fn selector_examples() {
        let v = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(consistency_scores(&v), vec![0.5, 0.5, 0.0]);
        assert_eq!(select_by_embeddings(&v), 0);
        assert_eq!(select_by_embeddings(&[vec![0.3, 0.1]]), 0);
    }

    #[test]
    fn selector_against_brute_force() {
        let v = vec![
            vec![0.1, 0.9, 0.0],
            vec![0.9, 0.1, 0.05],
            vec![0.88, 0.12, 0.0],
            vec![0.91, 0.08, 0.02],
        ];
        let mut best = (0, f64::MIN);
        for i in 0..v.len() {
            let mut s = 0.0;
            for j in 0..v.len() {
                if i != j {
                    let dot: f64 = v[i].iter().zip(&v[j]).map(|(a, b)| (*a * *b) as f64).sum();
                    let n = |x: &Vec<f32>| x.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
                    s += dot / (n(&v[i]) * n(&v[j]));
                }
            }
            if s / 3.0 > best.1 {
                best = (i, s / 3.0);
            }
        }
        assert_eq!(select_by_embeddings(&v), best.0);
        assert!(best.0 > 0);
    }

    #[test]
    fn select_consistent_uses_scripted_embeddings() {
        let qs: Vec<StylizedQuestion> = ["a", "b", "c"]
            .iter()
            .map(|t| StylizedQuestion {
                text: t.to_string(),
                style: LanguageStyle::Formal,
                external_knowledge: None,
                dialogue: None,
            })
            .collect();
        let gw = install_mock(
            MockScript::new()
                .embedding("a", vec![0.0, 1.0])
                .embedding("b", vec![1.0, 1.0])
                .embedding("c", vec![1.0, 0.0]),
        );
        assert_eq!(select_consistent(&qs, &gw).unwrap(), 1);
        assert_eq!(select_consistent(&qs[..1], &gw).unwrap(), 0);
    }

    fn arb_vectors() -> impl Strategy<Value = Vec<Vec<f32>>> {
        prop::collection::vec(prop::collection::vec(-4i8..5, 3), 1..7)
            .prop_map(|vs| vs.into_iter().map(|v| v.into_iter().map(f32::from).collect()).collect())
    }

    proptest! {
        #[test]
        fn selection_is_scale_invariant(v in arb_vectors(), scale in 1u8..50) {
            let scaled: Vec<Vec<f32>> = v.iter().map(|x| x.iter().map(|a| a * scale as f32).collect()).collect();
            prop_assert_eq!(select_by_embeddings(&v), select_by_embeddings(&scaled));
        }

        #[test]
        fn selection_is_permutation_covariant(v in arb_vectors(), rot in 0usize..7) {
            let n = v.len();
            let rot = rot % n;
            let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
            let permuted: Vec<Vec<f32>> = perm.iter().map(|&i| v[i].clone()).collect();
            let scores = consistency_scores(&v);
            let chosen = perm[select_by_embeddings(&permuted)];
            let top = scores.iter().cloned().fold(f64::MIN, f64::max);
            prop_assert!((scores[chosen] - top).abs() < 1e-9);
        }

        #[test]
        fn accepted_questions_fit_their_style(style_idx in 0usize..9, with_k in any::<bool>(), dialogue in any::<bool>()) {
            let style = LanguageStyle::ALL[style_idx];
            let body = if dialogue { "<User>: Show me.\n<Assistant>: Which?\n<User>: Names." } else { "Names of the students?" };
            let text = response(body, with_k.then_some("Veterans are over 40."));
            if let Ok(q) = parse_question(&text, style) {
                prop_assert!(q.validate().is_ok());
                prop_assert_eq!(q.style, style);
            }
        }
    }
}
