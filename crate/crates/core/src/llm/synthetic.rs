//! Offline stand-in for a chat model. It recognizes each prompt family of
//! the pipeline by its section headers and answers with well-formed output
//! derived from the prompt itself: a schema built from the seed table's
//! headers, SELECT queries over the DDL it is shown, questions in the
//! requested style, CoT solutions ending in the given SQL, and so on.
//! Every answer is a pure function of the prompt text and sample index.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sqlparser::ast::{ObjectName, ObjectNamePart, Statement, TableConstraint};
use sqlparser::dialect::SQLiteDialect;
use sqlparser::parser::Parser;

use super::{ChatRequest, Responder};
use crate::question_synth::{
    EXPLANATION_END, EXPLANATION_START, KNOWLEDGE_END, KNOWLEDGE_START, QUESTION_END, QUESTION_START,
};
use crate::schema::{parse_schema, quote_ident, ColumnDef, ForeignKey, SchemaDef, TableDef};
use crate::text::{item_rng, sanitize_identifier};

#[derive(Debug, Clone, Default)]
pub struct SyntheticResponder;

impl Responder for SyntheticResponder {
    fn respond(&self, request: &ChatRequest, index: u32) -> String {
        let prompt = request.prompt();
        let mut rng = item_rng(u64::from(index), prompt);
        if prompt.contains("semantic richness") {
            "YES".into()
        } else if prompt.contains("relational tables") && prompt.contains("### Web Table") {
            generate_schema(prompt)
        } else if prompt.contains("### Database Information") {
            enhance_schema(prompt)
        } else if prompt.contains("### SQL Complexity") {
            generate_sql(prompt, &mut rng)
        } else if prompt.contains("### Desired Language Style") {
            generate_question(prompt, index)
        } else if prompt.contains("### Question and SQL") {
            generate_cot(prompt, index)
        } else if prompt.contains("### Evaluation Criteria") {
            judge_quality(prompt, &mut rng)
        } else if prompt.contains("### SQL A") {
            "A".into()
        } else {
            "I am not sure how to answer this request.".into()
        }
    }
}

/// Text between `header` and the next `### ` header (or the end).
fn section<'a>(prompt: &'a str, header: &str) -> &'a str {
    let Some(start) = prompt.rfind(header) else {
        return "";
    };
    let body = &prompt[start + header.len()..];
    let end = body.find("\n### ").unwrap_or(body.len());
    body[..end].trim()
}

fn pipe_cells(line: &str) -> Vec<String> {
    let inner = line.trim().trim_start_matches('|').trim_end_matches('|');
    inner.split('|').map(|c| c.trim().to_string()).collect()
}

fn infer_type(values: &[&str]) -> &'static str {
    if values.is_empty() {
        "TEXT"
    } else if values.iter().all(|v| v.parse::<i64>().is_ok()) {
        "INTEGER"
    } else if values.iter().all(|v| v.parse::<f64>().is_ok()) {
        "REAL"
    } else {
        "TEXT"
    }
}

const DETAIL_SUFFIXES: [&str; 10] = [
    "details", "events", "notes", "owners", "sources", "reviews", "tags", "updates", "locations", "contacts",
];

fn column(name: &str, ty: &str, description: String, examples: [&str; 2]) -> ColumnDef {
    ColumnDef {
        name: name.into(),
        sql_type: ty.into(),
        description,
        example_values: examples.iter().map(|s| s.to_string()).collect(),
    }
}

fn generate_schema(prompt: &str) -> String {
    let table_count = prompt
        .split("exactly ")
        .nth(1)
        .and_then(|s| s.split_whitespace().next())
        .and_then(|n| n.parse::<usize>().ok())
        .unwrap_or(2)
        .max(1);
    let web = section(prompt, "### Web Table");
    let mut lines = web.lines().filter(|l| l.trim_start().starts_with('|'));
    let headers = lines.next().map(pipe_cells).unwrap_or_default();
    let rows: Vec<Vec<String>> = lines.filter(|l| !l.contains("---")).map(pipe_cells).collect();

    let stem = headers
        .iter()
        .map(|h| sanitize_identifier(h))
        .find(|s| !s.is_empty())
        .unwrap_or_else(|| "item".into());
    let main = format!("{stem}_records");
    let mut columns = vec![column("id", "INTEGER", "Unique identifier of the record.".into(), ["1", "2"])];
    for (i, h) in headers.iter().enumerate() {
        let mut name = sanitize_identifier(h);
        if name.is_empty() || columns.iter().any(|c| c.name == name) {
            name = format!("field_{}", i + 1);
        }
        let values: Vec<&str> = rows
            .iter()
            .take(2)
            .filter_map(|r| r.get(i).map(String::as_str))
            .filter(|v| !v.is_empty())
            .collect();
        let ty = infer_type(&values);
        columns.push(ColumnDef {
            name,
            sql_type: ty.into(),
            description: format!("The {h} of the record."),
            example_values: values.iter().map(|v| v.to_string()).collect(),
        });
    }
    let mut tables = vec![TableDef {
        name: main.clone(),
        description: format!("One row per {stem} record from the source table."),
        columns,
        primary_key: vec!["id".into()],
    }];
    let mut foreign_keys = Vec::new();
    for k in 1..table_count {
        let suffix = DETAIL_SUFFIXES[(k - 1) % DETAIL_SUFFIXES.len()];
        let name = if k <= DETAIL_SUFFIXES.len() {
            format!("{stem}_{suffix}")
        } else {
            format!("{stem}_{suffix}_{k}")
        };
        let label_a = rows.first().and_then(|r| r.get(k % r.len().max(1))).cloned().unwrap_or_else(|| "alpha".into());
        let label_b = rows.get(1).and_then(|r| r.get(k % r.len().max(1))).cloned().unwrap_or_else(|| "beta".into());
        let amount_a = format!("{}.5", 10 + k);
        let amount_b = format!("{}.25", 3 * k);
        tables.push(TableDef {
            name: name.clone(),
            description: format!("{suffix} attached to {stem} records."),
            columns: vec![
                column("id", "INTEGER", format!("Unique identifier of the {suffix} entry."), ["1", "2"]),
                column("record_id", "INTEGER", format!("The {stem} record this entry belongs to."), ["1", "2"]),
                column("label", "TEXT", format!("Short label of the {suffix} entry."), [&label_a, &label_b]),
                column("amount", "REAL", format!("Numeric measure of the {suffix} entry."), [&amount_a, &amount_b]),
                column("recorded_on", "TEXT", "Date the entry was recorded.".into(), ["2023-01-15", "2023-06-30"]),
            ],
            primary_key: vec!["id".into()],
        });
        foreign_keys.push(ForeignKey {
            table: name,
            column: "record_id".into(),
            ref_table: main.clone(),
            ref_column: "id".into(),
        });
    }
    let schema = SchemaDef {
        db_name: format!("{stem}_db"),
        scenario: format!("A database that tracks {} data and related entries.", headers.join(", ")),
        tables,
        foreign_keys,
    };
    format!("Scenario and database:\n{}", schema.render_response())
}

fn enhance_schema(prompt: &str) -> String {
    let Ok(parsed) = parse_schema(section(prompt, "### Database Information")) else {
        return "The database could not be read.".into();
    };
    let mut schema = parsed.schema;
    for t in &mut schema.tables {
        let mut name = "remarks".to_string();
        let mut n = 2;
        while t.column(&name).is_some() {
            name = format!("remarks_{n}");
            n += 1;
        }
        t.columns.push(column(
            &name,
            "TEXT",
            format!("Free-text remarks about the {} row.", t.name),
            ["checked", "pending review"],
        ));
    }
    schema.render_response()
}

struct DdlTable {
    name: String,
    columns: Vec<(String, String)>,
    fks: Vec<(String, String, String)>,
}

impl DdlTable {
    fn numeric(&self) -> Vec<&str> {
        self.columns
            .iter()
            .filter(|(_, t)| {
                let t = t.to_ascii_uppercase();
                ["INT", "REAL", "FLOA", "DOUB", "NUM", "DEC"].iter().any(|k| t.contains(k))
            })
            .map(|(c, _)| c.as_str())
            .collect()
    }

    fn names(&self) -> Vec<&str> {
        self.columns.iter().map(|(c, _)| c.as_str()).collect()
    }
}

fn last_ident(name: &ObjectName) -> String {
    match name.0.last() {
        Some(ObjectNamePart::Identifier(i)) => i.value.clone(),
        _ => name.to_string(),
    }
}

fn parse_ddl(text: &str) -> Vec<DdlTable> {
    let Ok(stmts) = Parser::parse_sql(&SQLiteDialect {}, text) else {
        return Vec::new();
    };
    stmts
        .into_iter()
        .filter_map(|s| match s {
            Statement::CreateTable(ct) => Some(DdlTable {
                name: last_ident(&ct.name),
                columns: ct
                    .columns
                    .iter()
                    .map(|c| (c.name.value.clone(), c.data_type.to_string()))
                    .collect(),
                fks: ct
                    .constraints
                    .iter()
                    .filter_map(|c| match c {
                        TableConstraint::ForeignKey(fk) => Some((
                            fk.columns.first()?.value.clone(),
                            last_ident(&fk.foreign_table),
                            fk.referred_columns.first()?.value.clone(),
                        )),
                        _ => None,
                    })
                    .collect(),
            }),
            _ => None,
        })
        .collect()
}

fn pick<'a>(rng: &mut ChaCha8Rng, items: &[&'a str], k: usize) -> Vec<&'a str> {
    let mut out: Vec<&str> = items.choose_multiple(rng, k.min(items.len())).copied().collect();
    out.sort_by_key(|c| items.iter().position(|x| x == c));
    out
}

fn q(s: &str) -> String {
    quote_ident(s)
}

fn qualified(alias: &str, cols: &[&str]) -> String {
    cols.iter().map(|c| format!("{alias}.{}", q(c))).collect::<Vec<_>>().join(", ")
}

fn generate_sql(prompt: &str, rng: &mut ChaCha8Rng) -> String {
    let tables = parse_ddl(section(prompt, "### Database Schema"));
    if tables.is_empty() {
        return "The schema is empty, so no query can be written.".into();
    }
    let level = section(prompt, "### SQL Complexity")
        .split('"')
        .nth(1)
        .unwrap_or("Simple")
        .to_string();
    let k: usize = section(prompt, "### Column Selection Constraint")
        .split("exactly ")
        .nth(1)
        .and_then(|s| s.split(|c: char| !c.is_ascii_digit()).next())
        .and_then(|n| n.parse().ok())
        .unwrap_or(1);

    let t = &tables[rng.random_range(0..tables.len())];
    let cols = pick(rng, &t.names(), k);
    let num = t.numeric();
    let n = num.get(rng.random_range(0..num.len().max(1))).copied();
    let tn = q(&t.name);
    let limit = rng.random_range(1..6);
    let joined = tables.iter().find_map(|child| {
        child
            .fks
            .iter()
            .find(|(_, parent, _)| parent.eq_ignore_ascii_case(&t.name))
            .map(|fk| (child, fk))
    });

    let sql = match (level.as_str(), rng.random_range(0..3)) {
        ("Simple", 0) => format!("SELECT {} FROM {tn}", qualified(&tn, &cols)),
        ("Simple", 1) => match n {
            Some(n) => format!("SELECT {} FROM {tn} WHERE {} > {} ORDER BY {} DESC", qualified(&tn, &cols), q(n), limit, q(n)),
            None => format!("SELECT {} FROM {tn} LIMIT {limit}", qualified(&tn, &cols)),
        },
        ("Simple", _) => format!(
            "SELECT DISTINCT {} FROM {tn} WHERE {} IS NOT NULL",
            qualified(&tn, &cols),
            q(cols[0])
        ),
        ("Moderate", 0) if joined.is_some() => {
            let (child, (fk_col, _, ref_col)) = joined.unwrap();
            let mut sel: Vec<String> = cols.iter().take(k.saturating_sub(1).max(1)).map(|c| format!("T1.{}", q(c))).collect();
            if sel.len() < k {
                sel.push(format!("COUNT(T2.{})", q(fk_col)));
            }
            format!(
                "SELECT {} FROM {tn} AS T1 JOIN {} AS T2 ON T2.{} = T1.{} GROUP BY {}",
                sel.join(", "),
                q(&child.name),
                q(fk_col),
                q(ref_col),
                cols.iter().take(k.saturating_sub(1).max(1)).map(|c| format!("T1.{}", q(c))).collect::<Vec<_>>().join(", ")
            )
        }
        ("Moderate", 1) if n.is_some() && k >= 2 => {
            let keys = pick(rng, &t.names(), k - 1);
            format!(
                "SELECT {}, AVG({}) AS avg_value FROM {tn} GROUP BY {} ORDER BY avg_value DESC",
                keys.iter().map(|c| q(c)).collect::<Vec<_>>().join(", "),
                q(n.unwrap()),
                keys.iter().map(|c| q(c)).collect::<Vec<_>>().join(", ")
            )
        }
        ("Moderate", _) => match n {
            Some(n) if k == 1 => format!("SELECT ROUND(AVG({}), 2) FROM {tn}", q(n)),
            _ => format!(
                "SELECT {} FROM {tn} WHERE {} LIKE '%a%' LIMIT {limit}",
                qualified(&tn, &cols),
                q(cols[cols.len() - 1])
            ),
        },
        ("Complex", 0) if n.is_some() => format!(
            "SELECT {} FROM {tn} WHERE {} >= (SELECT AVG({}) FROM {tn})",
            qualified(&tn, &cols),
            q(n.unwrap()),
            q(n.unwrap())
        ),
        ("Complex", 1) => format!(
            "WITH ranked AS (SELECT {} FROM {tn} WHERE {} IS NOT NULL) SELECT * FROM ranked",
            cols.iter().map(|c| q(c)).collect::<Vec<_>>().join(", "),
            q(cols[0])
        ),
        ("Complex", _) if joined.is_some() => {
            let (child, (fk_col, _, ref_col)) = joined.unwrap();
            format!(
                "SELECT {} FROM {tn} WHERE {} IN (SELECT {} FROM {})",
                qualified(&tn, &cols),
                q(ref_col),
                q(fk_col),
                q(&child.name)
            )
        }
        (_, 0) if n.is_some() && k >= 2 => {
            let keep = pick(rng, &t.names(), k - 1);
            format!(
                "SELECT {}, RANK() OVER (ORDER BY {} DESC) AS value_rank FROM {tn}",
                keep.iter().map(|c| q(c)).collect::<Vec<_>>().join(", "),
                q(n.unwrap())
            )
        }
        (_, 1) => format!(
            "SELECT {cols} FROM {tn} WHERE {first} IS NOT NULL UNION SELECT {cols} FROM {tn} WHERE {first} IS NULL",
            cols = cols.iter().map(|c| q(c)).collect::<Vec<_>>().join(", "),
            first = q(cols[0])
        ),
        _ => format!(
            "WITH base AS (SELECT {} FROM {tn}) SELECT * FROM base WHERE {} IN (SELECT {} FROM {tn})",
            cols.iter().map(|c| q(c)).collect::<Vec<_>>().join(", "),
            q(cols[0]),
            q(cols[0])
        ),
    };
    format!(
        "The analysis looks at {} in {} at the {level} level.\n```sql\n{sql};\n```",
        cols.join(", "),
        t.name
    )
}

fn generate_question(prompt: &str, index: u32) -> String {
    let sql = section(prompt, "### SQL Query");
    let style_block = section(prompt, "### Desired Language Style");
    let style = style_block
        .lines()
        .find_map(|l| l.strip_prefix("Style:"))
        .map(str::trim)
        .unwrap_or("Formal");
    let columns: Vec<String> = section(prompt, "### SQL-related Column Information")
        .lines()
        .filter_map(|l| l.strip_prefix("- "))
        .filter_map(|l| l.split_whitespace().next())
        .map(|tc| tc.replace(['.', '_'], " "))
        .collect();
    let subject = if columns.is_empty() {
        "the requested values".to_string()
    } else {
        columns.join(" and ")
    };
    let lead = ["", "all ", "every "][index as usize % 3];
    let base = format!("{lead}{subject}");
    let (question, knowledge) = match style {
        "Colloquial" => (format!("Hey, could you pull up {base} for me?"), None),
        "Imperative" => (format!("List {base}."), None),
        "Interrogative" => (format!("What are {base}?"), None),
        "Descriptive" => (format!("I want to see {base}, as stored in the database."), None),
        "Concise" => (format!("{base}?"), None),
        "Vague" => (
            format!("Which notable entries stand out for {base}?"),
            Some(format!("Notable entries are exactly the rows returned by: {sql}")),
        ),
        "Metaphorical" => (
            format!("Which gems shine brightest among {base}?"),
            Some(format!("Gems that shine brightest are the rows returned by: {sql}")),
        ),
        "Conversational" => (
            format!(
                "<User>: I have a question about our records.\n<Assistant>: Sure, what would you like to know?\n<User>: Please show me {base}."
            ),
            None,
        ),
        _ => (format!("Could you provide {base}?"), None),
    };
    let mut out = format!(
        "{EXPLANATION_START}\nThe query reads {subject}.\n{EXPLANATION_END}\n{QUESTION_START}\n{question}\n{QUESTION_END}\n"
    );
    if let Some(k) = knowledge.filter(|_| prompt.contains(KNOWLEDGE_START)) {
        out.push_str(&format!("{KNOWLEDGE_START}\n{k}\n{KNOWLEDGE_END}\n"));
    }
    out
}

fn generate_cot(prompt: &str, index: u32) -> String {
    let body = section(prompt, "### Question and SQL");
    let sql = body.split_once("\nSQL: ").map(|(_, s)| s.trim()).unwrap_or("");
    let question = body
        .lines()
        .find_map(|l| l.strip_prefix("Question: "))
        .unwrap_or("the question");
    let reasoning = format!(
        "Step 1: The question asks: {question}\nStep 2: Identify the tables and columns it mentions in the schema.\nStep 3: Apply the filters, joins and aggregations the question requires."
    );
    match index % 8 {
        3 => format!("{reasoning}\nStep 4: The query is the one given above."),
        6 => format!("{reasoning}\nStep 4: Write the final query.\n```sql\nSELECT * FROM missing_table_{index}\n```"),
        _ => format!("{reasoning}\nStep 4: Write the final query.\n```sql\n{sql}\n```"),
    }
}

fn judge_quality(prompt: &str, rng: &mut ChaCha8Rng) -> String {
    let ratings = ["excellent", "excellent", "good", "good", "average", "poor"];
    let body: serde_json::Map<String, serde_json::Value> = section(prompt, "### Evaluation Criteria")
        .lines()
        .filter_map(|l| l.strip_prefix("- "))
        .filter_map(|l| l.split_once(':'))
        .map(|(name, _)| {
            let r = ratings[rng.random_range(0..ratings.len())];
            (
                name.trim().to_string(),
                serde_json::json!({"rating": r, "explanation": format!("Judged {r} on inspection.")}),
            )
        })
        .collect();
    format!("```json\n{}\n```", serde_json::Value::Object(body))
}
