//! Relational schema model, its JSON exchange format and DDL rendering.
//!
//! The JSON format (shared by the generation prompts, the enhancement pass and
//! on-disk schema files) has the keys `db_name`, `scenario`, `tables[]`
//! (`name`, `description`, `columns[]` with `name`/`type`/`description`/`examples`,
//! `primary_key[]`) and `foreign_keys[]` (`table`, `column`, `ref_table`,
//! `ref_column`).

mod materialize;
mod synth;

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use materialize::{introspect, materialize, MaterializeError, MaterializeReport};
pub use synth::{
    build_enhancement_prompt, build_generation_prompt, enhance, render_web_table,
    sample_table_count, table_count_draw, table_count_from_draw, EnhanceOutcome, SynthesisParams,
};

use crate::text::fenced_blocks;

#[derive(Debug, Error, PartialEq)]
pub enum SchemaError {
    #[error("no schema block found: {0}")]
    Parse(String),
    #[error("schema invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnDef {
    pub name: String,
    #[serde(rename = "type")]
    pub sql_type: String,
    #[serde(default)]
    pub description: String,
    #[serde(default, rename = "examples")]
    pub example_values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableDef {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub columns: Vec<ColumnDef>,
    #[serde(default)]
    pub primary_key: Vec<String>,
}

impl TableDef {
    pub fn column(&self, name: &str) -> Option<&ColumnDef> {
        self.columns.iter().find(|c| c.name.eq_ignore_ascii_case(name))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ForeignKey {
    pub table: String,
    pub column: String,
    pub ref_table: String,
    pub ref_column: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaDef {
    pub db_name: String,
    #[serde(default)]
    pub scenario: String,
    pub tables: Vec<TableDef>,
    #[serde(default)]
    pub foreign_keys: Vec<ForeignKey>,
}

impl SchemaDef {
    pub fn table(&self, name: &str) -> Option<&TableDef> {
        self.tables.iter().find(|t| t.name.eq_ignore_ascii_case(name))
    }

    pub fn column_count(&self) -> usize {
        self.tables.iter().map(|t| t.columns.len()).sum()
    }

    /// Number of primary-key columns over all tables.
    pub fn primary_key_count(&self) -> usize {
        self.tables.iter().map(|t| t.primary_key.len()).sum()
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        if self.db_name.trim().is_empty() {
            return Err(SchemaError::Invariant("db_name is empty".into()));
        }
        if self.tables.is_empty() {
            return Err(SchemaError::Invariant("schema has no tables".into()));
        }
        let mut names = HashSet::new();
        for t in &self.tables {
            if !names.insert(t.name.to_ascii_lowercase()) {
                return Err(SchemaError::Invariant(format!("duplicate table name {}", t.name)));
            }
            if t.columns.is_empty() {
                return Err(SchemaError::Invariant(format!("table {} has no columns", t.name)));
            }
            let mut cols = HashSet::new();
            for c in &t.columns {
                if c.name.trim().is_empty() {
                    return Err(SchemaError::Invariant(format!("empty column name in {}", t.name)));
                }
                if !cols.insert(c.name.to_ascii_lowercase()) {
                    return Err(SchemaError::Invariant(format!(
                        "duplicate column {}.{}",
                        t.name, c.name
                    )));
                }
                if c.sql_type.trim().is_empty() {
                    return Err(SchemaError::Invariant(format!(
                        "column {}.{} has no type",
                        t.name, c.name
                    )));
                }
                if c.example_values.len() > 2 {
                    return Err(SchemaError::Invariant(format!(
                        "column {}.{} has more than two example values",
                        t.name, c.name
                    )));
                }
            }
            for pk in &t.primary_key {
                if t.column(pk).is_none() {
                    return Err(SchemaError::Invariant(format!(
                        "primary key {}.{pk} is not a column",
                        t.name
                    )));
                }
            }
        }
        for fk in &self.foreign_keys {
            if !self.fk_resolves(fk) {
                return Err(SchemaError::Invariant(format!(
                    "foreign key {}.{} -> {}.{} does not resolve",
                    fk.table, fk.column, fk.ref_table, fk.ref_column
                )));
            }
        }
        Ok(())
    }

    fn fk_resolves(&self, fk: &ForeignKey) -> bool {
        let side = |t: &str, c: &str| self.table(t).and_then(|t| t.column(c)).is_some();
        side(&fk.table, &fk.column) && side(&fk.ref_table, &fk.ref_column)
    }

    /// The JSON exchange form, pretty-printed.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    /// The schema as a model response would carry it: one fenced JSON block.
    pub fn render_response(&self) -> String {
        format!("```json\n{}\n```", self.to_json())
    }

    /// Table indices in creation order: referenced tables before referencing
    /// ones, ties and cycle members in declaration order.
    pub fn creation_order(&self) -> Vec<usize> {
        let index: HashMap<String, usize> = self
            .tables
            .iter()
            .enumerate()
            .map(|(i, t)| (t.name.to_ascii_lowercase(), i))
            .collect();
        let n = self.tables.len();
        let mut deps: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for fk in &self.foreign_keys {
            let (Some(&child), Some(&parent)) = (
                index.get(&fk.table.to_ascii_lowercase()),
                index.get(&fk.ref_table.to_ascii_lowercase()),
            ) else {
                continue;
            };
            if child != parent {
                deps[child].insert(parent);
            }
        }
        let mut placed = vec![false; n];
        let mut order = Vec::with_capacity(n);
        loop {
            let next = (0..n).find(|&i| !placed[i] && deps[i].iter().all(|&d| placed[d]));
            match next {
                Some(i) => {
                    placed[i] = true;
                    order.push(i);
                }
                None => break,
            }
        }
        order.extend((0..n).filter(|&i| !placed[i]));
        order
    }
}

/// Outcome of [`parse_schema`]: the schema plus salvage warnings.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedSchema {
    pub schema: SchemaDef,
    pub warnings: Vec<String>,
}

#[derive(Deserialize)]
struct RawSchema {
    #[serde(default)]
    db_name: Option<String>,
    #[serde(default)]
    scenario: Option<String>,
    tables: Vec<RawTable>,
    #[serde(default)]
    foreign_keys: Vec<RawForeignKey>,
}

#[derive(Deserialize)]
struct RawTable {
    name: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    columns: Vec<RawColumn>,
    #[serde(default)]
    primary_key: Value,
}

#[derive(Deserialize)]
struct RawColumn {
    name: String,
    #[serde(default, rename = "type", alias = "data_type")]
    sql_type: String,
    #[serde(default)]
    description: String,
    #[serde(default, alias = "example_values")]
    examples: Vec<Value>,
}

#[derive(Deserialize)]
struct RawForeignKey {
    table: String,
    column: String,
    ref_table: String,
    ref_column: String,
}

fn scalar_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

/// Extracts a schema from a model response.
///
/// The first fenced block (or the whole text) that decodes to an object with
/// a `tables` array is used. Dangling foreign keys, unknown primary-key
/// columns and missing types are salvaged with a warning; duplicate table or
/// column names fail the whole schema.
pub fn parse_schema(text: &str) -> Result<ParsedSchema, SchemaError> {
    let mut candidates: Vec<String> = fenced_blocks(text)
        .into_iter()
        .filter(|b| b.lang.is_empty() || b.lang == "json")
        .map(|b| b.body)
        .collect();
    candidates.push(text.trim().to_string());
    // Backtick runs inside JSON strings break fence detection; the outermost
    // braces still delimit the object.
    if let (Some(a), Some(b)) = (text.find('{'), text.rfind('}')) {
        if a < b {
            candidates.push(text[a..=b].to_string());
        }
    }
    let raw = candidates
        .iter()
        .find_map(|c| serde_json::from_str::<RawSchema>(c).ok())
        .ok_or_else(|| SchemaError::Parse("response holds no JSON schema object".into()))?;

    let mut warnings = Vec::new();
    let db_name = raw.db_name.unwrap_or_default().trim().to_string();
    let mut tables = Vec::with_capacity(raw.tables.len());
    for rt in raw.tables {
        let mut columns = Vec::with_capacity(rt.columns.len());
        for rc in rt.columns {
            let mut sql_type = rc.sql_type.trim().to_string();
            if sql_type.is_empty() {
                warnings.push(format!("column {}.{} has no type; using TEXT", rt.name, rc.name));
                sql_type = "TEXT".into();
            }
            let mut example_values: Vec<String> = rc.examples.iter().filter_map(scalar_text).collect();
            example_values.truncate(2);
            columns.push(ColumnDef {
                name: rc.name.trim().to_string(),
                sql_type,
                description: rc.description,
                example_values,
            });
        }
        let pk_raw: Vec<String> = match &rt.primary_key {
            Value::String(s) => vec![s.clone()],
            Value::Array(items) => items.iter().filter_map(scalar_text).collect(),
            _ => Vec::new(),
        };
        let mut primary_key = Vec::new();
        for pk in pk_raw {
            match columns.iter().find(|c| c.name.eq_ignore_ascii_case(pk.trim())) {
                Some(c) => primary_key.push(c.name.clone()),
                None => warnings.push(format!("primary key {}.{pk} dropped: no such column", rt.name)),
            }
        }
        tables.push(TableDef {
            name: rt.name.trim().to_string(),
            description: rt.description,
            columns,
            primary_key,
        });
    }
    let mut schema = SchemaDef {
        db_name,
        scenario: raw.scenario.unwrap_or_default(),
        tables,
        foreign_keys: Vec::new(),
    };
    let mut seen = HashSet::new();
    for fk in raw.foreign_keys {
        let resolved = resolve_fk(&schema, &fk);
        match resolved {
            Some(fk) => {
                if seen.insert(fk.clone()) {
                    schema.foreign_keys.push(fk);
                }
            }
            None => warnings.push(format!(
                "foreign key {}.{} -> {}.{} dropped: endpoint does not exist",
                fk.table, fk.column, fk.ref_table, fk.ref_column
            )),
        }
    }
    schema.validate()?;
    for w in &warnings {
        tracing::warn!("{w}");
    }
    Ok(ParsedSchema { schema, warnings })
}

fn resolve_fk(schema: &SchemaDef, fk: &RawForeignKey) -> Option<ForeignKey> {
    let t = schema.table(fk.table.trim())?;
    let c = t.column(fk.column.trim())?;
    let rt = schema.table(fk.ref_table.trim())?;
    let rc = rt.column(fk.ref_column.trim())?;
    Some(ForeignKey {
        table: t.name.clone(),
        column: c.name.clone(),
        ref_table: rt.name.clone(),
        ref_column: rc.name.clone(),
    })
}

/// SQLite keywords that cannot appear as bare identifiers.
const RESERVED: &[&str] = &[
    "abort", "action", "add", "after", "all", "alter", "always", "analyze", "and", "as", "asc",
    "attach", "autoincrement", "before", "begin", "between", "by", "cascade", "case", "cast",
    "check", "collate", "column", "commit", "conflict", "constraint", "create", "cross",
    "current", "current_date", "current_time", "current_timestamp", "database", "default",
    "deferrable", "deferred", "delete", "desc", "detach", "distinct", "do", "drop", "each",
    "else", "end", "escape", "except", "exclude", "exclusive", "exists", "explain", "fail",
    "filter", "first", "following", "for", "foreign", "from", "full", "generated", "glob",
    "group", "groups", "having", "if", "ignore", "immediate", "in", "index", "indexed",
    "initially", "inner", "insert", "instead", "intersect", "into", "is", "isnull", "join",
    "key", "last", "left", "like", "limit", "match", "materialized", "natural", "no", "not",
    "nothing", "notnull", "null", "nulls", "of", "offset", "on", "or", "order", "others",
    "outer", "over", "partition", "plan", "pragma", "preceding", "primary", "query", "raise",
    "range", "recursive", "references", "regexp", "reindex", "release", "rename", "replace",
    "restrict", "returning", "right", "rollback", "row", "rows", "savepoint", "select", "set",
    "table", "temp", "temporary", "then", "ties", "to", "transaction", "trigger", "unbounded",
    "union", "unique", "update", "using", "vacuum", "values", "view", "virtual", "when",
    "where", "window", "with", "without",
];

/// Quotes an identifier only when it is not a plain word or is reserved.
pub fn quote_ident(name: &str) -> String {
    let plain = name
        .chars()
        .next()
        .is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
    if plain && !RESERVED.contains(&name.to_ascii_lowercase().as_str()) {
        name.to_string()
    } else {
        always_quote(name)
    }
}

pub fn always_quote(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}

/// Controls how [`render_table_ddl`] writes identifiers and constraints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DdlStyle {
    /// Quote every identifier (used for the engine) instead of only where needed.
    pub quote_all: bool,
    /// Emit engine-facing extras: deferred foreign keys and UNIQUE constraints
    /// on referenced columns that are not the sole primary key.
    pub engine: bool,
}

impl DdlStyle {
    pub const PROMPT: DdlStyle = DdlStyle {
        quote_all: false,
        engine: false,
    };
    pub const ENGINE: DdlStyle = DdlStyle {
        quote_all: true,
        engine: true,
    };
}

/// One `CREATE TABLE` statement. `comment` supplies the optional `--` line
/// comment placed after each column definition.
pub fn render_table_ddl(
    schema: &SchemaDef,
    table: &TableDef,
    style: DdlStyle,
    comment: &dyn Fn(&ColumnDef) -> Option<String>,
) -> String {
    let q = |s: &str| {
        if style.quote_all {
            always_quote(s)
        } else {
            quote_ident(s)
        }
    };
    let mut items: Vec<(String, Option<String>)> = table
        .columns
        .iter()
        .map(|c| {
            let note = comment(c).map(|n| n.replace(['\n', '\r'], " "));
            (format!("{} {}", q(&c.name), c.sql_type.trim()), note)
        })
        .collect();
    if !table.primary_key.is_empty() {
        let cols: Vec<String> = table.primary_key.iter().map(|c| q(c)).collect();
        items.push((format!("PRIMARY KEY ({})", cols.join(", ")), None));
    }
    if style.engine {
        let mut unique: BTreeSet<String> = BTreeSet::new();
        for fk in &schema.foreign_keys {
            if fk.ref_table.eq_ignore_ascii_case(&table.name) {
                let sole_pk = table.primary_key.len() == 1
                    && table.primary_key[0].eq_ignore_ascii_case(&fk.ref_column);
                if !sole_pk {
                    unique.insert(fk.ref_column.clone());
                }
            }
        }
        for col in unique {
            items.push((format!("UNIQUE ({})", q(&col)), None));
        }
    }
    for fk in schema
        .foreign_keys
        .iter()
        .filter(|fk| fk.table.eq_ignore_ascii_case(&table.name))
    {
        let mut line = format!(
            "FOREIGN KEY ({}) REFERENCES {} ({})",
            q(&fk.column),
            q(&fk.ref_table),
            q(&fk.ref_column)
        );
        if style.engine {
            line.push_str(" DEFERRABLE INITIALLY DEFERRED");
        }
        items.push((line, None));
    }
    let mut out = format!("CREATE TABLE {} (\n", q(&table.name));
    let last = items.len() - 1;
    for (i, (body, note)) in items.into_iter().enumerate() {
        out.push_str("  ");
        out.push_str(&body);
        if i != last {
            out.push(',');
        }
        if let Some(note) = note {
            out.push_str(" -- ");
            out.push_str(&note);
        }
        out.push('\n');
    }
    out.push_str(");");
    out
}

/// DDL for every table in declaration order, with column descriptions as
/// comments; the schema form shown to the generation models.
pub fn render_prompt_ddl(schema: &SchemaDef) -> String {
    schema
        .tables
        .iter()
        .map(|t| {
            render_table_ddl(schema, t, DdlStyle::PROMPT, &|c| {
                (!c.description.trim().is_empty()).then(|| c.description.trim().to_string())
            })
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn col(name: &str, ty: &str, ex: &[&str]) -> ColumnDef {
        ColumnDef {
            name: name.into(),
            sql_type: ty.into(),
            description: format!("The {name}."),
            example_values: ex.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// schools(id, name, city) <- students(id, name, age, school_id)
    pub fn school_schema() -> SchemaDef {
        SchemaDef {
            db_name: "school_records".into(),
            scenario: "A district tracks students and schools.".into(),
            tables: vec![
                TableDef {
                    name: "schools".into(),
                    description: "Schools in the district.".into(),
                    columns: vec![
                        col("id", "INTEGER", &["1", "2"]),
                        col("name", "TEXT", &["North High", "South High"]),
                        col("city", "TEXT", &["Springfield", "Shelbyville"]),
                    ],
                    primary_key: vec!["id".into()],
                },
                TableDef {
                    name: "students".into(),
                    description: "Enrolled students.".into(),
                    columns: vec![
                        col("id", "INTEGER", &["10", "11"]),
                        col("name", "TEXT", &["Ann", "Bob"]),
                        col("age", "INTEGER", &["17", "19"]),
                        col("school_id", "INTEGER", &["1", "2"]),
                    ],
                    primary_key: vec!["id".into()],
                },
            ],
            foreign_keys: vec![ForeignKey {
                table: "students".into(),
                column: "school_id".into(),
                ref_table: "schools".into(),
                ref_column: "id".into(),
            }],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn well_formed_response_parses() {
        let schema = school_schema();
        let text = format!("Scenario first.\n{}\nThanks!", schema.render_response());
        let parsed = parse_schema(&text).unwrap();
        assert_eq!(parsed.schema.tables.len(), 2);
        assert_eq!(parsed.schema.foreign_keys.len(), 1);
        assert!(parsed.warnings.is_empty());
    }

    #[test]
    fn dangling_fk_dropped_with_warning() {
        let mut schema = school_schema();
        schema.foreign_keys.push(ForeignKey {
            table: "students".into(),
            column: "id".into(),
            ref_table: "teachers".into(),
            ref_column: "id".into(),
        });
        let json = serde_json::to_string(&schema).unwrap();
        let parsed = parse_schema(&format!("```json\n{json}\n```")).unwrap();
        assert_eq!(parsed.schema.foreign_keys.len(), 1);
        assert_eq!(parsed.warnings.len(), 1);
        assert!(parsed.warnings[0].contains("teachers"));
    }

    #[test]
    fn free_text_is_parse_error() {
        assert!(matches!(
            parse_schema("I could not design a database for this table."),
            Err(SchemaError::Parse(_))
        ));
    }

    #[test]
    fn duplicate_table_is_invariant_error() {
        let mut schema = school_schema();
        let mut dup = schema.tables[0].clone();
        dup.name = "SCHOOLS".into();
        schema.tables.push(dup);
        let json = serde_json::to_string(&schema).unwrap();
        assert!(matches!(parse_schema(&json), Err(SchemaError::Invariant(_))));
    }

    #[test]
    fn lenient_fields() {
        let text = r#"```json
{"db_name": "x", "scenario": "s", "tables": [
  {"name": "t", "columns": [{"name": "a", "data_type": "INT", "examples": [1, 2.5, 3]},
                            {"name": "b", "examples": ["u"]}],
   "primary_key": "A"}]}
```"#;
        let p = parse_schema(text).unwrap();
        let t = &p.schema.tables[0];
        assert_eq!(t.columns[0].example_values, vec!["1", "2.5"]);
        assert_eq!(t.columns[1].sql_type, "TEXT");
        assert_eq!(t.primary_key, vec!["a"]);
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn creation_order_respects_fks_and_cycles() {
        let mut s = school_schema();
        s.tables.reverse();
        let order: Vec<&str> = s.creation_order().iter().map(|&i| s.tables[i].name.as_str()).collect();
        assert_eq!(order, vec!["schools", "students"]);
        s.foreign_keys.push(ForeignKey {
            table: "schools".into(),
            column: "id".into(),
            ref_table: "students".into(),
            ref_column: "id".into(),
        });
        assert_eq!(s.creation_order(), vec![0, 1]);
    }

    #[test]
    fn ddl_shape() {
        let s = school_schema();
        let ddl = render_table_ddl(&s, &s.tables[1], DdlStyle::PROMPT, &|_| None);
        assert_eq!(
            ddl,
            "CREATE TABLE students (\n  id INTEGER,\n  name TEXT,\n  age INTEGER,\n  school_id INTEGER,\n  PRIMARY KEY (id),\n  FOREIGN KEY (school_id) REFERENCES schools (id)\n);"
        );
        assert_eq!(quote_ident("order"), "\"order\"");
        assert_eq!(quote_ident("Max Temp"), "\"Max Temp\"");
    }

    fn ident() -> impl Strategy<Value = String> {
        "[a-z][a-z0-9_]{0,8}"
    }

    fn arb_schema() -> impl Strategy<Value = SchemaDef> {
        let column = (ident(), prop::sample::select(vec!["INTEGER", "TEXT", "REAL"]), "[ -~]{0,20}", prop::collection::vec("[ -~]{0,6}", 0..=2))
            .prop_map(|(name, ty, description, ex)| ColumnDef {
                name,
                sql_type: ty.into(),
                description,
                example_values: ex,
            });
        let table = (ident(), "[ -~]{0,20}", prop::collection::vec(column, 1..5)).prop_map(
            |(name, description, mut columns)| {
                let mut seen = HashSet::new();
                columns.retain(|c| seen.insert(c.name.clone()));
                let primary_key = vec![columns[0].name.clone()];
                TableDef {
                    name,
                    description,
                    columns,
                    primary_key,
                }
            },
        );
        (ident(), "[ -~]{0,30}", prop::collection::vec(table, 1..5), any::<u64>()).prop_map(
            |(db_name, scenario, mut tables, salt)| {
                let mut seen = HashSet::new();
                tables.retain(|t| seen.insert(t.name.clone()));
                let mut foreign_keys = Vec::new();
                if tables.len() > 1 {
                    let child = (salt as usize) % tables.len();
                    let parent = (child + 1) % tables.len();
                    foreign_keys.push(ForeignKey {
                        table: tables[child].name.clone(),
                        column: tables[child].columns[0].name.clone(),
                        ref_table: tables[parent].name.clone(),
                        ref_column: tables[parent].columns[0].name.clone(),
                    });
                }
                SchemaDef {
                    db_name,
                    scenario,
                    tables,
                    foreign_keys,
                }
            },
        )
    }

    proptest! {
        #[test]
        fn parse_inverts_render(schema in arb_schema()) {
            prop_assume!(schema.validate().is_ok());
            let parsed = parse_schema(&schema.render_response()).unwrap();
            prop_assert_eq!(parsed.schema, schema);
        }
    }
}
