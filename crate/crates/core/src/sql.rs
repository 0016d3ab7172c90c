//! Parser-backed SQL analysis: value-masked templates, fully masked
//! skeletons, per-query feature counts and corpus statistics.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};
use sqlparser::ast::{
    Expr, Ident, ObjectName, ObjectNamePart, Query, Select, SelectItem, SetExpr, Statement,
    TableFactor, TableWithJoins, Value, ValueWithSpan, Visit, VisitMut, Visitor, VisitorMut,
};
use sqlparser::dialect::SQLiteDialect;
use sqlparser::parser::Parser;
use thiserror::Error;

use crate::schema::SchemaDef;

pub const MASK: &str = "[MASK]";

const AGGREGATES: [&str; 7] = ["COUNT", "SUM", "AVG", "MIN", "MAX", "GROUP_CONCAT", "TOTAL"];

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum SqlError {
    #[error("SQL parse error: {0}")]
    Parse(String),
    #[error("column {0} does not resolve against the schema")]
    ColumnResolution(String),
}

/// Parses exactly one statement in the SQLite dialect.
pub fn parse_one(sql: &str) -> Result<Statement, SqlError> {
    let mut statements =
        Parser::parse_sql(&SQLiteDialect {}, sql).map_err(|e| SqlError::Parse(e.to_string()))?;
    match statements.len() {
        1 => Ok(statements.remove(0)),
        0 => Err(SqlError::Parse("empty input".into())),
        n => Err(SqlError::Parse(format!("expected one statement, found {n}"))),
    }
}

/// True when the single statement is a `SELECT` (or `WITH ... SELECT`,
/// or a set operation over selects).
pub fn is_select_statement(sql: &str) -> bool {
    fn select_body(body: &SetExpr) -> bool {
        match body {
            SetExpr::Select(_) => true,
            SetExpr::Query(q) => select_body(&q.body),
            SetExpr::SetOperation { left, right, .. } => select_body(left) && select_body(right),
            _ => false,
        }
    }
    match parse_one(sql) {
        Ok(Statement::Query(q)) => select_body(&q.body),
        _ => false,
    }
}

struct MaskValues;

impl VisitorMut for MaskValues {
    type Break = ();

    fn pre_visit_value(&mut self, value: &mut ValueWithSpan) -> ControlFlow<()> {
        if !matches!(value.value, Value::Null) {
            value.value = Value::Placeholder(MASK.into());
        }
        ControlFlow::Continue(())
    }
}

/// Sentinel quote style marking function-name identifiers during masking.
const KEEP: char = '\u{1}';

/// Masks every identifier except function names. Function-name idents are
/// tagged on the way into a call and restored on the way out.
#[derive(Default)]
struct MaskIdents {
    saved: Vec<Vec<Option<char>>>,
}

impl VisitorMut for MaskIdents {
    type Break = ();

    fn pre_visit_expr(&mut self, expr: &mut Expr) -> ControlFlow<()> {
        if let Expr::Function(f) = expr {
            let mut styles = Vec::new();
            for part in &mut f.name.0 {
                if let ObjectNamePart::Identifier(ident) = part {
                    styles.push(ident.quote_style.replace(KEEP));
                }
            }
            self.saved.push(styles);
        }
        ControlFlow::Continue(())
    }

    fn post_visit_expr(&mut self, expr: &mut Expr) -> ControlFlow<()> {
        if let Expr::Function(f) = expr {
            let styles = self.saved.pop().unwrap_or_default();
            let idents = f.name.0.iter_mut().filter_map(|p| match p {
                ObjectNamePart::Identifier(i) => Some(i),
                _ => None,
            });
            for (ident, style) in idents.zip(styles) {
                ident.quote_style = style;
            }
        }
        ControlFlow::Continue(())
    }

    fn pre_visit_ident(&mut self, ident: &mut Ident) -> ControlFlow<()> {
        if ident.quote_style != Some(KEEP) {
            *ident = Ident::with_quote('[', "MASK");
        }
        ControlFlow::Continue(())
    }
}

/// The query with every literal (number, string, boolean) replaced by
/// `[MASK]`, rendered canonically on one line.
pub fn template_of(sql: &str) -> Result<String, SqlError> {
    let mut stmt = parse_one(sql)?;
    let _ = VisitMut::visit(&mut stmt, &mut MaskValues);
    Ok(stmt.to_string())
}

/// The query with every table, column, alias and literal replaced by `[MASK]`.
pub fn skeleton_of(sql: &str) -> Result<String, SqlError> {
    let mut stmt = parse_one(sql)?;
    let _ = VisitMut::visit(&mut stmt, &mut MaskValues);
    let _ = VisitMut::visit(&mut stmt, &mut MaskIdents::default());
    Ok(stmt.to_string())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SqlFeatures {
    /// Base-table references, counted per occurrence (a self-join counts 2).
    /// References to CTE names and table-valued functions are not counted.
    pub n_tables: usize,
    /// Explicit `JOIN` operators.
    pub n_joins: usize,
    /// Function-call nodes.
    pub n_functions: usize,
    /// Whitespace-separated tokens of the raw text.
    pub n_tokens: usize,
    pub has_aggregation: bool,
    pub has_set_operator: bool,
    /// Any nested query other than a CTE definition.
    pub has_subquery: bool,
    pub has_window_function: bool,
    pub has_cte: bool,
    /// Uppercased names of the called functions, in call order.
    pub function_names: Vec<String>,
}

fn last_ident(name: &ObjectName) -> String {
    match name.0.last() {
        Some(ObjectNamePart::Identifier(i)) => i.value.clone(),
        Some(other) => other.to_string(),
        None => String::new(),
    }
}

#[derive(Default)]
struct CteNames(HashSet<String>);

impl Visitor for CteNames {
    type Break = ();

    fn pre_visit_query(&mut self, query: &Query) -> ControlFlow<()> {
        if let Some(with) = &query.with {
            for cte in &with.cte_tables {
                self.0.insert(cte.alias.name.value.to_lowercase());
            }
        }
        ControlFlow::Continue(())
    }
}

struct FeatureCounter<'a> {
    ctes: &'a HashSet<String>,
    f: SqlFeatures,
}

fn count_joins(twj: &TableWithJoins) -> usize {
    fn nested(tf: &TableFactor) -> usize {
        match tf {
            TableFactor::NestedJoin { table_with_joins, .. } => count_joins(table_with_joins),
            _ => 0,
        }
    }
    twj.joins.len() + nested(&twj.relation) + twj.joins.iter().map(|j| nested(&j.relation)).sum::<usize>()
}

fn has_set_op(body: &SetExpr) -> bool {
    matches!(body, SetExpr::SetOperation { .. })
}

impl Visitor for FeatureCounter<'_> {
    type Break = ();

    fn pre_visit_query(&mut self, query: &Query) -> ControlFlow<()> {
        if query.with.is_some() {
            self.f.has_cte = true;
        }
        if has_set_op(&query.body) {
            self.f.has_set_operator = true;
        }
        ControlFlow::Continue(())
    }

    fn pre_visit_select(&mut self, select: &Select) -> ControlFlow<()> {
        self.f.n_joins += select.from.iter().map(count_joins).sum::<usize>();
        ControlFlow::Continue(())
    }

    fn pre_visit_table_factor(&mut self, tf: &TableFactor) -> ControlFlow<()> {
        match tf {
            TableFactor::Table { name, args, .. } => {
                let is_cte = name.0.len() == 1 && self.ctes.contains(&last_ident(name).to_lowercase());
                if args.is_none() && !is_cte {
                    self.f.n_tables += 1;
                }
            }
            TableFactor::Derived { .. } => self.f.has_subquery = true,
            _ => {}
        }
        ControlFlow::Continue(())
    }

    fn pre_visit_expr(&mut self, expr: &Expr) -> ControlFlow<()> {
        match expr {
            Expr::Function(func) => {
                let name = last_ident(&func.name).to_uppercase();
                self.f.n_functions += 1;
                if AGGREGATES.contains(&name.as_str()) {
                    self.f.has_aggregation = true;
                }
                if func.over.is_some() {
                    self.f.has_window_function = true;
                }
                self.f.function_names.push(name);
            }
            Expr::Subquery(_) | Expr::InSubquery { .. } | Expr::Exists { .. } => {
                self.f.has_subquery = true;
            }
            _ => {}
        }
        ControlFlow::Continue(())
    }
}

/// Feature counts for one query.
pub fn features_of(sql: &str) -> Result<SqlFeatures, SqlError> {
    let stmt = parse_one(sql)?;
    let mut ctes = CteNames::default();
    let _ = stmt.visit(&mut ctes);
    let mut counter = FeatureCounter {
        ctes: &ctes.0,
        f: SqlFeatures::default(),
    };
    let _ = stmt.visit(&mut counter);
    let mut f = counter.f;
    f.n_tokens = sql.split_whitespace().count();
    Ok(f)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_queries: usize,
    /// Inputs that failed to parse and were left out.
    pub n_skipped: usize,
    pub avg_tables: f64,
    pub avg_joins: f64,
    pub avg_functions: f64,
    pub avg_tokens: f64,
    pub n_aggregation: usize,
    pub n_set_operator: usize,
    pub n_subquery: usize,
    pub n_window_function: usize,
    pub n_cte: usize,
    pub n_unique_skeletons: usize,
    pub n_unique_functions: usize,
}

pub fn corpus_stats<S: AsRef<str>>(queries: &[S]) -> CorpusStats {
    let mut stats = CorpusStats::default();
    let mut skeletons = HashSet::new();
    let mut functions = HashSet::new();
    let (mut tables, mut joins, mut funcs, mut tokens) = (0usize, 0usize, 0usize, 0usize);
    for q in queries {
        let q = q.as_ref();
        let (Ok(f), Ok(skeleton)) = (features_of(q), skeleton_of(q)) else {
            stats.n_skipped += 1;
            continue;
        };
        stats.n_queries += 1;
        tables += f.n_tables;
        joins += f.n_joins;
        funcs += f.n_functions;
        tokens += f.n_tokens;
        stats.n_aggregation += f.has_aggregation as usize;
        stats.n_set_operator += f.has_set_operator as usize;
        stats.n_subquery += f.has_subquery as usize;
        stats.n_window_function += f.has_window_function as usize;
        stats.n_cte += f.has_cte as usize;
        skeletons.insert(skeleton);
        functions.extend(f.function_names);
    }
    if stats.n_queries > 0 {
        let n = stats.n_queries as f64;
        stats.avg_tables = tables as f64 / n;
        stats.avg_joins = joins as f64 / n;
        stats.avg_functions = funcs as f64 / n;
        stats.avg_tokens = tokens as f64 / n;
    }
    stats.n_unique_skeletons = skeletons.len();
    stats.n_unique_functions = functions.len();
    stats
}

impl CorpusStats {
    /// Aligned two-column text table.
    pub fn to_text_table(&self) -> String {
        let rows: Vec<(&str, String)> = vec![
            ("# Queries", self.n_queries.to_string()),
            ("# Skipped (parse errors)", self.n_skipped.to_string()),
            ("# Tables per SQL*", format!("{:.2}", self.avg_tables)),
            ("# Joins per SQL", format!("{:.2}", self.avg_joins)),
            ("# Functions per SQL", format!("{:.2}", self.avg_functions)),
            ("# Tokens per SQL", format!("{:.2}", self.avg_tokens)),
            ("Aggregation functions", self.n_aggregation.to_string()),
            ("Set operators", self.n_set_operator.to_string()),
            ("Subqueries", self.n_subquery.to_string()),
            ("Window functions", self.n_window_function.to_string()),
            ("CTEs", self.n_cte.to_string()),
            ("# Unique skeletons", self.n_unique_skeletons.to_string()),
            ("# Unique functions", self.n_unique_functions.to_string()),
        ];
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            out.push_str(&format!("{k:<width$}  {v:>10}\n"));
        }
        out.push_str("* table references are counted per occurrence; CTE names are not tables\n");
        out
    }
}

#[derive(Default)]
struct Scope {
    /// alias or table name (lowercase) -> base table name as written
    tables: HashMap<String, String>,
    /// names that refer to non-base relations or output columns
    opaque: HashSet<String>,
    base: Vec<String>,
}

impl Visitor for Scope {
    type Break = ();

    fn pre_visit_query(&mut self, query: &Query) -> ControlFlow<()> {
        if let Some(with) = &query.with {
            for cte in &with.cte_tables {
                self.opaque.insert(cte.alias.name.value.to_lowercase());
                for c in &cte.alias.columns {
                    self.opaque.insert(c.name.value.to_lowercase());
                }
            }
        }
        ControlFlow::Continue(())
    }

    fn pre_visit_select(&mut self, select: &Select) -> ControlFlow<()> {
        for item in &select.projection {
            if let SelectItem::ExprWithAlias { alias, .. } = item {
                self.opaque.insert(alias.value.to_lowercase());
            }
        }
        ControlFlow::Continue(())
    }

    fn pre_visit_table_factor(&mut self, tf: &TableFactor) -> ControlFlow<()> {
        match tf {
            TableFactor::Table { name, alias, args: None, .. } => {
                let table = last_ident(name);
                if !self.opaque.contains(&table.to_lowercase()) {
                    self.base.push(table.clone());
                    self.tables.insert(table.to_lowercase(), table.clone());
                    if let Some(a) = alias {
                        self.tables.insert(a.name.value.to_lowercase(), table);
                    }
                } else if let Some(a) = alias {
                    self.opaque.insert(a.name.value.to_lowercase());
                }
            }
            TableFactor::Derived { alias: Some(a), .. }
            | TableFactor::Table { alias: Some(a), .. }
            | TableFactor::Function { alias: Some(a), .. }
            | TableFactor::TableFunction { alias: Some(a), .. } => {
                self.opaque.insert(a.name.value.to_lowercase());
                for c in &a.columns {
                    self.opaque.insert(c.name.value.to_lowercase());
                }
            }
            _ => {}
        }
        ControlFlow::Continue(())
    }
}

struct ColumnRefs<'a> {
    schema: &'a SchemaDef,
    scope: &'a Scope,
    found: Vec<(String, String)>,
    error: Option<String>,
}

impl ColumnRefs<'_> {
    fn add(&mut self, table: &str, column: &str) {
        let key = (table.to_string(), column.to_string());
        if !self.found.contains(&key) {
            self.found.push(key);
        }
    }

    fn resolve_bare(&mut self, column: &str) {
        let lc = column.to_lowercase();
        let hit = self.scope.base.iter().find_map(|t| {
            let table = self.schema.table(t)?;
            table.column(column).map(|c| (table.name.clone(), c.name.clone()))
        });
        match hit {
            Some((t, c)) => self.add(&t, &c),
            None if self.scope.opaque.contains(&lc) => {}
            None => {
                self.error.get_or_insert_with(|| column.to_string());
            }
        }
    }

    fn resolve_qualified(&mut self, qualifier: &str, column: &str) {
        let Some(base) = self.scope.tables.get(&qualifier.to_lowercase()) else {
            if !self.scope.opaque.contains(&qualifier.to_lowercase()) {
                self.error.get_or_insert_with(|| format!("{qualifier}.{column}"));
            }
            return;
        };
        match self.schema.table(base).and_then(|t| t.column(column).map(|c| (t, c))) {
            Some((t, c)) => {
                let (t, c) = (t.name.clone(), c.name.clone());
                self.add(&t, &c)
            }
            None => {
                self.error.get_or_insert_with(|| format!("{qualifier}.{column}"));
            }
        }
    }
}

impl Visitor for ColumnRefs<'_> {
    type Break = ();

    fn pre_visit_expr(&mut self, expr: &Expr) -> ControlFlow<()> {
        match expr {
            Expr::Identifier(ident) => self.resolve_bare(&ident.value),
            Expr::CompoundIdentifier(parts) if parts.len() >= 2 => {
                let n = parts.len();
                self.resolve_qualified(&parts[n - 2].value, &parts[n - 1].value);
            }
            _ => {}
        }
        ControlFlow::Continue(())
    }
}

/// `(table, column)` pairs of schema columns the query references, in order
/// of first appearance. Output aliases, CTE and derived-table columns are
/// ignored; any other identifier that does not resolve is an error.
pub fn referenced_columns(sql: &str, schema: &SchemaDef) -> Result<Vec<(String, String)>, SqlError> {
    let stmt = parse_one(sql)?;
    let mut scope = Scope::default();
    let _ = stmt.visit(&mut scope);
    let mut refs = ColumnRefs {
        schema,
        scope: &scope,
        found: Vec::new(),
        error: None,
    };
    let _ = stmt.visit(&mut refs);
    match refs.error {
        Some(name) => Err(SqlError::ColumnResolution(name)),
        None => Ok(refs.found),
    }
}

/// Distinct base tables referenced by the query.
pub fn referenced_tables(sql: &str) -> Result<BTreeSet<String>, SqlError> {
    let stmt = parse_one(sql)?;
    let mut scope = Scope::default();
    let _ = stmt.visit(&mut scope);
    Ok(scope.base.into_iter().collect())
}
