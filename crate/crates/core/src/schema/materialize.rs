//! Writing a schema into a SQLite file with its example rows, and reading
//! the structure back through the engine's own catalog.

use std::path::{Path, PathBuf};

use rusqlite::types::Value as SqlValue;
use rusqlite::{params_from_iter, Connection, OpenFlags};
use thiserror::Error;

use super::{always_quote, render_table_ddl, ColumnDef, DdlStyle, ForeignKey, SchemaDef, TableDef};

#[derive(Debug, Error)]
pub enum MaterializeError {
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("DDL for table {table} rejected: {message}")]
    Ddl { table: String, message: String },
    #[error("example row for table {table} rejected: {message}")]
    Insert { table: String, message: String },
    #[error("database error: {0}")]
    Engine(#[from] rusqlite::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MaterializeReport {
    pub rows_inserted: usize,
    /// Example values stored as text in a numeric-affinity column.
    pub affinity_warnings: Vec<String>,
    /// Example rows deleted because they broke a foreign key.
    pub fk_rows_removed: usize,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Affinity {
    Integer,
    Text,
    Blob,
    Real,
    Numeric,
}

/// SQLite's declared-type affinity rules.
fn affinity(decl: &str) -> Affinity {
    let t = decl.to_ascii_uppercase();
    if t.contains("INT") {
        Affinity::Integer
    } else if t.contains("CHAR") || t.contains("CLOB") || t.contains("TEXT") {
        Affinity::Text
    } else if t.contains("BLOB") || t.trim().is_empty() {
        Affinity::Blob
    } else if t.contains("REAL") || t.contains("FLOA") || t.contains("DOUB") {
        Affinity::Real
    } else {
        Affinity::Numeric
    }
}

fn bind_value(column: &ColumnDef, raw: &str, table: &TableDef, warnings: &mut Vec<String>) -> SqlValue {
    match affinity(&column.sql_type) {
        Affinity::Text | Affinity::Blob => SqlValue::Text(raw.to_string()),
        _ => {
            let trimmed = raw.trim();
            if let Ok(i) = trimmed.parse::<i64>() {
                SqlValue::Integer(i)
            } else if let Ok(f) = trimmed.parse::<f64>().map_err(|_| ()).and_then(|f| {
                if f.is_finite() {
                    Ok(f)
                } else {
                    Err(())
                }
            }) {
                SqlValue::Real(f)
            } else {
                let note = format!(
                    "{}.{}: value {raw:?} stored as text under declared type {}",
                    table.name, column.name, column.sql_type
                );
                tracing::debug!("{note}");
                warnings.push(note);
                SqlValue::Text(raw.to_string())
            }
        }
    }
}

fn staging_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}

/// Creates the database file at `path` (replacing any previous file): one
/// `CREATE TABLE` per table in foreign-key dependency order, then the
/// example rows. Rows that end up violating a foreign key are deleted so the
/// engine's integrity check passes. The file is built under a staging name
/// and renamed into place on success.
pub fn materialize(schema: &SchemaDef, path: &Path) -> Result<MaterializeReport, MaterializeError> {
    schema
        .validate()
        .map_err(|e| MaterializeError::Schema(e.to_string()))?;
    let staging = staging_path(path);
    if staging.exists() {
        std::fs::remove_file(&staging)?;
    }
    let result = build(schema, &staging);
    match result {
        Ok(report) => {
            std::fs::rename(&staging, path)?;
            Ok(report)
        }
        Err(e) => {
            let _ = std::fs::remove_file(&staging);
            Err(e)
        }
    }
}

fn build(schema: &SchemaDef, path: &Path) -> Result<MaterializeReport, MaterializeError> {
    let mut conn = Connection::open(path)?;
    conn.execute_batch("PRAGMA foreign_keys = OFF; PRAGMA journal_mode = DELETE;")?;
    let mut report = MaterializeReport::default();
    let order = schema.creation_order();
    let tx = conn.transaction()?;
    for &i in &order {
        let table = &schema.tables[i];
        let ddl = render_table_ddl(schema, table, DdlStyle::ENGINE, &|_| None);
        tx.execute_batch(&ddl).map_err(|e| MaterializeError::Ddl {
            table: table.name.clone(),
            message: e.to_string(),
        })?;
    }
    for &i in &order {
        let table = &schema.tables[i];
        let n_rows = table.columns.iter().map(|c| c.example_values.len()).max().unwrap_or(0);
        if n_rows == 0 {
            continue;
        }
        let cols: Vec<String> = table.columns.iter().map(|c| always_quote(&c.name)).collect();
        let marks = vec!["?"; cols.len()].join(", ");
        let sql = format!(
            "INSERT INTO {} ({}) VALUES ({marks})",
            always_quote(&table.name),
            cols.join(", ")
        );
        for row in 0..n_rows {
            let values: Vec<SqlValue> = table
                .columns
                .iter()
                .map(|c| match c.example_values.get(row) {
                    Some(v) => bind_value(c, v, table, &mut report.affinity_warnings),
                    None => SqlValue::Null,
                })
                .collect();
            tx.execute(&sql, params_from_iter(values))
                .map_err(|e| MaterializeError::Insert {
                    table: table.name.clone(),
                    message: e.to_string(),
                })?;
            report.rows_inserted += 1;
        }
    }
    tx.commit()?;
    report.fk_rows_removed = prune_fk_violations(&conn)?;
    report.rows_inserted -= report.fk_rows_removed;
    conn.execute_batch("VACUUM;")?;
    Ok(report)
}

/// Deletes rows reported by `PRAGMA foreign_key_check` until none remain.
/// Deleting a parent row can orphan a child, hence the loop.
fn prune_fk_violations(conn: &Connection) -> Result<usize, MaterializeError> {
    let mut removed = 0;
    loop {
        let violations: Vec<(String, i64)> = {
            let mut stmt = conn.prepare("PRAGMA foreign_key_check")?;
            let rows = stmt.query_map([], |r| Ok((r.get::<_, String>(0)?, r.get::<_, Option<i64>>(1)?)))?;
            rows.filter_map(|r| match r {
                Ok((t, Some(id))) => Some(Ok((t, id))),
                Ok((_, None)) => None,
                Err(e) => Some(Err(e)),
            })
            .collect::<Result<_, _>>()?
        };
        if violations.is_empty() {
            return Ok(removed);
        }
        for (table, rowid) in violations {
            tracing::info!("removing example row {rowid} of {table}: foreign key violation");
            removed += conn.execute(
                &format!("DELETE FROM {} WHERE rowid = ?1", always_quote(&table)),
                [rowid],
            )?;
        }
    }
}

/// Reads table, column, primary-key and foreign-key structure back from a
/// database file. Descriptions and example values are not stored by the
/// engine and come back empty; `db_name` is the file stem.
pub fn introspect(path: &Path) -> Result<SchemaDef, MaterializeError> {
    let conn = Connection::open_with_flags(path, OpenFlags::SQLITE_OPEN_READ_ONLY)?;
    let names: Vec<String> = {
        let mut stmt = conn.prepare(
            "SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite_%' ORDER BY rowid",
        )?;
        let rows = stmt.query_map([], |r| r.get(0))?;
        rows.collect::<Result<_, _>>()?
    };
    let mut tables = Vec::new();
    let mut foreign_keys = Vec::new();
    for name in names {
        let mut stmt = conn.prepare(&format!("PRAGMA table_info({})", always_quote(&name)))?;
        let mut cols: Vec<(String, String, i64)> = stmt
            .query_map([], |r| Ok((r.get(1)?, r.get(2)?, r.get(5)?)))?
            .collect::<Result<_, _>>()?;
        let mut pk: Vec<(i64, String)> = cols
            .iter()
            .filter(|c| c.2 > 0)
            .map(|c| (c.2, c.0.clone()))
            .collect();
        pk.sort();
        let columns = cols
            .drain(..)
            .map(|(n, t, _)| ColumnDef {
                name: n,
                sql_type: t,
                description: String::new(),
                example_values: Vec::new(),
            })
            .collect();
        let mut stmt = conn.prepare(&format!("PRAGMA foreign_key_list({})", always_quote(&name)))?;
        let fks: Vec<(String, String, String)> = stmt
            .query_map([], |r| Ok((r.get(2)?, r.get(3)?, r.get(4)?)))?
            .collect::<Result<_, _>>()?;
        for (ref_table, from, to) in fks {
            foreign_keys.push(ForeignKey {
                table: name.clone(),
                column: from,
                ref_table,
                ref_column: to,
            });
        }
        tables.push(TableDef {
            name,
            description: String::new(),
            columns,
            primary_key: pk.into_iter().map(|(_, c)| c).collect(),
        });
    }
    let db_name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(SchemaDef {
        db_name,
        scenario: String::new(),
        tables,
        foreign_keys,
    })
}
