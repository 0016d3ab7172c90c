//! Database synthesis prompts, the table-count sampler and the enhancement pass.

use std::collections::HashSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{parse_schema, ForeignKey, SchemaDef};
use crate::catalog::Catalog;
use crate::llm::Gateway;
use crate::text::fill_template;

/// Rows of a seed table shown to the schema generator.
const PROMPT_ROWS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisParams {
    pub mean: f64,
    pub stddev: f64,
    pub k_min: usize,
    pub k_max: usize,
    pub enhance_rounds: usize,
    /// Sampling temperature of the generation and enhancement requests.
    pub temperature: f64,
}

impl Default for SynthesisParams {
    fn default() -> Self {
        Self {
            mean: 10.0,
            stddev: 4.0,
            k_min: 2,
            k_max: 20,
            enhance_rounds: 1,
            temperature: 0.8,
        }
    }
}

impl SynthesisParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.stddev > 0.0) || !self.mean.is_finite() {
            return Err("table-count distribution needs a finite mean and positive stddev".into());
        }
        if self.k_min == 0 || self.k_min > self.k_max {
            return Err(format!("invalid table-count clamp [{}, {}]", self.k_min, self.k_max));
        }
        Ok(())
    }
}

/// Rounds and clamps one raw normal draw.
pub fn table_count_from_draw(draw: f64, params: &SynthesisParams) -> usize {
    let rounded = draw.round();
    if rounded <= params.k_min as f64 {
        params.k_min
    } else if rounded >= params.k_max as f64 {
        params.k_max
    } else {
        rounded as usize
    }
}

/// One raw `N(mean, stddev²)` draw, before rounding and clamping.
pub fn table_count_draw<R: Rng + ?Sized>(rng: &mut R, params: &SynthesisParams) -> f64 {
    Normal::new(params.mean, params.stddev).expect("validated parameters").sample(rng)
}

/// Draws `K ~ N(mean, stddev²)`, rounded and clamped to `[k_min, k_max]`.
pub fn sample_table_count<R: Rng + ?Sized>(rng: &mut R, params: &SynthesisParams) -> usize {
    table_count_from_draw(table_count_draw(rng, params), params)
}

/// Pipe-delimited rendering of a table, at most `max_rows` rows.
pub fn render_web_table(headers: &[String], rows: &[Vec<String>], max_rows: usize) -> String {
    let clean = |s: &str| s.replace(['\n', '\r'], " ").replace('|', "/");
    let mut out = String::new();
    out.push_str("| ");
    out.push_str(&headers.iter().map(|h| clean(h)).collect::<Vec<_>>().join(" | "));
    out.push_str(" |\n|");
    out.push_str(&" --- |".repeat(headers.len()));
    for row in rows.iter().take(max_rows) {
        out.push_str("\n| ");
        out.push_str(&row.iter().map(|v| clean(v)).collect::<Vec<_>>().join(" | "));
        out.push_str(" |");
    }
    out
}

/// The three-part generation prompt: instruction with the table count, the
/// two bundled demonstrations, and the seed table.
pub fn build_generation_prompt(
    catalog: &Catalog,
    headers: &[String],
    rows: &[Vec<String>],
    table_count: usize,
) -> String {
    let demonstrations = catalog
        .demos
        .iter()
        .enumerate()
        .map(|(i, demo)| {
            format!(
                "Demonstration {}:\nWeb Table:\n{}\nDatabase:\n{}",
                i + 1,
                render_web_table(&demo.web_table.headers, &demo.web_table.rows, PROMPT_ROWS),
                demo.database.render_response()
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n");
    fill_template(
        &catalog.prompts.schema_generation,
        &[
            ("table_count", &table_count.to_string()),
            ("demonstrations", &demonstrations),
            ("web_table", &render_web_table(headers, rows, PROMPT_ROWS)),
        ],
    )
}

pub fn build_enhancement_prompt(catalog: &Catalog, schema: &SchemaDef) -> String {
    fill_template(
        &catalog.prompts.schema_enhancement,
        &[("database", &schema.render_response())],
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnhanceOutcome {
    pub schema: SchemaDef,
    /// Rounds whose result replaced the schema.
    pub accepted_rounds: usize,
    /// Why the last rejected round was rejected.
    pub rejection: Option<String>,
}

/// Checks that `after` keeps every table and column of `before` and every
/// foreign key, and that no table lost columns.
fn preserves(before: &SchemaDef, after: &SchemaDef) -> Result<(), String> {
    for t in &before.tables {
        let Some(nt) = after.table(&t.name) else {
            return Err(format!("table {} was dropped", t.name));
        };
        for c in &t.columns {
            if nt.column(&c.name).is_none() {
                return Err(format!("column {}.{} was dropped", t.name, c.name));
            }
        }
        if nt.columns.len() < t.columns.len() {
            return Err(format!("table {} shrank", t.name));
        }
    }
    let key = |fk: &ForeignKey| {
        (
            fk.table.to_ascii_lowercase(),
            fk.column.to_ascii_lowercase(),
            fk.ref_table.to_ascii_lowercase(),
            fk.ref_column.to_ascii_lowercase(),
        )
    };
    let after_fks: HashSet<_> = after.foreign_keys.iter().map(key).collect();
    if let Some(fk) = before.foreign_keys.iter().find(|fk| !after_fks.contains(&key(fk))) {
        return Err(format!(
            "foreign key {}.{} -> {}.{} was dropped",
            fk.table, fk.column, fk.ref_table, fk.ref_column
        ));
    }
    Ok(())
}

/// Runs `rounds` enhancement passes. A pass whose response fails to parse,
/// fails transport, or drops anything from the input is discarded and the
/// schema from before that pass is kept.
pub fn enhance(
    schema: &SchemaDef,
    gateway: &Gateway,
    catalog: &Catalog,
    rounds: usize,
    temperature: f64,
) -> EnhanceOutcome {
    let mut current = schema.clone();
    let mut accepted_rounds = 0;
    let mut rejection = None;
    for round in 0..rounds {
        let request = gateway.request(build_enhancement_prompt(catalog, &current), temperature, 1);
        let attempt = gateway
            .complete(&request)
            .map_err(|e| e.to_string())
            .and_then(|resp| {
                resp.texts
                    .into_iter()
                    .next()
                    .ok_or_else(|| "empty response".to_string())
            })
            .and_then(|text| parse_schema(&text).map_err(|e| e.to_string()))
            .and_then(|parsed| {
                let mut next = parsed.schema;
                next.db_name = current.db_name.clone();
                if next.scenario.trim().is_empty() {
                    next.scenario = current.scenario.clone();
                }
                preserves(&current, &next).map(|_| next)
            });
        match attempt {
            Ok(next) => {
                current = next;
                accepted_rounds += 1;
            }
            Err(reason) => {
                tracing::warn!("enhancement round {} of {} rejected: {reason}", round + 1, schema.db_name);
                rejection = Some(reason);
            }
        }
    }
    EnhanceOutcome {
        schema: current,
        accepted_rounds,
        rejection,
    }
}
