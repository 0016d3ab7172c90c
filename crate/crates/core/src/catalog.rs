//! Bundled, editable data: prompt templates, schema demonstrations,
//! complexity levels, language styles, the SQLite function catalog, judge
//! criteria and the English word list used by the language filter.
//!
//! Everything ships compiled in; [`Catalog::from_dir`] loads the same file
//! layout from disk so the texts can be edited without rebuilding.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::query_synth::ComplexityLevel;
use crate::question_synth::LanguageStyle;
use crate::schema::SchemaDef;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("catalog file missing: {0}")]
    Missing(PathBuf),
    #[error("catalog file {path} is malformed: {message}")]
    Malformed { path: String, message: String },
    #[error("catalog is inconsistent: {0}")]
    Invalid(String),
}

/// A seed table as it appears inside a demonstration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// One `<web table, business scenario, database>` demonstration triplet.
/// The scenario is carried inside `database`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaDemo {
    pub web_table: DemoTable,
    pub database: SchemaDef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityInfo {
    pub level: ComplexityLevel,
    pub criteria: String,
    pub example: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleInfo {
    pub style: LanguageStyle,
    pub description: String,
    pub example: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge_example: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionEntry {
    pub name: String,
    pub description: String,
}

/// SQL functions offered to the query generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FunctionCatalog {
    pub entries: Vec<FunctionEntry>,
}

impl FunctionCatalog {
    pub fn new(entries: Vec<FunctionEntry>) -> Result<Self, CatalogError> {
        let mut seen = HashSet::new();
        for entry in &entries {
            if !seen.insert(entry.name.to_ascii_lowercase()) {
                return Err(CatalogError::Invalid(format!(
                    "duplicate function name {}",
                    entry.name
                )));
            }
        }
        Ok(Self { entries })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeCriterion {
    pub name: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeAspect {
    pub aspect: String,
    pub criteria: Vec<JudgeCriterion>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub schema_generation: String,
    pub schema_enhancement: String,
    pub sql_generation: String,
    pub question_generation: String,
    pub cot_generation: String,
    pub semantic_judge: String,
    pub quality_judge: String,
    pub correction_audit: String,
}

#[derive(Debug, Clone)]
pub struct Catalog {
    pub prompts: PromptTemplates,
    pub demos: Vec<SchemaDemo>,
    pub complexity_levels: Vec<ComplexityInfo>,
    pub styles: Vec<StyleInfo>,
    pub functions: FunctionCatalog,
    pub judge_aspects: Vec<JudgeAspect>,
    pub english_words: HashSet<String>,
}

const FILES: [&str; 14] = [
    "prompts/schema_generation.txt",
    "prompts/schema_enhancement.txt",
    "prompts/sql_generation.txt",
    "prompts/question_generation.txt",
    "prompts/cot_generation.txt",
    "prompts/semantic_judge.txt",
    "prompts/quality_judge.txt",
    "prompts/correction_audit.txt",
    "schema_demos.json",
    "complexity_levels.json",
    "language_styles.json",
    "sqlite_functions.json",
    "judge_aspects.json",
    "english_words.txt",
];

const BUNDLED: [&str; 14] = [
    include_str!("../data/prompts/schema_generation.txt"),
    include_str!("../data/prompts/schema_enhancement.txt"),
    include_str!("../data/prompts/sql_generation.txt"),
    include_str!("../data/prompts/question_generation.txt"),
    include_str!("../data/prompts/cot_generation.txt"),
    include_str!("../data/prompts/semantic_judge.txt"),
    include_str!("../data/prompts/quality_judge.txt"),
    include_str!("../data/prompts/correction_audit.txt"),
    include_str!("../data/schema_demos.json"),
    include_str!("../data/complexity_levels.json"),
    include_str!("../data/language_styles.json"),
    include_str!("../data/sqlite_functions.json"),
    include_str!("../data/judge_aspects.json"),
    include_str!("../data/english_words.txt"),
];

impl Catalog {
    /// The compiled-in data set.
    pub fn bundled() -> Self {
        let files: Vec<(String, String)> = FILES
            .iter()
            .zip(BUNDLED.iter())
            .map(|(name, body)| (name.to_string(), body.to_string()))
            .collect();
        Self::assemble(files).expect("bundled catalog is valid")
    }

    /// Loads the catalog from a directory with the bundled layout
    /// (`prompts/*.txt`, `*.json`, `english_words.txt`).
    pub fn from_dir(dir: &Path) -> Result<Self, CatalogError> {
        let mut files = Vec::with_capacity(FILES.len());
        for name in FILES {
            let path = dir.join(name);
            let body = std::fs::read_to_string(&path).map_err(|_| CatalogError::Missing(path))?;
            files.push((name.to_string(), body));
        }
        Self::assemble(files)
    }

    /// Writes the bundled files into `dir`, as a starting point for editing.
    pub fn write_bundled(dir: &Path) -> std::io::Result<()> {
        for (name, body) in FILES.iter().zip(BUNDLED.iter()) {
            let path = dir.join(name);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(path, body)?;
        }
        Ok(())
    }

    fn assemble(files: Vec<(String, String)>) -> Result<Self, CatalogError> {
        let mut it = files.into_iter();
        let mut next = || it.next().expect("file list matches FILES");
        let prompts = PromptTemplates {
            schema_generation: next().1,
            schema_enhancement: next().1,
            sql_generation: next().1,
            question_generation: next().1,
            cot_generation: next().1,
            semantic_judge: next().1,
            quality_judge: next().1,
            correction_audit: next().1,
        };
        let demos: Vec<SchemaDemo> = parse_json(next())?;
        let complexity_levels: Vec<ComplexityInfo> = parse_json(next())?;
        let styles: Vec<StyleInfo> = parse_json(next())?;
        let functions = FunctionCatalog::new(parse_json(next())?)?;
        let judge_aspects: Vec<JudgeAspect> = parse_json(next())?;
        let english_words = next()
            .1
            .lines()
            .map(|l| l.trim().to_ascii_lowercase())
            .filter(|l| !l.is_empty())
            .collect();

        if demos.len() != 2 {
            return Err(CatalogError::Invalid(format!(
                "expected 2 schema demonstrations, found {}",
                demos.len()
            )));
        }
        for demo in &demos {
            demo.database
                .validate()
                .map_err(|e| CatalogError::Invalid(format!("demonstration schema: {e}")))?;
        }
        let levels: Vec<_> = complexity_levels.iter().map(|c| c.level).collect();
        if levels != ComplexityLevel::ALL {
            return Err(CatalogError::Invalid(
                "complexity levels must list Simple, Moderate, Complex, Highly Complex in order".into(),
            ));
        }
        let style_list: Vec<_> = styles.iter().map(|s| s.style).collect();
        if style_list != LanguageStyle::ALL {
            return Err(CatalogError::Invalid(
                "language styles must list the nine styles in canonical order".into(),
            ));
        }
        if judge_aspects.len() != 4 || judge_aspects.iter().any(|a| a.criteria.len() != 4) {
            return Err(CatalogError::Invalid(
                "judge catalog must hold four aspects with four criteria each".into(),
            ));
        }
        Ok(Self {
            prompts,
            demos,
            complexity_levels,
            styles,
            functions,
            judge_aspects,
            english_words,
        })
    }

    pub fn complexity(&self, level: ComplexityLevel) -> &ComplexityInfo {
        &self.complexity_levels[level.index()]
    }

    pub fn style(&self, style: LanguageStyle) -> &StyleInfo {
        &self.styles[style.index()]
    }
}

fn parse_json<T: for<'de> Deserialize<'de>>((path, body): (String, String)) -> Result<T, CatalogError> {
    serde_json::from_str(&body).map_err(|e| CatalogError::Malformed {
        path,
        message: e.to_string(),
    })
}
