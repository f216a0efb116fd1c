//! Per-language build and run recipes, read from an INI-style file.

use std::collections::BTreeMap;
use std::path::Path;

use crate::model::Language;

const DEFAULT_RECIPES: &str = include_str!("../../config/sandbox_langs.conf");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Recipe {
    pub source: String,
    pub compile: Option<Vec<String>>,
    pub run: Vec<String>,
    pub version: Vec<String>,
    pub fail_markers: Vec<String>,
    pub error_markers: Vec<String>,
}

impl Recipe {
    pub fn is_compiled(&self) -> bool {
        self.compile.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RecipeError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("[{section}] is missing `{key}`")]
    MissingKey { section: String, key: &'static str },
    #[error("cannot read recipes: {0}")]
    Io(String),
}

fn words(value: &str) -> Vec<String> {
    value.split_whitespace().map(str::to_string).collect()
}

fn markers(value: &str) -> Vec<String> {
    value
        .split('|')
        .map(str::trim)
        .filter(|m| !m.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn parse(text: &str) -> Result<BTreeMap<Language, Recipe>, RecipeError> {
    let mut raw: Vec<(Language, BTreeMap<String, String>)> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let language = name.trim().parse::<Language>().map_err(|e| RecipeError::Syntax {
                line: line_no,
                reason: e.to_string(),
            })?;
            if raw.iter().any(|(l, _)| *l == language) {
                return Err(RecipeError::Syntax {
                    line: line_no,
                    reason: format!("duplicate section [{language}]"),
                });
            }
            raw.push((language, BTreeMap::new()));
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(RecipeError::Syntax {
                line: line_no,
                reason: "expected `key = value`".into(),
            });
        };
        let Some((_, section)) = raw.last_mut() else {
            return Err(RecipeError::Syntax {
                line: line_no,
                reason: "key outside of a section".into(),
            });
        };
        section.insert(key.trim().to_string(), value.trim().to_string());
    }

    let mut out = BTreeMap::new();
    for (language, keys) in raw {
        let get = |key: &'static str| -> Result<String, RecipeError> {
            keys.get(key)
                .filter(|v| !v.is_empty())
                .cloned()
                .ok_or(RecipeError::MissingKey {
                    section: language.to_string(),
                    key,
                })
        };
        let recipe = Recipe {
            source: get("source")?,
            compile: keys.get("compile").filter(|v| !v.is_empty()).map(|v| words(v)),
            run: words(&get("run")?),
            version: words(&get("version")?),
            fail_markers: keys.get("fail_markers").map(|v| markers(v)).unwrap_or_default(),
            error_markers: keys.get("error_markers").map(|v| markers(v)).unwrap_or_default(),
        };
        out.insert(language, recipe);
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<BTreeMap<Language, Recipe>, RecipeError> {
    let text = std::fs::read_to_string(path).map_err(|e| RecipeError::Io(format!("{}: {e}", path.display())))?;
    parse(&text)
}

pub fn defaults() -> BTreeMap<Language, Recipe> {
    parse(DEFAULT_RECIPES).expect("bundled sandbox recipes parse")
}

/// Substitutes `{build}`, `{work}` and `{test}` in each argument.
pub fn expand(args: &[String], build: &Path, work: &Path, test: usize) -> Vec<String> {
    args.iter()
        .map(|a| {
            a.replace("{build}", &build.to_string_lossy())
                .replace("{work}", &work.to_string_lossy())
                .replace("{test}", &test.to_string())
        })
        .collect()
}
