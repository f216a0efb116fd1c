//! Flat `key = value` run configuration.
//!
//! Keys mirror the CLI flag names with `-` written as `_`. Resolution order,
//! highest first: explicit overrides (flags), `XFORGE_<KEY>` environment
//! variables, the config file, built-in defaults.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::agent::AgentSettings;
use crate::discussion::{DiscussionConfig, TargetLanguagePolicy, Topology};
use crate::eval::EvalOptions;
use crate::gateway::{BackendConfig, BackendKind, MockConfig, PassPattern, ScoreProfile};
use crate::model::Language;
use crate::preference::DpoConfig;
use crate::sandbox::{NetworkPolicy, ResourceLimits};
use crate::seed::SeedConfig;
use crate::util::sha256_hex;

pub const ENV_PREFIX: &str = "XFORGE_";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}:{line}: {reason}")]
    Syntax { path: String, line: usize, reason: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {reason}")]
    BadValue { key: String, reason: String },
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Every accepted key with its default.
const DEFAULTS: &[(&str, &str)] = &[
    ("run_dir", "runs/default"),
    ("snippets", ""),
    ("languages", "python,java,cpp,csharp,typescript,php,bash"),
    ("scale_factor", "1.0"),
    ("seed", "0"),
    ("seed_total", "30000"),
    ("s3_total", "67000"),
    ("dpo_total", "133000"),
    // backend
    ("backend", "mock"),
    ("endpoint_url", ""),
    ("model_name", ""),
    ("request_timeout_s", "120"),
    ("max_retries", "3"),
    ("max_in_flight", "8"),
    ("retry_backoff_ms", "500"),
    ("mock_score_profile", "uniform:4"),
    ("mock_pass_pattern", "hashed:50"),
    ("mock_echo_discuss", "false"),
    ("prompts", ""),
    // seed
    ("snippet_token_cap", "1024"),
    ("score_threshold", "6.0"),
    ("seed_temperature", "0.7"),
    ("max_new_tokens", "1024"),
    // discuss
    ("topology", "centralized"),
    ("group_size", "3"),
    ("rounds", "200"),
    ("target_language_policy", "random_participant"),
    ("memory_capacity", "16"),
    ("similarity_threshold", "0.85"),
    ("reflection_cap", "4"),
    ("dedup_threshold", "0.85"),
    ("discuss_temperature", "0.7"),
    // dpo
    ("n_samples", "128"),
    ("dpo_temperature", "0.8"),
    ("max_pairs_per_query", "2"),
    ("n_tests", "4"),
    ("wall_timeout_s", "10"),
    ("max_output_bytes", "65536"),
    ("sandbox_recipes", ""),
    ("sandbox_slots", "0"),
    // eval
    ("eval_problems", ""),
    ("eval_language", "python"),
    ("eval_n", "1"),
    ("eval_k", "1"),
    ("eval_greedy", "true"),
    ("eval_temperature", "0.0"),
    ("eval_prompt_prefix", ""),
];

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_").to_lowercase()
}

fn is_known(key: &str) -> bool {
    DEFAULTS.iter().any(|(k, _)| *k == key)
}

/// Parses the flat format: one `key = value` per line, `#` starts a comment
/// line, blank lines ignored, values may be wrapped in double quotes.
pub fn parse_file_text(text: &str, origin: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                path: origin.to_string(),
                line: i + 1,
                reason: "expected `key = value`".into(),
            });
        };
        let key = normalize(key);
        if !is_known(&key) {
            return Err(ConfigError::UnknownKey(key));
        }
        let value = value.trim();
        let value = value
            .strip_prefix('"')
            .and_then(|v| v.strip_suffix('"'))
            .unwrap_or(value);
        out.insert(key, value.to_string());
    }
    Ok(out)
}

/// Fully resolved key/value view of a run configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
    /// Directory relative paths are resolved against.
    base_dir: PathBuf,
}

impl RawConfig {
    /// Resolves `file` (optional), environment and `overrides` over the defaults.
    pub fn resolve(
        file: Option<&Path>,
        env: impl Fn(&str) -> Option<String>,
        overrides: &BTreeMap<String, String>,
    ) -> Result<Self, ConfigError> {
        let mut values: BTreeMap<String, String> =
            DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let mut base_dir = std::env::current_dir().unwrap_or_default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                path: path.display().to_string(),
                source,
            })?;
            values.extend(parse_file_text(&text, &path.display().to_string())?);
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                base_dir = std::path::absolute(parent).unwrap_or_else(|_| parent.to_path_buf());
            }
        }
        for (key, _) in DEFAULTS {
            if let Some(v) = env(&format!("{ENV_PREFIX}{}", key.to_uppercase())) {
                values.insert(key.to_string(), v);
            }
        }
        for (key, value) in overrides {
            let key = normalize(key);
            if !is_known(&key) {
                return Err(ConfigError::UnknownKey(key));
            }
            values.insert(key, value.clone());
        }
        Ok(Self { values, base_dir })
    }

    /// Process environment variant of [`RawConfig::resolve`].
    pub fn load(file: Option<&Path>, overrides: &BTreeMap<String, String>) -> Result<Self, ConfigError> {
        Self::resolve(file, |k| std::env::var(k).ok(), overrides)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map_or("", String::as_str)
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    /// sha256 over the canonical `key=value` lines. Relative paths are
    /// hashed as written, so moving a run directory keeps its hash.
    pub fn hash(&self) -> String {
        let canonical: String = self
            .values
            .iter()
            .filter(|(k, _)| k.as_str() != "sandbox_slots")
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        sha256_hex(canonical.as_bytes())
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: Display,
    {
        self.get(key).trim().parse().map_err(|e: T::Err| ConfigError::BadValue {
            key: key.to_string(),
            reason: e.to_string(),
        })
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key).trim();
        (!v.is_empty()).then(|| self.base_dir.join(v))
    }

    fn bad(key: &str, reason: impl Into<String>) -> ConfigError {
        ConfigError::BadValue {
            key: key.to_string(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositionTargets {
    pub seed_total: u64,
    pub s3_total: u64,
    pub dpo_total: u64,
    pub scale_factor: f64,
}

impl CompositionTargets {
    fn scaled(total: u64, scale: f64) -> usize {
        (total as f64 * scale).round() as usize
    }

    pub fn seed(&self) -> usize {
        Self::scaled(self.seed_total, self.scale_factor)
    }

    pub fn s3(&self) -> usize {
        Self::scaled(self.s3_total, self.scale_factor)
    }

    pub fn dpo(&self) -> usize {
        Self::scaled(self.dpo_total, self.scale_factor)
    }
}

/// Splits `total` evenly over `languages`; the first ones take the remainder.
pub fn split_quota(total: usize, languages: &[Language]) -> BTreeMap<Language, usize> {
    let n = languages.len().max(1);
    languages
        .iter()
        .enumerate()
        .map(|(i, &l)| (l, total / n + usize::from(i < total % n)))
        .collect()
}

/// Typed run configuration.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub raw: RawConfig,
    pub run_dir: PathBuf,
    pub snippets: Option<PathBuf>,
    pub languages: Vec<Language>,
    pub targets: CompositionTargets,
    pub rng_seed: u64,
    pub backend: BackendConfig,
    pub mock: MockConfig,
    pub prompts: Option<PathBuf>,
    pub seed: SeedConfig,
    pub agents: AgentSettings,
    pub discussion: DiscussionConfig,
    pub dpo: DpoConfig,
    pub sandbox_recipes: Option<PathBuf>,
    pub sandbox_slots: Option<usize>,
    pub eval_problems: Vec<PathBuf>,
    pub eval_language: Language,
    pub eval: EvalOptions,
}

fn parse_score_profile(v: &str) -> Result<ScoreProfile, ConfigError> {
    let bad = || RawConfig::bad("mock_score_profile", format!("`{v}`"));
    match v.split_once(':') {
        None if v == "adversarial" => Ok(ScoreProfile::Adversarial),
        Some(("uniform", f)) => Ok(ScoreProfile::Uniform {
            floor: f.parse().map_err(|_| bad())?,
        }),
        Some(("fixed", list)) => {
            let vals: Vec<u8> = list.split(',').map(|x| x.trim().parse()).collect::<Result<_, _>>().map_err(|_| bad())?;
            Ok(ScoreProfile::Fixed(vals.try_into().map_err(|_| bad())?))
        }
        _ => Err(bad()),
    }
}

fn parse_pass_pattern(v: &str) -> Result<PassPattern, ConfigError> {
    let bad = || RawConfig::bad("mock_pass_pattern", format!("`{v}`"));
    match v.split_once(':') {
        None => match v {
            "alternate" => Ok(PassPattern::Alternate),
            "all_pass" => Ok(PassPattern::AllPass),
            "all_fail" => Ok(PassPattern::AllFail),
            _ => Err(bad()),
        },
        Some(("hashed", p)) => Ok(PassPattern::Hashed {
            percent: p.parse().ok().filter(|p| *p <= 100).ok_or_else(bad)?,
        }),
        _ => Err(bad()),
    }
}

fn parse_languages(key: &str, v: &str) -> Result<Vec<Language>, ConfigError> {
    let mut out = Vec::new();
    for name in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let lang: Language = name.parse().map_err(|e: crate::model::UnknownLanguage| RawConfig::bad(key, e.to_string()))?;
        if !out.contains(&lang) {
            out.push(lang);
        }
    }
    Ok(out)
}

fn parse_enum<T: serde::de::DeserializeOwned>(key: &str, v: &str) -> Result<T, ConfigError> {
    serde_json::from_value(serde_json::Value::String(v.to_string())).map_err(|_| RawConfig::bad(key, format!("`{v}`")))
}

impl PipelineConfig {
    pub fn from_raw(raw: RawConfig) -> Result<Self, ConfigError> {
        let r = &raw;
        let scale_factor: f64 = r.parsed("scale_factor")?;
        if !(scale_factor > 0.0 && scale_factor <= 1.0) {
            return Err(RawConfig::bad("scale_factor", "must be in (0, 1]"));
        }
        let languages = parse_languages("languages", r.get("languages"))?;
        if languages.is_empty() {
            return Err(RawConfig::bad("languages", "at least one language is required"));
        }
        let rng_seed: u64 = r.parsed("seed")?;
        let targets = CompositionTargets {
            seed_total: r.parsed("seed_total")?,
            s3_total: r.parsed("s3_total")?,
            dpo_total: r.parsed("dpo_total")?,
            scale_factor,
        };
        let kind = match r.get("backend") {
            "mock" => BackendKind::Mock,
            "http" => BackendKind::Http,
            other => return Err(RawConfig::bad("backend", format!("`{other}` is not http or mock"))),
        };
        let non_empty = |k: &str| Some(r.get(k).to_string()).filter(|s| !s.is_empty());
        let backend = BackendConfig {
            kind,
            endpoint_url: non_empty("endpoint_url"),
            model_name: non_empty("model_name"),
            request_timeout_s: r.parsed("request_timeout_s")?,
            max_retries: r.parsed("max_retries")?,
            max_in_flight: r.parsed("max_in_flight")?,
            retry_backoff_ms: r.parsed("retry_backoff_ms")?,
        };
        let mock = MockConfig {
            score_profile: parse_score_profile(r.get("mock_score_profile"))?,
            pass_pattern: parse_pass_pattern(r.get("mock_pass_pattern"))?,
            echo_discuss: r.parsed("mock_echo_discuss")?,
            ..MockConfig::default()
        };
        let max_new_tokens: u32 = r.parsed("max_new_tokens")?;
        let score_threshold: f64 = r.parsed("score_threshold")?;
        let seed = SeedConfig {
            snippet_token_cap: r.parsed("snippet_token_cap")?,
            score_threshold,
            per_language_quota: split_quota(targets.seed(), &languages),
            max_new_tokens,
            temperature: r.parsed("seed_temperature")?,
            rng_seed,
        };
        let agents = AgentSettings {
            memory_capacity: r.parsed("memory_capacity")?,
            similarity_threshold: r.parsed("similarity_threshold")?,
            reflection_cap: r.parsed("reflection_cap")?,
        };
        let discussion = DiscussionConfig {
            topology: parse_enum::<Topology>("topology", r.get("topology"))?,
            group_size: r.parsed("group_size")?,
            rounds: r.parsed("rounds")?,
            target_language_policy: parse_enum::<TargetLanguagePolicy>("target_language_policy", r.get("target_language_policy"))?,
            rng_seed,
            quota_s3: split_quota(targets.s3(), &languages),
            score_threshold,
            dedup_threshold: r.parsed("dedup_threshold")?,
            max_new_tokens,
            temperature: r.parsed("discuss_temperature")?,
        };
        let limits = ResourceLimits {
            wall_timeout_s: r.parsed("wall_timeout_s")?,
            max_output_bytes: r.parsed("max_output_bytes")?,
            network: NetworkPolicy::Denied,
        };
        let dpo = DpoConfig {
            n_samples: r.parsed("n_samples")?,
            temperature: r.parsed("dpo_temperature")?,
            max_pairs_per_query: r.parsed("max_pairs_per_query")?,
            n_tests: r.parsed("n_tests")?,
            max_new_tokens,
            limits,
            rng_seed,
        };
        let k_values = r
            .get("eval_k")
            .split(',')
            .map(|k| k.trim().parse::<u64>().map_err(|e| RawConfig::bad("eval_k", e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let eval = EvalOptions {
            n: r.parsed("eval_n")?,
            k_values,
            greedy: r.parsed("eval_greedy")?,
            temperature: r.parsed("eval_temperature")?,
            max_new_tokens,
            prompt_prefix: r.get("eval_prompt_prefix").replace("\\n", "\n"),
            limits,
            rng_seed,
        };
        let slots: usize = r.parsed("sandbox_slots")?;
        Ok(Self {
            run_dir: r.path("run_dir").expect("run_dir has a default"),
            snippets: r.path("snippets"),
            languages,
            targets,
            rng_seed,
            backend,
            mock,
            prompts: r.path("prompts"),
            seed,
            agents,
            discussion,
            dpo,
            sandbox_recipes: r.path("sandbox_recipes"),
            sandbox_slots: (slots > 0).then_some(slots),
            eval_problems: r
                .get("eval_problems")
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|p| r.base_dir.join(p))
                .collect(),
            eval_language: parse_languages("eval_language", r.get("eval_language"))?
                .first()
                .copied()
                .ok_or_else(|| RawConfig::bad("eval_language", "empty"))?,
            eval,
            raw,
        })
    }

    pub fn load(file: Option<&Path>, overrides: &BTreeMap<String, String>) -> Result<Self, ConfigError> {
        Self::from_raw(RawConfig::load(file, overrides)?)
    }

    pub fn hash(&self) -> String {
        self.raw.hash()
    }
}
