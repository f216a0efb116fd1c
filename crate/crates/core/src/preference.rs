//! Execution-verified preference pairs.
//!
//! For each query the policy model samples many responses, one set of
//! generated tests is run against every response, and passing responses are
//! paired with failing ones by a seeded shuffle-zip.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::gateway::{sample_n, Backend, CompletionRequest, GatewayError};
use crate::model::{InstructionPair, Language, PreferencePair, Verdict, VerdictSummary};
use crate::prompts::{extract_code_block, parse_response, PromptTemplates};
use crate::sandbox::{generate_tests, ExecutionResult, ResourceLimits, Sandbox, SandboxError, TestCase, TestGenError};
use crate::util::{derive_seed, sha256_hex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoConfig {
    pub n_samples: usize,
    pub temperature: f64,
    pub max_pairs_per_query: usize,
    pub n_tests: usize,
    pub max_new_tokens: u32,
    pub limits: ResourceLimits,
    pub rng_seed: u64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            n_samples: 128,
            temperature: 0.8,
            max_pairs_per_query: 2,
            n_tests: 4,
            max_new_tokens: 1024,
            limits: ResourceLimits::default(),
            rng_seed: 0,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<(), DpoError> {
        if self.n_samples < 2 {
            return Err(DpoError::InvalidConfig("n_samples must be at least 2".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(DpoError::InvalidConfig("temperature must be positive".into()));
        }
        if self.max_pairs_per_query == 0 || self.n_tests == 0 {
            return Err(DpoError::InvalidConfig(
                "max_pairs_per_query and n_tests must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DpoError {
    #[error("invalid dpo config: {0}")]
    InvalidConfig(String),
    #[error("no queries given")]
    NoQueries,
    #[error("no toolchain for {0}")]
    ToolchainMissing(Language),
    #[error(transparent)]
    TestGen(#[from] TestGenError),
    #[error("no contrast: {passed} passing and {failed} failing responses")]
    NoContrast { passed: usize, failed: usize },
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Backend(#[from] GatewayError),
}

impl DpoError {
    fn kind(&self) -> &'static str {
        match self {
            DpoError::InvalidConfig(_) => "invalid_config",
            DpoError::NoQueries => "no_queries",
            DpoError::ToolchainMissing(_) => "toolchain_missing",
            DpoError::TestGen(TestGenError::NoTestsParsed { .. }) => "no_tests_parsed",
            DpoError::TestGen(_) => "test_generation",
            DpoError::NoContrast { .. } => "no_contrast",
            DpoError::Sandbox(_) => "sandbox",
            DpoError::Backend(_) => "backend",
        }
    }
}

/// Memoizes execution results by program and test content. Identical
/// candidates are common among samples, so each distinct
/// `(language, code, tests)` runs once per cache. Results containing a
/// timeout are not cached.
#[derive(Default)]
pub struct VerificationCache {
    entries: Mutex<HashMap<String, ExecutionResult>>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl VerificationCache {
    fn key(language: Language, code: &str, tests: &[TestCase], limits: &ResourceLimits) -> String {
        let mut material = format!("{language}\0{code}\0{}\0{}\0", limits.wall_timeout_s, limits.max_output_bytes);
        for t in tests {
            material.push_str(&format!("{}\0{}\0", t.id, t.harness_code));
        }
        sha256_hex(material.as_bytes())
    }

    pub fn execute(
        &self,
        sandbox: &Sandbox,
        code: &str,
        language: Language,
        tests: &[TestCase],
        limits: &ResourceLimits,
    ) -> Result<ExecutionResult, SandboxError> {
        let key = Self::key(language, code, tests, limits);
        if let Some(hit) = self.entries.lock().expect("cache lock").get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(hit.clone());
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let result = sandbox.execute(code, language, tests, limits)?;
        if !result.per_test.values().any(|v| *v == Verdict::Timeout) {
            self.entries.lock().expect("cache lock").insert(key, result.clone());
        }
        Ok(result)
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn executions(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }
}

/// Everything learned about one query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub pairs: Vec<PreferencePair>,
    pub tests: Vec<TestCase>,
    pub passed: usize,
    pub failed: usize,
    /// Samples without a parseable response or code block.
    pub unparseable: usize,
    pub tests_dropped: usize,
}

pub struct DpoBuilder<'a> {
    pub backend: &'a dyn Backend,
    pub sandbox: &'a Sandbox,
    pub templates: &'a PromptTemplates,
    pub config: &'a DpoConfig,
    pub cache: &'a VerificationCache,
}

struct Candidate {
    response: String,
    summary: VerdictSummary,
}

impl DpoBuilder<'_> {
    /// Sample, generate tests, verify, pair. Fails with `NoContrast` when
    /// every response passed or every response failed.
    pub fn build_pairs_for_query(&self, query: &InstructionPair) -> Result<QueryOutcome, DpoError> {
        self.config.validate()?;
        let language = query.language;
        if !self.sandbox.is_available(language) {
            return Err(DpoError::ToolchainMissing(language));
        }
        let generated = generate_tests(query, self.config.n_tests, self.backend, self.templates, self.config.rng_seed)?;
        let request = CompletionRequest::new(
            self.templates.respond_to_instruct(language, &query.question),
            self.config.max_new_tokens,
            self.config.temperature,
            derive_seed(self.config.rng_seed, &[&query.id, "dpo-sample"]),
        );
        let samples = sample_n(self.backend, &request, self.config.n_samples)?;

        let mut passing = Vec::new();
        let mut failing = Vec::new();
        let mut unparseable = 0;
        for sample in samples {
            let Some((response, code)) = parse_response(&sample)
                .ok()
                .and_then(|r| extract_code_block(&r).map(|c| (r, c)))
            else {
                unparseable += 1;
                continue;
            };
            let result = self
                .cache
                .execute(self.sandbox, &code, language, &generated.tests, &self.config.limits)?;
            let candidate = Candidate {
                response,
                summary: result.summary(),
            };
            if result.passed_all() {
                passing.push(candidate);
            } else {
                failing.push(candidate);
            }
        }
        let (passed, failed) = (passing.len(), failing.len());
        debug!("query {}: {passed} pass, {failed} fail, {unparseable} unparseable", query.id);
        if passed == 0 || failed == 0 {
            return Err(DpoError::NoContrast { passed, failed });
        }

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.rng_seed, &[&query.id, "dpo-pair"]));
        passing.shuffle(&mut rng);
        failing.shuffle(&mut rng);
        let pairs = passing
            .into_iter()
            .zip(failing)
            .take(self.config.max_pairs_per_query)
            .map(|(chosen, rejected)| PreferencePair {
                query: query.question.clone(),
                language,
                chosen: chosen.response,
                rejected: rejected.response,
                chosen_verdict: chosen.summary,
                rejected_verdict: rejected.summary,
            })
            .collect();
        Ok(QueryOutcome {
            pairs,
            tests: generated.tests,
            passed,
            failed,
            unparseable,
            tests_dropped: generated.dropped,
        })
    }

    /// Processes queries in order until `target` pairs exist (all queries
    /// when `None`); output is truncated to the target. Per-query failures
    /// are tallied, never fatal.
    pub fn build_dataset(&self, queries: &[InstructionPair], target: Option<usize>) -> Result<DpoDataset, DpoError> {
        self.config.validate()?;
        if queries.is_empty() {
            return Err(DpoError::NoQueries);
        }
        let chunk = (rayon::current_num_threads() * 4).max(8);
        let mut report = DpoReport {
            target,
            ..DpoReport::default()
        };
        let mut pairs = Vec::new();
        let mut tests = Vec::new();
        'outer: for batch in queries.chunks(chunk) {
            let outcomes: Vec<(&InstructionPair, Result<QueryOutcome, DpoError>)> =
                batch.par_iter().map(|q| (q, self.build_pairs_for_query(q))).collect();
            for (query, outcome) in outcomes {
                if target.is_some_and(|t| pairs.len() >= t) {
                    break 'outer;
                }
                report.queries_processed += 1;
                match outcome {
                    Ok(outcome) => {
                        report.record_rate(outcome.passed, outcome.failed);
                        report.unparseable_samples += outcome.unparseable;
                        report.tests_dropped += outcome.tests_dropped;
                        report.queries_with_pairs += 1;
                        *report.pairs_per_language.entry(query.language).or_default() += outcome.pairs.len();
                        tests.push(QueryTests {
                            query_id: query.id.clone(),
                            query: query.question.clone(),
                            language: query.language,
                            tests: outcome.tests,
                        });
                        pairs.extend(outcome.pairs);
                    }
                    Err(e) => {
                        if let DpoError::NoContrast { passed, failed } = e {
                            report.record_rate(passed, failed);
                            report.no_contrast += 1;
                        }
                        if let DpoError::ToolchainMissing(lang) = e {
                            *report.skipped_languages.entry(lang).or_default() += 1;
                        }
                        *report.errors.entry(e.kind().to_string()).or_default() += 1;
                        if !matches!(e, DpoError::NoContrast { .. } | DpoError::ToolchainMissing(_)) {
                            report.failures.push(QueryFailure {
                                query_id: query.id.clone(),
                                error: e.to_string(),
                            });
                        }
                    }
                }
            }
        }
        if let Some(t) = target {
            if pairs.len() > t {
                debug!("dropping {} pair(s) beyond the target of {t}", pairs.len() - t);
                pairs.truncate(t);
                report.pairs_per_language = language_counts(&pairs);
            }
            report.target_reached = pairs.len() >= t;
        } else {
            report.target_reached = true;
        }
        report.pairs = pairs.len();
        report.no_contrast_rate = report.no_contrast as f64 / report.queries_processed.max(1) as f64;
        report.cached_verifications = self.cache.hits();
        report.executions = self.cache.executions();
        info!(
            "dpo: {} pairs from {} queries ({} without contrast)",
            report.pairs, report.queries_processed, report.no_contrast
        );
        Ok(DpoDataset { pairs, tests, report })
    }
}

fn language_counts(pairs: &[PreferencePair]) -> BTreeMap<Language, usize> {
    let mut counts = BTreeMap::new();
    for p in pairs {
        *counts.entry(p.language).or_default() += 1;
    }
    counts
}

pub fn build_pairs_for_query(
    query: &InstructionPair,
    config: &DpoConfig,
    backend: &dyn Backend,
    sandbox: &Sandbox,
    templates: &PromptTemplates,
) -> Result<QueryOutcome, DpoError> {
    let cache = VerificationCache::default();
    DpoBuilder {
        backend,
        sandbox,
        templates,
        config,
        cache: &cache,
    }
    .build_pairs_for_query(query)
}

pub fn build_dpo_dataset(
    queries: &[InstructionPair],
    config: &DpoConfig,
    backend: &dyn Backend,
    sandbox: &Sandbox,
    templates: &PromptTemplates,
    target: Option<usize>,
) -> Result<DpoDataset, DpoError> {
    let cache = VerificationCache::default();
    DpoBuilder {
        backend,
        sandbox,
        templates,
        config,
        cache: &cache,
    }
    .build_dataset(queries, target)
}

/// Tests used for one query, kept so pairs can be re-verified later.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryTests {
    pub query_id: String,
    pub query: String,
    pub language: Language,
    pub tests: Vec<TestCase>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryFailure {
    pub query_id: String,
    pub error: String,
}

pub const PASS_RATE_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoReport {
    /// Emitted records are preference pairs, not individual responses.
    pub count_unit: String,
    pub target: Option<usize>,
    pub target_reached: bool,
    pub pairs: usize,
    pub queries_processed: usize,
    pub queries_with_pairs: usize,
    pub no_contrast: usize,
    pub no_contrast_rate: f64,
    /// Queries by fraction of passing responses, in tenths; the last bin
    /// includes 1.0.
    pub pass_rate_histogram: Vec<usize>,
    pub pairs_per_language: BTreeMap<Language, usize>,
    pub skipped_languages: BTreeMap<Language, usize>,
    pub errors: BTreeMap<String, usize>,
    pub failures: Vec<QueryFailure>,
    pub unparseable_samples: usize,
    pub tests_dropped: usize,
    pub executions: usize,
    pub cached_verifications: usize,
}

impl Default for DpoReport {
    fn default() -> Self {
        Self {
            count_unit: "pairs".into(),
            target: None,
            target_reached: false,
            pairs: 0,
            queries_processed: 0,
            queries_with_pairs: 0,
            no_contrast: 0,
            no_contrast_rate: 0.0,
            pass_rate_histogram: vec![0; PASS_RATE_BINS],
            pairs_per_language: BTreeMap::new(),
            skipped_languages: BTreeMap::new(),
            errors: BTreeMap::new(),
            failures: Vec::new(),
            unparseable_samples: 0,
            tests_dropped: 0,
            executions: 0,
            cached_verifications: 0,
        }
    }
}

impl DpoReport {
    fn record_rate(&mut self, passed: usize, failed: usize) {
        let total = passed + failed;
        if total == 0 {
            return;
        }
        let bin = (passed * PASS_RATE_BINS / total).min(PASS_RATE_BINS - 1);
        self.pass_rate_histogram[bin] += 1;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpoDataset {
    pub pairs: Vec<PreferencePair>,
    pub tests: Vec<QueryTests>,
    pub report: DpoReport,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{solution_code, MockBackend, MockConfig, PassPattern};
    use crate::model::{validate_record, Partition};
    use crate::prompts::fence;
    use std::sync::LazyLock;

    static SANDBOX: LazyLock<Sandbox> = LazyLock::new(|| Sandbox::new(Default::default()).unwrap());

    fn query(language: Language, k: i64, b: i64) -> InstructionPair {
        InstructionPair::new(
            format!("Write a {language} function `solve(x)` that returns x * {k} + {b} for an integer x."),
            fence(language, &solution_code(language, k, b)),
            language,
            Partition::SeedS1,
            vec![format!("snip-{k}{b}")],
            0,
        )
    }

    fn backend(pattern: PassPattern) -> MockBackend {
        MockBackend::new(MockConfig {
            pass_pattern: pattern,
            ..MockConfig::default()
        })
    }

    fn config(n_samples: usize) -> DpoConfig {
        DpoConfig {
            n_samples,
            ..DpoConfig::default()
        }
    }

    #[test]
    fn uniform_outcomes_have_no_contrast() {
        let templates = PromptTemplates::default();
        for pattern in [PassPattern::AllPass, PassPattern::AllFail] {
            let err = build_pairs_for_query(&query(Language::Python, 2, 1), &config(16), &backend(pattern), &SANDBOX, &templates)
                .unwrap_err();
            assert!(matches!(err, DpoError::NoContrast { .. }), "{err}");
        }
    }

    #[test]
    fn pairs_are_capped_and_valid() {
        let templates = PromptTemplates::default();
        let out = build_pairs_for_query(
            &query(Language::Python, 3, 2),
            &config(128),
            &backend(PassPattern::Alternate),
            &SANDBOX,
            &templates,
        )
        .unwrap();
        assert_eq!((out.passed, out.failed), (64, 64));
        assert_eq!(out.pairs.len(), 2);
        for pair in out.pairs {
            validate_record(pair).unwrap();
        }
    }

    #[test]
    fn dataset_is_deterministic_and_respects_target() {
        let templates = PromptTemplates::default();
        let queries: Vec<_> = (0..6).map(|i| query(Language::Bash, 2 + i % 3, i % 4)).collect();
        let mock = backend(PassPattern::Hashed { percent: 50 });
        let cfg = config(12);
        let a = build_dpo_dataset(&queries, &cfg, &mock, &SANDBOX, &templates, Some(5)).unwrap();
        let b = build_dpo_dataset(&queries, &cfg, &mock, &SANDBOX, &templates, Some(5)).unwrap();
        assert_eq!(a.pairs, b.pairs);
        assert_eq!(a.pairs.len(), 5);
        assert!(a.report.target_reached);
        assert_eq!(a.report.pairs_per_language.values().sum::<usize>(), 5);
        assert!(build_dpo_dataset(&[], &cfg, &mock, &SANDBOX, &templates, None).is_err());
    }

    #[test]
    fn config_needs_two_samples() {
        assert!(config(1).validate().is_err());
        assert!(config(2).validate().is_ok());
    }
}
