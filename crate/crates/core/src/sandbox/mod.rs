//! Execution sandbox for untrusted candidate code.
//!
//! Every test runs in a fresh process inside a per-run temporary directory,
//! in its own process group and network namespace, with a wall-clock limit
//! and capped output. This is process-level isolation only: code can still
//! read the host filesystem and write to absolute paths the user can write.
//! Run the pipeline inside a container when that matters.

mod assemble;
mod process;
pub mod recipe;
mod testgen;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::model::{InstructionPair, Language, Verdict, VerdictSummary};
use crate::prompts::extract_code_block;
use crate::util::{write_json, Semaphore};

pub use assemble::has_entry_point;
pub use recipe::{Recipe, RecipeError};
pub use testgen::{generate_tests, syntax_precheck, GeneratedTests, TestGenError};

use process::{RunOutcome, RunSpec};

/// Environment variable overriding the number of concurrent sandbox slots.
pub const SLOTS_ENV: &str = "XFORGE_SANDBOX_SLOTS";

const DIAGNOSTIC_CHARS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub id: String,
    pub harness_code: String,
}

impl TestCase {
    pub fn new(id: impl Into<String>, harness_code: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            harness_code: harness_code.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetworkPolicy {
    Denied,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceLimits {
    pub wall_timeout_s: u64,
    pub max_output_bytes: u64,
    pub network: NetworkPolicy,
}

impl Default for ResourceLimits {
    fn default() -> Self {
        Self {
            wall_timeout_s: 10,
            max_output_bytes: 64 * 1024,
            network: NetworkPolicy::Denied,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub per_test: BTreeMap<String, Verdict>,
    pub stdout_truncated: bool,
    pub wall_time_ms: BTreeMap<String, u64>,
    /// Tail of stderr (or compiler output) for tests that did not pass.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub diagnostics: BTreeMap<String, String>,
}

impl ExecutionResult {
    pub fn passed_all(&self) -> bool {
        !self.per_test.is_empty() && self.per_test.values().all(|v| *v == Verdict::Pass)
    }

    pub fn summary(&self) -> VerdictSummary {
        VerdictSummary::from_verdicts(self.per_test.clone())
    }

    fn record(&mut self, id: &str, verdict: Verdict, wall_ms: u64, diagnostic: Option<String>) {
        self.per_test.insert(id.to_string(), verdict);
        self.wall_time_ms.insert(id.to_string(), wall_ms);
        if let Some(d) = diagnostic.filter(|d| !d.is_empty() && verdict != Verdict::Pass) {
            self.diagnostics.insert(id.to_string(), d);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verification {
    pub passed_all: bool,
    pub result: ExecutionResult,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolchainStatus {
    pub available: bool,
    pub version: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum SandboxError {
    #[error("no working toolchain for {0}")]
    ToolchainMissing(Language),
    #[error("sandbox setup failed: {0}")]
    SetupFailure(String),
    #[error("invalid tests: {0}")]
    InvalidTests(String),
    #[error(transparent)]
    Recipe(#[from] RecipeError),
}

fn setup(context: &str) -> impl Fn(std::io::Error) -> SandboxError + '_ {
    move |e| SandboxError::SetupFailure(format!("{context}: {e}"))
}

#[derive(Debug, Clone)]
pub struct SandboxOptions {
    pub recipes: BTreeMap<Language, Recipe>,
    pub slots: usize,
    /// Parent directory for per-run work directories.
    pub temp_root: PathBuf,
    pub compile_timeout_s: u64,
}

impl Default for SandboxOptions {
    fn default() -> Self {
        let slots = std::env::var(SLOTS_ENV)
            .ok()
            .and_then(|v| v.parse().ok())
            .filter(|n: &usize| *n > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        Self {
            recipes: recipe::defaults(),
            slots,
            temp_root: std::env::temp_dir(),
            compile_timeout_s: 60,
        }
    }
}

pub struct Sandbox {
    recipes: BTreeMap<Language, Recipe>,
    toolchains: BTreeMap<Language, ToolchainStatus>,
    slots: Semaphore,
    temp_root: PathBuf,
    compile_timeout: Duration,
}

fn tail(bytes: &[u8]) -> String {
    let text = String::from_utf8_lossy(bytes);
    let chars: Vec<char> = text.chars().collect();
    let start = chars.len().saturating_sub(DIAGNOSTIC_CHARS);
    chars[start..].iter().collect::<String>().trim().to_string()
}

/// Maps a finished test process to a verdict.
fn classify(outcome: &RunOutcome, recipe: &Recipe) -> Verdict {
    if outcome.timed_out {
        return Verdict::Timeout;
    }
    if outcome.output_exceeded {
        return Verdict::RuntimeError;
    }
    if outcome.status.success() {
        return Verdict::Pass;
    }
    let stderr = outcome.stderr_text();
    if recipe.fail_markers.iter().any(|m| stderr.contains(m.as_str())) {
        return Verdict::Fail;
    }
    if outcome.signaled() || recipe.error_markers.iter().any(|m| stderr.contains(m.as_str())) {
        return Verdict::RuntimeError;
    }
    Verdict::Fail
}

impl Sandbox {
    /// Probes network isolation and every configured toolchain.
    pub fn new(options: SandboxOptions) -> Result<Self, SandboxError> {
        if options.slots == 0 {
            return Err(SandboxError::SetupFailure("slots must be positive".into()));
        }
        fs::create_dir_all(&options.temp_root).map_err(setup("temp root"))?;
        if !process::network_isolation_available() {
            return Err(SandboxError::SetupFailure(
                "cannot create a network namespace; untrusted code would have network access".into(),
            ));
        }
        let mut toolchains = BTreeMap::new();
        for language in Language::ALL {
            let status = match options.recipes.get(&language) {
                Some(recipe) => probe(recipe, &options.temp_root),
                None => ToolchainStatus {
                    available: false,
                    version: None,
                },
            };
            if status.available {
                info!("toolchain {language}: {}", status.version.as_deref().unwrap_or("?"));
            } else {
                warn!("toolchain {language} unavailable; the language is disabled");
            }
            toolchains.insert(language, status);
        }
        Ok(Self {
            recipes: options.recipes,
            toolchains,
            slots: Semaphore::new(options.slots),
            temp_root: options.temp_root,
            compile_timeout: Duration::from_secs(options.compile_timeout_s.max(1)),
        })
    }

    pub fn toolchains(&self) -> &BTreeMap<Language, ToolchainStatus> {
        &self.toolchains
    }

    pub fn is_available(&self, language: Language) -> bool {
        self.toolchains.get(&language).is_some_and(|t| t.available)
    }

    pub fn available_languages(&self) -> Vec<Language> {
        Language::ALL.into_iter().filter(|l| self.is_available(*l)).collect()
    }

    pub fn slots(&self) -> usize {
        self.slots.capacity()
    }

    pub fn write_toolchains(&self, path: &Path) -> std::io::Result<()> {
        write_json(path, &self.toolchains)
    }

    /// Runs `code` against every test. Per-test problems become verdicts;
    /// only environment failures are errors.
    pub fn execute(
        &self,
        code: &str,
        language: Language,
        tests: &[TestCase],
        limits: &ResourceLimits,
    ) -> Result<ExecutionResult, SandboxError> {
        let recipe = match self.recipes.get(&language) {
            Some(r) if self.is_available(language) => r,
            _ => return Err(SandboxError::ToolchainMissing(language)),
        };
        check_tests(tests)?;
        if limits.wall_timeout_s == 0 || limits.max_output_bytes == 0 {
            return Err(SandboxError::SetupFailure("resource limits must be positive".into()));
        }
        let mut result = ExecutionResult::default();
        if tests.is_empty() {
            return Ok(result);
        }

        let _permit = self.slots.acquire();
        let run_dir = tempfile::Builder::new()
            .prefix("xforge-run-")
            .tempdir_in(&self.temp_root)
            .map_err(setup("run directory"))?;
        let run = Run {
            sandbox: self,
            recipe,
            root: run_dir.path(),
            limits,
        };

        if recipe.is_compiled() {
            let (standalone, dispatched): (Vec<&TestCase>, Vec<&TestCase>) = tests
                .iter()
                .partition(|t| has_entry_point(language, &t.harness_code) || has_entry_point(language, code));
            if !dispatched.is_empty() {
                let harnesses: Vec<&str> = dispatched.iter().map(|t| t.harness_code.as_str()).collect();
                let program = assemble::dispatch(language, code, &harnesses);
                run.compiled(&program, "build", &dispatched, &mut result)?;
            }
            for (i, test) in standalone.iter().enumerate() {
                let program = assemble::single(language, code, &test.harness_code);
                run.compiled(&program, &format!("build-{i}"), &[*test], &mut result)?;
            }
        } else {
            let build = run.root.join("build");
            fs::create_dir_all(&build).map_err(setup("build directory"))?;
            for (i, test) in tests.iter().enumerate() {
                let work = run.work_dir(i)?;
                let program = assemble::single(language, code, &test.harness_code);
                fs::write(work.join(&recipe.source), program).map_err(setup("writing source"))?;
                run.test(&build, &work, 0, test, &mut result)?;
            }
        }
        drop(run_dir);
        Ok(result)
    }

    /// Executes the code block of `pair.answer` against `tests`.
    pub fn verify(
        &self,
        pair: &InstructionPair,
        tests: &[TestCase],
        limits: &ResourceLimits,
    ) -> Result<Verification, SandboxError> {
        if tests.is_empty() {
            return Err(SandboxError::InvalidTests("verify needs at least one test".into()));
        }
        let code = extract_code_block(&pair.answer).unwrap_or_else(|| pair.answer.clone());
        let result = self.execute(&code, pair.language, tests, limits)?;
        Ok(Verification {
            passed_all: result.passed_all(),
            result,
        })
    }
}

fn check_tests(tests: &[TestCase]) -> Result<(), SandboxError> {
    let mut seen = BTreeSet::new();
    for test in tests {
        if test.harness_code.trim().is_empty() {
            return Err(SandboxError::InvalidTests(format!("test {} has an empty harness", test.id)));
        }
        if !seen.insert(test.id.as_str()) {
            return Err(SandboxError::InvalidTests(format!("duplicate test id {}", test.id)));
        }
    }
    Ok(())
}

fn probe(recipe: &Recipe, temp_root: &Path) -> ToolchainStatus {
    let spec = RunSpec {
        argv: &recipe.version,
        cwd: temp_root,
        timeout: Duration::from_secs(30),
        max_output_bytes: 64 * 1024,
        isolate_network: false,
    };
    match process::run(&spec) {
        Ok(outcome) if outcome.success() => {
            let text = if outcome.stdout.is_empty() { &outcome.stderr } else { &outcome.stdout };
            let version = String::from_utf8_lossy(text)
                .lines()
                .map(str::trim)
                .find(|l| !l.is_empty())
                .map(str::to_string);
            ToolchainStatus {
                available: true,
                version,
            }
        }
        _ => ToolchainStatus {
            available: false,
            version: None,
        },
    }
}

struct Run<'a> {
    sandbox: &'a Sandbox,
    recipe: &'a Recipe,
    root: &'a Path,
    limits: &'a ResourceLimits,
}

impl Run<'_> {
    fn work_dir(&self, index: usize) -> Result<PathBuf, SandboxError> {
        let work = self.root.join(format!("t{index}"));
        fs::create_dir_all(&work).map_err(setup("work directory"))?;
        Ok(work)
    }

    fn exec(&self, argv: &[String], cwd: &Path, timeout: Duration) -> Result<RunOutcome, SandboxError> {
        let spec = RunSpec {
            argv,
            cwd,
            timeout,
            max_output_bytes: self.limits.max_output_bytes,
            isolate_network: true,
        };
        process::run(&spec).map_err(|e| SandboxError::SetupFailure(format!("cannot start {:?}: {e}", argv[0])))
    }

    fn test(
        &self,
        build: &Path,
        work: &Path,
        index: usize,
        test: &TestCase,
        result: &mut ExecutionResult,
    ) -> Result<(), SandboxError> {
        let argv = recipe::expand(&self.recipe.run, build, work, index);
        let outcome = self.exec(&argv, work, Duration::from_secs(self.limits.wall_timeout_s))?;
        let verdict = classify(&outcome, self.recipe);
        result.stdout_truncated |= outcome.output_exceeded;
        result.record(&test.id, verdict, outcome.wall.as_millis() as u64, Some(tail(&outcome.stderr)));
        Ok(())
    }

    /// Builds `program` once in `dir_name`, then runs each test against it.
    fn compiled(
        &self,
        program: &str,
        dir_name: &str,
        tests: &[&TestCase],
        result: &mut ExecutionResult,
    ) -> Result<(), SandboxError> {
        let build = self.root.join(dir_name);
        fs::create_dir_all(&build).map_err(setup("build directory"))?;
        fs::write(build.join(&self.recipe.source), program).map_err(setup("writing source"))?;
        let compile = self.recipe.compile.as_ref().expect("compiled recipe");
        let argv = recipe::expand(compile, &build, &build, 0);
        let outcome = self.exec(&argv, &build, self.sandbox.compile_timeout)?;
        if !outcome.success() {
            let mut log = outcome.stdout.clone();
            log.extend_from_slice(&outcome.stderr);
            let diagnostic = if outcome.timed_out { "compilation timed out".to_string() } else { tail(&log) };
            for test in tests {
                result.record(&test.id, Verdict::CompileError, 0, Some(diagnostic.clone()));
            }
            return Ok(());
        }
        let base = result.per_test.len();
        for (i, test) in tests.iter().enumerate() {
            let work = self.work_dir(base + i)?;
            self.test(&build, &work, i, test, result)?;
        }
        Ok(())
    }
}
