//! pass@k scoring of a completion backend on benchmark problem files.
//!
//! Accepted JSONL layouts, detected per line:
//! - HumanEval: `task_id`, `prompt`, `test`, `entry_point`
//! - MBPP: `task_id`, `text`, `test_list` (optional `test_setup_code`)
//! - MultiPL-E: `name`, `language`, `prompt`, `tests`, `stop_tokens`
//! - native: `task_id`, `language`, `prompt`, `tests` as `{id, harness_code}`
//!   objects, optional `stop_markers`

use std::collections::BTreeMap;
use std::path::Path;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::gateway::{sample_n, Backend, CompletionRequest};
use crate::model::Language;
use crate::prompts::{extract_code_block, PromptTemplates};
use crate::sandbox::{ResourceLimits, Sandbox, TestCase};
use crate::util::derive_seed;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("pass@k domain error: n={n}, c={c}, k={k}")]
pub struct DomainError {
    pub n: u64,
    pub c: u64,
    pub k: u64,
}

/// Unbiased pass@k estimator `1 - C(n-c, k) / C(n, k)`, evaluated as a
/// running product so large `n` never overflows.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64, DomainError> {
    if c > n || k == 0 || k > n {
        return Err(DomainError { n, c, k });
    }
    if n - c < k {
        return Ok(1.0);
    }
    let mut miss = 1.0f64;
    for i in (n - c + 1)..=n {
        miss *= 1.0 - k as f64 / i as f64;
    }
    Ok(1.0 - miss)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkProblem {
    pub task_id: String,
    pub language: Language,
    pub prompt: String,
    pub tests: Vec<TestCase>,
    pub stop_markers: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{path}:{line}: {reason}")]
    BadProblem { path: String, line: usize, reason: String },
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid eval options: {0}")]
    InvalidOptions(String),
    #[error("no problems to evaluate")]
    NoProblems,
}

/// Accepts full names plus the short codes MultiPL-E uses.
pub fn language_alias(name: &str) -> Option<Language> {
    let lower = name.trim().to_ascii_lowercase();
    let canonical = match lower.as_str() {
        "py" | "python3" => "python",
        "js" | "node" => "javascript",
        "ts" => "typescript",
        "c++" | "cc" => "cpp",
        "cs" | "c#" => "csharp",
        "sh" | "shell" => "bash",
        other => other,
    };
    canonical.parse().ok()
}

fn default_stops(language: Language) -> Vec<String> {
    let stops: &[&str] = match language {
        Language::Python => &["\ndef ", "\nclass ", "\nif __name__", "\nprint(", "\nassert "],
        _ => &["\n}\n"],
    };
    stops.iter().map(|s| s.to_string()).collect()
}

fn str_field<'a>(v: &'a Value, key: &str) -> Option<&'a str> {
    v.get(key).and_then(Value::as_str)
}

fn strings(v: Option<&Value>) -> Option<Vec<String>> {
    v?.as_array()?.iter().map(|s| s.as_str().map(str::to_string)).collect()
}

/// Parses one problem record in any supported layout.
pub fn parse_problem(record: &Value, default_language: Language) -> Result<BenchmarkProblem, String> {
    let language = match str_field(record, "language") {
        Some(name) => language_alias(name).ok_or_else(|| format!("unknown language `{name}`"))?,
        None => default_language,
    };
    let task_id = str_field(record, "task_id")
        .or_else(|| str_field(record, "name"))
        .map(str::to_string)
        .or_else(|| record.get("task_id").filter(|v| v.is_number()).map(Value::to_string))
        .ok_or("missing task_id/name")?;

    let problem = if let (Some(prompt), Some(test), Some(entry)) =
        (str_field(record, "prompt"), str_field(record, "test"), str_field(record, "entry_point"))
    {
        BenchmarkProblem {
            task_id,
            language,
            prompt: prompt.to_string(),
            tests: vec![TestCase::new("check", format!("{test}\n\ncheck({entry})\n"))],
            stop_markers: default_stops(language),
        }
    } else if let (Some(text), Some(asserts)) = (str_field(record, "text"), strings(record.get("test_list"))) {
        let setup = str_field(record, "test_setup_code").unwrap_or_default();
        let tests = asserts
            .iter()
            .enumerate()
            .map(|(i, a)| TestCase::new(format!("t{i}"), format!("{setup}\n{a}").trim().to_string()))
            .collect();
        let prompt = format!("{text}\nYour code should pass these tests:\n{}\n", asserts.join("\n"));
        BenchmarkProblem {
            task_id,
            language,
            prompt,
            tests,
            stop_markers: default_stops(language),
        }
    } else {
        let prompt = str_field(record, "prompt").ok_or("missing prompt")?.to_string();
        let tests = match record.get("tests") {
            Some(Value::String(harness)) => vec![TestCase::new("tests", harness.clone())],
            Some(list @ Value::Array(_)) => serde_json::from_value(list.clone()).map_err(|e| format!("tests: {e}"))?,
            _ => return Err("missing tests".into()),
        };
        let stop_markers = strings(record.get("stop_tokens"))
            .or_else(|| strings(record.get("stop_markers")))
            .unwrap_or_else(|| default_stops(language));
        BenchmarkProblem {
            task_id,
            language,
            prompt,
            tests,
            stop_markers,
        }
    };
    if problem.tests.is_empty() || problem.tests.iter().any(|t| t.harness_code.trim().is_empty()) {
        return Err("problem has no tests".into());
    }
    Ok(problem)
}

/// Reads a JSONL problem file; records without a `language` field get
/// `default_language`.
pub fn load_problems(path: &Path, default_language: Language) -> Result<Vec<BenchmarkProblem>, EvalError> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: display.clone(),
        source,
    })?;
    let mut problems = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| EvalError::BadProblem {
            path: display.clone(),
            line: idx + 1,
            reason,
        };
        let record: Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        problems.push(parse_problem(&record, default_language).map_err(bad)?);
    }
    Ok(problems)
}

/// Cuts `completion` at the earliest stop marker.
pub fn truncate_at_stops(completion: &str, stops: &[String]) -> String {
    let cut = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| completion.find(s.as_str()))
        .min()
        .unwrap_or(completion.len());
    completion[..cut].to_string()
}

/// Program to execute for one completion: the fenced code when the model
/// answered in markdown, else prompt plus truncated continuation.
pub fn assemble_program(problem: &BenchmarkProblem, completion: &str) -> String {
    match extract_code_block(completion) {
        Some(code) => code,
        None => format!("{}{}", problem.prompt, truncate_at_stops(completion, &problem.stop_markers)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub n: usize,
    pub k_values: Vec<u64>,
    pub greedy: bool,
    pub temperature: f64,
    pub max_new_tokens: u32,
    /// Prepended to every problem prompt, e.g. few-shot examples.
    pub prompt_prefix: String,
    pub limits: ResourceLimits,
    pub rng_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n: 1,
            k_values: vec![1],
            greedy: true,
            temperature: 0.0,
            max_new_tokens: 1024,
            prompt_prefix: String::new(),
            limits: ResourceLimits::default(),
            rng_seed: 0,
        }
    }
}

impl EvalOptions {
    fn validate(&self) -> Result<(), EvalError> {
        if self.greedy && (self.n != 1 || self.temperature != 0.0 || self.k_values != [1]) {
            return Err(EvalError::InvalidOptions("greedy mode needs n = 1, k = [1] and temperature 0".into()));
        }
        if !self.greedy && self.temperature <= 0.0 {
            return Err(EvalError::InvalidOptions("sampling needs temperature > 0".into()));
        }
        if self.n == 0 || self.k_values.is_empty() {
            return Err(EvalError::InvalidOptions("n and k_values must be non-empty".into()));
        }
        if let Some(k) = self.k_values.iter().find(|k| **k == 0 || **k > self.n as u64) {
            return Err(EvalError::InvalidOptions(format!("k = {k} outside 1..={}", self.n)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemResult {
    pub language: Language,
    pub n: usize,
    pub c: usize,
    pub pass_at_k: BTreeMap<u64, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_problem: BTreeMap<String, ProblemResult>,
    /// Mean pass@k per language over problems that were evaluated.
    pub aggregate: BTreeMap<Language, BTreeMap<u64, f64>>,
    pub failed_problems: usize,
    pub config: EvalOptions,
}

fn evaluate_one(
    problem: &BenchmarkProblem,
    backend: &dyn Backend,
    sandbox: &Sandbox,
    templates: &PromptTemplates,
    options: &EvalOptions,
) -> Result<(usize, usize), String> {
    if !sandbox.is_available(problem.language) {
        return Err(format!("no toolchain for {}", problem.language));
    }
    let instruction = format!("{}{}", options.prompt_prefix, problem.prompt);
    let request = CompletionRequest::new(
        templates.respond_to_instruct(problem.language, &instruction),
        options.max_new_tokens,
        if options.greedy { 0.0 } else { options.temperature },
        derive_seed(options.rng_seed, &[&problem.task_id, "eval"]),
    );
    let completions = sample_n(backend, &request, options.n).map_err(|e| e.to_string())?;
    let mut correct = 0;
    for completion in &completions {
        let program = assemble_program(problem, completion);
        let result = sandbox
            .execute(&program, problem.language, &problem.tests, &options.limits)
            .map_err(|e| e.to_string())?;
        correct += usize::from(result.passed_all());
    }
    Ok((completions.len(), correct))
}

/// Scores every problem. Problems that cannot be evaluated are recorded
/// with `n = 0` and a reason instead of aborting the run.
pub fn run_benchmark(
    problems: &[BenchmarkProblem],
    backend: &dyn Backend,
    sandbox: &Sandbox,
    templates: &PromptTemplates,
    options: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    options.validate()?;
    if problems.is_empty() {
        return Err(EvalError::NoProblems);
    }
    let results: Vec<(String, ProblemResult)> = problems
        .par_iter()
        .map(|problem| {
            let result = match evaluate_one(problem, backend, sandbox, templates, options) {
                Ok((n, c)) => ProblemResult {
                    language: problem.language,
                    n,
                    c,
                    pass_at_k: options
                        .k_values
                        .iter()
                        .map(|&k| (k, pass_at_k(n as u64, c as u64, k).expect("validated k")))
                        .collect(),
                    error: None,
                },
                Err(reason) => ProblemResult {
                    language: problem.language,
                    n: 0,
                    c: 0,
                    pass_at_k: BTreeMap::new(),
                    error: Some(reason),
                },
            };
            (problem.task_id.clone(), result)
        })
        .collect();

    let mut per_problem = BTreeMap::new();
    let mut sums: BTreeMap<Language, (usize, BTreeMap<u64, f64>)> = BTreeMap::new();
    let mut failed_problems = 0;
    for (task_id, result) in results {
        if result.error.is_some() {
            failed_problems += 1;
        } else {
            let (count, totals) = sums.entry(result.language).or_default();
            *count += 1;
            for (k, v) in &result.pass_at_k {
                *totals.entry(*k).or_default() += v;
            }
        }
        per_problem.insert(task_id, result);
    }
    let aggregate = sums
        .into_iter()
        .map(|(lang, (count, totals))| (lang, totals.into_iter().map(|(k, s)| (k, s / count as f64)).collect()))
        .collect();
    info!("evaluated {} problem(s), {failed_problems} failed", per_problem.len());
    Ok(EvalReport {
        per_problem,
        aggregate,
        failed_problems,
        config: options.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{solution_code, test_harness, MockBackend, MockConfig, PassPattern};
    use proptest::prelude::*;
    use serde_json::json;
    use std::sync::LazyLock;

    static SANDBOX: LazyLock<Sandbox> = LazyLock::new(|| Sandbox::new(Default::default()).unwrap());

    #[test]
    fn estimator_examples() {
        assert_eq!(pass_at_k(1, 1, 1).unwrap(), 1.0);
        assert!((pass_at_k(2, 1, 1).unwrap() - 0.5).abs() < 1e-15);
        for k in [1, 10, 100, 200] {
            assert_eq!(pass_at_k(200, 0, k).unwrap(), 0.0);
        }
        assert_eq!(pass_at_k(10, 8, 3).unwrap(), 1.0);
        assert!(pass_at_k(3, 4, 1).is_err());
        assert!(pass_at_k(3, 1, 0).is_err());
        assert!(pass_at_k(3, 1, 4).is_err());
        assert!(pass_at_k(100_000, 1, 50_000).unwrap().is_finite());
    }

    proptest! {
        #[test]
        fn estimator_is_monotone(n in 1u64..60, c in 0u64..60, k in 1u64..60) {
            prop_assume!(c < n && k < n);
            let base = pass_at_k(n, c, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&base));
            prop_assert!(pass_at_k(n, c + 1, k).unwrap() >= base - 1e-12);
            prop_assert!(pass_at_k(n, c, k + 1).unwrap() >= base - 1e-12);
        }
    }

    #[test]
    fn parses_each_layout() {
        let he = json!({"task_id": "HumanEval/0", "prompt": "def f(x):\n", "test": "def check(c):\n    assert c(1) == 1", "entry_point": "f"});
        let p = parse_problem(&he, Language::Python).unwrap();
        assert_eq!(p.tests[0].harness_code, "def check(c):\n    assert c(1) == 1\n\ncheck(f)\n");

        let mbpp = json!({"task_id": 11, "text": "Write f.", "test_list": ["assert f(1) == 1", "assert f(2) == 2"], "test_setup_code": ""});
        let p = parse_problem(&mbpp, Language::Python).unwrap();
        assert_eq!(p.task_id, "11");
        assert_eq!(p.tests.len(), 2);
        assert!(p.prompt.contains("assert f(2) == 2"));

        let multipl = json!({"name": "HumanEval_0_x", "language": "sh", "prompt": "#!/bin/bash\n", "tests": "candidate() { f \"$@\"; }", "stop_tokens": ["\n}"]});
        let p = parse_problem(&multipl, Language::Python).unwrap();
        assert_eq!(p.language, Language::Bash);
        assert_eq!(p.stop_markers, vec!["\n}"]);

        let native = json!({"task_id": "n/1", "language": "cpp", "prompt": "p", "tests": [{"id": "a", "harness_code": "return 0;"}]});
        assert_eq!(parse_problem(&native, Language::Python).unwrap().tests[0].id, "a");
        assert!(parse_problem(&json!({"task_id": "x", "prompt": "p", "tests": []}), Language::Python).is_err());
    }

    #[test]
    fn truncation_uses_earliest_marker() {
        let stops = vec!["\ndef ".to_string(), "\nprint(".to_string()];
        assert_eq!(truncate_at_stops("  return 1\nprint(2)\ndef g", &stops), "  return 1");
        assert_eq!(truncate_at_stops("  return 1", &stops), "  return 1");
    }

    fn problem(language: Language, k: i64, b: i64) -> BenchmarkProblem {
        BenchmarkProblem {
            task_id: format!("{language}/{k}/{b}"),
            language,
            prompt: format!("Write a {language} function `solve(x)` that returns x * {k} + {b} for an integer x."),
            tests: (0..3).map(|x| TestCase::new(format!("t{x}"), test_harness(language, x, x * k + b))).collect(),
            stop_markers: vec![],
        }
    }

    #[test]
    fn greedy_mock_solves_known_problems() {
        let report = run_benchmark(
            &[problem(Language::Python, 3, 1), problem(Language::Bash, 2, 0)],
            &MockBackend::default(),
            &SANDBOX,
            &PromptTemplates::default(),
            &EvalOptions::default(),
        )
        .unwrap();
        for result in report.per_problem.values() {
            assert_eq!((result.n, result.c), (1, 1));
            assert_eq!(result.pass_at_k.keys().copied().collect::<Vec<_>>(), vec![1]);
        }
        assert_eq!(report.aggregate[&Language::Python][&1], 1.0);
    }

    #[test]
    fn unsolvable_problem_scores_zero_and_aggregates_are_means() {
        let mut impossible = problem(Language::Python, 2, 1);
        impossible.task_id = "impossible".into();
        impossible.tests = vec![TestCase::new("t", "assert solve(1) == 999")];
        let options = EvalOptions {
            n: 8,
            k_values: vec![1, 4],
            greedy: false,
            temperature: 0.8,
            ..EvalOptions::default()
        };
        let mock = MockBackend::new(MockConfig {
            pass_pattern: PassPattern::Alternate,
            ..MockConfig::default()
        });
        let report = run_benchmark(
            &[impossible, problem(Language::Python, 4, 2)],
            &mock,
            &SANDBOX,
            &PromptTemplates::default(),
            &options,
        )
        .unwrap();
        assert_eq!(report.per_problem["impossible"].pass_at_k[&4], 0.0);
        let solvable = &report.per_problem["python/4/2"];
        assert_eq!(solvable.c, 4);
        for k in [1, 4] {
            let mean = report.per_problem.values().map(|r| r.pass_at_k[&k]).sum::<f64>() / 2.0;
            assert!((report.aggregate[&Language::Python][&k] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_inconsistent_options() {
        let bad = EvalOptions {
            n: 4,
            ..EvalOptions::default()
        };
        let p = [problem(Language::Python, 2, 1)];
        let res = run_benchmark(&p, &MockBackend::default(), &SANDBOX, &PromptTemplates::default(), &bad);
        assert!(matches!(res, Err(EvalError::InvalidOptions(_))));
    }

    #[test]
    fn fenced_completion_replaces_prompt() {
        let p = problem(Language::Python, 2, 1);
        let program = assemble_program(&p, &format!("```python\n{}\n```", solution_code(Language::Python, 2, 1)));
        assert_eq!(program, solution_code(Language::Python, 2, 1));
    }
}
