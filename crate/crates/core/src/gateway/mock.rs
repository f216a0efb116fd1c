//! Deterministic mock backend.
//!
//! The output is a pure function of `(prompt, sample_seed, greedy)` and the
//! [`MockConfig`]. Generated tasks are all of the form "return x * K + B" so
//! solutions and tests can be executed for real in every language.

use std::collections::BTreeSet;
use std::sync::LazyLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use sha2::{Digest, Sha256};

use super::{Backend, CompletionRequest, GatewayError};
use crate::model::Language;
use crate::prompts::{fence, header_value, section, sections, TaskTag};

/// How the mock scorer distributes aspect values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreProfile {
    /// Every aspect uniform in `floor..=10`.
    Uniform { floor: u8 },
    /// Aspects uniform in 5..=7, so overall scores straddle the default
    /// threshold of 6.0.
    Adversarial,
    Fixed([u8; 4]),
}

/// Which sampled (non-greedy) responses are correct. Greedy responses are
/// always correct.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PassPattern {
    Hashed { percent: u8 },
    /// Even seeds correct, odd seeds buggy.
    Alternate,
    AllPass,
    AllFail,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockConfig {
    pub score_profile: ScoreProfile,
    pub pass_pattern: PassPattern,
    /// Tasks whose outputs are replaced by unparseable text.
    pub corrupt: BTreeSet<TaskTag>,
    /// DISCUSS returns the first exemplar verbatim.
    pub echo_discuss: bool,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            score_profile: ScoreProfile::Uniform { floor: 4 },
            pass_pattern: PassPattern::Hashed { percent: 50 },
            corrupt: BTreeSet::new(),
            echo_discuss: false,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    config: MockConfig,
}

impl MockBackend {
    pub fn new(config: MockConfig) -> Self {
        Self { config }
    }
}

const WORDS: [&str; 64] = [
    "ledger", "sensor", "invoice", "playlist", "inventory", "telemetry", "route", "cache",
    "tenant", "shipment", "forecast", "payroll", "catalog", "session", "metric", "archive",
    "booking", "warehouse", "satellite", "clinic", "library", "auction", "voucher", "pipeline",
    "orbit", "harvest", "glacier", "turbine", "rental", "museum", "parcel", "quota",
    "batch", "cursor", "beacon", "journal", "lattice", "meadow", "nozzle", "oracle",
    "packet", "quarry", "relay", "signal", "tablet", "uplink", "vendor", "wallet",
    "yield", "zenith", "anchor", "bridge", "canyon", "dynamo", "ember", "falcon",
    "garnet", "harbor", "island", "jungle", "kernel", "lantern", "marble", "nectar",
];

fn op_clause(op: &str) -> &'static str {
    match op {
        "add_reasoning_steps" => "Explain the computation step by step.",
        "switch_language" => "Port the idea to another language.",
        "combine_concepts" => "Combine it with input validation.",
        "add_constraints" => "Respect an extra constraint on the result.",
        _ => "Handle larger inputs than before.",
    }
}

static PROBLEM_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?:\$?x|\$1) \* (\d+) \+ (\d+)").expect("problem regex"));

/// Reference solution for `solve(x) = x * k + b`.
pub fn solution_code(language: Language, k: i64, b: i64) -> String {
    match language {
        Language::Python => format!("def solve(x):\n    return x * {k} + {b}"),
        Language::Javascript => format!("function solve(x) {{\n  return x * {k} + {b};\n}}"),
        Language::Typescript => {
            format!("function solve(x: number): number {{\n  return x * {k} + {b};\n}}")
        }
        Language::Cpp => format!("long long solve(long long x) {{\n    return x * {k} + {b};\n}}"),
        Language::Java => format!("static long solve(long x) {{\n    return x * {k} + {b};\n}}"),
        Language::Csharp => format!("static long solve(long x)\n{{\n    return x * {k} + {b};\n}}"),
        Language::Php => format!("function solve($x) {{\n    return $x * {k} + {b};\n}}"),
        Language::Bash => format!("solve() {{\n  echo $(( $1 * {k} + {b} ))\n}}"),
    }
}

/// Assertion harness checking `solve(x) == expected`; exits non-zero on
/// mismatch.
pub fn test_harness(language: Language, x: i64, expected: i64) -> String {
    match language {
        Language::Python => format!("assert solve({x}) == {expected}"),
        Language::Javascript | Language::Typescript => format!(
            "if (solve({x}) !== {expected}) {{ throw new Error(\"assertion failed: solve({x}) !== {expected}\"); }}"
        ),
        Language::Cpp => format!(
            "if (solve({x}) != {expected}LL) {{ std::cerr << \"assertion failed\" << std::endl; return 1; }}"
        ),
        Language::Java => format!(
            "if (solve({x}) != {expected}L) {{ System.err.println(\"assertion failed\"); System.exit(1); }}"
        ),
        Language::Csharp => format!(
            "if (solve({x}) != {expected}L) {{ Console.Error.WriteLine(\"assertion failed\"); Environment.Exit(1); }}"
        ),
        Language::Php => format!(
            "if (solve({x}) !== {expected}) {{ fwrite(STDERR, \"assertion failed\\n\"); exit(1); }}"
        ),
        Language::Bash => format!(
            "[ \"$(solve {x})\" = \"{expected}\" ] || {{ echo \"assertion failed\" >&2; exit 1; }}"
        ),
    }
}

fn parse_problem(text: &str) -> Option<(i64, i64)> {
    let caps = PROBLEM_RE.captures(text)?;
    Some((caps[1].parse().ok()?, caps[2].parse().ok()?))
}

fn random_problem(rng: &mut ChaCha8Rng) -> (i64, i64) {
    (rng.random_range(2..=5), rng.random_range(0..=3))
}

fn flavor(rng: &mut ChaCha8Rng) -> String {
    let mut w = || WORDS[rng.random_range(0..WORDS.len())];
    format!(
        "The values come from a {} {} service that tracks {} {} and {} {} data, so keep the {} {} path simple.",
        w(), w(), w(), w(), w(), w(), w(), w()
    )
}

fn question_text(language: Language, (k, b): (i64, i64), extra: &str, rng: &mut ChaCha8Rng) -> String {
    let mut q = format!("Write a {language} function `solve(x)` that returns x * {k} + {b} for an integer x.");
    if !extra.is_empty() {
        q.push(' ');
        q.push_str(extra);
    }
    q.push(' ');
    q.push_str(&flavor(rng));
    q
}

fn response_text(language: Language, code: &str, rng: &mut ChaCha8Rng) -> String {
    format!(
        "The function multiplies its input and adds an offset. {}\n{}",
        flavor(rng),
        fence(language, code)
    )
}

fn aspect_lines(profile: ScoreProfile, rng: &mut ChaCha8Rng) -> String {
    let values: [u8; 4] = match profile {
        ScoreProfile::Uniform { floor } => {
            let lo = floor.clamp(1, 10);
            std::array::from_fn(|_| rng.random_range(lo..=10))
        }
        ScoreProfile::Adversarial => std::array::from_fn(|_| rng.random_range(5..=7)),
        ScoreProfile::Fixed(v) => v,
    };
    format!(
        "correctness: {}\ndifficulty: {}\nclarity: {}\ndiversity: {}\n",
        values[0], values[1], values[2], values[3]
    )
}

impl MockBackend {
    fn sampled_correct(&self, request: &CompletionRequest, rng: &mut ChaCha8Rng) -> bool {
        if request.is_greedy() {
            return true;
        }
        match self.config.pass_pattern {
            PassPattern::Hashed { percent } => rng.random_range(0..100u32) < u32::from(percent),
            PassPattern::Alternate => request.sample_seed.is_multiple_of(2),
            PassPattern::AllPass => true,
            PassPattern::AllFail => false,
        }
    }

    fn respond(&self, request: &CompletionRequest, language: Language, rng: &mut ChaCha8Rng) -> String {
        let source = section(&request.prompt, "Instruction").unwrap_or_default();
        let (k, b) = parse_problem(&source).unwrap_or_else(|| random_problem(rng));
        let correct = self.sampled_correct(request, rng);
        let code = if correct {
            solution_code(language, k, b)
        } else {
            match rng.random_range(0..3u8) {
                0 => solution_code(language, k, b + 1),
                1 => solution_code(language, k + 1, b),
                _ => solution_code(language, 0, b),
            }
        };
        format!("### Response\n{}", response_text(language, &code, rng))
    }

    fn echo(&self, prompt: &str) -> Option<String> {
        let all = sections(prompt);
        let question = all.iter().find(|(h, _)| h.ends_with("Instruction")).map(|(_, b)| b)?;
        let answer = all.iter().find(|(h, _)| h.ends_with("Response")).map(|(_, b)| b)?;
        Some(format!("### Instruction\n{question}\n### Response\n{answer}"))
    }
}

impl Backend for MockBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        let tag = TaskTag::detect(&request.prompt)
            .ok_or_else(|| GatewayError::MalformedResponse("mock: prompt carries no task tag".into()))?;
        let mut hasher = Sha256::new();
        hasher.update(request.prompt.as_bytes());
        hasher.update(request.sample_seed.to_le_bytes());
        hasher.update([u8::from(request.is_greedy())]);
        let digest: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        let stamp = hex::encode(&digest[..8]);

        if self.config.corrupt.contains(&tag) {
            return Ok(format!("<<garbled {stamp}: the model rambled without structure>>"));
        }
        let language = header_value(&request.prompt, "LANG")
            .and_then(|l| l.parse().ok())
            .unwrap_or(Language::Python);

        let body = match tag {
            TaskTag::InstructFromCode => {
                let code = section(&request.prompt, "Code").unwrap_or_default();
                let problem = parse_problem(&code).unwrap_or_else(|| random_problem(&mut rng));
                format!("### Instruction\n{}", question_text(language, problem, "", &mut rng))
            }
            TaskTag::InstructFromResponse => {
                let response = section(&request.prompt, "Response").unwrap_or_default();
                let problem = parse_problem(&response).unwrap_or_else(|| random_problem(&mut rng));
                format!("### Instruction\n{}", question_text(language, problem, "", &mut rng))
            }
            TaskTag::RespondToInstruct => self.respond(request, language, &mut rng),
            TaskTag::ResponseFromCode => {
                let (k, b) = random_problem(&mut rng);
                format!(
                    "### Response\n{}",
                    response_text(language, &solution_code(language, k, b), &mut rng)
                )
            }
            TaskTag::Score => aspect_lines(self.config.score_profile, &mut rng),
            TaskTag::Reflect => {
                let merits = format!("Clear task statement. {}", flavor(&mut rng));
                let faults = format!("Edge cases are thin. {}", flavor(&mut rng));
                format!(
                    "### Merits\n{merits}\n### Faults\n{faults}\n### Scores\n{}",
                    aspect_lines(self.config.score_profile, &mut rng)
                )
            }
            TaskTag::Discuss => {
                if self.config.echo_discuss {
                    if let Some(echo) = self.echo(&request.prompt) {
                        return Ok(echo);
                    }
                }
                let op = header_value(&request.prompt, "OP").unwrap_or("increase_difficulty");
                let clause = op_clause(op);
                let problem = random_problem(&mut rng);
                let question = question_text(language, problem, clause, &mut rng);
                let code = solution_code(language, problem.0, problem.1);
                format!(
                    "### Instruction\n{question}\n### Response\n{}",
                    response_text(language, &code, &mut rng)
                )
            }
            TaskTag::TestGen => {
                let n: usize = header_value(&request.prompt, "N_TESTS")
                    .and_then(|v| v.parse().ok())
                    .unwrap_or(3);
                let source = section(&request.prompt, "Instruction")
                    .and_then(|q| parse_problem(&q))
                    .or_else(|| section(&request.prompt, "Response").and_then(|a| parse_problem(&a)));
                let (k, b) = source.unwrap_or_else(|| random_problem(&mut rng));
                let mut out = String::new();
                for i in 0..n as i64 {
                    let x = 2 * i + 1;
                    out.push_str("### Test\n");
                    out.push_str(&fence(language, &test_harness(language, x, x * k + b)));
                    out.push('\n');
                }
                out
            }
        };
        Ok(format!("{body}\n### Sample\n{stamp}\n"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::{extract_code_block, parse_aspects, parse_instruction, parse_response, parse_test_blocks};
    use std::collections::HashSet;

    fn req(prompt: &str, seed: u64) -> CompletionRequest {
        CompletionRequest::new(prompt, 512, 0.8, seed)
    }

    #[test]
    fn score_output_parses() {
        let mock = MockBackend::default();
        let out = mock.complete(&req("[TASK:SCORE]\n[LANG:python]\n", 1)).unwrap();
        let aspects = parse_aspects(&out).unwrap();
        assert!(aspects.values().iter().all(|v| (1..=10).contains(v)));
    }

    #[test]
    fn same_prompt_and_seed_is_byte_identical() {
        let mock = MockBackend::default();
        let r = req("[TASK:INSTRUCT_FROM_CODE]\n[LANG:php]\n### Code\n```php\necho 1;\n```", 42);
        assert_eq!(mock.complete(&r).unwrap(), mock.complete(&r).unwrap());
    }

    #[test]
    fn seed_sweep_has_no_collisions() {
        let mock = MockBackend::default();
        for tag in TaskTag::ALL {
            let prompt = format!("{}\n[LANG:java]\n", tag.token());
            let outputs: HashSet<String> = (0..10_000u64)
                .map(|s| mock.complete(&req(&prompt, s)).unwrap())
                .collect();
            assert_eq!(outputs.len(), 10_000, "collision for {tag}");
        }
    }

    #[test]
    fn untagged_prompt_is_malformed() {
        let mock = MockBackend::default();
        assert!(matches!(mock.complete(&req("hello", 1)), Err(GatewayError::MalformedResponse(_))));
    }

    #[test]
    fn respond_follows_question_problem() {
        let mock = MockBackend::default();
        let prompt = "[TASK:RESPOND_TO_INSTRUCT]\n[LANG:cpp]\n### Instruction\nWrite a cpp function `solve(x)` that returns x * 4 + 2 for an integer x.";
        let greedy = CompletionRequest::new(prompt, 512, 0.0, 9);
        let out = mock.complete(&greedy).unwrap();
        let code = extract_code_block(&parse_response(&out).unwrap()).unwrap();
        assert_eq!(code, solution_code(Language::Cpp, 4, 2));
    }

    #[test]
    fn alternate_pattern_splits_evenly() {
        let mock = MockBackend::new(MockConfig {
            pass_pattern: PassPattern::Alternate,
            ..MockConfig::default()
        });
        let prompt = "[TASK:RESPOND_TO_INSTRUCT]\n[LANG:python]\n### Instruction\nreturns x * 3 + 1";
        let correct = solution_code(Language::Python, 3, 1);
        let passing = (100..228u64)
            .filter(|&s| {
                let out = mock.complete(&req(prompt, s)).unwrap();
                extract_code_block(&out).unwrap() == correct
            })
            .count();
        assert_eq!(passing, 64);
    }

    #[test]
    fn testgen_emits_requested_count() {
        let mock = MockBackend::default();
        let prompt = "[TASK:TESTGEN]\n[LANG:bash]\n[N_TESTS:3]\n### Instruction\nreturns x * 2 + 0\n### Response\nx";
        let out = mock.complete(&req(prompt, 0)).unwrap();
        let tests = parse_test_blocks(&out);
        assert_eq!(tests.len(), 3);
        assert_eq!(tests[0], test_harness(Language::Bash, 1, 2));
    }

    #[test]
    fn corrupt_and_echo_fixtures() {
        let corrupt = MockBackend::new(MockConfig {
            corrupt: [TaskTag::Score].into(),
            ..MockConfig::default()
        });
        let out = corrupt.complete(&req("[TASK:SCORE]\n", 0)).unwrap();
        assert!(parse_aspects(&out).is_err());

        let echo = MockBackend::new(MockConfig {
            echo_discuss: true,
            ..MockConfig::default()
        });
        let prompt = "[TASK:DISCUSS]\n[LANG:java]\n### Main (java) Instruction\nQ1\n### Main (java) Response\nA1\n### Aux 1 (php) Instruction\nQ2";
        let out = echo.complete(&req(prompt, 0)).unwrap();
        assert_eq!(parse_instruction(&out).unwrap(), "Q1");
        assert_eq!(parse_response(&out).unwrap(), "A1");
    }
}
