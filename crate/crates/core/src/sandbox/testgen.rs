//! LLM-written test harnesses.

use crate::gateway::{complete, Backend, CompletionRequest, GatewayError};
use crate::model::{InstructionPair, Language};
use crate::prompts::{extract_code_block, sections, PromptTemplates};
use crate::util::derive_seed;

use super::TestCase;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TestGenError {
    #[error("n_tests must be positive")]
    ZeroTests,
    #[error("answer of {0} has no code block")]
    NoCodeBlock(String),
    #[error("no usable test harness in the completion ({dropped} dropped)")]
    NoTestsParsed { dropped: usize },
    #[error(transparent)]
    Backend(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedTests {
    pub tests: Vec<TestCase>,
    /// Harnesses rejected by the syntax pre-check or missing a code block.
    pub dropped: usize,
}

fn comment_starts(language: Language, chars: &[char], i: usize) -> Option<bool> {
    // Some(true): line comment, Some(false): block comment.
    let c = chars[i];
    let next = chars.get(i + 1).copied();
    let prev_is_space = i == 0 || chars[i - 1].is_whitespace();
    match language {
        Language::Python | Language::Bash if c == '#' && prev_is_space => Some(true),
        Language::Php if c == '#' => Some(true),
        Language::Python | Language::Bash => None,
        _ if c == '/' && next == Some('/') => Some(true),
        _ if c == '/' && next == Some('*') => Some(false),
        _ => None,
    }
}

/// Cheap structural check: brackets balance and string literals close,
/// ignoring comments.
pub fn syntax_precheck(language: Language, code: &str) -> bool {
    if code.trim().is_empty() {
        return false;
    }
    let chars: Vec<char> = code.chars().collect();
    let mut stack = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match comment_starts(language, &chars, i) {
            Some(true) => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
                continue;
            }
            Some(false) => {
                i += 2;
                while i + 1 < chars.len() && !(chars[i] == '*' && chars[i + 1] == '/') {
                    i += 1;
                }
                if i + 1 >= chars.len() {
                    return false;
                }
                i += 2;
                continue;
            }
            None => {}
        }
        let quote = matches!(c, '"' | '\'') || (c == '`' && matches!(language, Language::Javascript | Language::Typescript | Language::Bash));
        // Java/C#/C++ char literals and shell words like don't: only '"' is
        // reliable enough to demand closure on one line for those.
        if quote {
            let single_line = c != '`';
            i += 1;
            let mut closed = false;
            while i < chars.len() {
                match chars[i] {
                    '\\' if !(language == Language::Bash && c == '\'') => i += 1,
                    '\n' if single_line && language != Language::Bash && language != Language::Python && language != Language::Php => {
                        return false
                    }
                    ch if ch == c => {
                        closed = true;
                        break;
                    }
                    _ => {}
                }
                i += 1;
            }
            if !closed {
                return false;
            }
            i += 1;
            continue;
        }
        match c {
            '(' | '[' | '{' => stack.push(c),
            ')' | ']' | '}' => {
                let open = match c {
                    ')' => '(',
                    ']' => '[',
                    _ => '{',
                };
                if stack.pop() != Some(open) {
                    return false;
                }
            }
            _ => {}
        }
        i += 1;
    }
    stack.is_empty()
}

/// One greedy TESTGEN call for `pair`; at most `n_tests` harnesses survive.
pub fn generate_tests(
    pair: &InstructionPair,
    n_tests: usize,
    backend: &dyn Backend,
    templates: &PromptTemplates,
    rng_seed: u64,
) -> Result<GeneratedTests, TestGenError> {
    if n_tests == 0 {
        return Err(TestGenError::ZeroTests);
    }
    if extract_code_block(&pair.answer).is_none() {
        return Err(TestGenError::NoCodeBlock(pair.id.clone()));
    }
    let request = CompletionRequest::new(
        templates.testgen(pair, n_tests),
        2048,
        0.0,
        derive_seed(rng_seed, &[&pair.id, "testgen"]),
    );
    let text = complete(backend, &request)?;
    let mut tests = Vec::new();
    let mut dropped = 0;
    let blocks = sections(&text)
        .into_iter()
        .filter(|(h, _)| h.eq_ignore_ascii_case("Test") || h.to_ascii_lowercase().starts_with("test "));
    for (_, body) in blocks {
        match extract_code_block(&body) {
            Some(code) if syntax_precheck(pair.language, &code) => {
                if tests.len() < n_tests {
                    tests.push(TestCase::new(format!("t{:03}", tests.len()), code));
                }
            }
            _ => dropped += 1,
        }
    }
    if tests.is_empty() {
        return Err(TestGenError::NoTestsParsed { dropped });
    }
    Ok(GeneratedTests { tests, dropped })
}
