//! Prompt construction and completion parsing.
//!
//! Every prompt starts with a fixed header (`[TASK:...]`, `[LANG:...]`) and
//! ends with `### Name` data sections. Only the free-text instruction in the
//! middle comes from [`PromptTemplates`] and may be edited by users; the
//! header and sections are the machine contract the mock backend and the
//! parsers rely on.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;

use crate::model::{Aspects, InstructionPair, Language};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TaskTag {
    InstructFromCode,
    RespondToInstruct,
    ResponseFromCode,
    InstructFromResponse,
    Score,
    Reflect,
    Discuss,
    TestGen,
}

impl TaskTag {
    pub const ALL: [TaskTag; 8] = [
        TaskTag::InstructFromCode,
        TaskTag::RespondToInstruct,
        TaskTag::ResponseFromCode,
        TaskTag::InstructFromResponse,
        TaskTag::Score,
        TaskTag::Reflect,
        TaskTag::Discuss,
        TaskTag::TestGen,
    ];

    pub fn token(self) -> &'static str {
        match self {
            TaskTag::InstructFromCode => "[TASK:INSTRUCT_FROM_CODE]",
            TaskTag::RespondToInstruct => "[TASK:RESPOND_TO_INSTRUCT]",
            TaskTag::ResponseFromCode => "[TASK:RESPONSE_FROM_CODE]",
            TaskTag::InstructFromResponse => "[TASK:INSTRUCT_FROM_RESPONSE]",
            TaskTag::Score => "[TASK:SCORE]",
            TaskTag::Reflect => "[TASK:REFLECT]",
            TaskTag::Discuss => "[TASK:DISCUSS]",
            TaskTag::TestGen => "[TASK:TESTGEN]",
        }
    }

    fn key(self) -> &'static str {
        match self {
            TaskTag::InstructFromCode => "instruct_from_code",
            TaskTag::RespondToInstruct => "respond_to_instruct",
            TaskTag::ResponseFromCode => "response_from_code",
            TaskTag::InstructFromResponse => "instruct_from_response",
            TaskTag::Score => "score",
            TaskTag::Reflect => "reflect",
            TaskTag::Discuss => "discuss",
            TaskTag::TestGen => "testgen",
        }
    }

    /// Finds the first task tag present in `prompt`.
    pub fn detect(prompt: &str) -> Option<TaskTag> {
        TaskTag::ALL.into_iter().find(|t| prompt.contains(t.token()))
    }
}

impl fmt::Display for TaskTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// Editable instruction wording, one entry per task.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplates {
    texts: BTreeMap<&'static str, String>,
}

const DEFAULT_TEMPLATES: &str = include_str!("../config/prompts.txt");

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("reading prompt templates: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown prompt template section `{0}`")]
    UnknownSection(String),
    #[error("prompt template `{0}` is missing")]
    Missing(&'static str),
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATES).expect("bundled prompt templates parse")
    }
}

impl PromptTemplates {
    /// Parses `[[name]]`-delimited template text. Lines starting with `#`
    /// before the first section are comments.
    pub fn parse(text: &str) -> Result<Self, TemplateError> {
        let mut texts = BTreeMap::new();
        let mut current: Option<(&'static str, String)> = None;
        for line in text.lines() {
            let trimmed = line.trim();
            if let Some(name) = trimmed.strip_prefix("[[").and_then(|s| s.strip_suffix("]]")) {
                if let Some((key, body)) = current.take() {
                    texts.insert(key, body.trim().to_string());
                }
                let key = TaskTag::ALL
                    .into_iter()
                    .map(TaskTag::key)
                    .find(|k| *k == name)
                    .ok_or_else(|| TemplateError::UnknownSection(name.to_string()))?;
                current = Some((key, String::new()));
            } else if let Some((_, body)) = current.as_mut() {
                body.push_str(line);
                body.push('\n');
            }
        }
        if let Some((key, body)) = current.take() {
            texts.insert(key, body.trim().to_string());
        }
        for tag in TaskTag::ALL {
            if !texts.contains_key(tag.key()) {
                return Err(TemplateError::Missing(tag.key()));
            }
        }
        Ok(Self { texts })
    }

    pub fn load(path: &Path) -> Result<Self, TemplateError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn text(&self, tag: TaskTag, language: Language) -> String {
        self.texts[tag.key()].replace("{language}", language.as_str())
    }

    fn header(&self, tag: TaskTag, language: Language) -> String {
        format!(
            "{}\n[LANG:{}]\n{}\n",
            tag.token(),
            language.as_str(),
            self.text(tag, language)
        )
    }

    pub fn instruct_from_code(&self, language: Language, code: &str) -> String {
        let mut p = self.header(TaskTag::InstructFromCode, language);
        push_section(&mut p, "Code", &fence(language, code));
        p
    }

    pub fn respond_to_instruct(&self, language: Language, question: &str) -> String {
        let mut p = self.header(TaskTag::RespondToInstruct, language);
        push_section(&mut p, "Instruction", question);
        p
    }

    pub fn response_from_code(&self, language: Language, code: &str) -> String {
        let mut p = self.header(TaskTag::ResponseFromCode, language);
        push_section(&mut p, "Code", &fence(language, code));
        p
    }

    pub fn instruct_from_response(&self, language: Language, response: &str) -> String {
        let mut p = self.header(TaskTag::InstructFromResponse, language);
        push_section(&mut p, "Response", response);
        p
    }

    pub fn score(&self, pair: &InstructionPair) -> String {
        let mut p = self.header(TaskTag::Score, pair.language);
        push_section(&mut p, "Instruction", &pair.question);
        push_section(&mut p, "Response", &pair.answer);
        p
    }

    pub fn reflect(&self, task_definition: &str, pair: &InstructionPair) -> String {
        let mut p = self.header(TaskTag::Reflect, pair.language);
        push_section(&mut p, "Profile", task_definition);
        push_section(&mut p, "Instruction", &pair.question);
        push_section(&mut p, "Response", &pair.answer);
        p
    }

    pub fn discuss(&self, request: &DiscussPrompt<'_>) -> String {
        let mut p = self.header(TaskTag::Discuss, request.target);
        p.push_str(&format!("[OP:{}]\n", request.op_name));
        push_section(&mut p, "Profile", request.profile);
        push_section(&mut p, "Operation", request.op_description);
        for exemplar in &request.exemplars {
            let label = format!("{} ({})", exemplar.label, exemplar.language);
            push_section(&mut p, &format!("{label} Instruction"), exemplar.question);
            push_section(&mut p, &format!("{label} Response"), exemplar.answer);
        }
        if let Some((merits, faults)) = request.reflection {
            push_section(&mut p, "Previous Merits", merits);
            push_section(&mut p, "Previous Faults", faults);
        }
        p
    }

    pub fn testgen(&self, pair: &InstructionPair, n_tests: usize) -> String {
        let mut p = self.header(TaskTag::TestGen, pair.language);
        p.push_str(&format!("[N_TESTS:{n_tests}]\n"));
        push_section(&mut p, "Instruction", &pair.question);
        push_section(&mut p, "Response", &pair.answer);
        p
    }
}

pub struct Exemplar<'a> {
    pub label: String,
    pub language: Language,
    pub question: &'a str,
    pub answer: &'a str,
}

pub struct DiscussPrompt<'a> {
    pub target: Language,
    pub op_name: &'a str,
    pub op_description: &'a str,
    pub profile: &'a str,
    pub exemplars: Vec<Exemplar<'a>>,
    pub reflection: Option<(&'a str, &'a str)>,
}

fn push_section(prompt: &mut String, name: &str, body: &str) {
    prompt.push_str("\n### ");
    prompt.push_str(name);
    prompt.push('\n');
    prompt.push_str(body.trim_end());
    prompt.push('\n');
}

pub fn fence(language: Language, code: &str) -> String {
    format!("```{}\n{}\n```", language.as_str(), code.trim_end_matches('\n'))
}

/// Splits text into `(header, body)` pairs on lines starting with `### `.
/// Text before the first header is dropped. Lines inside code fences never
/// start a section.
pub fn sections(text: &str) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = Vec::new();
    let mut in_fence = false;
    for line in text.lines() {
        if !in_fence {
            if let Some(name) = line.strip_prefix("### ") {
                out.push((name.trim().to_string(), String::new()));
                continue;
            }
        }
        if line.trim_start().starts_with("```") {
            in_fence = !in_fence;
        }
        if let Some((_, body)) = out.last_mut() {
            body.push_str(line);
            body.push('\n');
        }
    }
    for (_, body) in &mut out {
        *body = body.trim().to_string();
    }
    out
}

/// Body of the first section whose header equals `name` (ASCII
/// case-insensitive), if non-empty.
pub fn section(text: &str, name: &str) -> Option<String> {
    sections(text)
        .into_iter()
        .find(|(h, _)| h.eq_ignore_ascii_case(name))
        .map(|(_, b)| b)
        .filter(|b| !b.is_empty())
}

/// Content of the first fenced code block.
pub fn extract_code_block(text: &str) -> Option<String> {
    let mut lines = text.lines();
    lines.by_ref().find(|l| l.trim_start().starts_with("```"))?;
    let mut body = Vec::new();
    for line in lines {
        if line.trim_start().starts_with("```") {
            return Some(body.join("\n"));
        }
        body.push(line);
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("missing `### {0}` section")]
    MissingSection(&'static str),
    #[error("missing score for aspect `{0}`")]
    MissingAspect(&'static str),
    #[error("aspect `{name}` has value {value} outside [1,10]")]
    AspectOutOfRange { name: &'static str, value: u64 },
}

static ASPECT_RES: LazyLock<Vec<Regex>> = LazyLock::new(|| {
    Aspects::NAMES
        .iter()
        .map(|name| {
            Regex::new(&format!(r"(?im)^\s*[-*]?\s*{name}\s*[:=]\s*(\d+)")).expect("aspect regex")
        })
        .collect()
});

/// Parses the four aspect scores from a scorer completion.
pub fn parse_aspects(text: &str) -> Result<Aspects, ParseError> {
    let mut values = [0u8; 4];
    for (i, re) in ASPECT_RES.iter().enumerate() {
        let name = Aspects::NAMES[i];
        let caps = re.captures(text).ok_or(ParseError::MissingAspect(name))?;
        let value: u64 = caps[1].parse().unwrap_or(u64::MAX);
        if !(1..=10).contains(&value) {
            return Err(ParseError::AspectOutOfRange { name, value });
        }
        values[i] = value as u8;
    }
    Ok(Aspects::from_values(values))
}

pub fn parse_instruction(text: &str) -> Result<String, ParseError> {
    section(text, "Instruction").ok_or(ParseError::MissingSection("Instruction"))
}

pub fn parse_response(text: &str) -> Result<String, ParseError> {
    section(text, "Response").ok_or(ParseError::MissingSection("Response"))
}

/// Parses `(merits, faults, aspects)` from a reflection completion.
pub fn parse_reflection(text: &str) -> Result<(String, String, Aspects), ParseError> {
    let merits = section(text, "Merits").ok_or(ParseError::MissingSection("Merits"))?;
    let faults = section(text, "Faults").ok_or(ParseError::MissingSection("Faults"))?;
    let aspects = parse_aspects(text)?;
    Ok((merits, faults, aspects))
}

/// Code blocks of every `### Test` section, in order.
pub fn parse_test_blocks(text: &str) -> Vec<String> {
    sections(text)
        .into_iter()
        .filter(|(h, _)| h.eq_ignore_ascii_case("Test") || h.to_ascii_lowercase().starts_with("test "))
        .filter_map(|(_, body)| extract_code_block(&body))
        .collect()
}

/// Extracts a `[KEY:value]` header line value.
pub fn header_value<'a>(prompt: &'a str, key: &str) -> Option<&'a str> {
    let open = format!("[{key}:");
    prompt.lines().find_map(|line| {
        line.trim()
            .strip_prefix(open.as_str())
            .and_then(|rest| rest.strip_suffix(']'))
    })
}
