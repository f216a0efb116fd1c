//! Shared record types and their JSONL schema.
//!
//! Every record is an immutable value. Field order in the structs is the key
//! order on disk, so serialize → parse → serialize is byte-stable.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::util::content_id;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Python,
    Java,
    Cpp,
    Csharp,
    Typescript,
    Javascript,
    Php,
    Bash,
}

impl Language {
    pub const ALL: [Language; 8] = [
        Language::Python,
        Language::Java,
        Language::Cpp,
        Language::Csharp,
        Language::Typescript,
        Language::Javascript,
        Language::Php,
        Language::Bash,
    ];

    /// The seven training languages of the original corpus (no javascript).
    pub const CORPUS: [Language; 7] = [
        Language::Python,
        Language::Java,
        Language::Cpp,
        Language::Csharp,
        Language::Typescript,
        Language::Php,
        Language::Bash,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Language::Python => "python",
            Language::Java => "java",
            Language::Cpp => "cpp",
            Language::Csharp => "csharp",
            Language::Typescript => "typescript",
            Language::Javascript => "javascript",
            Language::Php => "php",
            Language::Bash => "bash",
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown language tag `{0}`")]
pub struct UnknownLanguage(pub String);

impl FromStr for Language {
    type Err = UnknownLanguage;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Language::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| UnknownLanguage(s.to_string()))
    }
}

/// Approximate token count: `ceil(bytes / 4)`.
pub fn token_estimate(text: &str) -> usize {
    text.len().div_ceil(4)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSnippet {
    pub id: String,
    pub language: Language,
    pub source_text: String,
    pub approx_tokens: usize,
}

impl CodeSnippet {
    /// Builds a snippet with a content-derived id.
    pub fn new(language: Language, source_text: impl Into<String>) -> Self {
        let source_text = source_text.into();
        Self {
            id: content_id("snip", &[language.as_str(), &source_text]),
            language,
            approx_tokens: token_estimate(&source_text),
            source_text,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Aspects {
    pub correctness: u8,
    pub difficulty: u8,
    pub clarity: u8,
    pub diversity: u8,
}

impl Aspects {
    pub const NAMES: [&'static str; 4] = ["correctness", "difficulty", "clarity", "diversity"];

    pub fn values(&self) -> [u8; 4] {
        [self.correctness, self.difficulty, self.clarity, self.diversity]
    }

    pub fn from_values(v: [u8; 4]) -> Self {
        Self {
            correctness: v[0],
            difficulty: v[1],
            clarity: v[2],
            diversity: v[3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreCard {
    pub aspects: Aspects,
    pub overall: f64,
}

impl ScoreCard {
    pub fn new(aspects: Aspects) -> Self {
        let sum: u32 = aspects.values().iter().map(|&v| u32::from(v)).sum();
        Self {
            aspects,
            overall: f64::from(sum) / 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    SeedS1,
    SeedS2,
    AgentS3,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::SeedS1 => "seed_s1",
            Partition::SeedS2 => "seed_s2",
            Partition::AgentS3 => "agent_s3",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionPair {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub language: Language,
    pub partition: Partition,
    pub score: Option<ScoreCard>,
    pub lineage: Vec<String>,
    pub created_round: u64,
}

impl InstructionPair {
    /// Builds an unscored pair whose id is derived from its content.
    pub fn new(
        question: impl Into<String>,
        answer: impl Into<String>,
        language: Language,
        partition: Partition,
        lineage: Vec<String>,
        created_round: u64,
    ) -> Self {
        let question = question.into();
        let answer = answer.into();
        let lineage_key = lineage.join(",");
        let round = created_round.to_string();
        let id = content_id(
            "pair",
            &[
                partition.as_str(),
                language.as_str(),
                &question,
                &answer,
                &lineage_key,
                &round,
            ],
        );
        Self {
            id,
            question,
            answer,
            language,
            partition,
            score: None,
            lineage,
            created_round,
        }
    }

    pub fn with_score(mut self, score: ScoreCard) -> Self {
        self.score = Some(score);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Timeout,
    RuntimeError,
    CompileError,
}

/// Compact per-test verdict record carried inside a [`PreferencePair`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictSummary {
    pub total: usize,
    pub passed: usize,
    pub verdicts: BTreeMap<String, Verdict>,
}

impl VerdictSummary {
    pub fn from_verdicts(verdicts: BTreeMap<String, Verdict>) -> Self {
        Self {
            total: verdicts.len(),
            passed: verdicts.values().filter(|v| **v == Verdict::Pass).count(),
            verdicts,
        }
    }

    pub fn passed_all(&self) -> bool {
        self.total > 0 && self.passed == self.total
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub query: String,
    pub language: Language,
    pub chosen: String,
    pub rejected: String,
    pub chosen_verdict: VerdictSummary,
    pub rejected_verdict: VerdictSummary,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid record: field `{field}`: {reason}")]
pub struct InvalidRecord {
    pub field: &'static str,
    pub reason: String,
}

impl InvalidRecord {
    fn new(field: &'static str, reason: impl Into<String>) -> Self {
        Self {
            field,
            reason: reason.into(),
        }
    }
}

pub trait Validate {
    fn validate(&self) -> Result<(), InvalidRecord>;
}

/// Returns the record unchanged iff every field invariant holds.
pub fn validate_record<T: Validate>(record: T) -> Result<T, InvalidRecord> {
    record.validate()?;
    Ok(record)
}

impl Validate for CodeSnippet {
    fn validate(&self) -> Result<(), InvalidRecord> {
        if self.id.is_empty() {
            return Err(InvalidRecord::new("id", "must be non-empty"));
        }
        if self.source_text.is_empty() {
            return Err(InvalidRecord::new("source_text", "must be non-empty"));
        }
        let expected = token_estimate(&self.source_text);
        if self.approx_tokens != expected {
            return Err(InvalidRecord::new(
                "approx_tokens",
                format!("is {} but token estimate is {expected}", self.approx_tokens),
            ));
        }
        Ok(())
    }
}

impl Validate for ScoreCard {
    fn validate(&self) -> Result<(), InvalidRecord> {
        for (name, value) in Aspects::NAMES.iter().zip(self.aspects.values()) {
            if !(1..=10).contains(&value) {
                return Err(InvalidRecord::new(
                    "score",
                    format!("aspect {name}={value} outside [1,10]"),
                ));
            }
        }
        let mean = ScoreCard::new(self.aspects).overall;
        if self.overall != mean {
            return Err(InvalidRecord::new(
                "score",
                format!("overall {} is not the aspect mean {mean}", self.overall),
            ));
        }
        Ok(())
    }
}

impl Validate for InstructionPair {
    fn validate(&self) -> Result<(), InvalidRecord> {
        if self.id.is_empty() {
            return Err(InvalidRecord::new("id", "must be non-empty"));
        }
        if self.question.trim().is_empty() {
            return Err(InvalidRecord::new("question", "must be non-empty"));
        }
        if self.answer.trim().is_empty() {
            return Err(InvalidRecord::new("answer", "must be non-empty"));
        }
        if let Some(score) = &self.score {
            score.validate()?;
        }
        match self.partition {
            Partition::AgentS3 => {
                if self.lineage.is_empty() {
                    return Err(InvalidRecord::new(
                        "lineage",
                        "agent_s3 pairs must trace to at least one parent",
                    ));
                }
            }
            Partition::SeedS1 | Partition::SeedS2 => {
                if self.lineage.len() != 1 {
                    return Err(InvalidRecord::new(
                        "lineage",
                        format!("seed pairs need exactly one snippet id, got {}", self.lineage.len()),
                    ));
                }
                if self.lineage[0].is_empty() || self.lineage[0].starts_with("pair-") {
                    return Err(InvalidRecord::new(
                        "lineage",
                        "seed lineage must name a snippet, not a pair",
                    ));
                }
            }
        }
        Ok(())
    }
}

impl Validate for PreferencePair {
    fn validate(&self) -> Result<(), InvalidRecord> {
        if self.query.trim().is_empty() {
            return Err(InvalidRecord::new("query", "must be non-empty"));
        }
        if self.chosen.trim().is_empty() {
            return Err(InvalidRecord::new("chosen", "must be non-empty"));
        }
        if self.rejected.trim().is_empty() {
            return Err(InvalidRecord::new("rejected", "must be non-empty"));
        }
        if !self.chosen_verdict.passed_all() {
            return Err(InvalidRecord::new(
                "chosen_verdict",
                "chosen response must pass every test",
            ));
        }
        if self.rejected_verdict.total == 0
            || self.rejected_verdict.passed >= self.rejected_verdict.total
        {
            return Err(InvalidRecord::new(
                "rejected_verdict",
                "rejected response must fail at least one test",
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seed_pair() -> InstructionPair {
        InstructionPair::new(
            "Write add",
            "def add(a, b): return a + b",
            Language::Python,
            Partition::SeedS1,
            vec!["snippetX".into()],
            0,
        )
    }

    #[test]
    fn token_estimate_examples() {
        assert_eq!(token_estimate(""), 0);
        assert_eq!(token_estimate("abcd"), 1);
        assert_eq!(token_estimate(&"a".repeat(4097)), 1025);
        assert_eq!(token_estimate("abcde"), 2);
    }

    #[test]
    fn language_parse_is_closed() {
        assert_eq!("csharp".parse::<Language>().unwrap(), Language::Csharp);
        assert!("rust".parse::<Language>().is_err());
        assert!("Python".parse::<Language>().is_err());
        let err = serde_json::from_str::<Language>("\"kotlin\"");
        assert!(err.is_err());
    }

    #[test]
    fn empty_answer_is_rejected() {
        let mut pair = seed_pair();
        pair.answer.clear();
        let err = validate_record(pair).unwrap_err();
        assert_eq!(err.field, "answer");
    }

    #[test]
    fn seed_pair_with_single_snippet_lineage_is_accepted() {
        assert!(validate_record(seed_pair()).is_ok());
    }

    #[test]
    fn agent_pair_without_lineage_is_rejected() {
        let pair = InstructionPair::new("q", "a", Language::Java, Partition::AgentS3, vec![], 1);
        assert_eq!(validate_record(pair).unwrap_err().field, "lineage");
    }

    #[test]
    fn seed_lineage_must_be_a_snippet() {
        let mut pair = seed_pair();
        pair.lineage = vec!["pair-0011223344556677".into()];
        assert_eq!(validate_record(pair).unwrap_err().field, "lineage");
        let mut pair = seed_pair();
        pair.lineage.push("snippetY".into());
        assert_eq!(validate_record(pair).unwrap_err().field, "lineage");
    }

    #[test]
    fn score_card_mean_and_range() {
        let card = ScoreCard::new(Aspects::from_values([10, 1, 1, 1]));
        assert_eq!(card.overall, 3.25);
        assert!(card.validate().is_ok());
        let bad = ScoreCard {
            aspects: Aspects::from_values([11, 5, 5, 5]),
            overall: 6.5,
        };
        assert_eq!(bad.validate().unwrap_err().field, "score");
        let skewed = ScoreCard {
            aspects: Aspects::from_values([7, 7, 7, 7]),
            overall: 8.0,
        };
        assert!(skewed.validate().is_err());
    }

    #[test]
    fn snippet_token_count_must_match() {
        let mut snippet = CodeSnippet::new(Language::Bash, "echo hi");
        assert!(snippet.validate().is_ok());
        snippet.approx_tokens += 1;
        assert_eq!(snippet.validate().unwrap_err().field, "approx_tokens");
    }

    #[test]
    fn preference_pair_requires_contrast() {
        let pass = VerdictSummary::from_verdicts(BTreeMap::from([("t0".into(), Verdict::Pass)]));
        let fail = VerdictSummary::from_verdicts(BTreeMap::from([("t0".into(), Verdict::Fail)]));
        let good = PreferencePair {
            query: "q".into(),
            language: Language::Python,
            chosen: "a".into(),
            rejected: "b".into(),
            chosen_verdict: pass.clone(),
            rejected_verdict: fail.clone(),
        };
        assert!(good.validate().is_ok());
        let mut swapped = good.clone();
        swapped.chosen_verdict = fail;
        assert_eq!(swapped.validate().unwrap_err().field, "chosen_verdict");
        let mut both_pass = good;
        both_pass.rejected_verdict = pass;
        assert_eq!(both_pass.validate().unwrap_err().field, "rejected_verdict");
    }

    fn arb_language() -> impl Strategy<Value = Language> {
        prop::sample::select(Language::ALL.to_vec())
    }

    fn arb_partition() -> impl Strategy<Value = Partition> {
        prop::sample::select(vec![Partition::SeedS1, Partition::SeedS2, Partition::AgentS3])
    }

    fn arb_score() -> impl Strategy<Value = Option<ScoreCard>> {
        prop::option::of(prop::array::uniform4(0u8..=11).prop_map(|v| ScoreCard::new(Aspects::from_values(v))))
    }

    prop_compose! {
        fn arb_pair()(
            question in "[ a-z]{0,12}",
            answer in "[ a-z\\n\"]{0,12}",
            language in arb_language(),
            partition in arb_partition(),
            score in arb_score(),
            lineage in prop::collection::vec(prop::sample::select(vec!["", "snip-1", "snip-2", "pair-9"]), 0..3),
            created_round in 0u64..5,
        ) -> InstructionPair {
            let mut pair = InstructionPair::new(question, answer, language, partition, lineage.into_iter().map(String::from).collect(), created_round);
            pair.score = score;
            pair
        }
    }

    fn oracle_valid(pair: &InstructionPair) -> bool {
        let score_ok = pair.score.is_none_or(|s| s.aspects.values().iter().all(|v| (1..=10).contains(v)));
        let lineage_ok = match pair.partition {
            Partition::AgentS3 => !pair.lineage.is_empty(),
            _ => pair.lineage.len() == 1 && !pair.lineage[0].is_empty() && !pair.lineage[0].starts_with("pair-"),
        };
        !pair.question.trim().is_empty() && !pair.answer.trim().is_empty() && score_ok && lineage_ok
    }

    proptest! {
        #[test]
        fn validate_matches_field_invariants(pair in arb_pair()) {
            prop_assert_eq!(pair.validate().is_ok(), oracle_valid(&pair));
        }

        #[test]
        fn serialization_round_trip_is_byte_identical(pair in arb_pair()) {
            let first = serde_json::to_string(&pair).unwrap();
            let parsed: InstructionPair = serde_json::from_str(&first).unwrap();
            prop_assert_eq!(&parsed, &pair);
            prop_assert_eq!(serde_json::to_string(&parsed).unwrap(), first);
        }

        #[test]
        fn token_estimate_is_monotone(a in ".{0,64}", b in ".{0,64}") {
            let joined = format!("{a}{b}");
            prop_assert!(token_estimate(&joined) >= token_estimate(&a));
            prop_assert_eq!(token_estimate(&a), a.len().div_ceil(4));
        }
    }

    #[test]
    fn schema_keys_match_field_names() {
        let mut pair = seed_pair();
        pair.score = Some(ScoreCard::new(Aspects::from_values([7, 7, 7, 7])));
        let line = serde_json::to_string(&pair).unwrap();
        assert!(line.starts_with("{\"id\":\"pair-"));
        assert!(line.contains("\"language\":\"python\",\"partition\":\"seed_s1\""));
        assert!(line.contains("\"aspects\":{\"correctness\":7,\"difficulty\":7,\"clarity\":7,\"diversity\":7},\"overall\":7.0"));
    }
}
