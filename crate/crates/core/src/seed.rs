//! Seed dataset synthesis from raw code snippets.
//!
//! Two directions per snippet: instruction-first (`seed_s1`: code → question
//! → answer) and response-first (`seed_s2`: code → answer → question). Every
//! candidate is rated by the LLM scorer and kept only when its mean score
//! reaches the threshold.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::gateway::{complete, Backend, CompletionRequest, GatewayError};
use crate::model::{CodeSnippet, InstructionPair, Language, Partition, ScoreCard};
use crate::prompts::{self, extract_code_block, ParseError, PromptTemplates};
use crate::util::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedConfig {
    pub snippet_token_cap: usize,
    pub score_threshold: f64,
    pub per_language_quota: BTreeMap<Language, usize>,
    pub max_new_tokens: u32,
    pub temperature: f64,
    pub rng_seed: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self {
            snippet_token_cap: 1024,
            score_threshold: 6.0,
            per_language_quota: BTreeMap::new(),
            max_new_tokens: 1024,
            temperature: 0.7,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SeedError {
    #[error("snippet {id} has ~{tokens} tokens, over the cap of {cap}")]
    SnippetTooLong { id: String, tokens: usize, cap: usize },
    #[error("could not parse {what} from generation: {source}")]
    GenerationUnparseable {
        what: &'static str,
        source: ParseError,
    },
    #[error("score unparseable: {0}")]
    ScoreUnparseable(ParseError),
    #[error("pair {0} has no score")]
    MissingScore(String),
    #[error("invalid seed config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Backend(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    InstructionFirst,
    ResponseFirst,
}


/// Generation context shared by all seed operations.
pub struct SeedSynth<'a> {
    pub backend: &'a dyn Backend,
    pub templates: &'a PromptTemplates,
    pub config: &'a SeedConfig,
}

fn parse_answer(text: &str) -> Result<String, SeedError> {
    let answer = prompts::parse_response(text).map_err(|source| SeedError::GenerationUnparseable {
        what: "response",
        source,
    })?;
    if extract_code_block(&answer).is_none() {
        return Err(SeedError::GenerationUnparseable {
            what: "response",
            source: ParseError::MissingSection("code block"),
        });
    }
    Ok(answer)
}

fn parse_question(text: &str) -> Result<String, SeedError> {
    prompts::parse_instruction(text).map_err(|source| SeedError::GenerationUnparseable {
        what: "instruction",
        source,
    })
}

impl SeedSynth<'_> {
    fn request(&self, prompt: String, labels: &[&str]) -> CompletionRequest {
        CompletionRequest::new(
            prompt,
            self.config.max_new_tokens,
            self.config.temperature,
            derive_seed(self.config.rng_seed, labels),
        )
    }

    fn check_length(&self, snippet: &CodeSnippet) -> Result<(), SeedError> {
        let tokens = crate::model::token_estimate(&snippet.source_text);
        if tokens > self.config.snippet_token_cap {
            return Err(SeedError::SnippetTooLong {
                id: snippet.id.clone(),
                tokens,
                cap: self.config.snippet_token_cap,
            });
        }
        Ok(())
    }

    /// Code → instruction → response. The result is not score-filtered.
    pub fn instruct_from_snippet(&self, snippet: &CodeSnippet) -> Result<InstructionPair, SeedError> {
        self.check_length(snippet)?;
        let lang = snippet.language;
        let prompt = self.templates.instruct_from_code(lang, &snippet.source_text);
        let question = parse_question(&complete(self.backend, &self.request(prompt, &[&snippet.id, "s1", "q"]))?)?;
        let prompt = self.templates.respond_to_instruct(lang, &question);
        let answer = parse_answer(&complete(self.backend, &self.request(prompt, &[&snippet.id, "s1", "a"]))?)?;
        Ok(InstructionPair::new(question, answer, lang, Partition::SeedS1, vec![snippet.id.clone()], 0))
    }

    /// Code → response → instruction. The result is not score-filtered.
    pub fn respond_from_snippet(&self, snippet: &CodeSnippet) -> Result<InstructionPair, SeedError> {
        self.check_length(snippet)?;
        let lang = snippet.language;
        let prompt = self.templates.response_from_code(lang, &snippet.source_text);
        let answer = parse_answer(&complete(self.backend, &self.request(prompt, &[&snippet.id, "s2", "a"]))?)?;
        let prompt = self.templates.instruct_from_response(lang, &answer);
        let question = parse_question(&complete(self.backend, &self.request(prompt, &[&snippet.id, "s2", "q"]))?)?;
        Ok(InstructionPair::new(question, answer, lang, Partition::SeedS2, vec![snippet.id.clone()], 0))
    }

    pub fn generate(&self, snippet: &CodeSnippet, direction: Direction) -> Result<InstructionPair, SeedError> {
        match direction {
            Direction::InstructionFirst => self.instruct_from_snippet(snippet),
            Direction::ResponseFirst => self.respond_from_snippet(snippet),
        }
    }

    pub fn score_pair(&self, pair: &InstructionPair) -> Result<ScoreCard, SeedError> {
        score_pair(self.backend, self.templates, pair, self.config.rng_seed)
    }
}

/// One greedy scorer call; the card's overall is the aspect mean.
pub fn score_pair(
    backend: &dyn Backend,
    templates: &PromptTemplates,
    pair: &InstructionPair,
    rng_seed: u64,
) -> Result<ScoreCard, SeedError> {
    let request = CompletionRequest::new(templates.score(pair), 256, 0.0, derive_seed(rng_seed, &[&pair.id, "score"]));
    let text = complete(backend, &request)?;
    let aspects = prompts::parse_aspects(&text).map_err(SeedError::ScoreUnparseable)?;
    Ok(ScoreCard::new(aspects))
}

/// Keeps pairs whose overall score is at least `threshold`, in input order.
pub fn filter_by_score(pairs: Vec<InstructionPair>, threshold: f64) -> Result<Vec<InstructionPair>, SeedError> {
    if let Some(p) = pairs.iter().find(|p| p.score.is_none()) {
        return Err(SeedError::MissingScore(p.id.clone()));
    }
    Ok(pairs
        .into_iter()
        .filter(|p| p.score.is_some_and(|s| s.overall >= threshold))
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageTally {
    pub quota: usize,
    pub snippets: usize,
    pub too_long: usize,
    pub seed_s1: usize,
    pub seed_s2: usize,
    pub below_threshold: usize,
    pub unparseable: usize,
    pub backend_errors: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuotaShortfall {
    pub language: Language,
    pub quota: usize,
    pub emitted: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub score_threshold: f64,
    pub per_language: BTreeMap<Language, LanguageTally>,
    pub quota_unreachable: Vec<QuotaShortfall>,
    pub total_seed_s1: usize,
    pub total_seed_s2: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedDataset {
    pub seed_s1: Vec<InstructionPair>,
    pub seed_s2: Vec<InstructionPair>,
    pub report: SeedReport,
}

impl SeedSynth<'_> {
    fn build_language(&self, language: Language, snippets: &[&CodeSnippet]) -> (Vec<InstructionPair>, Vec<InstructionPair>, LanguageTally) {
        let quota = self.config.per_language_quota.get(&language).copied().unwrap_or(0);
        let mut tally = LanguageTally {
            quota,
            snippets: snippets.len(),
            ..LanguageTally::default()
        };
        let (mut s1, mut s2) = (Vec::new(), Vec::new());
        for snippet in snippets {
            if s1.len() + s2.len() >= quota {
                break;
            }
            if self.check_length(snippet).is_err() {
                tally.too_long += 1;
                continue;
            }
            // Emission-driven alternation keeps |s1 - s2| <= 1.
            let direction = if s1.len() <= s2.len() {
                Direction::InstructionFirst
            } else {
                Direction::ResponseFirst
            };
            let scored = self
                .generate(snippet, direction)
                .and_then(|pair| self.score_pair(&pair).map(|card| pair.with_score(card)));
            match scored {
                Ok(pair) if pair.score.is_some_and(|s| s.overall >= self.config.score_threshold) => {
                    match direction {
                        Direction::InstructionFirst => s1.push(pair),
                        Direction::ResponseFirst => s2.push(pair),
                    }
                }
                Ok(_) => tally.below_threshold += 1,
                Err(SeedError::Backend(e)) => {
                    log::warn!("seed generation for {} failed: {e}", snippet.id);
                    tally.backend_errors += 1;
                }
                Err(e) => {
                    log::debug!("seed generation for {} unusable: {e}", snippet.id);
                    tally.unparseable += 1;
                }
            }
        }
        tally.seed_s1 = s1.len();
        tally.seed_s2 = s2.len();
        (s1, s2, tally)
    }

    /// Builds `seed_s1` and `seed_s2` until every language quota is met or
    /// its snippets run out. Languages run in parallel; output order is
    /// language order, then snippet order.
    pub fn build_seed_dataset(&self, snippets: &[CodeSnippet]) -> Result<SeedDataset, SeedError> {
        if snippets.is_empty() {
            return Err(SeedError::InvalidConfig("no input snippets".into()));
        }
        if self.config.snippet_token_cap == 0 {
            return Err(SeedError::InvalidConfig("snippet_token_cap must be at least 1".into()));
        }
        if self.config.per_language_quota.values().sum::<usize>() == 0 {
            return Err(SeedError::InvalidConfig("language quotas sum to zero".into()));
        }
        let mut seen = HashSet::new();
        let unique: Vec<&CodeSnippet> = snippets.iter().filter(|s| seen.insert(s.id.as_str())).collect();
        let languages: Vec<Language> = self.config.per_language_quota.keys().copied().collect();
        let results: Vec<_> = languages
            .par_iter()
            .map(|&lang| {
                let mine: Vec<&CodeSnippet> = unique.iter().copied().filter(|s| s.language == lang).collect();
                (lang, self.build_language(lang, &mine))
            })
            .collect();

        let mut dataset = SeedDataset {
            seed_s1: Vec::new(),
            seed_s2: Vec::new(),
            report: SeedReport {
                score_threshold: self.config.score_threshold,
                ..SeedReport::default()
            },
        };
        for (lang, (s1, s2, tally)) in results {
            let emitted = s1.len() + s2.len();
            if emitted < tally.quota {
                log::warn!("quota unreachable for {lang}: {emitted}/{}", tally.quota);
                dataset.report.quota_unreachable.push(QuotaShortfall {
                    language: lang,
                    quota: tally.quota,
                    emitted,
                });
            }
            dataset.seed_s1.extend(s1);
            dataset.seed_s2.extend(s2);
            dataset.report.per_language.insert(lang, tally);
        }
        dataset.report.total_seed_s1 = dataset.seed_s1.len();
        dataset.report.total_seed_s2 = dataset.seed_s2.len();
        Ok(dataset)
    }
}
