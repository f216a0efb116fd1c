//! Cross-lingual discussion between language agents.
//!
//! A discussion shows the model one memory exemplar per participant and asks
//! for a new instruction pair in a target language. In the centralized
//! topology one main agent leads and keeps the result; in the parallel
//! topology all participants are equal and all of them remember it.
//! [`run_generation`] repeats this over rounds of mixed-language groups and
//! collects the pairs that clear the score bar into the agent partition.

use std::collections::{BTreeMap, HashSet};

use log::{info, warn};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{jaccard, shingles, Agent, AgentError, EvolutionOp, InsertOutcome};
use crate::gateway::{complete, Backend, CompletionRequest, GatewayError};
use crate::model::{InstructionPair, Language, Partition};
use crate::prompts::{self, extract_code_block, DiscussPrompt, Exemplar, ParseError, PromptTemplates};
use crate::seed::{self, QuotaShortfall, SeedError};
use crate::util::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Centralized,
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetLanguagePolicy {
    MainAgentLanguage,
    RandomParticipant,
    /// Any supported language, including ones no participant speaks.
    RandomAny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscussionConfig {
    pub topology: Topology,
    pub group_size: usize,
    pub rounds: usize,
    pub target_language_policy: TargetLanguagePolicy,
    pub rng_seed: u64,
    /// Per-language emission caps. An empty map means no caps.
    pub quota_s3: BTreeMap<Language, usize>,
    pub score_threshold: f64,
    /// Word 3-gram Jaccard at or above which a candidate duplicates an
    /// already emitted pair.
    pub dedup_threshold: f64,
    pub max_new_tokens: u32,
    pub temperature: f64,
}

impl Default for DiscussionConfig {
    fn default() -> Self {
        Self {
            topology: Topology::Centralized,
            group_size: 3,
            rounds: 1,
            target_language_policy: TargetLanguagePolicy::RandomParticipant,
            rng_seed: 0,
            quota_s3: BTreeMap::new(),
            score_threshold: 6.0,
            dedup_threshold: 0.85,
            max_new_tokens: 1024,
            temperature: 0.7,
        }
    }
}

impl DiscussionConfig {
    pub fn validate(&self) -> Result<(), DiscussionError> {
        if self.group_size < 2 {
            return Err(DiscussionError::InvalidConfig("group_size must be at least 2".into()));
        }
        if !(0.0..=10.0).contains(&self.score_threshold) {
            return Err(DiscussionError::InvalidConfig("score_threshold outside [0, 10]".into()));
        }
        if !(self.dedup_threshold > 0.0 && self.dedup_threshold <= 1.0) {
            return Err(DiscussionError::InvalidConfig("dedup_threshold outside (0, 1]".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(DiscussionError::InvalidConfig("temperature must be non-negative".into()));
        }
        Ok(())
    }

    fn quota_for(&self, language: Language) -> Option<usize> {
        if self.quota_s3.is_empty() {
            None
        } else {
            Some(self.quota_s3.get(&language).copied().unwrap_or(0))
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiscussionError {
    #[error("invalid discussion config: {0}")]
    InvalidConfig(String),
    #[error("a discussion needs {expected} participants, got {got}")]
    GroupSize { expected: usize, got: usize },
    #[error("pool of {pool} agents is smaller than the group size {group_size}")]
    PoolTooSmall { pool: usize, group_size: usize },
    #[error("agent {0} has an empty memory")]
    EmptyMemory(String),
    #[error("agent {0} has no operations")]
    NoOperations(String),
    #[error("could not parse discussion output: {0}")]
    GenerationUnparseable(ParseError),
    #[error("score unparseable: {0}")]
    ScoreUnparseable(ParseError),
    #[error(transparent)]
    Backend(#[from] GatewayError),
}

impl DiscussionError {
    fn kind(&self) -> &'static str {
        match self {
            DiscussionError::InvalidConfig(_) => "invalid_config",
            DiscussionError::GroupSize { .. } => "group_size",
            DiscussionError::PoolTooSmall { .. } => "pool_too_small",
            DiscussionError::EmptyMemory(_) => "empty_memory",
            DiscussionError::NoOperations(_) => "no_operations",
            DiscussionError::GenerationUnparseable(_) => "generation_unparseable",
            DiscussionError::ScoreUnparseable(_) => "score_unparseable",
            DiscussionError::Backend(_) => "backend",
        }
    }
}

impl From<SeedError> for DiscussionError {
    fn from(e: SeedError) -> Self {
        match e {
            SeedError::ScoreUnparseable(p) => DiscussionError::ScoreUnparseable(p),
            SeedError::Backend(b) => DiscussionError::Backend(b),
            other => DiscussionError::InvalidConfig(other.to_string()),
        }
    }
}

/// Why a discussion's pair did or did not enter the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscussionStatus {
    /// Not yet considered for emission.
    Candidate,
    Emitted,
    BelowThreshold,
    DuplicateOfEmitted,
    QuotaFull,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscussionTranscript {
    pub round: usize,
    pub topology: Topology,
    pub participant_ids: Vec<String>,
    /// Memory pair shown for each participant, aligned with `participant_ids`.
    pub sampled_exemplars: Vec<String>,
    pub chosen_op: EvolutionOp,
    pub target_language: Language,
    pub raw_completion: String,
    pub candidate_pair_id: Option<String>,
    pub score: Option<f64>,
    /// Memory insert result per participant that received the pair.
    pub memory_outcomes: BTreeMap<String, String>,
    /// Some receiving memory rejected the pair as a near-duplicate.
    pub flagged_duplicate: bool,
    pub reflected_by: Option<String>,
    pub status: DiscussionStatus,
    pub error: Option<String>,
    /// Set only when the pair was emitted.
    pub result_pair_id: Option<String>,
}

/// Backend and prompts shared by every discussion in a run.
pub struct DiscussionContext<'a> {
    pub backend: &'a dyn Backend,
    pub templates: &'a PromptTemplates,
    pub config: &'a DiscussionConfig,
}

struct Discussion {
    transcript: DiscussionTranscript,
    pair: Option<InstructionPair>,
    error: Option<DiscussionError>,
}

fn outcome_label(outcome: &InsertOutcome) -> String {
    match outcome {
        InsertOutcome::Accepted => "accepted".into(),
        InsertOutcome::RejectedDuplicate => "rejected_duplicate".into(),
        InsertOutcome::AcceptedWithEviction(id) => format!("accepted_evicting:{id}"),
    }
}

fn pick_target(
    policy: TargetLanguagePolicy,
    lead: Language,
    languages: &[Language],
    rng: &mut ChaCha8Rng,
) -> Language {
    match policy {
        TargetLanguagePolicy::MainAgentLanguage => lead,
        TargetLanguagePolicy::RandomParticipant => *languages.choose(rng).expect("non-empty group"),
        TargetLanguagePolicy::RandomAny => *Language::ALL.choose(rng).expect("non-empty enum"),
    }
}

/// Runs one discussion. `order` lists participant indexes in the order the
/// prompt presents them; `order[0]` leads. Never returns early: failures
/// are recorded on the transcript.
fn discuss(
    ctx: &DiscussionContext<'_>,
    agents: &mut [&mut Agent],
    order: &[usize],
    topology: Topology,
    op: EvolutionOp,
    round: usize,
    rng_seed: u64,
) -> Discussion {
    let ids: Vec<String> = agents.iter().map(|a| a.id().to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(rng_seed, &["discuss"]));
    let lead = order[0];
    let order_langs: Vec<Language> = order.iter().map(|&i| agents[i].language()).collect();
    let target = pick_target(ctx.config.target_language_policy, agents[lead].language(), &order_langs, &mut rng);
    let reflector = match topology {
        Topology::Centralized => lead,
        Topology::Parallel => order[rng.random_range(0..order.len())],
    };
    let mut transcript = DiscussionTranscript {
        round,
        topology,
        participant_ids: ids.clone(),
        sampled_exemplars: Vec::new(),
        chosen_op: op,
        target_language: target,
        raw_completion: String::new(),
        candidate_pair_id: None,
        score: None,
        memory_outcomes: BTreeMap::new(),
        flagged_duplicate: false,
        reflected_by: None,
        status: DiscussionStatus::Failed,
        error: None,
        result_pair_id: None,
    };
    let fail = |mut transcript: DiscussionTranscript, error: DiscussionError| {
        transcript.error = Some(error.to_string());
        Discussion {
            transcript,
            pair: None,
            error: Some(error),
        }
    };

    let mut exemplars = Vec::with_capacity(agents.len());
    for agent in agents.iter() {
        match agent.memory.sample(derive_seed(rng_seed, &[agent.id(), "sample"])) {
            Ok(p) => exemplars.push(p.clone()),
            Err(_) => return fail(transcript, DiscussionError::EmptyMemory(agent.id().to_string())),
        }
    }
    transcript.sampled_exemplars = exemplars.iter().map(|p| p.id.clone()).collect();

    let reflection_source = match topology {
        Topology::Centralized => agents[lead].latest_reflection(),
        Topology::Parallel => order.iter().find_map(|&i| agents[i].latest_reflection()),
    };
    let prompt = ctx.templates.discuss(&DiscussPrompt {
        target,
        op_name: op.as_str(),
        op_description: op.description(),
        profile: &agents[lead].profile.task_definition,
        exemplars: order
            .iter()
            .enumerate()
            .map(|(pos, &i)| Exemplar {
                label: match (topology, pos) {
                    (Topology::Centralized, 0) => "Main".to_string(),
                    (Topology::Centralized, p) => format!("Aux {p}"),
                    (Topology::Parallel, p) => format!("Agent {}", p + 1),
                },
                language: agents[i].language(),
                question: &exemplars[i].question,
                answer: &exemplars[i].answer,
            })
            .collect(),
        reflection: reflection_source.map(|r| (r.merits.as_str(), r.faults.as_str())),
    });
    let request = CompletionRequest::new(
        prompt,
        ctx.config.max_new_tokens,
        ctx.config.temperature,
        derive_seed(rng_seed, &["completion"]),
    );
    let raw = match complete(ctx.backend, &request) {
        Ok(raw) => raw,
        Err(e) => return fail(transcript, e.into()),
    };
    transcript.raw_completion = raw.clone();

    let parsed = prompts::parse_instruction(&raw).and_then(|q| {
        let a = prompts::parse_response(&raw)?;
        extract_code_block(&a).ok_or(ParseError::MissingSection("code block"))?;
        Ok((q, a))
    });
    let (question, answer) = match parsed {
        Ok(qa) => qa,
        Err(e) => return fail(transcript, DiscussionError::GenerationUnparseable(e)),
    };
    let lineage = order.iter().map(|&i| exemplars[i].id.clone()).collect();
    let pair = InstructionPair::new(question, answer, target, Partition::AgentS3, lineage, round as u64);
    transcript.candidate_pair_id = Some(pair.id.clone());

    let card = match seed::score_pair(ctx.backend, ctx.templates, &pair, rng_seed) {
        Ok(card) => card,
        Err(e) => return fail(transcript, e.into()),
    };
    let pair = pair.with_score(card);
    transcript.score = Some(card.overall);

    let receivers: Vec<usize> = match topology {
        Topology::Centralized => vec![lead],
        Topology::Parallel => order.to_vec(),
    };
    for &i in &receivers {
        let outcome = agents[i].memory.insert(pair.clone(), card);
        transcript.flagged_duplicate |= outcome == InsertOutcome::RejectedDuplicate;
        transcript.memory_outcomes.insert(ids[i].clone(), outcome_label(&outcome));
    }

    match agents[reflector].reflect(&pair, ctx.backend, ctx.templates, rng_seed) {
        Ok(_) => transcript.reflected_by = Some(ids[reflector].clone()),
        Err(AgentError::Backend(e)) => return fail(transcript, e.into()),
        Err(e) => warn!("reflection by {} failed: {e}", ids[reflector]),
    }
    transcript.status = DiscussionStatus::Candidate;
    Discussion {
        transcript,
        pair: Some(pair),
        error: None,
    }
}

fn finish(d: Discussion) -> Result<(InstructionPair, DiscussionTranscript), DiscussionError> {
    match (d.pair, d.error) {
        (Some(pair), None) => Ok((pair, d.transcript)),
        (_, Some(e)) => Err(e),
        (None, None) => unreachable!("discussion without pair or error"),
    }
}

/// The main agent leads; auxiliaries contribute context. Only the main
/// agent's memory receives the result, and the main agent reflects on it.
pub fn centralized_discuss(
    ctx: &DiscussionContext<'_>,
    main: &mut Agent,
    auxiliaries: &mut [Agent],
    op: EvolutionOp,
    round: usize,
    rng_seed: u64,
) -> Result<(InstructionPair, DiscussionTranscript), DiscussionError> {
    let expected = ctx.config.group_size;
    if auxiliaries.len() + 1 != expected {
        return Err(DiscussionError::GroupSize {
            expected,
            got: auxiliaries.len() + 1,
        });
    }
    let mut agents: Vec<&mut Agent> = std::iter::once(main).chain(auxiliaries.iter_mut()).collect();
    let order: Vec<usize> = (0..agents.len()).collect();
    finish(discuss(ctx, &mut agents, &order, Topology::Centralized, op, round, rng_seed))
}

/// Indexes sorted by agent id: the order-independent presentation order.
fn canonical_order(agents: &[&mut Agent]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..agents.len()).collect();
    order.sort_by(|&a, &b| agents[a].id().cmp(agents[b].id()));
    order
}

/// All agents are peers. Every memory receives the result and one
/// participant, chosen by the seed, reflects. The outcome does not depend
/// on the order of `agents`.
pub fn parallel_discuss(
    ctx: &DiscussionContext<'_>,
    agents: &mut [Agent],
    op: EvolutionOp,
    round: usize,
    rng_seed: u64,
) -> Result<(InstructionPair, DiscussionTranscript), DiscussionError> {
    let expected = ctx.config.group_size;
    if agents.len() != expected {
        return Err(DiscussionError::GroupSize {
            expected,
            got: agents.len(),
        });
    }
    let mut refs: Vec<&mut Agent> = agents.iter_mut().collect();
    let order = canonical_order(&refs);
    finish(discuss(ctx, &mut refs, &order, Topology::Parallel, op, round, rng_seed))
}

/// Group assignment for one round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grouping {
    pub groups: Vec<Vec<usize>>,
    /// Groups that stayed monolingual after resampling and skip the round.
    pub sat_out: Vec<Vec<usize>>,
    pub resampled: usize,
}

fn distinct_languages(group: &[usize], languages: &[Language]) -> usize {
    group.iter().map(|&i| languages[i]).collect::<HashSet<_>>().len()
}

/// Shuffles the pool, cuts it into consecutive groups of `d` (the remainder
/// waits this round) and repairs each monolingual group once by swapping one
/// member for an agent of another language, taken from the waiting agents or
/// from a group that stays mixed without it. Groups that cannot be repaired
/// sit the round out, so every group that runs is mixed whenever the pool
/// has two or more languages.
pub fn make_groups(languages: &[Language], d: usize, rng_seed: u64) -> Grouping {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut idx: Vec<usize> = (0..languages.len()).collect();
    idx.shuffle(&mut rng);
    let n_groups = idx.len().checked_div(d).unwrap_or(0);
    let mut waiting: Vec<usize> = idx[n_groups * d..].to_vec();
    let mut groups: Vec<Vec<usize>> = idx[..n_groups * d].chunks(d).map(<[usize]>::to_vec).collect();
    let pool_languages = languages.iter().collect::<HashSet<_>>().len();
    let mut resampled = 0;
    let mut keep = vec![true; groups.len()];

    if pool_languages >= 2 {
        for g in 0..groups.len() {
            if distinct_languages(&groups[g], languages) >= 2 {
                continue;
            }
            let lang = languages[groups[g][0]];
            // (source group or None for waiting, position in source)
            let mut candidates: Vec<(Option<usize>, usize)> = waiting
                .iter()
                .enumerate()
                .filter(|(_, &a)| languages[a] != lang)
                .map(|(p, _)| (None, p))
                .collect();
            for (h, other) in groups.iter().enumerate() {
                if h == g {
                    continue;
                }
                for (p, &a) in other.iter().enumerate() {
                    if languages[a] == lang {
                        continue;
                    }
                    let mut after = other.clone();
                    after[p] = groups[g][0];
                    if distinct_languages(&after, languages) >= 2 {
                        candidates.push((Some(h), p));
                    }
                }
            }
            let Some(&(source, pos)) = candidates.choose(&mut rng) else {
                keep[g] = false;
                continue;
            };
            let slot = rng.random_range(0..d);
            let outgoing = groups[g][slot];
            match source {
                None => {
                    groups[g][slot] = waiting[pos];
                    waiting[pos] = outgoing;
                }
                Some(h) => {
                    groups[g][slot] = groups[h][pos];
                    groups[h][pos] = outgoing;
                }
            }
            resampled += 1;
            if distinct_languages(&groups[g], languages) < 2 {
                keep[g] = false;
            }
        }
    }
    let mut kept = Vec::new();
    let mut sat_out = Vec::new();
    for (group, k) in groups.into_iter().zip(keep) {
        if k || pool_languages < 2 {
            kept.push(group);
        } else {
            sat_out.push(group);
        }
    }
    Grouping {
        groups: kept,
        sat_out,
        resampled,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageCount {
    pub quota: Option<usize>,
    pub emitted: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct S3Report {
    pub rounds_run: usize,
    pub discussions: usize,
    pub emitted: usize,
    pub per_language: BTreeMap<Language, LanguageCount>,
    pub op_histogram: BTreeMap<EvolutionOp, usize>,
    pub emitted_op_histogram: BTreeMap<EvolutionOp, usize>,
    pub below_threshold: usize,
    /// Rejected by a receiving memory as a near-duplicate.
    pub flagged_duplicates: usize,
    /// Flagged pairs that were emitted anyway.
    pub flagged_emitted: usize,
    /// Near-duplicates of an already emitted pair.
    pub global_duplicates: usize,
    pub quota_full: usize,
    pub errors: BTreeMap<String, usize>,
    pub groups_resampled: usize,
    pub groups_sat_out: usize,
    pub quota_unreachable: Vec<QuotaShortfall>,
}

/// Resumable state of a generation run, saved after every round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationState {
    pub next_round: usize,
    pub pool: Vec<Agent>,
    pub pairs: Vec<InstructionPair>,
    pub transcripts: Vec<DiscussionTranscript>,
    pub report: S3Report,
}

impl GenerationState {
    pub fn new(pool: Vec<Agent>) -> Self {
        Self {
            next_round: 0,
            pool,
            pairs: Vec::new(),
            transcripts: Vec::new(),
            report: S3Report::default(),
        }
    }
}

fn quotas_met(config: &DiscussionConfig, report: &S3Report) -> bool {
    !config.quota_s3.is_empty()
        && config
            .quota_s3
            .iter()
            .all(|(lang, q)| report.per_language.get(lang).map_or(0, |c| c.emitted) >= *q)
}

/// Runs discussion rounds from `state.next_round` until every quota is met
/// or `config.rounds` rounds have run. `on_round` sees the state after each
/// completed round (for checkpointing); an error from it aborts the run.
pub fn run_generation<E>(
    ctx: &DiscussionContext<'_>,
    mut state: GenerationState,
    mut on_round: impl FnMut(&GenerationState) -> Result<(), E>,
) -> Result<GenerationState, RunError<E>> {
    let config = ctx.config;
    config.validate().map_err(RunError::Discussion)?;
    if state.pool.len() < config.group_size {
        return Err(RunError::Discussion(DiscussionError::PoolTooSmall {
            pool: state.pool.len(),
            group_size: config.group_size,
        }));
    }
    for (lang, quota) in &config.quota_s3 {
        state.report.per_language.entry(*lang).or_default().quota = Some(*quota);
    }
    let mut emitted_shingles: Vec<HashSet<String>> =
        state.pairs.iter().map(|p| shingles(&format!("{} {}", p.question, p.answer).to_lowercase())).collect();

    while state.next_round < config.rounds && !quotas_met(config, &state.report) {
        let round = state.next_round;
        let languages: Vec<Language> = state.pool.iter().map(Agent::language).collect();
        let grouping = make_groups(&languages, config.group_size, derive_seed(config.rng_seed, &["round", &round.to_string(), "groups"]));
        state.report.groups_resampled += grouping.resampled;
        state.report.groups_sat_out += grouping.sat_out.len();

        let mut slots: Vec<Option<Agent>> = std::mem::take(&mut state.pool).into_iter().map(Some).collect();
        let mut groups: Vec<(Vec<usize>, Vec<Agent>)> = grouping
            .groups
            .into_iter()
            .map(|g| {
                let members = g.iter().map(|&i| slots[i].take().expect("agent in one group")).collect();
                (g, members)
            })
            .collect();

        let results: Vec<(Discussion, EvolutionOp)> = groups
            .par_iter_mut()
            .map(|(_, members)| run_group(ctx, members, round))
            .collect();

        for (indexes, members) in groups {
            for (i, agent) in indexes.into_iter().zip(members) {
                slots[i] = Some(agent);
            }
        }
        state.pool = slots.into_iter().map(|a| a.expect("every agent returned")).collect();

        for (discussion, op) in results {
            state.report.discussions += 1;
            *state.report.op_histogram.entry(op).or_default() += 1;
            let mut transcript = discussion.transcript;
            if let Some(e) = &discussion.error {
                *state.report.errors.entry(e.kind().to_string()).or_default() += 1;
                state.transcripts.push(transcript);
                continue;
            }
            let pair = discussion.pair.expect("successful discussion has a pair");
            let score = pair.score.map_or(0.0, |s| s.overall);
            if transcript.flagged_duplicate {
                state.report.flagged_duplicates += 1;
            }
            let grams = shingles(&format!("{} {}", pair.question, pair.answer).to_lowercase());
            let count = state.report.per_language.entry(pair.language).or_default();
            transcript.status = if score < config.score_threshold {
                state.report.below_threshold += 1;
                DiscussionStatus::BelowThreshold
            } else if emitted_shingles.iter().any(|e| jaccard(e, &grams) >= config.dedup_threshold) {
                state.report.global_duplicates += 1;
                DiscussionStatus::DuplicateOfEmitted
            } else if config.quota_for(pair.language).is_some_and(|q| count.emitted >= q) {
                state.report.quota_full += 1;
                DiscussionStatus::QuotaFull
            } else {
                count.emitted += 1;
                state.report.emitted += 1;
                *state.report.emitted_op_histogram.entry(op).or_default() += 1;
                if transcript.flagged_duplicate {
                    state.report.flagged_emitted += 1;
                }
                emitted_shingles.push(grams);
                transcript.result_pair_id = Some(pair.id.clone());
                state.pairs.push(pair);
                DiscussionStatus::Emitted
            };
            state.transcripts.push(transcript);
        }
        state.next_round += 1;
        state.report.rounds_run = state.next_round;
        info!(
            "round {round}: {} emitted so far, {} discussions",
            state.report.emitted, state.report.discussions
        );
        on_round(&state).map_err(RunError::Hook)?;
    }

    state.report.quota_unreachable = config
        .quota_s3
        .iter()
        .filter_map(|(lang, quota)| {
            let emitted = state.report.per_language.get(lang).map_or(0, |c| c.emitted);
            (emitted < *quota).then_some(QuotaShortfall {
                language: *lang,
                quota: *quota,
                emitted,
            })
        })
        .collect();
    for gap in &state.report.quota_unreachable {
        warn!("{} quota unreachable: {} of {}", gap.language, gap.emitted, gap.quota);
    }
    Ok(state)
}

fn run_group(ctx: &DiscussionContext<'_>, members: &mut [Agent], round: usize) -> (Discussion, EvolutionOp) {
    let mut ids: Vec<&str> = members.iter().map(Agent::id).collect();
    ids.sort_unstable();
    let mut labels = vec!["round".to_string(), round.to_string()];
    labels.extend(ids.iter().map(|s| s.to_string()));
    let label_refs: Vec<&str> = labels.iter().map(String::as_str).collect();
    let group_seed = derive_seed(ctx.config.rng_seed, &label_refs);

    let mut refs: Vec<&mut Agent> = members.iter_mut().collect();
    let topology = ctx.config.topology;
    let order = match topology {
        Topology::Centralized => (0..refs.len()).collect(),
        Topology::Parallel => canonical_order(&refs),
    };
    let lead = &refs[order[0]];
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(group_seed, &["op"]));
    let Some(&op) = lead.profile.operations.choose(&mut rng) else {
        let id = lead.id().to_string();
        let transcript = DiscussionTranscript {
            round,
            topology,
            participant_ids: refs.iter().map(|a| a.id().to_string()).collect(),
            sampled_exemplars: Vec::new(),
            chosen_op: EvolutionOp::IncreaseDifficulty,
            target_language: lead.language(),
            raw_completion: String::new(),
            candidate_pair_id: None,
            score: None,
            memory_outcomes: BTreeMap::new(),
            flagged_duplicate: false,
            reflected_by: None,
            status: DiscussionStatus::Failed,
            error: Some(format!("agent {id} has no operations")),
            result_pair_id: None,
        };
        let discussion = Discussion {
            transcript,
            pair: None,
            error: Some(DiscussionError::NoOperations(id)),
        };
        return (discussion, EvolutionOp::IncreaseDifficulty);
    };
    (discuss(ctx, &mut refs, &order, topology, op, round, group_seed), op)
}

#[derive(Debug, thiserror::Error)]
pub enum RunError<E> {
    #[error(transparent)]
    Discussion(DiscussionError),
    #[error("round hook failed: {0}")]
    Hook(E),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::AgentSettings;
    use crate::gateway::{solution_code, MockBackend, MockConfig, ScoreProfile};
    use crate::model::{Aspects, ScoreCard};
    use crate::prompts::fence;
    use proptest::prelude::*;

    fn seed_pair(language: Language, i: usize) -> InstructionPair {
        InstructionPair::new(
            format!("Write a {language} function `solve(x)` that returns x * {} + {} for an integer x. Seed {i}.", 2 + i % 4, i % 4),
            format!("Seed answer {i}.\n{}", fence(language, &solution_code(language, 2 + (i % 4) as i64, (i % 4) as i64))),
            language,
            Partition::SeedS1,
            vec![format!("snip-{language}-{i}")],
            0,
        )
        .with_score(ScoreCard::new(Aspects::from_values([8, 8, 8, 8])))
    }

    fn agent(language: Language, i: usize, capacity: usize) -> Agent {
        let settings = AgentSettings {
            memory_capacity: capacity,
            ..AgentSettings::default()
        };
        Agent::from_seed(&seed_pair(language, i), &settings).unwrap()
    }

    fn pool(languages: &[Language], per_language: usize) -> Vec<Agent> {
        let mut out = Vec::new();
        for (li, lang) in languages.iter().enumerate() {
            for i in 0..per_language {
                out.push(agent(*lang, li * 100 + i, 16));
            }
        }
        out
    }

    fn config(topology: Topology, d: usize) -> DiscussionConfig {
        DiscussionConfig {
            topology,
            group_size: d,
            rounds: 4,
            rng_seed: 11,
            ..DiscussionConfig::default()
        }
    }

    #[test]
    fn centralized_is_deterministic_and_policy_bound() {
        let backend = MockBackend::default();
        let templates = PromptTemplates::default();
        let mut cfg = config(Topology::Centralized, 3);
        cfg.target_language_policy = TargetLanguagePolicy::MainAgentLanguage;
        let ctx = DiscussionContext {
            backend: &backend,
            templates: &templates,
            config: &cfg,
        };
        let run = || {
            let mut main = agent(Language::Java, 1, 16);
            let mut aux = vec![agent(Language::Python, 2, 16), agent(Language::Cpp, 3, 16)];
            let out = centralized_discuss(&ctx, &mut main, &mut aux, EvolutionOp::AddConstraints, 0, 5).unwrap();
            (out, main, aux)
        };
        let ((pair_a, tr_a), main_a, aux_a) = run();
        let ((pair_b, tr_b), _, _) = run();
        assert_eq!(pair_a, pair_b);
        assert_eq!(tr_a, tr_b);
        assert_eq!(pair_a.language, Language::Java);
        assert_eq!(tr_a.participant_ids.len(), 3);
        assert_eq!(tr_a.sampled_exemplars.len(), 3);
        assert!(main_a.memory.contains(&pair_a.id));
        assert!(aux_a.iter().all(|a| !a.memory.contains(&pair_a.id)));
        assert_eq!(main_a.latest_reflection().unwrap().pair_id, pair_a.id);
    }

    #[test]
    fn echoed_exemplar_is_flagged_duplicate() {
        let backend = MockBackend::new(MockConfig {
            echo_discuss: true,
            ..MockConfig::default()
        });
        let templates = PromptTemplates::default();
        let mut cfg = config(Topology::Centralized, 2);
        cfg.target_language_policy = TargetLanguagePolicy::MainAgentLanguage;
        let ctx = DiscussionContext {
            backend: &backend,
            templates: &templates,
            config: &cfg,
        };
        let mut main = agent(Language::Php, 1, 16);
        let mut aux = vec![agent(Language::Bash, 2, 16)];
        let (pair, transcript) = centralized_discuss(&ctx, &mut main, &mut aux, EvolutionOp::SwitchLanguage, 0, 1).unwrap();
        assert!(transcript.flagged_duplicate);
        assert_eq!(transcript.memory_outcomes[main.id()], "rejected_duplicate");
        assert!(!main.memory.contains(&pair.id));
    }

    #[test]
    fn parallel_updates_every_memory_within_capacity() {
        let backend = MockBackend::default();
        let templates = PromptTemplates::default();
        let cfg = config(Topology::Parallel, 2);
        let ctx = DiscussionContext {
            backend: &backend,
            templates: &templates,
            config: &cfg,
        };
        let mut agents = vec![agent(Language::Python, 1, 1), agent(Language::Typescript, 2, 1)];
        let (pair, transcript) = parallel_discuss(&ctx, &mut agents, EvolutionOp::CombineConcepts, 0, 3).unwrap();
        for a in &agents {
            assert_eq!(a.memory.len(), 1);
            let outcome = &transcript.memory_outcomes[a.id()];
            assert_eq!(a.memory.contains(&pair.id), outcome != "rejected_duplicate");
        }
        assert!([Language::Python, Language::Typescript].contains(&pair.language));
    }

    #[test]
    fn parallel_ignores_agent_order() {
        let backend = MockBackend::default();
        let templates = PromptTemplates::default();
        let cfg = config(Topology::Parallel, 3);
        let ctx = DiscussionContext {
            backend: &backend,
            templates: &templates,
            config: &cfg,
        };
        let base = vec![agent(Language::Bash, 1, 4), agent(Language::Cpp, 2, 4), agent(Language::Python, 3, 4)];
        let mut a = base.clone();
        let mut b: Vec<Agent> = base.iter().rev().cloned().collect();
        let (pa, ta) = parallel_discuss(&ctx, &mut a, EvolutionOp::IncreaseDifficulty, 2, 77).unwrap();
        let (pb, tb) = parallel_discuss(&ctx, &mut b, EvolutionOp::IncreaseDifficulty, 2, 77).unwrap();
        assert_eq!(pa, pb);
        let mut tb_fixed = tb.clone();
        tb_fixed.participant_ids.reverse();
        tb_fixed.sampled_exemplars.reverse();
        assert_eq!(ta, tb_fixed);
        b.reverse();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_memory_and_wrong_group_size_are_errors() {
        let backend = MockBackend::default();
        let templates = PromptTemplates::default();
        let cfg = config(Topology::Parallel, 3);
        let ctx = DiscussionContext {
            backend: &backend,
            templates: &templates,
            config: &cfg,
        };
        let mut two = vec![agent(Language::Bash, 1, 4), agent(Language::Cpp, 2, 4)];
        assert!(matches!(
            parallel_discuss(&ctx, &mut two, EvolutionOp::AddConstraints, 0, 0),
            Err(DiscussionError::GroupSize { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn quotas_cap_emissions() {
        let backend = MockBackend::new(MockConfig {
            score_profile: ScoreProfile::Fixed([9, 9, 9, 9]),
            ..MockConfig::default()
        });
        let templates = PromptTemplates::default();
        let mut cfg = config(Topology::Centralized, 2);
        cfg.rounds = 50;
        cfg.quota_s3 = [(Language::Python, 5), (Language::Java, 5)].into();
        let ctx = DiscussionContext {
            backend: &backend,
            templates: &templates,
            config: &cfg,
        };
        let state = run_generation(&ctx, GenerationState::new(pool(&[Language::Python, Language::Java], 4)), |_| {
            Ok::<(), ()>(())
        })
        .unwrap();
        assert_eq!(state.pairs.len(), 10);
        assert_eq!(state.report.per_language[&Language::Python].emitted, 5);
        assert_eq!(state.report.per_language[&Language::Java].emitted, 5);
        assert!(state.report.quota_unreachable.is_empty());
        for pair in &state.pairs {
            let hits: Vec<_> = state
                .transcripts
                .iter()
                .filter(|t| t.result_pair_id.as_deref() == Some(pair.id.as_str()))
                .collect();
            assert_eq!(hits.len(), 1);
            assert_eq!(pair.partition, Partition::AgentS3);
        }
    }

    #[test]
    fn zero_rounds_emit_nothing() {
        let backend = MockBackend::default();
        let templates = PromptTemplates::default();
        let mut cfg = config(Topology::Parallel, 2);
        cfg.rounds = 0;
        let ctx = DiscussionContext {
            backend: &backend,
            templates: &templates,
            config: &cfg,
        };
        let state = run_generation(&ctx, GenerationState::new(pool(&[Language::Bash, Language::Php], 2)), |_| {
            Ok::<(), ()>(())
        })
        .unwrap();
        assert!(state.pairs.is_empty() && state.transcripts.is_empty());
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let backend = MockBackend::default();
        let templates = PromptTemplates::default();
        let mut cfg = config(Topology::Parallel, 3);
        cfg.rounds = 4;
        let ctx = DiscussionContext {
            backend: &backend,
            templates: &templates,
            config: &cfg,
        };
        let start = GenerationState::new(pool(&[Language::Bash, Language::Cpp, Language::Python], 3));
        let full = run_generation(&ctx, start.clone(), |_| Ok::<(), ()>(())).unwrap();

        let mut saved = None;
        let aborted = run_generation(&ctx, start, |s| {
            if s.next_round == 2 {
                saved = Some(serde_json::to_string(s).unwrap());
                return Err("stop");
            }
            Ok(())
        });
        assert!(matches!(aborted, Err(RunError::Hook("stop"))));
        let state: GenerationState = serde_json::from_str(&saved.unwrap()).unwrap();
        let resumed = run_generation(&ctx, state, |_| Ok::<(), ()>(())).unwrap();
        assert_eq!(resumed, full);
    }

    fn languages_strategy() -> impl Strategy<Value = (Vec<Language>, usize)> {
        (2usize..=5, 1usize..=8).prop_flat_map(|(d, langs)| {
            let pool = Language::ALL[..langs].to_vec();
            (proptest::collection::vec(proptest::sample::select(pool), d..60), Just(d))
        })
    }

    proptest! {
        #[test]
        fn groups_are_mixed_and_disjoint((languages, d) in languages_strategy(), seed in any::<u64>()) {
            let grouping = make_groups(&languages, d, seed);
            let pool_langs = languages.iter().collect::<HashSet<_>>().len();
            let mut seen = HashSet::new();
            for g in grouping.groups.iter().chain(&grouping.sat_out) {
                prop_assert_eq!(g.len(), d);
                for &i in g {
                    prop_assert!(seen.insert(i));
                }
            }
            for g in &grouping.groups {
                if pool_langs >= 2 {
                    prop_assert!(distinct_languages(g, &languages) >= 2);
                }
            }
            prop_assert_eq!(grouping.groups.len() + grouping.sat_out.len(), languages.len() / d);
        }
    }
}
