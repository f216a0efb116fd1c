//! Language agents: profile, evolution operations, bounded memory and
//! reflection log.
//!
//! The memory is a priority queue of at most `capacity` scored pairs. A new
//! pair is rejected when it is too similar to a stored one; at capacity the
//! lowest-scored entry (oldest first on ties) makes room.

use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gateway::{complete, Backend, CompletionRequest, GatewayError};
use crate::model::{InstructionPair, Language, ScoreCard};
use crate::prompts::{self, ParseError, PromptTemplates};
use crate::util::{derive_seed, write_json};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvolutionOp {
    IncreaseDifficulty,
    AddReasoningSteps,
    SwitchLanguage,
    CombineConcepts,
    AddConstraints,
}

impl EvolutionOp {
    pub const ALL: [EvolutionOp; 5] = [
        EvolutionOp::IncreaseDifficulty,
        EvolutionOp::AddReasoningSteps,
        EvolutionOp::SwitchLanguage,
        EvolutionOp::CombineConcepts,
        EvolutionOp::AddConstraints,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EvolutionOp::IncreaseDifficulty => "increase_difficulty",
            EvolutionOp::AddReasoningSteps => "add_reasoning_steps",
            EvolutionOp::SwitchLanguage => "switch_language",
            EvolutionOp::CombineConcepts => "combine_concepts",
            EvolutionOp::AddConstraints => "add_constraints",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            EvolutionOp::IncreaseDifficulty => "Make the task harder: larger inputs, trickier cases or a less obvious algorithm.",
            EvolutionOp::AddReasoningSteps => "Require more intermediate reasoning steps before the answer can be produced.",
            EvolutionOp::SwitchLanguage => "Carry the idea of the exemplars over to the target language and its idioms.",
            EvolutionOp::CombineConcepts => "Merge concepts from several exemplars into one coherent task.",
            EvolutionOp::AddConstraints => "Add an explicit constraint on time, memory, or the allowed library surface.",
        }
    }
}

impl fmt::Display for EvolutionOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub agent_id: String,
    pub language: Language,
    pub task_definition: String,
    pub operations: Vec<EvolutionOp>,
}

impl AgentProfile {
    pub fn for_language(agent_id: impl Into<String>, language: Language) -> Self {
        Self {
            agent_id: agent_id.into(),
            language,
            task_definition: format!(
                "You are a {language} specialist. Create clear, self-contained {language} programming tasks with correct, idiomatic solutions, and help other agents carry good ideas across languages."
            ),
            operations: EvolutionOp::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AgentError {
    #[error("memory capacity must be at least 1")]
    InvalidCapacity,
    #[error("similarity threshold {0} outside (0, 1]")]
    InvalidThreshold(f64),
    #[error("memory is empty")]
    EmptyMemory,
    #[error("agent {0} has no operations")]
    NoOperations(String),
    #[error("seed pair {0} carries no score")]
    UnscoredSeed(String),
    #[error("reflection unparseable: {0}")]
    ScoreUnparseable(ParseError),
    #[error("corrupt agent state: {0}")]
    CorruptState(String),
    #[error(transparent)]
    Backend(#[from] GatewayError),
}

fn shingle_text(pair: &InstructionPair) -> String {
    format!("{} {}", pair.question, pair.answer).to_lowercase()
}

/// Word-level 3-grams of `text` (already normalized).
pub fn shingles(text: &str) -> HashSet<String> {
    let words: Vec<&str> = text.split_whitespace().collect();
    words.windows(3).map(|w| w.join(" ")).collect()
}

/// Jaccard coefficient of two shingle sets; 0.0 when both are empty.
pub fn jaccard(a: &HashSet<String>, b: &HashSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Word 3-gram Jaccard similarity of `question + " " + answer`, lowercased.
pub fn similarity(a: &InstructionPair, b: &InstructionPair) -> f64 {
    let (ta, tb) = (shingle_text(a), shingle_text(b));
    if ta == tb {
        return 1.0;
    }
    jaccard(&shingles(&ta), &shingles(&tb))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub pair: InstructionPair,
    pub score: ScoreCard,
    /// Insertion order; breaks score ties at eviction.
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertOutcome {
    Accepted,
    RejectedDuplicate,
    AcceptedWithEviction(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Memory {
    capacity: usize,
    similarity_threshold: f64,
    entries: Vec<MemoryEntry>,
    next_seq: u64,
}

impl Memory {
    pub const DEFAULT_CAPACITY: usize = 16;
    pub const DEFAULT_THRESHOLD: f64 = 0.85;

    /// A memory holding only the seed pair.
    pub fn new(seed: InstructionPair, seed_score: ScoreCard, capacity: usize, similarity_threshold: f64) -> Result<Self, AgentError> {
        if capacity == 0 {
            return Err(AgentError::InvalidCapacity);
        }
        if !(similarity_threshold > 0.0 && similarity_threshold <= 1.0) {
            return Err(AgentError::InvalidThreshold(similarity_threshold));
        }
        Ok(Self {
            capacity,
            similarity_threshold,
            entries: vec![MemoryEntry {
                pair: seed,
                score: seed_score,
                seq: 0,
            }],
            next_seq: 1,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn similarity_threshold(&self) -> f64 {
        self.similarity_threshold
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, pair_id: &str) -> bool {
        self.entries.iter().any(|e| e.pair.id == pair_id)
    }

    pub fn insert(&mut self, pair: InstructionPair, score: ScoreCard) -> InsertOutcome {
        let incoming = shingle_text(&pair);
        let incoming_set = shingles(&incoming);
        let duplicate = self.entries.iter().any(|e| {
            let stored = shingle_text(&e.pair);
            let sim = if stored == incoming {
                1.0
            } else {
                jaccard(&shingles(&stored), &incoming_set)
            };
            sim >= self.similarity_threshold
        });
        if duplicate {
            return InsertOutcome::RejectedDuplicate;
        }
        let mut outcome = InsertOutcome::Accepted;
        if self.entries.len() >= self.capacity {
            let victim = self
                .entries
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| a.score.overall.total_cmp(&b.score.overall).then(a.seq.cmp(&b.seq)))
                .map(|(i, _)| i)
                .expect("full memory is non-empty");
            let evicted = self.entries.remove(victim);
            outcome = InsertOutcome::AcceptedWithEviction(evicted.pair.id);
        }
        self.entries.push(MemoryEntry {
            pair,
            score,
            seq: self.next_seq,
        });
        self.next_seq += 1;
        outcome
    }

    /// Uniform draw, deterministic in `rng_seed`.
    pub fn sample(&self, rng_seed: u64) -> Result<&InstructionPair, AgentError> {
        if self.entries.is_empty() {
            return Err(AgentError::EmptyMemory);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        Ok(&self.entries[rng.random_range(0..self.entries.len())].pair)
    }

    fn check(&self) -> Result<(), AgentError> {
        if self.capacity == 0 {
            return Err(AgentError::InvalidCapacity);
        }
        if self.entries.len() > self.capacity {
            return Err(AgentError::CorruptState(format!(
                "{} entries exceed capacity {}",
                self.entries.len(),
                self.capacity
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reflection {
    pub pair_id: String,
    pub merits: String,
    pub faults: String,
    pub score: ScoreCard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentSettings {
    pub memory_capacity: usize,
    pub similarity_threshold: f64,
    pub reflection_cap: usize,
}

impl Default for AgentSettings {
    fn default() -> Self {
        Self {
            memory_capacity: Memory::DEFAULT_CAPACITY,
            similarity_threshold: Memory::DEFAULT_THRESHOLD,
            reflection_cap: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub profile: AgentProfile,
    pub memory: Memory,
    reflections: VecDeque<Reflection>,
    reflection_cap: usize,
}

impl Agent {
    pub fn new(profile: AgentProfile, memory: Memory, reflection_cap: usize) -> Result<Self, AgentError> {
        if profile.operations.is_empty() {
            return Err(AgentError::NoOperations(profile.agent_id));
        }
        Ok(Self {
            profile,
            memory,
            reflections: VecDeque::new(),
            reflection_cap: reflection_cap.max(1),
        })
    }

    /// One agent per scored seed pair; the seed's score is its initial
    /// memory priority.
    pub fn from_seed(seed: &InstructionPair, settings: &AgentSettings) -> Result<Self, AgentError> {
        let score = seed.score.ok_or_else(|| AgentError::UnscoredSeed(seed.id.clone()))?;
        let suffix = seed.id.strip_prefix("pair-").unwrap_or(&seed.id);
        let profile = AgentProfile::for_language(format!("agent-{suffix}"), seed.language);
        let memory = Memory::new(seed.clone(), score, settings.memory_capacity, settings.similarity_threshold)?;
        Agent::new(profile, memory, settings.reflection_cap)
    }

    pub fn id(&self) -> &str {
        &self.profile.agent_id
    }

    pub fn language(&self) -> Language {
        self.profile.language
    }

    pub fn reflections(&self) -> impl Iterator<Item = &Reflection> {
        self.reflections.iter()
    }

    pub fn latest_reflection(&self) -> Option<&Reflection> {
        self.reflections.back()
    }

    pub fn push_reflection(&mut self, reflection: Reflection) {
        self.reflections.push_back(reflection);
        while self.reflections.len() > self.reflection_cap {
            self.reflections.pop_front();
        }
    }

    /// Asks the scorer to critique `pair` and appends the result to the
    /// bounded reflection log.
    pub fn reflect(
        &mut self,
        pair: &InstructionPair,
        backend: &dyn Backend,
        templates: &PromptTemplates,
        rng_seed: u64,
    ) -> Result<Reflection, AgentError> {
        let prompt = templates.reflect(&self.profile.task_definition, pair);
        let request = CompletionRequest::new(prompt, 512, 0.0, derive_seed(rng_seed, &[self.id(), &pair.id, "reflect"]));
        let text = complete(backend, &request)?;
        let (merits, faults, aspects) = prompts::parse_reflection(&text).map_err(AgentError::ScoreUnparseable)?;
        let reflection = Reflection {
            pair_id: pair.id.clone(),
            merits,
            faults,
            score: ScoreCard::new(aspects),
        };
        self.push_reflection(reflection.clone());
        Ok(reflection)
    }

    pub fn save(&self, dir: &Path) -> std::io::Result<()> {
        write_json(&dir.join(format!("{}.json", self.id())), self)
    }

    pub fn load(path: &Path) -> Result<Self, AgentError> {
        let text = std::fs::read_to_string(path).map_err(|e| AgentError::CorruptState(e.to_string()))?;
        let agent: Agent = serde_json::from_str(&text).map_err(|e| AgentError::CorruptState(e.to_string()))?;
        agent.memory.check()?;
        Ok(agent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{MockBackend, MockConfig};
    use crate::model::{Aspects, Partition};
    use crate::prompts::TaskTag;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn pair(text: &str) -> InstructionPair {
        InstructionPair::new(text, "answer body", Language::Python, Partition::AgentS3, vec!["p".into()], 1)
    }

    fn card(overall: f64) -> ScoreCard {
        // overall * 4 split across aspects; used only with quarter values
        let total = (overall * 4.0) as u8;
        let base = total / 4;
        let mut v = [base; 4];
        for slot in v.iter_mut().take((total % 4) as usize) {
            *slot += 1;
        }
        let c = ScoreCard::new(Aspects::from_values(v));
        assert_eq!(c.overall, overall);
        c
    }

    #[test]
    fn similarity_examples() {
        let a = pair("alpha beta gamma delta");
        assert_eq!(similarity(&a, &a.clone()), 1.0);
        let x = InstructionPair::new("a b", "c", Language::Python, Partition::AgentS3, vec!["p".into()], 0);
        let y = InstructionPair::new("d e", "f", Language::Python, Partition::AgentS3, vec!["p".into()], 0);
        assert_eq!(similarity(&x, &y), 0.0);
        // {a b c, b c d} vs {b c d, c d e}
        let g12 = InstructionPair::new("a b", "c d", Language::Python, Partition::AgentS3, vec!["p".into()], 0);
        let g23 = InstructionPair::new("b c", "d e", Language::Python, Partition::AgentS3, vec!["p".into()], 0);
        assert!((similarity(&g12, &g23) - 1.0 / 3.0).abs() < 1e-15);
        let upper = InstructionPair::new("A B", "C D", Language::Python, Partition::AgentS3, vec!["p".into()], 0);
        assert_eq!(similarity(&g12, &upper), 1.0);
    }

    #[test]
    fn memory_init_examples() {
        let m = Memory::new(pair("seed one two three"), card(7.0), 16, 0.85).unwrap();
        assert_eq!(m.len(), 1);
        let full = Memory::new(pair("seed"), card(7.0), 1, 0.85).unwrap();
        assert_eq!(full.len(), full.capacity());
        assert_eq!(Memory::new(pair("seed"), card(7.0), 0, 0.85).unwrap_err(), AgentError::InvalidCapacity);
        assert!(Memory::new(pair("seed"), card(7.0), 2, 0.0).is_err());
        assert!(Memory::new(pair("seed"), card(7.0), 2, 1.5).is_err());
    }

    fn distinct(i: usize) -> InstructionPair {
        pair(&format!("task number {i} with unique words w{i}a w{i}b w{i}c w{i}d"))
    }

    fn full_memory(overalls: &[f64]) -> Memory {
        let mut m = Memory::new(distinct(0), card(overalls[0]), overalls.len(), 0.85).unwrap();
        for (i, &o) in overalls.iter().enumerate().skip(1) {
            assert_eq!(m.insert(distinct(i), card(o)), InsertOutcome::Accepted);
        }
        m
    }

    #[test]
    fn exact_copy_is_rejected() {
        let mut m = full_memory(&[5.0, 6.0]);
        let before = m.clone();
        assert_eq!(m.insert(distinct(1), card(9.0)), InsertOutcome::RejectedDuplicate);
        assert_eq!(m, before);
    }

    #[test]
    fn eviction_removes_lowest_score() {
        let mut m = full_memory(&[3.0, 7.0, 5.0, 9.0]);
        let lowest = m.entries()[0].pair.id.clone();
        assert_eq!(m.insert(distinct(10), card(6.0)), InsertOutcome::AcceptedWithEviction(lowest));
        let mut stored: Vec<f64> = m.entries().iter().map(|e| e.score.overall).collect();
        stored.sort_by(f64::total_cmp);
        assert_eq!(stored, vec![5.0, 6.0, 7.0, 9.0]);
    }

    #[test]
    fn eviction_ties_go_to_oldest() {
        let mut m = full_memory(&[3.0, 3.0, 5.0, 9.0]);
        let older = m.entries()[0].pair.id.clone();
        let younger = m.entries()[1].pair.id.clone();
        assert_eq!(m.insert(distinct(10), card(6.0)), InsertOutcome::AcceptedWithEviction(older));
        assert!(m.contains(&younger));
    }

    #[test]
    fn sampling() {
        let single = Memory::new(distinct(0), card(5.0), 4, 0.85).unwrap();
        for seed in 0..20 {
            assert_eq!(single.sample(seed).unwrap().id, distinct(0).id);
        }
        let m = full_memory(&[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(m.sample(99).unwrap().id, m.sample(99).unwrap().id);
        let mut counts = [0usize; 4];
        for seed in 0..10_000u64 {
            let id = &m.sample(seed).unwrap().id;
            counts[m.entries().iter().position(|e| &e.pair.id == id).unwrap()] += 1;
        }
        for c in counts {
            let freq = c as f64 / 10_000.0;
            assert!((0.2..=0.3).contains(&freq), "frequency {freq}");
        }
    }

    #[test]
    fn reflection_log_is_bounded() {
        let backend = MockBackend::default();
        let templates = PromptTemplates::default();
        let seed = distinct(0).with_score(card(6.0));
        let mut agent = Agent::from_seed(&seed, &AgentSettings::default()).unwrap();
        for i in 0..5 {
            let r = agent.reflect(&distinct(i), &backend, &templates, 1).unwrap();
            assert!(!r.merits.is_empty() && !r.faults.is_empty());
        }
        let kept: Vec<_> = agent.reflections().map(|r| r.pair_id.clone()).collect();
        assert_eq!(kept, (1..5).map(|i| distinct(i).id).collect::<Vec<_>>());
        assert_eq!(agent.latest_reflection().unwrap().pair_id, distinct(4).id);
    }

    #[test]
    fn corrupted_reflection_is_unparseable() {
        let backend = MockBackend::new(MockConfig {
            corrupt: [TaskTag::Reflect].into(),
            ..MockConfig::default()
        });
        let seed = distinct(0).with_score(card(6.0));
        let mut agent = Agent::from_seed(&seed, &AgentSettings::default()).unwrap();
        let err = agent.reflect(&distinct(1), &backend, &PromptTemplates::default(), 0).unwrap_err();
        assert!(matches!(err, AgentError::ScoreUnparseable(_)));
        assert!(agent.latest_reflection().is_none());
    }

    #[test]
    fn agent_state_round_trips_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let seed = distinct(0).with_score(card(6.0));
        let mut agent = Agent::from_seed(&seed, &AgentSettings::default()).unwrap();
        agent.memory.insert(distinct(1), card(4.0));
        agent.save(dir.path()).unwrap();
        let back = Agent::load(&dir.path().join(format!("{}.json", agent.id()))).unwrap();
        assert_eq!(back, agent);
        assert!(Agent::from_seed(&distinct(2), &AgentSettings::default()).is_err());
    }

    // Brute-force reference: BTreeSet shingles, full sort for the victim.
    struct Reference {
        cap: usize,
        threshold: f64,
        entries: Vec<(String, String, f64, usize)>,
        next: usize,
    }

    fn ref_grams(text: &str) -> BTreeSet<Vec<String>> {
        let words: Vec<String> = text.to_lowercase().split_whitespace().map(String::from).collect();
        (0..words.len().saturating_sub(2)).map(|i| words[i..i + 3].to_vec()).collect()
    }

    impl Reference {
        fn insert(&mut self, id: &str, text: &str, overall: f64) -> InsertOutcome {
            for (_, stored, _, _) in &self.entries {
                let (a, b) = (ref_grams(stored), ref_grams(text));
                let union: BTreeSet<_> = a.union(&b).collect();
                let inter: BTreeSet<_> = a.intersection(&b).collect();
                let sim = if stored.to_lowercase() == text.to_lowercase() {
                    1.0
                } else if union.is_empty() {
                    0.0
                } else {
                    inter.len() as f64 / union.len() as f64
                };
                if sim >= self.threshold {
                    return InsertOutcome::RejectedDuplicate;
                }
            }
            let mut outcome = InsertOutcome::Accepted;
            if self.entries.len() == self.cap {
                let mut order: Vec<usize> = (0..self.entries.len()).collect();
                order.sort_by(|&i, &j| {
                    let (a, b) = (&self.entries[i], &self.entries[j]);
                    a.2.partial_cmp(&b.2).unwrap().then(a.3.cmp(&b.3))
                });
                let gone = self.entries.remove(order[0]);
                outcome = InsertOutcome::AcceptedWithEviction(gone.0);
            }
            self.entries.push((id.to_string(), text.to_string(), overall, self.next));
            self.next += 1;
            outcome
        }
    }

    const VOCAB: [&str; 6] = ["sort", "list", "map", "tree", "sum", "graph"];

    proptest! {
        #[test]
        fn memory_matches_reference(
            cap in 1usize..=8,
            threshold in prop::sample::select(vec![0.3, 0.5, 0.85, 1.0]),
            ops in prop::collection::vec((prop::collection::vec(0usize..6, 1..7), 4u8..=40), 1..100),
        ) {
            let text_of = |words: &[usize]| words.iter().map(|&w| VOCAB[w]).collect::<Vec<_>>().join(" ");
            let seed_text = "seed entry for the memory";
            let seed = InstructionPair::new(seed_text, "", Language::Cpp, Partition::AgentS3, vec!["s".into()], 0);
            let mut memory = Memory::new(seed.clone(), card(1.0), cap, threshold).unwrap();
            let mut reference = Reference { cap, threshold, entries: vec![(seed.id.clone(), format!("{seed_text} "), 1.0, 0)], next: 1 };
            for (i, (words, quarter)) in ops.iter().enumerate() {
                let text = text_of(words);
                let p = InstructionPair::new(text.clone(), "", Language::Cpp, Partition::AgentS3, vec!["s".into()], i as u64 + 1);
                let overall = f64::from(*quarter) / 4.0;
                let got = memory.insert(p.clone(), card(overall));
                let want = reference.insert(&p.id, &format!("{text} "), overall);
                prop_assert_eq!(got, want);
                prop_assert!(memory.len() <= cap);
                for (a, e) in memory.entries().iter().enumerate() {
                    for f in &memory.entries()[a + 1..] {
                        prop_assert!(similarity(&e.pair, &f.pair) < threshold);
                    }
                }
            }
            let ids: Vec<_> = memory.entries().iter().map(|e| e.pair.id.clone()).collect();
            let ref_ids: Vec<_> = reference.entries.iter().map(|e| e.0.clone()).collect();
            prop_assert_eq!(ids, ref_ids);
        }

        #[test]
        fn similarity_is_symmetric_and_bounded(a in "[a-c ]{0,20}", b in "[a-c ]{0,20}") {
            let (pa, pb) = (pair(&a), pair(&b));
            let s = similarity(&pa, &pb);
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert_eq!(s, similarity(&pb, &pa));
            prop_assert_eq!(similarity(&pa, &pa), 1.0);
        }
    }
}
