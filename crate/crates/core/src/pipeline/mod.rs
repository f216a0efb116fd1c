//! Staged runs: seed → discuss → dpo → eval, then emit.
//!
//! Every stage writes its artifacts under `run_dir/<stage>/` and records
//! itself in `run_dir/state.json`. The discuss stage also checkpoints after
//! every round so an interrupted run can resume where it stopped.

pub mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{split_quota, CompositionTargets, ConfigError, PipelineConfig, RawConfig};

use crate::agent::{Agent, AgentError};
use crate::discussion::{run_generation, DiscussionContext, DiscussionError, GenerationState, RunError};
use crate::eval::{load_problems, run_benchmark, EvalError};
use crate::gateway::{connect, Backend, GatewayError};
use crate::model::{CodeSnippet, InstructionPair, Language, PreferencePair};
use crate::preference::{build_dpo_dataset, DpoError};
use crate::prompts::{PromptTemplates, TemplateError};
use crate::sandbox::{recipe, Sandbox, SandboxError, SandboxOptions};
use crate::seed::{SeedError, SeedSynth};
use crate::util::{derive_seed, read_jsonl, sha256_hex, write_json, write_jsonl, JsonlError};

/// When set to `N`, the process kills itself right after checkpointing
/// discuss round `N`. Used to exercise resume.
pub const FAULT_ENV: &str = "XFORGE_FAULT_AFTER_ROUND";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Seed,
    Discuss,
    Dpo,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Seed, Stage::Discuss, Stage::Dpo, Stage::Eval];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Seed => "seed",
            Stage::Discuss => "discuss",
            Stage::Dpo => "dpo",
            Stage::Eval => "eval",
        }
    }

    pub fn dependencies(self) -> &'static [Stage] {
        match self {
            Stage::Seed | Stage::Eval => &[],
            Stage::Discuss => &[Stage::Seed],
            Stage::Dpo => &[Stage::Seed, Stage::Discuss],
        }
    }

    /// Stages whose outputs are stale once this one re-runs.
    fn dependents(self) -> Vec<Stage> {
        Stage::ALL.into_iter().filter(|s| s.dependencies().contains(&self)).collect()
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCheckpoint {
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
    pub counters: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunState {
    pub run_id: String,
    pub completed_stages: BTreeSet<Stage>,
    pub stage_checkpoints: BTreeMap<Stage, StageCheckpoint>,
    pub config_hash: String,
}

impl RunState {
    pub fn new(config_hash: &str) -> Self {
        Self {
            run_id: format!("run-{}", &config_hash[..12]),
            completed_stages: BTreeSet::new(),
            stage_checkpoints: BTreeMap::new(),
            config_hash: config_hash.to_string(),
        }
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        self.completed_stages.contains(&stage)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("stage {stage} needs {missing} to be completed first")]
    StageDependencyMissing { stage: Stage, missing: Stage },
    #[error("run directory was created with config {on_disk}, current config is {current}")]
    ConfigMismatchOnResume { on_disk: String, current: String },
    #[error("emit needs completed seed, discuss and dpo stages; {0} is missing")]
    EmitNotReady(Stage),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("bad snippet input: {0}")]
    Snippets(String),
    #[error(transparent)]
    Templates(#[from] TemplateError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Seed(#[from] SeedError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Discussion(#[from] DiscussionError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Dpo(#[from] DpoError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

fn io_err(context: impl fmt::Display) -> impl FnOnce(std::io::Error) -> PipelineError {
    move |source| PipelineError::Io {
        context: context.to_string(),
        source,
    }
}

/// One line of the snippet input file. `code` and `content` are accepted
/// as aliases of `source_text`.
#[derive(Debug, Deserialize)]
struct SnippetRecord {
    #[serde(default)]
    id: Option<String>,
    language: String,
    #[serde(alias = "code", alias = "content")]
    source_text: String,
}

/// Loads snippets, skipping (and counting) languages this crate does not know.
pub fn load_snippets(path: &Path) -> Result<Vec<CodeSnippet>, PipelineError> {
    let records: Vec<SnippetRecord> = read_jsonl(path)?;
    let mut out = Vec::with_capacity(records.len());
    let mut unknown = 0usize;
    for r in records {
        let Ok(language) = r.language.parse::<Language>() else {
            unknown += 1;
            continue;
        };
        let mut snippet = CodeSnippet::new(language, r.source_text);
        if let Some(id) = r.id.filter(|s| !s.is_empty()) {
            snippet.id = id;
        }
        out.push(snippet);
    }
    if unknown > 0 {
        warn!("skipped {unknown} snippet(s) in unsupported languages");
    }
    Ok(out)
}

pub const SEED_S1: &str = "seed/seed_s1.jsonl";
pub const SEED_S2: &str = "seed/seed_s2.jsonl";
pub const SEED_REPORT: &str = "seed/seed_report.json";
pub const AGENT_S3: &str = "discuss/agent_s3.jsonl";
pub const TRANSCRIPTS: &str = "discuss/transcripts.jsonl";
pub const S3_REPORT: &str = "discuss/s3_report.json";
pub const DISCUSS_CHECKPOINT: &str = "discuss/checkpoint.json";
pub const AGENTS_DIR: &str = "discuss/agents";
pub const DPO_S4: &str = "dpo/dpo_s4.jsonl";
pub const DPO_REPORT: &str = "dpo/dpo_report.json";
pub const DPO_TESTS: &str = "dpo/tests.jsonl";
pub const TOOLCHAINS: &str = "dpo/toolchains.json";
pub const EVAL_REPORT: &str = "eval/eval_report.json";
pub const STATE: &str = "state.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub records: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub config_hash: String,
    pub scale_factor: f64,
    pub targets: BTreeMap<String, usize>,
    pub files: BTreeMap<String, FileEntry>,
    pub partitions: BTreeMap<String, BTreeMap<Language, usize>>,
    pub dpo_per_language: BTreeMap<Language, usize>,
    pub notes: Vec<String>,
}

pub struct Pipeline {
    pub config: PipelineConfig,
    backend: Arc<dyn Backend>,
    templates: PromptTemplates,
}

fn per_language<'a>(languages: impl Iterator<Item = &'a Language>) -> BTreeMap<Language, usize> {
    let mut counts = BTreeMap::new();
    for l in languages {
        *counts.entry(*l).or_default() += 1;
    }
    counts
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        let backend = connect(&config.backend, config.mock.clone())?;
        Self::with_backend(config, backend)
    }

    pub fn with_backend(config: PipelineConfig, backend: Arc<dyn Backend>) -> Result<Self, PipelineError> {
        let templates = match &config.prompts {
            Some(path) => PromptTemplates::load(path)?,
            None => PromptTemplates::default(),
        };
        Ok(Self {
            config,
            backend,
            templates,
        })
    }

    pub fn run_dir(&self) -> &Path {
        &self.config.run_dir
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.config.run_dir.join(rel)
    }

    pub fn load_state(&self) -> Result<Option<RunState>, PipelineError> {
        let path = self.path(STATE);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(io_err(path.display()))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| PipelineError::Io {
                context: path.display().to_string(),
                source: std::io::Error::other(e),
            })
    }

    fn save_state(&self, state: &RunState) -> Result<(), PipelineError> {
        write_json(&self.path(STATE), state).map_err(io_err(STATE))
    }

    /// Loads the on-disk state, checking the config hash. Without `resume`
    /// a fresh `seed` starts a new run; every other stage builds on the
    /// existing one and therefore needs a matching config.
    fn prepare_state(&self, stage: Stage, resume: bool) -> Result<RunState, PipelineError> {
        let hash = self.config.hash();
        match self.load_state()? {
            Some(state) if state.config_hash == hash => Ok(state),
            Some(_) if stage == Stage::Seed && !resume => Ok(RunState::new(&hash)),
            Some(state) => Err(PipelineError::ConfigMismatchOnResume {
                on_disk: state.config_hash,
                current: hash,
            }),
            None => Ok(RunState::new(&hash)),
        }
    }

    /// Runs one stage. With `resume`, a completed stage is a no-op and an
    /// interrupted discuss stage continues from its last checkpoint.
    pub fn run_stage(&self, stage: Stage, resume: bool) -> Result<RunState, PipelineError> {
        let mut state = self.prepare_state(stage, resume)?;
        if let Some(&missing) = stage.dependencies().iter().find(|d| !state.is_complete(**d)) {
            return Err(PipelineError::StageDependencyMissing { stage, missing });
        }
        if resume && state.is_complete(stage) {
            info!("{stage} already complete, nothing to do");
            return Ok(state);
        }
        state.completed_stages.remove(&stage);
        for dependent in stage.dependents() {
            state.completed_stages.remove(&dependent);
            state.stage_checkpoints.remove(&dependent);
        }
        fs::create_dir_all(self.run_dir()).map_err(io_err(self.run_dir().display()))?;
        self.save_state(&state)?;
        let checkpoint = match stage {
            Stage::Seed => self.seed_stage()?,
            Stage::Discuss => self.discuss_stage(resume)?,
            Stage::Dpo => self.dpo_stage()?,
            Stage::Eval => self.eval_stage()?,
        };
        state.stage_checkpoints.insert(stage, checkpoint);
        state.completed_stages.insert(stage);
        self.save_state(&state)?;
        Ok(state)
    }

    fn seed_stage(&self) -> Result<StageCheckpoint, PipelineError> {
        let path = self
            .config
            .snippets
            .as_ref()
            .ok_or_else(|| PipelineError::Snippets("config key `snippets` is not set".into()))?;
        let snippets = load_snippets(path)?;
        let synth = SeedSynth {
            backend: self.backend.as_ref(),
            templates: &self.templates,
            config: &self.config.seed,
        };
        let data = synth.build_seed_dataset(&snippets)?;
        for gap in &data.report.quota_unreachable {
            warn!("seed quota for {} unreachable: {} of {}", gap.language, gap.emitted, gap.quota);
        }
        write_jsonl(&self.path(SEED_S1), &data.seed_s1).map_err(io_err(SEED_S1))?;
        write_jsonl(&self.path(SEED_S2), &data.seed_s2).map_err(io_err(SEED_S2))?;
        write_json(&self.path(SEED_REPORT), &data.report).map_err(io_err(SEED_REPORT))?;
        Ok(StageCheckpoint {
            artifacts: vec![SEED_S1.into(), SEED_S2.into(), SEED_REPORT.into()],
            counters: BTreeMap::from([
                ("snippets".into(), snippets.len() as u64),
                ("seed_s1".into(), data.seed_s1.len() as u64),
                ("seed_s2".into(), data.seed_s2.len() as u64),
                ("target".into(), self.config.targets.seed() as u64),
            ]),
        })
    }

    fn seed_pairs(&self) -> Result<Vec<InstructionPair>, PipelineError> {
        let mut pairs: Vec<InstructionPair> = read_jsonl(&self.path(SEED_S1))?;
        pairs.extend(read_jsonl::<InstructionPair>(&self.path(SEED_S2))?);
        Ok(pairs)
    }

    fn discuss_stage(&self, resume: bool) -> Result<StageCheckpoint, PipelineError> {
        let checkpoint_path = self.path(DISCUSS_CHECKPOINT);
        let initial = if resume && checkpoint_path.exists() {
            let text = fs::read_to_string(&checkpoint_path).map_err(io_err(DISCUSS_CHECKPOINT))?;
            let state: GenerationState = serde_json::from_str(&text)
                .map_err(|e| AgentError::CorruptState(format!("{DISCUSS_CHECKPOINT}: {e}")))?;
            info!("resuming discuss at round {}", state.next_round);
            state
        } else {
            let pool = self
                .seed_pairs()?
                .iter()
                .map(|p| Agent::from_seed(p, &self.config.agents))
                .collect::<Result<Vec<_>, _>>()?;
            GenerationState::new(pool)
        };
        let fault_after: Option<usize> = std::env::var(FAULT_ENV).ok().and_then(|v| v.parse().ok());
        let ctx = DiscussionContext {
            backend: self.backend.as_ref(),
            templates: &self.templates,
            config: &self.config.discussion,
        };
        let hook = |state: &GenerationState| -> Result<(), std::io::Error> {
            write_json(&checkpoint_path, state)?;
            if fault_after == Some(state.next_round) {
                warn!("fault injection: killing the process after round {}", state.next_round);
                // SAFETY: plain libc calls on our own pid.
                unsafe {
                    libc::kill(libc::getpid(), libc::SIGKILL);
                }
            }
            Ok(())
        };
        let done = run_generation(&ctx, initial, hook).map_err(|e| match e {
            RunError::Discussion(e) => PipelineError::Discussion(e),
            RunError::Hook(e) => PipelineError::Io {
                context: DISCUSS_CHECKPOINT.into(),
                source: e,
            },
        })?;
        write_jsonl(&self.path(AGENT_S3), &done.pairs).map_err(io_err(AGENT_S3))?;
        write_jsonl(&self.path(TRANSCRIPTS), &done.transcripts).map_err(io_err(TRANSCRIPTS))?;
        write_json(&self.path(S3_REPORT), &done.report).map_err(io_err(S3_REPORT))?;
        let agents_dir = self.path(AGENTS_DIR);
        if agents_dir.exists() {
            fs::remove_dir_all(&agents_dir).map_err(io_err(AGENTS_DIR))?;
        }
        fs::create_dir_all(&agents_dir).map_err(io_err(AGENTS_DIR))?;
        for agent in &done.pool {
            agent.save(&agents_dir).map_err(io_err(AGENTS_DIR))?;
        }
        if checkpoint_path.exists() {
            fs::remove_file(&checkpoint_path).map_err(io_err(DISCUSS_CHECKPOINT))?;
        }
        Ok(StageCheckpoint {
            artifacts: vec![AGENT_S3.into(), TRANSCRIPTS.into(), S3_REPORT.into(), AGENTS_DIR.into()],
            counters: BTreeMap::from([
                ("agents".into(), done.pool.len() as u64),
                ("rounds".into(), done.report.rounds_run as u64),
                ("discussions".into(), done.report.discussions as u64),
                ("agent_s3".into(), done.pairs.len() as u64),
                ("target".into(), self.config.targets.s3() as u64),
            ]),
        })
    }

    fn sandbox(&self) -> Result<Sandbox, PipelineError> {
        let mut options = SandboxOptions::default();
        if let Some(path) = &self.config.sandbox_recipes {
            options.recipes = recipe::load(path).map_err(SandboxError::from)?;
        }
        if let Some(slots) = self.config.sandbox_slots {
            options.slots = slots;
        }
        Ok(Sandbox::new(options)?)
    }

    fn dpo_stage(&self) -> Result<StageCheckpoint, PipelineError> {
        let mut queries = self.seed_pairs()?;
        queries.extend(read_jsonl::<InstructionPair>(&self.path(AGENT_S3))?);
        // Seeded shuffle so an early target stop still samples every partition.
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.rng_seed, &["dpo-queries"]));
        queries.shuffle(&mut rng);
        let sandbox = self.sandbox()?;
        sandbox.write_toolchains(&self.path(TOOLCHAINS)).map_err(io_err(TOOLCHAINS))?;
        let target = self.config.targets.dpo();
        let data = build_dpo_dataset(
            &queries,
            &self.config.dpo,
            self.backend.as_ref(),
            &sandbox,
            &self.templates,
            Some(target),
        )?;
        if !data.report.target_reached {
            warn!(
                "dpo target of {target} not reached: {} pairs, {} queries without contrast",
                data.report.pairs, data.report.no_contrast
            );
        }
        write_jsonl(&self.path(DPO_S4), &data.pairs).map_err(io_err(DPO_S4))?;
        write_jsonl(&self.path(DPO_TESTS), &data.tests).map_err(io_err(DPO_TESTS))?;
        write_json(&self.path(DPO_REPORT), &data.report).map_err(io_err(DPO_REPORT))?;
        Ok(StageCheckpoint {
            artifacts: vec![DPO_S4.into(), DPO_TESTS.into(), DPO_REPORT.into(), TOOLCHAINS.into()],
            counters: BTreeMap::from([
                ("queries".into(), queries.len() as u64),
                ("pairs".into(), data.pairs.len() as u64),
                ("no_contrast".into(), data.report.no_contrast as u64),
                ("target".into(), target as u64),
            ]),
        })
    }

    fn eval_stage(&self) -> Result<StageCheckpoint, PipelineError> {
        if self.config.eval_problems.is_empty() {
            return Err(EvalError::NoProblems.into());
        }
        let mut problems = Vec::new();
        for path in &self.config.eval_problems {
            problems.extend(load_problems(path, self.config.eval_language)?);
        }
        let sandbox = self.sandbox()?;
        let report = run_benchmark(&problems, self.backend.as_ref(), &sandbox, &self.templates, &self.config.eval)?;
        write_json(&self.path(EVAL_REPORT), &report).map_err(io_err(EVAL_REPORT))?;
        Ok(StageCheckpoint {
            artifacts: vec![EVAL_REPORT.into()],
            counters: BTreeMap::from([
                ("problems".into(), problems.len() as u64),
                ("failed_problems".into(), report.failed_problems as u64),
            ]),
        })
    }

    /// Writes `sft.jsonl` (seed_s1, seed_s2, agent_s3 in that order),
    /// `dpo.jsonl` and `manifest.json` into `out_dir`.
    pub fn emit_dataset(&self, out_dir: &Path) -> Result<Manifest, PipelineError> {
        let hash = self.config.hash();
        let state = self.load_state()?.ok_or(PipelineError::EmitNotReady(Stage::Seed))?;
        if state.config_hash != hash {
            return Err(PipelineError::ConfigMismatchOnResume {
                on_disk: state.config_hash,
                current: hash,
            });
        }
        if let Some(stage) = [Stage::Seed, Stage::Discuss, Stage::Dpo].into_iter().find(|s| !state.is_complete(*s)) {
            return Err(PipelineError::EmitNotReady(stage));
        }
        fs::create_dir_all(out_dir).map_err(io_err(out_dir.display()))?;

        let mut partitions = BTreeMap::new();
        let mut sft = Vec::new();
        let mut sft_records = 0;
        for (name, rel) in [("seed_s1", SEED_S1), ("seed_s2", SEED_S2), ("agent_s3", AGENT_S3)] {
            let pairs: Vec<InstructionPair> = read_jsonl(&self.path(rel))?;
            partitions.insert(name.to_string(), per_language(pairs.iter().map(|p| &p.language)));
            sft_records += pairs.len();
            sft.extend(pairs);
        }
        let sft_text = crate::util::to_jsonl(&sft).map_err(|e| io_err("sft.jsonl")(std::io::Error::other(e)))?;
        let dpo: Vec<PreferencePair> = read_jsonl(&self.path(DPO_S4))?;
        let dpo_text = crate::util::to_jsonl(&dpo).map_err(|e| io_err("dpo.jsonl")(std::io::Error::other(e)))?;
        crate::util::atomic_write(&out_dir.join("sft.jsonl"), sft_text.as_bytes()).map_err(io_err("sft.jsonl"))?;
        crate::util::atomic_write(&out_dir.join("dpo.jsonl"), dpo_text.as_bytes()).map_err(io_err("dpo.jsonl"))?;

        let targets = &self.config.targets;
        let mut notes = vec!["dpo.jsonl counts preference pairs, not responses".to_string()];
        if dpo.is_empty() {
            notes.push("dpo.jsonl is empty: no query produced both a passing and a failing response".into());
        }
        let seed_count = partitions["seed_s1"].values().sum::<usize>() + partitions["seed_s2"].values().sum::<usize>();
        let s3_count: usize = partitions["agent_s3"].values().sum();
        for (what, got, want) in [("seed", seed_count, targets.seed()), ("agent_s3", s3_count, targets.s3()), ("dpo", dpo.len(), targets.dpo())] {
            if got < want {
                notes.push(format!("{what}: {got} of {want} targeted records"));
            }
        }
        let manifest = Manifest {
            run_id: state.run_id,
            config_hash: state.config_hash,
            scale_factor: targets.scale_factor,
            targets: BTreeMap::from([
                ("seed".into(), targets.seed()),
                ("agent_s3".into(), targets.s3()),
                ("dpo".into(), targets.dpo()),
            ]),
            files: BTreeMap::from([
                (
                    "sft.jsonl".into(),
                    FileEntry {
                        records: sft_records,
                        sha256: sha256_hex(sft_text.as_bytes()),
                    },
                ),
                (
                    "dpo.jsonl".into(),
                    FileEntry {
                        records: dpo.len(),
                        sha256: sha256_hex(dpo_text.as_bytes()),
                    },
                ),
            ]),
            partitions,
            dpo_per_language: per_language(dpo.iter().map(|p| &p.language)),
            notes,
        };
        write_json(&out_dir.join("manifest.json"), &manifest).map_err(io_err("manifest.json"))?;
        Ok(manifest)
    }

    /// Composition summary: targets, counters of completed stages and the
    /// stage reports that exist.
    pub fn report(&self) -> Result<serde_json::Value, PipelineError> {
        let state = self.load_state()?;
        let mut reports = serde_json::Map::new();
        for (name, rel) in [("seed", SEED_REPORT), ("discuss", S3_REPORT), ("dpo", DPO_REPORT), ("eval", EVAL_REPORT)] {
            let path = self.path(rel);
            if let Ok(text) = fs::read_to_string(&path) {
                let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| io_err(rel)(std::io::Error::other(e)))?;
                reports.insert(name.into(), value);
            }
        }
        let t = &self.config.targets;
        Ok(serde_json::json!({
            "run_dir": self.run_dir().display().to_string(),
            "config_hash": self.config.hash(),
            "state": state,
            "targets": {
                "scale_factor": t.scale_factor,
                "seed": t.seed(),
                "agent_s3": t.s3(),
                "dpo": t.dpo(),
            },
            "reports": reports,
        }))
    }
}
