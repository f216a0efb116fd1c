//! Multilingual code-instruction data synthesis.
//!
//! Stages, in pipeline order:
//! - [`seed`]: instruction pairs from raw code snippets, both directions,
//!   filtered by an LLM scorer.
//! - [`agent`] and [`discussion`]: language agents with bounded memories and
//!   reflection that discuss across languages to produce new pairs.
//! - [`sandbox`] and [`preference`]: execution-verified chosen/rejected pairs.
//! - [`eval`]: pass@k over benchmark problem files.
//! - [`pipeline`]: configuration, staged runs with checkpoints, dataset
//!   emission.

pub mod agent;
pub mod discussion;
pub mod eval;
pub mod gateway;
pub mod model;
pub mod pipeline;
pub mod preference;
pub mod prompts;
pub mod sandbox;
pub mod seed;
pub mod util;
