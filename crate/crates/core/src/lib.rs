//! Environment, dense rewards and group-relative advantages for agents that
//! answer questions over collections of document page images.
//!
//! An agent works through a coarse-to-fine action space: search the corpus,
//! select relevant candidates, crop and zoom into a region, answer. The
//! [`environment`] module runs that loop, [`rewards`] scores the finished
//! trajectory component by component, and [`grpo`] turns grouped rewards
//! into advantages and trains a small tabular policy on a synthetic world.

pub mod curation;
pub mod environment;
pub mod grammar;
pub mod grpo;
pub mod harness;
pub mod normalize;
pub mod perception;
pub mod retrieval;
pub mod rewards;
pub mod types;

pub use environment::{
    run_rollout, Environment, Policy, PolicyError, PolicyInput, SamplingParams, ScriptedPolicy,
    Session, SessionConfig, StepResult,
};
pub use grammar::{parse_turn, render_observation, serialize_action, FormatError, Observation};
pub use normalize::normalize_answer;
pub use perception::{LayoutProvider, ZoomConfig};
pub use retrieval::{CandidateSet, Corpus, Retriever, TfIndex};
pub use rewards::{BuiltinJudge, Judge, RewardWeights};
pub use types::{
    Action, ActionRecord, BBox, PageImage, Query, RewardBreakdown, Role, TerminationReason,
    Trajectory, Turn,
};
