//! The interaction loop.
//!
//! A [`Session`] starts with one User turn holding the prompt and question.
//! Each [`Session::step`] appends the assistant text, executes its action and,
//! unless the action was an answer, appends the observation as a User turn.
//! The episode ends on an answer or after `t_max` steps.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::grammar::{self, render_observation, FormatError, Observation};
use crate::perception::{self, LayoutProvider, PerceptionError, ZoomConfig};
use crate::retrieval::{self, Corpus, Retriever};
use crate::types::{
    Action, PredictedBox, Query, Role, Selection, SoftError, TerminationReason, Trajectory, Turn,
    TypeError,
};

pub const DEFAULT_TEMPLATE: &str = include_str!("../assets/prompt_template.txt");

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("session already terminated")]
    StepAfterTermination,
    #[error("invalid session config: {0}")]
    Config(String),
    #[error("invalid query: {0}")]
    Query(#[from] TypeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub t_max: usize,
    pub k: usize,
    pub zoom: ZoomConfig,
    pub max_prompt_chars: usize,
    pub max_response_chars: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            t_max: 10,
            k: retrieval::DEFAULT_K,
            zoom: ZoomConfig::default(),
            max_prompt_chars: 40_000,
            max_response_chars: 1024,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.t_max == 0 {
            return Err(EnvError::Config("t_max must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(EnvError::Config("k must be at least 1".into()));
        }
        if self.max_response_chars == 0 {
            return Err(EnvError::Config(
                "max_response_chars must be positive".into(),
            ));
        }
        self.zoom
            .validate()
            .map_err(|e| EnvError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub observation: Option<Turn>,
    pub terminated: bool,
    pub termination_reason: TerminationReason,
    pub errors: Vec<FormatError>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            seed: 0,
        }
    }
}

/// What a policy sees when asked for its next turn.
pub struct PolicyInput<'a> {
    /// State so far, including the query and its annotations.
    pub trajectory: &'a Trajectory,
    /// The prompt view of the history, after length truncation.
    pub history: &'a [Turn],
    pub step: usize,
    pub params: SamplingParams,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("policy transport failure: {0}")]
    Transport(String),
    #[error("policy has no response for step {0}")]
    Exhausted(usize),
    #[error("{0}")]
    Other(String),
}

/// Produces one assistant turn. Implementations must tolerate concurrent calls.
pub trait Policy: Send + Sync {
    fn generate(&self, input: &PolicyInput<'_>) -> Result<String, PolicyError>;
}

/// Replays a fixed list of assistant turns, one per step.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    turns: Vec<String>,
}

impl ScriptedPolicy {
    pub fn new<S: Into<String>>(turns: impl IntoIterator<Item = S>) -> Self {
        Self {
            turns: turns.into_iter().map(Into::into).collect(),
        }
    }
}

impl Policy for ScriptedPolicy {
    fn generate(&self, input: &PolicyInput<'_>) -> Result<String, PolicyError> {
        self.turns
            .get(input.step)
            .cloned()
            .ok_or(PolicyError::Exhausted(input.step))
    }
}

/// Shared, immutable pieces every session of one corpus uses.
#[derive(Clone)]
pub struct Environment {
    corpus: Arc<Corpus>,
    retriever: Arc<dyn Retriever>,
    cfg: SessionConfig,
    template: Arc<str>,
    layout: Option<Arc<dyn LayoutProvider>>,
}

impl Environment {
    pub fn new(
        corpus: Arc<Corpus>,
        retriever: Arc<dyn Retriever>,
        cfg: SessionConfig,
    ) -> Result<Self, EnvError> {
        cfg.validate()?;
        Ok(Self {
            corpus,
            retriever,
            cfg,
            template: Arc::from(DEFAULT_TEMPLATE),
            layout: None,
        })
    }

    /// Replaces the prompt template; `{question}` marks where the question goes.
    pub fn with_template(mut self, template: impl Into<Arc<str>>) -> Self {
        self.template = template.into();
        self
    }

    /// Layout proposals for the first selected page are appended to Select
    /// observations when a provider is set.
    pub fn with_layout(mut self, layout: Arc<dyn LayoutProvider>) -> Self {
        self.layout = Some(layout);
        self
    }

    pub fn corpus(&self) -> &Arc<Corpus> {
        &self.corpus
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn layout(&self) -> Option<&Arc<dyn LayoutProvider>> {
        self.layout.as_ref()
    }

    pub fn render_prompt(&self, query: &Query) -> String {
        self.template.replace("{question}", &query.text)
    }

    pub fn create_session(&self, query: Query) -> Result<Session, EnvError> {
        query.validate()?;
        let mut traj = Trajectory::new(query);
        traj.turns.push(Turn::user(self.render_prompt(&traj.query)));
        Ok(Session {
            env: self.clone(),
            traj,
            step: 0,
            pending: None,
            current: Vec::new(),
            crops: 0,
        })
    }
}

pub struct Session {
    env: Environment,
    traj: Trajectory,
    step: usize,
    /// Index into `candidate_history` of the pool no Select has consumed yet.
    pending: Option<usize>,
    current: Vec<crate::types::PageImage>,
    crops: usize,
}

impl Session {
    pub fn trajectory(&self) -> &Trajectory {
        &self.traj
    }

    pub fn into_trajectory(self) -> Trajectory {
        self.traj
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn is_terminated(&self) -> bool {
        self.traj.terminated
    }

    pub fn history(&self) -> &[Turn] {
        &self.traj.turns
    }

    /// The history to show the policy, dropping the oldest exchanges (never
    /// the initial question) once it exceeds `max_prompt_chars`.
    pub fn prompt_history(&self) -> Vec<Turn> {
        let turns = &self.traj.turns;
        let limit = self.env.cfg.max_prompt_chars;
        let size = |ts: &[Turn]| ts.iter().map(|t| t.text.chars().count()).sum::<usize>();
        let (head, tail) = turns.split_at(1);
        let mut start = 0;
        // drop whole assistant/user exchanges, but always keep the latest one
        while start + 2 < tail.len() && size(head) + size(&tail[start..]) > limit {
            start += 2;
        }
        head.iter().chain(&tail[start..]).cloned().collect()
    }

    fn soft_error(&mut self, message: impl Into<String>) -> Observation {
        let message = message.into();
        self.traj.soft_errors.push(SoftError {
            step: self.step,
            message: message.clone(),
        });
        Observation::Notice(message)
    }

    pub fn step(&mut self, assistant_text: &str) -> Result<StepResult, EnvError> {
        if self.traj.terminated {
            return Err(EnvError::StepAfterTermination);
        }
        let text: String = assistant_text
            .chars()
            .take(self.env.cfg.max_response_chars)
            .collect();
        let parsed = grammar::parse_turn(&text);
        let action = parsed.record.action.clone();
        self.traj
            .turns
            .push(Turn::assistant(text, parsed.thought, parsed.record));

        let mut errors = Vec::new();
        let mut warnings = Vec::new();
        let observation = match action {
            Action::Answer { text } => {
                self.traj.final_answer = Some(text);
                self.step += 1;
                self.finish(TerminationReason::Answered);
                return Ok(StepResult {
                    observation: None,
                    terminated: true,
                    termination_reason: TerminationReason::Answered,
                    errors,
                    warnings,
                });
            }
            Action::Malformed { errors: errs } => {
                errors = errs;
                Observation::Notice(grammar::INVALID_FORMAT.into())
            }
            Action::Search { query } => self.do_search(&query),
            Action::Select { indices } => self.do_select(&indices, &mut warnings),
            Action::Crop { boxes } => self.do_crop(&boxes),
        };

        let turn = render_observation(&observation);
        let turn = if warnings.is_empty() {
            turn
        } else {
            Turn {
                text: format!("{}\n{}", turn.text, warnings.join("\n")),
                ..turn
            }
        };
        self.traj.turns.push(turn.clone());
        self.step += 1;
        let reason = if self.step >= self.env.cfg.t_max {
            self.finish(TerminationReason::BudgetExhausted);
            TerminationReason::BudgetExhausted
        } else {
            TerminationReason::None
        };
        Ok(StepResult {
            observation: Some(turn),
            terminated: reason != TerminationReason::None,
            termination_reason: reason,
            errors,
            warnings,
        })
    }

    /// Ends the episode after a policy failure.
    pub fn abort(&mut self, reason: impl Into<String>) {
        if !self.traj.terminated {
            self.traj.policy_error = Some(reason.into());
            self.finish(TerminationReason::BudgetExhausted);
        }
    }

    fn finish(&mut self, reason: TerminationReason) {
        self.traj.terminated = true;
        self.traj.termination = reason;
    }

    fn do_search(&mut self, query: &str) -> Observation {
        let step_index = self.traj.candidate_history.len();
        let set = match retrieval::search(
            self.env.retriever.as_ref(),
            &self.env.corpus,
            query,
            self.env.cfg.k,
            step_index,
        ) {
            Ok(set) => set,
            Err(e) => return self.soft_error(format!("Search failed: {e}")),
        };
        let pages = set
            .doc_ids()
            .filter_map(|d| self.env.corpus.get(d).cloned())
            .collect();
        self.traj.candidate_history.push(set);
        self.pending = Some(step_index);
        Observation::Candidates(pages)
    }

    fn do_select(&mut self, indices: &[usize], warnings: &mut Vec<String>) -> Observation {
        let Some(pool) = self.pending else {
            return self.soft_error(grammar::NO_IMAGES);
        };
        let set = &self.traj.candidate_history[pool];
        match perception::select_images(set, &self.env.corpus, indices) {
            Ok(out) => {
                if !out.dropped.is_empty() {
                    let listed: Vec<String> = out.dropped.iter().map(usize::to_string).collect();
                    warnings.push(format!(
                        "Ignored out-of-range indices: {}",
                        listed.join(",")
                    ));
                }
                self.traj.selections.push(Selection {
                    search_index: pool,
                    doc_ids: out.pages.iter().map(|p| p.doc_id.clone()).collect(),
                });
                self.pending = None;
                let regions = match (&self.env.layout, out.pages.first()) {
                    (Some(layout), Some(first)) => layout.propose(first),
                    _ => Vec::new(),
                };
                self.current = out.pages.clone();
                Observation::Selected {
                    images: out.pages,
                    regions,
                }
            }
            Err(PerceptionError::EmptySelection(_)) => {
                self.soft_error("No candidate matches the selected indices.")
            }
            Err(e) => self.soft_error(e.to_string()),
        }
    }

    fn do_crop(&mut self, boxes: &[crate::types::BBox]) -> Observation {
        let Some(target) = self.current.first().cloned() else {
            return self.soft_error(grammar::NO_IMAGES);
        };
        let mut crops = Vec::new();
        let mut failures = Vec::new();
        for &b in boxes {
            match perception::crop_zoom(&target, b, &self.env.cfg.zoom, self.crops) {
                Ok(c) => {
                    self.crops += 1;
                    self.traj.predicted_boxes.push(PredictedBox {
                        doc_id: target.doc_id.clone(),
                        bbox: c.bbox,
                    });
                    crops.push(c);
                }
                Err(e) => {
                    self.traj.predicted_boxes.push(PredictedBox {
                        doc_id: target.doc_id.clone(),
                        bbox: b,
                    });
                    failures.push(format!("Invalid crop region {b}: {e}"));
                }
            }
        }
        for f in &failures {
            self.soft_error(f.clone());
        }
        if crops.is_empty() {
            Observation::Notice(failures.join("\n"))
        } else {
            Observation::Cropped(crops)
        }
    }
}

/// Drives `policy` through one episode of `query`.
pub fn run_rollout(
    policy: &dyn Policy,
    env: &Environment,
    query: &Query,
    params: SamplingParams,
) -> Result<Trajectory, EnvError> {
    let mut session = env.create_session(query.clone())?;
    while !session.is_terminated() {
        let history = session.prompt_history();
        let input = PolicyInput {
            trajectory: session.trajectory(),
            history: &history,
            step: session.step_count(),
            params,
        };
        match policy.generate(&input) {
            Ok(text) => {
                session.step(&text)?;
            }
            Err(e) => session.abort(e.to_string()),
        }
    }
    Ok(session.into_trajectory())
}

/// Checks the role pattern: one User turn, then Assistant/User alternating.
pub fn roles_alternate(turns: &[Turn]) -> bool {
    turns.first().is_some_and(|t| t.role == Role::User)
        && turns[1..].iter().enumerate().all(|(i, t)| {
            t.role
                == if i % 2 == 0 {
                    Role::Assistant
                } else {
                    Role::User
                }
        })
}
