//! Tabular softmax policy over action templates, trained with group-relative
//! score-function updates on a [`MicroWorld`].
//!
//! The policy factorizes into independent decision points per query: whether
//! to think, how to phrase the search, which candidate to select (given the
//! search phrasing), which region to crop (given the search and selection),
//! and how to answer. Every choice is emitted as action text and executed by
//! a real [`Session`](crate::environment::Session).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::world::MicroWorld;
use super::{group_advantages, AdvantageError, DEFAULT_EPS, DEFAULT_GROUP_SIZE};
use crate::environment::{EnvError, Environment, Policy, PolicyError, PolicyInput, SessionConfig};
use crate::grammar::serialize_turn;
use crate::retrieval::{search, TfIndex, DEFAULT_DIMS};
use crate::rewards::{score_trajectory, BuiltinJudge, RewardError, RewardWeights};
use crate::types::{Action, BBox, Query, Role, Trajectory};

pub const STYLE_OPTIONS: usize = 2;
pub const SEARCH_OPTIONS: usize = 4;
/// Skip, whole page, then one option per region proposal.
pub const CROP_OPTIONS: usize = 2 + super::world::REGIONS_PER_PAGE;
/// Read the selected page, read the top search result, or give up.
pub const ANSWER_OPTIONS: usize = 3;
const UNKNOWN: &str = "unknown";
const GENERIC_SEARCH: &str = "annual report summary";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "point", rename_all = "snake_case")]
pub enum DecisionPoint {
    Style,
    Search,
    Select { search: usize },
    Crop { search: usize, select: usize },
    Answer,
}

impl DecisionPoint {
    pub fn key(&self, query_id: &str) -> String {
        match self {
            DecisionPoint::Style => format!("{query_id}/style"),
            DecisionPoint::Search => format!("{query_id}/search"),
            DecisionPoint::Select { search } => format!("{query_id}/select@{search}"),
            DecisionPoint::Crop { search, select } => format!("{query_id}/crop@{search}.{select}"),
            DecisionPoint::Answer => format!("{query_id}/answer"),
        }
    }
}

fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|z| ((z - max) / temperature).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum()
}

/// Logit tables keyed by `<query id>/<decision point>`. Missing entries are
/// all-zero logits, i.e. uniform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub logits: BTreeMap<String, Vec<f64>>,
    pub temperature: f64,
}

impl Default for ToyPolicy {
    fn default() -> Self {
        Self::uniform()
    }
}

impl ToyPolicy {
    pub fn uniform() -> Self {
        Self {
            logits: BTreeMap::new(),
            temperature: 1.0,
        }
    }

    pub fn logits_for(&self, key: &str, n: usize) -> Vec<f64> {
        match self.logits.get(key) {
            Some(z) if z.len() == n => z.clone(),
            _ => vec![0.0; n],
        }
    }

    pub fn probs(&self, key: &str, n: usize) -> Vec<f64> {
        softmax(&self.logits_for(key, n), self.temperature)
    }

    /// Mean KL(self || reference) over the keys either table defines.
    pub fn kl_from(&self, reference: &ToyPolicy) -> f64 {
        let keys: std::collections::BTreeSet<&String> =
            self.logits.keys().chain(reference.logits.keys()).collect();
        if keys.is_empty() {
            return 0.0;
        }
        let total: f64 = keys
            .iter()
            .map(|k| {
                let n = self
                    .logits
                    .get(*k)
                    .or_else(|| reference.logits.get(*k))
                    .map_or(0, Vec::len);
                kl(&self.probs(k, n), &reference.probs(k, n))
            })
            .sum();
        total / keys.len() as f64
    }

    /// A policy that strongly prefers the choices [`OraclePolicy`] would make.
    pub fn oracle_init(agent: &ToyAgent, strength: f64) -> Self {
        let world = &agent.world;
        let index = TfIndex::build(&world.corpus, DEFAULT_DIMS).expect("default dims are valid");
        let mut policy = Self::uniform();
        let mut set = |key: String, n: usize, choice: usize| {
            let mut z = vec![0.0; n];
            z[choice] = strength;
            policy.logits.insert(key, z);
        };
        for q in &world.queries {
            let golden_doc = q
                .golden_doc_ids
                .iter()
                .next()
                .expect("world queries have a golden page");
            let golden_box = q.golden_boxes[golden_doc][0];
            set(DecisionPoint::Style.key(&q.id), STYLE_OPTIONS, 0);
            set(DecisionPoint::Search.key(&q.id), SEARCH_OPTIONS, 0);
            set(DecisionPoint::Answer.key(&q.id), ANSWER_OPTIONS, 0);
            for t in 0..SEARCH_OPTIONS {
                let text = agent.search_text(q, t);
                let ids: Vec<String> = search(&index, &world.corpus, &text, agent.k, 0)
                    .map(|s| s.doc_ids().map(str::to_string).collect())
                    .unwrap_or_default();
                let rank = ids.iter().position(|d| d == golden_doc).unwrap_or(0);
                set(
                    DecisionPoint::Select { search: t }.key(&q.id),
                    agent.k,
                    rank,
                );
                for (s, doc) in ids.iter().enumerate() {
                    let choice = if doc == golden_doc {
                        let r = world
                            .regions_of(doc)
                            .iter()
                            .position(|r| r.bbox == golden_box)
                            .expect("golden box is a region");
                        2 + r
                    } else {
                        0
                    };
                    set(
                        DecisionPoint::Crop {
                            search: t,
                            select: s,
                        }
                        .key(&q.id),
                        CROP_OPTIONS,
                        choice,
                    );
                }
            }
        }
        policy
    }
}

/// How the agent picks among options.
pub enum Sampler<'a> {
    Greedy,
    Sample(&'a mut ChaCha8Rng),
}

impl Sampler<'_> {
    fn choose(&mut self, probs: &[f64]) -> usize {
        match self {
            Sampler::Greedy => {
                let mut best = 0;
                for (i, p) in probs.iter().enumerate() {
                    if *p > probs[best] {
                        best = i;
                    }
                }
                best
            }
            Sampler::Sample(rng) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return i;
                    }
                }
                probs.len() - 1
            }
        }
    }
}

/// One decision taken during an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub key: String,
    pub options: usize,
    pub choice: usize,
}

/// Turns policy choices into action text for a micro-world session.
#[derive(Debug, Clone)]
pub struct ToyAgent {
    pub world: Arc<MicroWorld>,
    pub k: usize,
}

enum Phase {
    Search,
    Select {
        search: usize,
    },
    CropOrAnswer {
        search: usize,
        select: usize,
        doc: String,
    },
    Answer,
}

impl ToyAgent {
    pub fn new(world: Arc<MicroWorld>, k: usize) -> Self {
        Self { world, k }
    }

    pub fn search_text(&self, q: &Query, template: usize) -> String {
        let facts = self.world.facts.get(&q.id);
        match (template, facts) {
            (0, _) | (_, None) => q.text.clone(),
            (1, Some(f)) => f.entity.clone(),
            (2, Some(f)) => f.attribute.clone(),
            _ => GENERIC_SEARCH.to_string(),
        }
    }

    fn template_of(&self, q: &Query, text: &str) -> usize {
        (0..SEARCH_OPTIONS)
            .find(|t| self.search_text(q, *t) == text)
            .unwrap_or(0)
    }

    fn phase(&self, traj: &Trajectory) -> Phase {
        let assistant = traj.assistant_turns().count();
        let last = traj.actions().last();
        let failed = traj
            .soft_errors
            .last()
            .is_some_and(|e| e.step + 1 == assistant);
        let last_search = || {
            let searches: Vec<&str> = traj
                .actions()
                .filter_map(|a| match a {
                    Action::Search { query } => Some(query.as_str()),
                    _ => None,
                })
                .collect();
            searches.last().map(|q| self.template_of(&traj.query, q))
        };
        match last {
            None => Phase::Search,
            Some(Action::Search { .. }) if !failed => {
                let empty = traj
                    .candidate_history
                    .last()
                    .is_none_or(|s| s.entries.is_empty());
                if empty {
                    Phase::Answer
                } else {
                    Phase::Select {
                        search: last_search().unwrap_or(0),
                    }
                }
            }
            Some(Action::Select { indices }) if !failed => match traj.selections.last() {
                Some(sel) if !sel.doc_ids.is_empty() => Phase::CropOrAnswer {
                    search: last_search().unwrap_or(0),
                    select: indices.first().copied().unwrap_or(0),
                    doc: sel.doc_ids[0].clone(),
                },
                _ => Phase::Answer,
            },
            _ => Phase::Answer,
        }
    }

    fn answer_text(&self, traj: &Trajectory, choice: usize) -> String {
        let Some(facts) = self.world.facts.get(&traj.query.id) else {
            return UNKNOWN.into();
        };
        let doc = match choice {
            0 => traj
                .selections
                .last()
                .and_then(|s| s.doc_ids.first())
                .cloned(),
            1 => traj
                .candidate_history
                .last()
                .and_then(|s| s.entries.first())
                .map(|c| c.doc_id.clone()),
            _ => None,
        };
        doc.and_then(|d| self.world.read(&d, &facts.attribute).map(str::to_string))
            .unwrap_or_else(|| UNKNOWN.into())
    }

    /// The next assistant turn for `traj` and the decisions behind it.
    pub fn next_turn(
        &self,
        policy: &ToyPolicy,
        traj: &Trajectory,
        sampler: &mut Sampler<'_>,
    ) -> (String, Vec<Decision>) {
        let qid = traj.query.id.as_str();
        let mut decisions = Vec::new();
        let mut decide = |point: DecisionPoint, n: usize, sampler: &mut Sampler<'_>| {
            let key = point.key(qid);
            let choice = sampler.choose(&policy.probs(&key, n));
            decisions.push(Decision {
                key,
                options: n,
                choice,
            });
            choice
        };
        let think = decide(DecisionPoint::Style, STYLE_OPTIONS, sampler) == 0;

        let (thought, action) = match self.phase(traj) {
            Phase::Search => {
                let t = decide(DecisionPoint::Search, SEARCH_OPTIONS, sampler);
                (
                    "I should search the corpus for this question.",
                    Action::Search {
                        query: self.search_text(&traj.query, t),
                    },
                )
            }
            Phase::Select { search } => {
                let s = decide(DecisionPoint::Select { search }, self.k, sampler);
                (
                    "One of these pages should hold the fact.",
                    Action::Select { indices: vec![s] },
                )
            }
            Phase::CropOrAnswer {
                search,
                select,
                doc,
            } => {
                let c = decide(
                    DecisionPoint::Crop { search, select },
                    CROP_OPTIONS,
                    sampler,
                );
                let page = self.world.corpus.get(&doc);
                let region = match c {
                    1 => page.and_then(|p| {
                        BBox::new(0, 0, i64::from(p.width), i64::from(p.height)).ok()
                    }),
                    c if c >= 2 => self.world.regions_of(&doc).get(c - 2).map(|r| r.bbox),
                    _ => None,
                };
                match region {
                    Some(b) => (
                        "Zoom into the region that holds the fact.",
                        Action::Crop { boxes: vec![b] },
                    ),
                    None => {
                        let a = decide(DecisionPoint::Answer, ANSWER_OPTIONS, sampler);
                        (
                            "The page states the value.",
                            Action::Answer {
                                text: self.answer_text(traj, a),
                            },
                        )
                    }
                }
            }
            Phase::Answer => {
                let a = decide(DecisionPoint::Answer, ANSWER_OPTIONS, sampler);
                (
                    "The page states the value.",
                    Action::Answer {
                        text: self.answer_text(traj, a),
                    },
                )
            }
        };
        let text = if think {
            serialize_turn(thought, &action)
        } else {
            crate::grammar::serialize_action(&action)
        }
        .expect("toy actions are well formed");
        (text, decisions)
    }

    /// Runs one full episode and returns the trajectory with its decisions.
    pub fn run_episode(
        &self,
        env: &Environment,
        policy: &ToyPolicy,
        query: &Query,
        sampler: &mut Sampler<'_>,
    ) -> Result<(Trajectory, Vec<Decision>), EnvError> {
        let mut session = env.create_session(query.clone())?;
        let mut decisions = Vec::new();
        while !session.is_terminated() {
            let (text, mut d) = self.next_turn(policy, session.trajectory(), sampler);
            decisions.append(&mut d);
            session.step(&text)?;
        }
        Ok((session.into_trajectory(), decisions))
    }
}

/// A toy policy usable wherever a [`Policy`] is expected. Temperature 0
/// picks greedily; otherwise choices are sampled from a generator seeded by
/// the sampling seed and step.
pub struct ToyPolicyRunner {
    pub agent: ToyAgent,
    pub policy: ToyPolicy,
}

impl Policy for ToyPolicyRunner {
    fn generate(&self, input: &PolicyInput<'_>) -> Result<String, PolicyError> {
        let (text, _) = if input.params.temperature <= 0.0 {
            self.agent
                .next_turn(&self.policy, input.trajectory, &mut Sampler::Greedy)
        } else {
            let mut policy = self.policy.clone();
            policy.temperature = input.params.temperature;
            let mut rng = ChaCha8Rng::seed_from_u64(
                input.params.seed ^ (input.step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            );
            self.agent
                .next_turn(&policy, input.trajectory, &mut Sampler::Sample(&mut rng))
        };
        Ok(text)
    }
}

/// Follows the golden annotations: direct search, golden pick, golden crop,
/// reference answer, with a thought on every turn.
#[derive(Debug, Clone, Copy, Default)]
pub struct OraclePolicy;

impl Policy for OraclePolicy {
    fn generate(&self, input: &PolicyInput<'_>) -> Result<String, PolicyError> {
        let traj = input.trajectory;
        let q = &traj.query;
        let golden = |d: &str| q.golden_doc_ids.contains(d);
        let last = traj.actions().last();
        let action = match last {
            None => Action::Search {
                query: q.text.clone(),
            },
            Some(Action::Search { .. }) => match traj.candidate_history.last() {
                Some(set) => match set.doc_ids().position(golden) {
                    Some(i) => Action::Select { indices: vec![i] },
                    None => Action::Answer {
                        text: q.reference_answer.clone(),
                    },
                },
                None => Action::Answer {
                    text: q.reference_answer.clone(),
                },
            },
            Some(Action::Select { .. }) => {
                let boxes: Vec<BBox> = traj
                    .selections
                    .last()
                    .and_then(|s| s.doc_ids.first())
                    .and_then(|d| q.golden_boxes.get(d))
                    .cloned()
                    .unwrap_or_default();
                if boxes.is_empty() {
                    Action::Answer {
                        text: q.reference_answer.clone(),
                    }
                } else {
                    Action::Crop { boxes }
                }
            }
            _ => Action::Answer {
                text: q.reference_answer.clone(),
            },
        };
        serialize_turn("Following the annotated evidence.", &action)
            .map_err(|e| PolicyError::Other(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTrainConfig {
    pub group_size: usize,
    pub lr: f64,
    pub iterations: usize,
    pub kl_coeff: f64,
    pub seed: u64,
    pub weights: RewardWeights,
    pub k: usize,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            group_size: DEFAULT_GROUP_SIZE,
            lr: 0.5,
            iterations: 500,
            kl_coeff: 0.01,
            seed: 0,
            weights: RewardWeights::default(),
            k: crate::retrieval::DEFAULT_K,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("logits for {key} became non-finite at iteration {iteration}: {logits:?}")]
    Divergence {
        iteration: usize,
        key: String,
        logits: Vec<f64>,
    },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Advantage(#[from] AdvantageError),
    #[error("writing metrics: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub mean_total: f64,
    pub mean_r_pat: f64,
    pub mean_r_ir: f64,
    pub mean_r_sel: f64,
    pub mean_r_crop: f64,
    pub mean_r_ans: f64,
    /// Share of rollouts whose first selected page is golden.
    pub selection_accuracy: f64,
}

/// Greedy evaluation of a policy over every world query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mean_total: f64,
    pub selection_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub iterations: Vec<IterationMetrics>,
    pub final_policy: ToyPolicy,
    pub final_eval: EvalMetrics,
    /// Mean per-decision KL of the final policy from the initial one.
    pub final_kl: f64,
}

impl TrainingReport {
    /// One JSON object per iteration.
    pub fn write_metrics(&self, path: &Path) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for m in &self.iterations {
            serde_json::to_writer(&mut out, m)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }
}

fn first_selection_golden(traj: &Trajectory) -> bool {
    traj.selections
        .first()
        .and_then(|s| s.doc_ids.first())
        .is_some_and(|d| traj.query.golden_doc_ids.contains(d))
}

/// Greedy rollouts of `policy` over all queries of the agent's world.
pub fn evaluate(
    agent: &ToyAgent,
    env: &Environment,
    policy: &ToyPolicy,
    weights: &RewardWeights,
) -> Result<(EvalMetrics, Vec<Trajectory>), TrainError> {
    let mut total = 0.0;
    let mut hits = 0usize;
    let mut trajs = Vec::new();
    for q in &agent.world.queries {
        let (mut traj, _) = agent.run_episode(env, policy, q, &mut Sampler::Greedy)?;
        let r = score_trajectory(&traj, &BuiltinJudge, weights)?;
        total += r.total;
        hits += usize::from(first_selection_golden(&traj));
        traj.reward = Some(r);
        trajs.push(traj);
    }
    let n = agent.world.queries.len().max(1) as f64;
    Ok((
        EvalMetrics {
            mean_total: total / n,
            selection_accuracy: hits as f64 / n,
        },
        trajs,
    ))
}

/// Group-relative policy-gradient training of `policy` on `world`.
pub fn toy_train(
    world: Arc<MicroWorld>,
    policy: ToyPolicy,
    cfg: &ToyTrainConfig,
) -> Result<TrainingReport, TrainError> {
    if cfg.group_size < 2 {
        return Err(TrainError::Config(format!(
            "group_size must be at least 2, got {}",
            cfg.group_size
        )));
    }
    if !cfg.lr.is_finite() || cfg.lr < 0.0 || !cfg.kl_coeff.is_finite() || cfg.kl_coeff < 0.0 {
        return Err(TrainError::Config(
            "lr and kl_coeff must be finite and nonnegative".into(),
        ));
    }
    if policy.temperature.is_nan() || policy.temperature <= 0.0 {
        return Err(TrainError::Config("temperature must be positive".into()));
    }
    cfg.weights.validate()?;
    let session_cfg = SessionConfig {
        k: cfg.k,
        ..SessionConfig::default()
    };
    let env = world.environment(session_cfg)?;
    let agent = ToyAgent::new(world.clone(), cfg.k);
    let reference = policy.clone();
    let mut policy = policy;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let g = cfg.group_size;
    let mut iterations = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut sums = [0.0f64; 6];
        let mut hits = 0usize;
        let mut count = 0usize;
        for q in &world.queries {
            let mut group = Vec::with_capacity(g);
            for _ in 0..g {
                let (traj, decisions) =
                    agent.run_episode(&env, &policy, q, &mut Sampler::Sample(&mut rng))?;
                let r = score_trajectory(&traj, &BuiltinJudge, &cfg.weights)?;
                for (s, c) in sums.iter_mut().zip(r.components().iter().chain([&r.total])) {
                    *s += c;
                }
                hits += usize::from(first_selection_golden(&traj));
                count += 1;
                group.push((r.total, decisions));
            }
            let rewards: Vec<f64> = group.iter().map(|(r, _)| *r).collect();
            let adv = group_advantages(&rewards, DEFAULT_EPS)?;
            for ((_, decisions), a) in group.iter().zip(adv) {
                if a == 0.0 {
                    continue;
                }
                for d in decisions {
                    let p = policy.probs(&d.key, d.options);
                    let grad = grads
                        .entry(d.key.clone())
                        .or_insert_with(|| vec![0.0; d.options]);
                    for (j, (gj, pj)) in grad.iter_mut().zip(&p).enumerate() {
                        let onehot = if j == d.choice { 1.0 } else { 0.0 };
                        *gj += a * (onehot - pj) / policy.temperature / g as f64;
                    }
                }
            }
        }

        if cfg.lr > 0.0 {
            for (key, grad) in grads {
                let n = grad.len();
                let z = policy.logits.entry(key).or_insert_with(|| vec![0.0; n]);
                for (zj, gj) in z.iter_mut().zip(grad) {
                    *zj += cfg.lr * gj;
                }
            }
            if cfg.kl_coeff > 0.0 {
                for (key, z) in policy.logits.iter_mut() {
                    let n = z.len();
                    let p = softmax(z, policy.temperature);
                    let p0 = reference.probs(key, n);
                    let d = kl(&p, &p0);
                    for (j, zj) in z.iter_mut().enumerate() {
                        let grad = p[j] * ((p[j] / p0[j]).ln() - d) / policy.temperature;
                        *zj -= cfg.lr * cfg.kl_coeff * grad;
                    }
                }
            }
            if let Some((key, z)) = policy
                .logits
                .iter()
                .find(|(_, z)| z.iter().any(|v| !v.is_finite()))
            {
                return Err(TrainError::Divergence {
                    iteration,
                    key: key.clone(),
                    logits: z.clone(),
                });
            }
        }

        let n = count.max(1) as f64;
        iterations.push(IterationMetrics {
            iteration,
            mean_r_pat: sums[0] / n,
            mean_r_ir: sums[1] / n,
            mean_r_sel: sums[2] / n,
            mean_r_crop: sums[3] / n,
            mean_r_ans: sums[4] / n,
            mean_total: sums[5] / n,
            selection_accuracy: hits as f64 / n,
        });
    }

    let (final_eval, _) = evaluate(&agent, &env, &policy, &cfg.weights)?;
    let final_kl = policy.kl_from(&reference);
    Ok(TrainingReport {
        iterations,
        final_policy: policy,
        final_eval,
        final_kl,
    })
}

/// Checks that `traj` starts with the question and alternates roles.
pub fn well_shaped(traj: &Trajectory) -> bool {
    traj.turns.first().is_some_and(|t| t.role == Role::User)
        && crate::environment::roles_alternate(&traj.turns)
}
