//! Trajectory synthesis with a teacher policy and the filtering stages that
//! turn synthesized records into training data.
//!
//! Every stage partitions its input into kept, discarded and deferred
//! records and stamps each record with a verdict for that stage. Deferred
//! records hit an infrastructure failure (policy or judge unreachable) and
//! belong in a retry queue, not in the discard pile.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::environment::SamplingParams;
use crate::environment::{run_rollout, EnvError, Environment, Policy, PolicyError, PolicyInput};
use crate::rewards::{interleave_candidates, Judge};
use crate::types::{BBox, Query, Trajectory};

pub const STAGE_SYNTHESIS: &str = "synthesis";
pub const STAGE_QUALITY: &str = "quality";
pub const STAGE_DIFFICULTY: &str = "difficulty";
pub const STAGE_RL: &str = "rl";

pub const FLAG_UNANSWERED: &str = "unanswered";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictStatus {
    Kept,
    Discarded,
    Deferred,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub status: VerdictStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl Verdict {
    fn kept() -> Self {
        Self {
            status: VerdictStatus::Kept,
            reason: None,
        }
    }

    fn with(status: VerdictStatus, reason: impl Into<String>) -> Self {
        Self {
            status,
            reason: Some(reason.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisRecord {
    pub query: Query,
    pub trajectory: Trajectory,
    pub teacher_id: String,
    /// Layout proposals offered to the teacher, in the order shown.
    #[serde(default)]
    pub candidate_boxes: Vec<BBox>,
    #[serde(default)]
    pub verdicts: BTreeMap<String, Verdict>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub kept: Vec<SynthesisRecord>,
    pub discarded: Vec<SynthesisRecord>,
    pub deferred: Vec<SynthesisRecord>,
}

impl StageOutcome {
    pub fn report(&self, stage: &str) -> StageReport {
        let mut reasons = BTreeMap::new();
        for r in self.discarded.iter().chain(&self.deferred) {
            if let Some(reason) = r.verdicts.get(stage).and_then(|v| v.reason.clone()) {
                *reasons.entry(reason).or_insert(0) += 1;
            }
        }
        StageReport {
            stage: stage.to_string(),
            kept: self.kept.len(),
            discarded: self.discarded.len(),
            deferred: self.deferred.len(),
            reasons,
        }
    }

    /// Query ids per bucket, for comparing runs.
    pub fn partition_ids(&self) -> [Vec<String>; 3] {
        let ids = |rs: &[SynthesisRecord]| rs.iter().map(|r| r.query.id.clone()).collect();
        [ids(&self.kept), ids(&self.discarded), ids(&self.deferred)]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub kept: usize,
    pub discarded: usize,
    pub deferred: usize,
    /// Count per discard or deferral reason.
    pub reasons: BTreeMap<String, usize>,
}

#[derive(Debug, thiserror::Error)]
pub enum CurationError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("n_rollouts must be at least 2, got {0}")]
    TooFewRollouts(usize),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Applies `f` to every item with at most `parallelism` workers, keeping order.
fn par_map<T: Sync, U: Send>(
    items: &[T],
    parallelism: usize,
    f: impl Fn(&T) -> U + Sync,
) -> Vec<U> {
    if items.is_empty() {
        return Vec::new();
    }
    let workers = parallelism.clamp(1, items.len());
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(f).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("curation worker panicked"))
            .collect()
    })
}

fn partition(stage: &str, records: Vec<SynthesisRecord>, verdicts: Vec<Verdict>) -> StageOutcome {
    let mut out = StageOutcome::default();
    for (mut r, v) in records.into_iter().zip(verdicts) {
        let status = v.status;
        r.verdicts.insert(stage.to_string(), v);
        match status {
            VerdictStatus::Kept => out.kept.push(r),
            VerdictStatus::Discarded => out.discarded.push(r),
            VerdictStatus::Deferred => out.deferred.push(r),
        }
    }
    out
}

/// A teacher that may cite layout proposals by index. `<bbox>#1</bbox>` is
/// rewritten to the coordinates of proposal 1 on the current selected page
/// before the environment parses the turn.
struct CitingTeacher<'a> {
    inner: &'a dyn Policy,
    env: &'a Environment,
}

fn proposals(env: &Environment, traj: &Trajectory) -> Vec<BBox> {
    let (Some(layout), Some(doc)) = (
        env.layout(),
        traj.selections.last().and_then(|s| s.doc_ids.first()),
    ) else {
        return Vec::new();
    };
    env.corpus()
        .get(doc)
        .map(|p| layout.propose(p))
        .unwrap_or_default()
}

/// Replaces `#i` citations inside bbox payloads with proposal coordinates.
/// Unknown indices are left untouched so the parser reports them.
pub fn resolve_citations(text: &str, proposals: &[BBox]) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("<bbox>") {
        let body_start = start + "<bbox>".len();
        let Some(len) = rest[body_start..].find("</bbox>") else {
            break;
        };
        out.push_str(&rest[..body_start]);
        let body = &rest[body_start..body_start + len];
        let parts: Vec<String> = body
            .split(';')
            .map(|part| {
                let t = part.trim();
                t.strip_prefix('#')
                    .and_then(|i| i.parse::<usize>().ok())
                    .and_then(|i| proposals.get(i))
                    .map_or_else(|| part.to_string(), BBox::to_string)
            })
            .collect();
        out.push_str(&parts.join(";"));
        rest = &rest[body_start + len..];
    }
    out.push_str(rest);
    out
}

impl Policy for CitingTeacher<'_> {
    fn generate(&self, input: &PolicyInput<'_>) -> Result<String, PolicyError> {
        let text = self.inner.generate(input)?;
        if !text.contains('#') {
            return Ok(text);
        }
        Ok(resolve_citations(
            &text,
            &proposals(self.env, input.trajectory),
        ))
    }
}

/// Rolls out `teacher` on every query. Layout proposals for the selected
/// page are shown in the Select observation when `env` has a provider.
pub fn synthesize(
    teacher: &dyn Policy,
    teacher_id: &str,
    env: &Environment,
    queries: &[Query],
    parallelism: usize,
) -> Result<Vec<SynthesisRecord>, CurationError> {
    let citing = CitingTeacher {
        inner: teacher,
        env,
    };
    let results = par_map(queries, parallelism, |q| {
        run_rollout(&citing, env, q, SamplingParams::default())
    });
    let mut records = Vec::with_capacity(results.len());
    for (q, res) in queries.iter().zip(results) {
        let traj = res?;
        let mut candidate_boxes = Vec::new();
        if let Some(layout) = env.layout() {
            for sel in &traj.selections {
                if let Some(page) = sel.doc_ids.first().and_then(|d| env.corpus().get(d)) {
                    candidate_boxes.extend(layout.propose(page));
                }
            }
        }
        let mut verdicts = BTreeMap::new();
        if let Some(err) = &traj.policy_error {
            verdicts.insert(
                STAGE_SYNTHESIS.to_string(),
                Verdict::with(VerdictStatus::Discarded, format!("teacher failure: {err}")),
            );
        }
        let flags = if traj.final_answer.is_none() {
            vec![FLAG_UNANSWERED.to_string()]
        } else {
            Vec::new()
        };
        records.push(SynthesisRecord {
            query: q.clone(),
            trajectory: traj,
            teacher_id: teacher_id.to_string(),
            candidate_boxes,
            verdicts,
            flags,
        });
    }
    Ok(records)
}

fn judged(judge: &dyn Judge, q: &Query, answer: Option<&str>) -> Result<bool, String> {
    match answer {
        None => Ok(false),
        Some(a) => judge
            .score(a, &q.reference_answer, &q.text)
            .map_err(|e| format!("judge failure: {e}")),
    }
}

/// Keeps records whose final answer the judge accepts.
pub fn quality_filter(
    records: Vec<SynthesisRecord>,
    judge: &dyn Judge,
    parallelism: usize,
) -> StageOutcome {
    let verdicts = par_map(&records, parallelism, |r| {
        if let Some(v) = r.verdicts.get(STAGE_SYNTHESIS) {
            if v.status == VerdictStatus::Discarded {
                return v.clone();
            }
        }
        match judged(judge, &r.query, r.trajectory.final_answer.as_deref()) {
            Ok(true) => Verdict::kept(),
            Ok(false) if r.trajectory.final_answer.is_none() => {
                Verdict::with(VerdictStatus::Discarded, "no final answer")
            }
            Ok(false) => Verdict::with(VerdictStatus::Discarded, "incorrect"),
            Err(e) => Verdict::with(VerdictStatus::Deferred, e),
        }
    });
    partition(STAGE_QUALITY, records, verdicts)
}

/// Keeps records a weaker policy fails on, judged after one greedy rollout.
pub fn difficulty_filter(
    records: Vec<SynthesisRecord>,
    weak: &dyn Policy,
    env: &Environment,
    judge: &dyn Judge,
    parallelism: usize,
) -> StageOutcome {
    let verdicts = par_map(&records, parallelism, |r| {
        let traj = match run_rollout(weak, env, &r.query, SamplingParams::default()) {
            Ok(t) => t,
            Err(e) => {
                return Verdict::with(VerdictStatus::Deferred, format!("rollout failure: {e}"))
            }
        };
        if let Some(err) = traj.policy_error {
            return Verdict::with(
                VerdictStatus::Deferred,
                format!("weak policy failure: {err}"),
            );
        }
        match judged(judge, &r.query, traj.final_answer.as_deref()) {
            Ok(true) => Verdict::with(VerdictStatus::Discarded, "trivial"),
            Ok(false) => Verdict::kept(),
            Err(e) => Verdict::with(VerdictStatus::Deferred, e),
        }
    });
    partition(STAGE_DIFFICULTY, records, verdicts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RlCurationConfig {
    pub n_rollouts: usize,
    pub temperature: f64,
    /// Rollout `i` samples with seed `base_seed + i`.
    pub base_seed: u64,
}

impl Default for RlCurationConfig {
    fn default() -> Self {
        Self {
            n_rollouts: 5,
            temperature: 1.0,
            base_seed: 0,
        }
    }
}

/// Keeps queries where retrieval succeeds in some rollout yet some rollout
/// answers wrongly: the reasoning, not the retrieval, is the bottleneck.
pub fn rl_curation(
    records: Vec<SynthesisRecord>,
    policy: &dyn Policy,
    env: &Environment,
    judge: &dyn Judge,
    cfg: RlCurationConfig,
    parallelism: usize,
) -> Result<StageOutcome, CurationError> {
    if cfg.n_rollouts < 2 {
        return Err(CurationError::TooFewRollouts(cfg.n_rollouts));
    }
    let verdicts = par_map(&records, parallelism, |r| {
        let mut retrieved = false;
        let mut wrong = false;
        for i in 0..cfg.n_rollouts {
            let params = SamplingParams {
                temperature: cfg.temperature,
                seed: cfg.base_seed.wrapping_add(i as u64),
            };
            let traj = match run_rollout(policy, env, &r.query, params) {
                Ok(t) => t,
                Err(e) => {
                    return Verdict::with(VerdictStatus::Deferred, format!("rollout failure: {e}"))
                }
            };
            if let Some(err) = traj.policy_error {
                return Verdict::with(VerdictStatus::Deferred, format!("policy failure: {err}"));
            }
            let golden = &r.query.golden_doc_ids;
            retrieved |= interleave_candidates(&traj.candidate_history)
                .iter()
                .any(|d| golden.contains(d));
            match judged(judge, &r.query, traj.final_answer.as_deref()) {
                Ok(ok) => wrong |= !ok,
                Err(e) => return Verdict::with(VerdictStatus::Deferred, e),
            }
        }
        match (retrieved, wrong) {
            (true, true) => Verdict::kept(),
            (false, _) => Verdict::with(VerdictStatus::Discarded, "retrieval bottleneck"),
            (true, false) => Verdict::with(VerdictStatus::Discarded, "too easy"),
        }
    });
    Ok(partition(STAGE_RL, records, verdicts))
}

pub fn read_records(path: &Path) -> Result<Vec<SynthesisRecord>, CurationError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| CurationError::Schema {
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[SynthesisRecord]) -> Result<(), CurationError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
