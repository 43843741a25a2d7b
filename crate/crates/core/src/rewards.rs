//! Dense trajectory rewards.
//!
//! Five components, each in `[0, 1]`:
//!
//! | component | measures |
//! |-----------|----------|
//! | `r_pat`   | every turn is well formed, thinks first, and the episode ends in an answer |
//! | `r_ir`    | NDCG of all search results, interleaved by rank, against the golden pages |
//! | `r_sel`   | per-search selection precision against golden (or pseudo-positive) pages |
//! | `r_crop`  | mean best-match IoU of predicted crops against golden boxes |
//! | `r_ans`   | judge verdict on the final answer |
//!
//! and a weighted total `λ1·r_pat + λ2·r_ir + λ3·r_sel + λ4·r_crop + λ5·r_ans`,
//! summed left to right.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::normalize::answer_tokens;
use crate::retrieval::CandidateSet;
use crate::types::{Action, BBox, PredictedBox, RewardBreakdown, TerminationReason, Trajectory};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("weight λ{0} is negative or not finite: {1}")]
    BadWeight(usize, f64),
    #[error("component {0} is outside [0,1]: {1}")]
    ComponentOutOfRange(&'static str, f64),
    #[error("judge failed: {0}")]
    Judge(#[from] JudgeError),
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum JudgeError {
    #[error("judge transport failure: {0}")]
    Transport(String),
    #[error("judge returned an invalid score: {0}")]
    BadScore(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RewardWeights(pub [f64; 5]);

impl Default for RewardWeights {
    fn default() -> Self {
        Self([0.1, 0.1, 0.1, 0.1, 0.6])
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<(), RewardError> {
        for (i, w) in self.0.iter().enumerate() {
            if !w.is_finite() || *w < 0.0 {
                return Err(RewardError::BadWeight(i + 1, *w));
            }
        }
        Ok(())
    }

    pub fn with(mut self, index: usize, value: f64) -> Self {
        self.0[index] = value;
        self
    }
}

/// Binary answer correctness.
pub trait Judge: Send + Sync {
    fn score(&self, generated: &str, reference: &str, question: &str) -> Result<bool, JudgeError>;
}

/// Normalized exact match, or one answer appearing as a contiguous run of
/// whole tokens inside the other.
#[derive(Debug, Clone, Copy, Default)]
pub struct BuiltinJudge;

fn contains_run(hay: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

impl Judge for BuiltinJudge {
    fn score(&self, generated: &str, reference: &str, _question: &str) -> Result<bool, JudgeError> {
        let g = answer_tokens(generated);
        let r = answer_tokens(reference);
        Ok(g == r || contains_run(&g, &r) || contains_run(&r, &g))
    }
}

pub fn pattern_reward(traj: &Trajectory) -> f64 {
    let mut turns = traj.assistant_turns().peekable();
    if turns.peek().is_none() || !traj.soft_errors.is_empty() {
        return 0.0;
    }
    let well_formed = turns.all(|t| {
        t.thought.is_some() && t.parsed.as_ref().is_some_and(|p| !p.action.is_malformed())
    });
    let answered = traj.termination == TerminationReason::Answered
        && matches!(traj.actions().last(), Some(Action::Answer { .. }));
    if well_formed && answered {
        1.0
    } else {
        0.0
    }
}

/// Merges ranked lists rank by rank: all rank-0 entries in search order,
/// then all rank-1 entries, and so on. Later duplicates are dropped.
pub fn interleave_candidates(history: &[CandidateSet]) -> Vec<String> {
    let depth = history.iter().map(|s| s.entries.len()).max().unwrap_or(0);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rank in 0..depth {
        for set in history {
            if let Some(c) = set.entries.get(rank) {
                if seen.insert(c.doc_id.as_str()) {
                    out.push(c.doc_id.clone());
                }
            }
        }
    }
    out
}

/// Binary-gain NDCG over the whole ranked list. A document earns gain only
/// at its first occurrence.
pub fn ndcg<S: AsRef<str>>(ranked: &[S], golden: &BTreeSet<String>) -> f64 {
    if ranked.is_empty() || golden.is_empty() {
        return 0.0;
    }
    let mut seen = HashSet::new();
    let mut dcg = 0.0;
    for (i, d) in ranked.iter().enumerate() {
        let d = d.as_ref();
        if golden.contains(d) && seen.insert(d) {
            dcg += 1.0 / ((i + 2) as f64).log2();
        }
    }
    let idcg: f64 = (0..golden.len())
        .map(|i| 1.0 / ((i + 2) as f64).log2())
        .sum();
    dcg / idcg
}

pub fn retrieval_reward(traj: &Trajectory, golden: &BTreeSet<String>) -> f64 {
    if traj.candidate_history.is_empty() {
        return 0.0;
    }
    ndcg(&interleave_candidates(&traj.candidate_history), golden)
}

/// Mean over searches of selection precision. Each search's target set is
/// its golden candidates, or its top candidate when it retrieved none.
pub fn selection_reward(traj: &Trajectory, golden: &BTreeSet<String>) -> f64 {
    let m = traj.candidate_history.len();
    if m == 0 {
        return 0.0;
    }
    let total: f64 = traj
        .candidate_history
        .iter()
        .enumerate()
        .map(|(i, set)| {
            let Some(sel) = traj.selections.iter().find(|s| s.search_index == i) else {
                return 0.0;
            };
            if sel.doc_ids.is_empty() {
                return 0.0;
            }
            let mut targets: BTreeSet<&str> =
                set.doc_ids().filter(|d| golden.contains(*d)).collect();
            if targets.is_empty() {
                targets.extend(set.doc_ids().take(1));
            }
            let hits = sel
                .doc_ids
                .iter()
                .filter(|d| targets.contains(d.as_str()))
                .count();
            hits as f64 / sel.doc_ids.len() as f64
        })
        .sum();
    total / m as f64
}

/// Mean best-match IoU of the predicted boxes. Without predictions the
/// reward is 1 only when no golden box could have been asked for: none on
/// the selected pages, or none at all if nothing was selected.
pub fn crop_reward(
    predicted: &[PredictedBox],
    golden: &BTreeMap<String, Vec<BBox>>,
    selected: &[&str],
) -> f64 {
    if predicted.is_empty() {
        let has_boxes = |d: &str| golden.get(d).is_some_and(|b| !b.is_empty());
        let nothing_to_crop = if selected.is_empty() {
            golden.values().all(Vec::is_empty)
        } else {
            !selected.iter().any(|d| has_boxes(d))
        };
        return if nothing_to_crop { 1.0 } else { 0.0 };
    }
    let sum: f64 = predicted
        .iter()
        .map(|p| {
            golden
                .get(&p.doc_id)
                .map(|boxes| boxes.iter().map(|g| g.iou(&p.bbox)).fold(0.0, f64::max))
                .unwrap_or(0.0)
        })
        .sum();
    sum / predicted.len() as f64
}

pub fn outcome_reward(judge: &dyn Judge, traj: &Trajectory) -> Result<f64, JudgeError> {
    let Some(answer) = &traj.final_answer else {
        return Ok(0.0);
    };
    let q = &traj.query;
    Ok(if judge.score(answer, &q.reference_answer, &q.text)? {
        1.0
    } else {
        0.0
    })
}

const COMPONENT_NAMES: [&str; 5] = ["r_pat", "r_ir", "r_sel", "r_crop", "r_ans"];

pub fn total_reward(
    components: [f64; 5],
    weights: &RewardWeights,
) -> Result<RewardBreakdown, RewardError> {
    weights.validate()?;
    for (name, c) in COMPONENT_NAMES.iter().zip(components) {
        if !(0.0..=1.0).contains(&c) {
            return Err(RewardError::ComponentOutOfRange(name, c));
        }
    }
    let [r_pat, r_ir, r_sel, r_crop, r_ans] = components;
    Ok(RewardBreakdown {
        r_pat,
        r_ir,
        r_sel,
        r_crop,
        r_ans,
        lambdas: weights.0,
        total: RewardBreakdown::weighted_sum(components, weights.0),
    })
}

/// All five components for a finished trajectory, weighted.
pub fn score_trajectory(
    traj: &Trajectory,
    judge: &dyn Judge,
    weights: &RewardWeights,
) -> Result<RewardBreakdown, RewardError> {
    let golden = &traj.query.golden_doc_ids;
    let components = [
        pattern_reward(traj),
        retrieval_reward(traj, golden),
        selection_reward(traj, golden),
        crop_reward(
            &traj.predicted_boxes,
            &traj.query.golden_boxes,
            &traj.selected_doc_ids(),
        ),
        outcome_reward(judge, traj)?,
    ];
    total_reward(components, weights)
}

/// Scores many trajectories with at most `parallelism` judge calls in flight.
pub fn score_batch(
    trajs: &[Trajectory],
    judge: &dyn Judge,
    weights: &RewardWeights,
    parallelism: usize,
) -> Vec<Result<RewardBreakdown, RewardError>> {
    let workers = parallelism.max(1).min(trajs.len().max(1));
    let chunk = trajs.len().div_ceil(workers).max(1);
    std::thread::scope(|scope| {
        let handles: Vec<_> = trajs
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|t| score_trajectory(t, judge, weights))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("scoring thread panicked"))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::parse_turn;
    use crate::retrieval::Candidate;
    use crate::types::{Query, Selection, SoftError, Turn};

    fn set(step: usize, ids: &[&str]) -> CandidateSet {
        CandidateSet {
            step_index: step,
            k: ids.len(),
            entries: ids
                .iter()
                .map(|d| Candidate {
                    doc_id: d.to_string(),
                    score: 0.0,
                })
                .collect(),
        }
    }

    fn golden(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    fn traj(turns: &[&str]) -> Trajectory {
        let mut t = Trajectory::new(Query {
            id: "q".into(),
            text: "question".into(),
            reference_answer: "Eiffel Tower".into(),
            golden_doc_ids: golden(&["g"]),
            golden_boxes: BTreeMap::new(),
        });
        t.turns.push(Turn::user("prompt"));
        for text in turns {
            let p = parse_turn(text);
            if let Action::Answer { text } = &p.record.action {
                t.final_answer = Some(text.clone());
                t.termination = TerminationReason::Answered;
                t.terminated = true;
            }
            t.turns.push(Turn::assistant(*text, p.thought, p.record));
            t.turns.push(Turn::user("obs"));
        }
        t
    }

    fn bb(x1: i64, y1: i64, x2: i64, y2: i64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn pattern_cases() {
        let good = traj(&[
            "<think>a</think><search>x</search>",
            "<think>b</think><answer>y</answer>",
        ]);
        assert_eq!(pattern_reward(&good), 1.0);
        let bad = traj(&[
            "<think>a</think><search>x",
            "<think>b</think><answer>y</answer>",
        ]);
        assert_eq!(pattern_reward(&bad), 0.0);
        let no_think = traj(&["<search>x</search>", "<think>b</think><answer>y</answer>"]);
        assert_eq!(pattern_reward(&no_think), 0.0);
        let unanswered = traj(&["<think>a</think><search>x</search>"]);
        assert_eq!(pattern_reward(&unanswered), 0.0);
        let mut soft = good.clone();
        soft.soft_errors.push(SoftError {
            step: 0,
            message: "x".into(),
        });
        assert_eq!(pattern_reward(&soft), 0.0);
        assert_eq!(pattern_reward(&traj(&[])), 0.0);
    }

    #[test]
    fn interleave_examples() {
        assert_eq!(
            interleave_candidates(&[set(0, &["a", "b", "c"]), set(1, &["x", "y", "z"])]),
            ["a", "x", "b", "y", "c", "z"]
        );
        assert_eq!(
            interleave_candidates(&[set(0, &["a", "b"]), set(1, &["a", "c"])]),
            ["a", "b", "c"]
        );
        assert_eq!(interleave_candidates(&[set(0, &["a", "b"])]), ["a", "b"]);
        assert_eq!(
            interleave_candidates(&[set(0, &["a"]), set(1, &["x", "y", "z"])]),
            ["a", "x", "y", "z"]
        );
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg(&["d1"], &golden(&["d1"])), 1.0);
        let v = ndcg(&["d2", "d7", "d1"], &golden(&["d1", "d7"]));
        let dcg = 1.0 / 3f64.log2() + 1.0 / 4f64.log2();
        let idcg = 1.0 + 1.0 / 3f64.log2();
        assert!((v - dcg / idcg).abs() < 1e-15);
        assert!((v - 0.6934).abs() < 1e-4);
        assert_eq!(ndcg(&["d9", "d8"], &golden(&["d1"])), 0.0);
        assert_eq!(ndcg::<&str>(&[], &golden(&["d1"])), 0.0);
        assert_eq!(ndcg(&["d1"], &golden(&[])), 0.0);
        // repeated relevant docs earn gain once
        assert_eq!(ndcg(&["d1", "d1"], &golden(&["d1"])), 1.0);
    }

    #[test]
    fn retrieval_reward_cases() {
        let g = golden(&["g"]);
        let mut t = traj(&[]);
        assert_eq!(retrieval_reward(&t, &g), 0.0);
        t.candidate_history.push(set(0, &["g", "a"]));
        assert_eq!(retrieval_reward(&t, &g), 1.0);
        t.candidate_history = vec![set(0, &["a", "b"]), set(1, &["g", "c"])];
        // interleaved: a, g, b, c
        assert_eq!(retrieval_reward(&t, &g), ndcg(&["a", "g", "b", "c"], &g));
        assert!((retrieval_reward(&t, &g) - 1.0 / 3f64.log2()).abs() < 1e-15);
    }

    #[test]
    fn selection_reward_cases() {
        let g = golden(&["g"]);
        let mut t = traj(&[]);
        assert_eq!(selection_reward(&t, &g), 0.0);

        t.candidate_history = vec![set(0, &["a", "g"])];
        t.selections = vec![Selection {
            search_index: 0,
            doc_ids: vec!["g".into()],
        }];
        assert_eq!(selection_reward(&t, &g), 1.0);

        // no golden in the pool: rank 0 is the pseudo-positive
        t.candidate_history = vec![set(0, &["a", "b"])];
        t.selections[0].doc_ids = vec!["a".into()];
        assert_eq!(selection_reward(&t, &g), 1.0);
        t.selections[0].doc_ids = vec!["b".into()];
        assert_eq!(selection_reward(&t, &g), 0.0);

        // step 1 hits, step 2 has no select
        t.candidate_history = vec![set(0, &["g"]), set(1, &["a"])];
        t.selections = vec![Selection {
            search_index: 0,
            doc_ids: vec!["g".into()],
        }];
        assert_eq!(selection_reward(&t, &g), 0.5);

        // multi-select precision
        t.candidate_history = vec![set(0, &["g", "a", "b"])];
        t.selections[0].doc_ids = vec!["g".into(), "a".into()];
        assert_eq!(selection_reward(&t, &g), 0.5);
    }

    #[test]
    fn crop_reward_cases() {
        let mut gold = BTreeMap::new();
        gold.insert(
            "g".to_string(),
            vec![bb(5, 0, 15, 10), bb(100, 100, 120, 120)],
        );
        let pred = |b: BBox| {
            vec![PredictedBox {
                doc_id: "g".into(),
                bbox: b,
            }]
        };
        assert_eq!(
            crop_reward(&pred(bb(100, 100, 120, 120)), &gold, &["g"]),
            1.0
        );
        assert!((crop_reward(&pred(bb(0, 0, 10, 10)), &gold, &["g"]) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(crop_reward(&pred(bb(50, 50, 60, 60)), &gold, &["g"]), 0.0);
        let other = vec![PredictedBox {
            doc_id: "x".into(),
            bbox: bb(5, 0, 15, 10),
        }];
        assert_eq!(crop_reward(&other, &gold, &["x"]), 0.0);

        // no crops
        assert_eq!(crop_reward(&[], &gold, &["g"]), 0.0);
        assert_eq!(crop_reward(&[], &gold, &["x"]), 1.0);
        assert_eq!(crop_reward(&[], &gold, &[]), 0.0);
        assert_eq!(crop_reward(&[], &BTreeMap::new(), &[]), 1.0);
    }

    #[test]
    fn builtin_judge() {
        let j = BuiltinJudge;
        assert!(j.score("The Eiffel Tower", "Eiffel Tower", "").unwrap());
        assert!(!j.score("Paris", "London", "").unwrap());
        assert!(j
            .score("It is the Eiffel Tower.", "eiffel tower", "")
            .unwrap());
        assert!(j.score("Eiffel", "Eiffel Tower", "").unwrap());
        assert!(!j.score("tower eiffel", "eiffel tower", "").unwrap());
        assert!(!j.score("150", "150k", "").unwrap());
        assert!(!j.score("", "Paris", "").unwrap());
    }

    #[test]
    fn outcome_cases() {
        let t = traj(&["<think>a</think><answer>The Eiffel Tower</answer>"]);
        assert_eq!(outcome_reward(&BuiltinJudge, &t).unwrap(), 1.0);
        let t = traj(&["<think>a</think><search>x</search>"]);
        assert_eq!(outcome_reward(&BuiltinJudge, &t).unwrap(), 0.0);
    }

    #[test]
    fn total_examples() {
        let w = RewardWeights::default();
        let b = total_reward([1.0, 0.5, 1.0, 0.0, 1.0], &w).unwrap();
        assert!((b.total - 0.85).abs() < 1e-12);
        assert!((total_reward([1.0; 5], &w).unwrap().total - 1.0).abs() < 1e-12);
        assert_eq!(total_reward([0.0; 5], &w).unwrap().total, 0.0);
        assert_eq!(
            total_reward([0.0; 5], &w.with(2, -0.1)),
            Err(RewardError::BadWeight(3, -0.1))
        );
        assert!(matches!(
            total_reward([1.5, 0.0, 0.0, 0.0, 0.0], &w),
            Err(RewardError::ComponentOutOfRange("r_pat", _))
        ));
    }

    #[test]
    fn batch_matches_serial() {
        let trajs: Vec<Trajectory> = (0..7)
            .map(|i| {
                if i % 2 == 0 {
                    traj(&["<think>a</think><answer>Eiffel Tower</answer>"])
                } else {
                    traj(&["<search>x</search>"])
                }
            })
            .collect();
        let w = RewardWeights::default();
        let batch = score_batch(&trajs, &BuiltinJudge, &w, 3);
        let serial: Vec<_> = trajs
            .iter()
            .map(|t| score_trajectory(t, &BuiltinJudge, &w))
            .collect();
        assert_eq!(batch, serial);
    }
}
