//! Aggregate statistics over a set of trajectories.

use serde::{Deserialize, Serialize};

use crate::rewards::interleave_candidates;
use crate::types::Trajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub trajectories: usize,
    /// Share of trajectories whose search candidates include a golden page.
    pub recall_search_only: f64,
    /// Share of trajectories whose selected pages include a golden page.
    pub recall_after_selection: f64,
    /// Share of trajectories with at least one Crop action.
    pub crop_frequency: f64,
    /// Trajectories that selected a golden page their searches never returned.
    pub implication_violations: usize,
    /// Mean r_pat, r_ir, r_sel, r_crop, r_ans over scored trajectories.
    pub mean_components: Option<[f64; 5]>,
    pub mean_total: Option<f64>,
    pub scored: usize,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StatsError {
    #[error("no trajectories to summarize")]
    Empty,
}

pub fn compute_stats(trajs: &[Trajectory]) -> Result<StatsReport, StatsError> {
    if trajs.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut retrieved = 0usize;
    let mut selected = 0usize;
    let mut cropped = 0usize;
    let mut violations = 0usize;
    let mut sums = [0.0f64; 5];
    let mut total = 0.0;
    let mut scored = 0usize;
    for t in trajs {
        let golden = &t.query.golden_doc_ids;
        let r = interleave_candidates(&t.candidate_history)
            .iter()
            .any(|d| golden.contains(d));
        let s = t.selected_doc_ids().iter().any(|d| golden.contains(*d));
        retrieved += usize::from(r);
        selected += usize::from(s);
        violations += usize::from(s && !r);
        cropped += usize::from(t.crop_count() > 0);
        if let Some(b) = &t.reward {
            for (acc, c) in sums.iter_mut().zip(b.components()) {
                *acc += c;
            }
            total += b.total;
            scored += 1;
        }
    }
    let n = trajs.len() as f64;
    let (mean_components, mean_total) = if scored > 0 {
        let m = scored as f64;
        (Some(sums.map(|s| s / m)), Some(total / m))
    } else {
        (None, None)
    };
    Ok(StatsReport {
        trajectories: trajs.len(),
        recall_search_only: retrieved as f64 / n,
        recall_after_selection: selected as f64 / n,
        crop_frequency: cropped as f64 / n,
        implication_violations: violations,
        mean_components,
        mean_total,
        scored,
    })
}
