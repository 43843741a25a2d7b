//! Group-relative advantages and a small tabular trainer.
//!
//! For a group of rollouts of the same query, each rollout's advantage is its
//! reward standardized against the group:
//!
//! ```text
//! a_i = (r_i - mean(r)) / (std(r) + eps)
//! ```
//!
//! with the population standard deviation. No value network is involved.

mod toy;
mod world;

pub use toy::{
    evaluate, toy_train, well_shaped, Decision, DecisionPoint, EvalMetrics, IterationMetrics,
    OraclePolicy, Sampler, ToyAgent, ToyPolicy, ToyPolicyRunner, ToyTrainConfig, TrainError,
    TrainingReport,
};
pub use world::{generate_micro_world, MicroWorld, QueryFacts, Region, ATTRIBUTES};

use serde::{Deserialize, Serialize};

pub const DEFAULT_EPS: f64 = 1e-8;
pub const DEFAULT_GROUP_SIZE: usize = 5;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AdvantageError {
    #[error("a group needs at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("eps must be positive, got {0}")]
    BadEps(f64),
    #[error("reward {0} is not finite")]
    NonFinite(f64),
}

pub fn group_advantages(rewards: &[f64], eps: f64) -> Result<Vec<f64>, AdvantageError> {
    if rewards.len() < 2 {
        return Err(AdvantageError::GroupTooSmall(rewards.len()));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(AdvantageError::BadEps(eps));
    }
    if let Some(bad) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(AdvantageError::NonFinite(*bad));
    }
    if rewards.iter().all(|r| *r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + eps;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// Rewards of the G rollouts sampled for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub query_id: String,
    pub rewards: Vec<f64>,
    pub trajectory_ids: Vec<String>,
}

impl RolloutGroup {
    pub fn new(
        query_id: impl Into<String>,
        rewards: Vec<f64>,
        trajectory_ids: Vec<String>,
    ) -> Result<Self, AdvantageError> {
        if rewards.len() < 2 || trajectory_ids.len() != rewards.len() {
            return Err(AdvantageError::GroupTooSmall(rewards.len()));
        }
        Ok(Self {
            query_id: query_id.into(),
            rewards,
            trajectory_ids,
        })
    }

    pub fn advantages(&self, eps: f64) -> Result<Vec<f64>, AdvantageError> {
        group_advantages(&self.rewards, eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_examples() {
        let a = group_advantages(&[1.0, 0.0, 0.0, 0.0, 0.0], 1e-15).unwrap();
        let want = [2.0, -0.5, -0.5, -0.5, -0.5];
        for (x, y) in a.iter().zip(want) {
            assert!((x - y).abs() < 1e-12, "{a:?}");
        }
        assert_eq!(
            group_advantages(&[0.7, 0.7, 0.7], DEFAULT_EPS).unwrap(),
            [0.0; 3]
        );
        assert_eq!(
            group_advantages(&[1.0], DEFAULT_EPS),
            Err(AdvantageError::GroupTooSmall(1))
        );
        assert!(group_advantages(&[1.0, 0.0], 0.0).is_err());
        assert!(group_advantages(&[f64::NAN, 0.0], 1e-8).is_err());
    }

    #[test]
    fn rollout_group_checks_lengths() {
        assert!(RolloutGroup::new("q", vec![1.0, 0.0], vec!["a".into()]).is_err());
        let g = RolloutGroup::new("q", vec![1.0, 0.0], vec!["a".into(), "b".into()]).unwrap();
        let a = g.advantages(1e-15).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-12 && (a[1] + 1.0).abs() < 1e-12);
    }

    fn rewards() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, 2..12)
    }

    proptest! {
        #[test]
        fn centered(r in rewards()) {
            let a = group_advantages(&r, DEFAULT_EPS).unwrap();
            prop_assert!(a.iter().sum::<f64>().abs() < 1e-9);
        }

        #[test]
        fn shift_invariant(r in rewards(), c in -5.0f64..5.0) {
            let a = group_advantages(&r, DEFAULT_EPS).unwrap();
            let shifted: Vec<f64> = r.iter().map(|x| x + c).collect();
            let b = group_advantages(&shifted, DEFAULT_EPS).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn scale_equivariant(r in rewards(), c in 0.1f64..10.0) {
            let spread = r.iter().cloned().fold(f64::MIN, f64::max) - r.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-3);
            let a = group_advantages(&r, 1e-12).unwrap();
            let scaled: Vec<f64> = r.iter().map(|x| x * c).collect();
            let b = group_advantages(&scaled, 1e-12).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
