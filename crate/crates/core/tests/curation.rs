mod common;

use docrag::curation::{
    difficulty_filter, quality_filter, read_records, rl_curation, synthesize, write_records,
    CurationError, RlCurationConfig, VerdictStatus, FLAG_UNANSWERED, STAGE_QUALITY,
    STAGE_SYNTHESIS,
};
use docrag::environment::{Policy, PolicyError, PolicyInput};
use docrag::grpo::{OraclePolicy, ToyAgent, ToyPolicy, ToyPolicyRunner};
use docrag::harness::ScriptBook;
use docrag::rewards::{Judge, JudgeError};
use docrag::BuiltinJudge;

struct DownJudge;

impl Judge for DownJudge {
    fn score(&self, _: &str, _: &str, _: &str) -> Result<bool, JudgeError> {
        Err(JudgeError::Transport("connection refused".into()))
    }
}

struct DownPolicy;

impl Policy for DownPolicy {
    fn generate(&self, _: &PolicyInput<'_>) -> Result<String, PolicyError> {
        Err(PolicyError::Transport("timeout".into()))
    }
}

#[test]
fn oracle_teacher_passes_quality() {
    let world = common::world(5, 20, 8);
    let env = common::env_of(&world, 10);
    let records = synthesize(&OraclePolicy, "oracle", &env, &world.queries, 3).unwrap();
    assert_eq!(records.len(), 8);
    for r in &records {
        assert!(r.flags.is_empty());
        // region proposals of the selected page are recorded
        assert_eq!(r.candidate_boxes.len(), 3);
    }
    let out = quality_filter(records, &BuiltinJudge, 3);
    assert_eq!(out.kept.len(), 8);
    assert!(out
        .kept
        .iter()
        .all(|r| r.verdicts[STAGE_QUALITY].status == VerdictStatus::Kept));
}

#[test]
fn failures_defer_and_bad_answers_discard() {
    let world = common::world(5, 20, 6);
    let env = common::env_of(&world, 4);
    let mut book = ScriptBook::default();
    book.insert(
        &world.queries[0].id,
        vec!["<answer>nonsense</answer>".into()],
    );
    book.insert(&world.queries[1].id, vec!["<search>x</search>".into(); 4]);
    let records = synthesize(&book, "scripted", &env, &world.queries[..3], 2).unwrap();
    assert_eq!(records[1].flags, vec![FLAG_UNANSWERED.to_string()]);
    // no script for the third query: the teacher failed
    assert_eq!(
        records[2].verdicts[STAGE_SYNTHESIS].status,
        VerdictStatus::Discarded
    );

    let out = quality_filter(records.clone(), &BuiltinJudge, 2);
    let report = out.report(STAGE_QUALITY);
    assert_eq!((report.kept, report.discarded, report.deferred), (0, 3, 0));
    assert_eq!(report.reasons.get("incorrect"), Some(&1));
    assert_eq!(report.reasons.get("no final answer"), Some(&1));

    let out = quality_filter(records[..2].to_vec(), &DownJudge, 2);
    // the unanswered record never reaches the judge
    assert_eq!(out.partition_ids()[2], vec![world.queries[0].id.clone()]);

    let out = difficulty_filter(records[..2].to_vec(), &DownPolicy, &env, &BuiltinJudge, 2);
    assert_eq!(out.deferred.len(), 2);
}

#[test]
fn rl_stage_reasons() {
    let world = common::world(5, 20, 6);
    let env = common::env_of(&world, 10);
    let records = synthesize(&OraclePolicy, "oracle", &env, &world.queries, 2).unwrap();

    let easy = rl_curation(
        records.clone(),
        &OraclePolicy,
        &env,
        &BuiltinJudge,
        RlCurationConfig::default(),
        2,
    )
    .unwrap();
    assert_eq!(easy.report("rl").reasons.get("too easy"), Some(&6));

    let mut blind = ScriptBook::default();
    for q in &world.queries {
        blind.insert(&q.id, vec!["<answer>unknown</answer>".into()]);
    }
    let out = rl_curation(
        records.clone(),
        &blind,
        &env,
        &BuiltinJudge,
        RlCurationConfig::default(),
        2,
    )
    .unwrap();
    assert_eq!(
        out.report("rl").reasons.get("retrieval bottleneck"),
        Some(&6)
    );

    let sampler = ToyPolicyRunner {
        agent: ToyAgent::new(world.clone(), 5),
        policy: ToyPolicy::uniform(),
    };
    let out = rl_curation(
        records.clone(),
        &sampler,
        &env,
        &BuiltinJudge,
        RlCurationConfig::default(),
        2,
    )
    .unwrap();
    assert!(!out.kept.is_empty());

    let few = RlCurationConfig {
        n_rollouts: 1,
        ..RlCurationConfig::default()
    };
    assert!(matches!(
        rl_curation(records, &sampler, &env, &BuiltinJudge, few, 1),
        Err(CurationError::TooFewRollouts(1))
    ));
}

#[test]
fn records_round_trip() {
    let world = common::world(5, 20, 4);
    let env = common::env_of(&world, 10);
    let records = synthesize(&OraclePolicy, "oracle", &env, &world.queries, 1).unwrap();
    let kept = quality_filter(records, &BuiltinJudge, 1).kept;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.jsonl");
    write_records(&path, &kept).unwrap();
    assert_eq!(read_records(&path).unwrap(), kept);
    std::fs::write(&path, "{}\n").unwrap();
    assert!(matches!(
        read_records(&path),
        Err(CurationError::Schema { line: 1, .. })
    ));
}
