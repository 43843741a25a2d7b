//! C interface to the docrag environment and reward engine.
//!
//! Every function returns a [`DocragStatus`]. On failure the message is
//! available from [`docrag_last_error`] on the same thread. Strings handed
//! out by the library are NUL-terminated UTF-8 and must be released with
//! [`docrag_string_free`]; handles with their matching `_free` function.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use libc::c_char;

use docrag::environment::{EnvError, Environment, Session, SessionConfig};
use docrag::grpo::group_advantages;
use docrag::retrieval::{ingest_corpus, Corpus, TfIndex, DEFAULT_DIMS};
use docrag::rewards::{ndcg, score_trajectory, total_reward, BuiltinJudge, RewardWeights};
use docrag::types::{BBox, Query, Trajectory};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DocragStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Terminated = 5,
    Panic = 6,
}

/// A loaded page corpus.
pub struct DocragCorpus {
    corpus: Arc<Corpus>,
}

/// Corpus, retriever and session settings shared by sessions.
pub struct DocragEnv {
    env: Environment,
}

/// One episode in progress.
pub struct DocragSession {
    session: Session,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(DocragStatus, String);

impl Failure {
    fn invalid(e: impl std::fmt::Display) -> Self {
        Self(DocragStatus::InvalidArgument, e.to_string())
    }
}

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DocragStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DocragStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(&message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DocragStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(
            DocragStatus::NullArgument,
            format!("{name} is null"),
        ));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(DocragStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure(DocragStatus::NullArgument, format!("{name} is null")))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, name: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure(
            DocragStatus::NullArgument,
            format!("{name} is null"),
        ));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

fn give_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure::invalid("output contains a NUL byte"))
}

fn give_json<T: serde::Serialize>(v: &T) -> Result<*mut c_char, Failure> {
    give_string(serde_json::to_string(v).map_err(Failure::invalid)?)
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn docrag_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `s` must be NULL or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn docrag_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Lowercases, strips punctuation and articles, and collapses whitespace.
///
/// # Safety
/// `text` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn docrag_normalize_answer(
    text: *const c_char,
    out: *mut *mut c_char,
) -> DocragStatus {
    guard(|| {
        let text = str_arg(text, "text")?;
        let out = out_arg(out, "out")?;
        *out = give_string(docrag::normalize_answer(text))?;
        Ok(())
    })
}

/// Parses one assistant turn into JSON `{thought, action, raw, errors}`.
///
/// # Safety
/// `text` must be a valid C string; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn docrag_parse_turn(
    text: *const c_char,
    out_json: *mut *mut c_char,
) -> DocragStatus {
    guard(|| {
        let text = str_arg(text, "text")?;
        let out = out_arg(out_json, "out_json")?;
        let parsed = docrag::parse_turn(text);
        let v = serde_json::json!({
            "thought": parsed.thought,
            "action": parsed.record.action,
            "raw": parsed.record.raw,
            "errors": parsed.errors(),
        });
        *out = give_json(&v)?;
        Ok(())
    })
}

/// Writes `n` group-normalized advantages into `out`.
///
/// # Safety
/// `rewards` and `out` must each hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn docrag_group_advantages(
    rewards: *const f64,
    n: usize,
    eps: f64,
    out: *mut f64,
) -> DocragStatus {
    guard(|| {
        let rewards = slice_arg(rewards, n, "rewards")?;
        if out.is_null() {
            return Err(Failure(DocragStatus::NullArgument, "out is null".into()));
        }
        let adv = group_advantages(rewards, eps).map_err(Failure::invalid)?;
        std::ptr::copy_nonoverlapping(adv.as_ptr(), out, adv.len());
        Ok(())
    })
}

/// NDCG with binary gains of a ranked id list against a golden id set.
///
/// # Safety
/// `ranked` holds `n_ranked` C strings and `golden` holds `n_golden`.
#[no_mangle]
pub unsafe extern "C" fn docrag_ndcg(
    ranked: *const *const c_char,
    n_ranked: usize,
    golden: *const *const c_char,
    n_golden: usize,
    out: *mut f64,
) -> DocragStatus {
    guard(|| {
        let ranked: Vec<&str> = slice_arg(ranked, n_ranked, "ranked")?
            .iter()
            .map(|p| str_arg(*p, "ranked item"))
            .collect::<Result<_, _>>()?;
        let golden: BTreeSet<String> = slice_arg(golden, n_golden, "golden")?
            .iter()
            .map(|p| str_arg(*p, "golden item").map(str::to_string))
            .collect::<Result<_, _>>()?;
        *out_arg(out, "out")? = ndcg(&ranked, &golden);
        Ok(())
    })
}

/// Weighted sum of five components. `weights` may be NULL for the defaults.
///
/// # Safety
/// `components` holds 5 doubles; `weights` is NULL or holds 5 doubles.
#[no_mangle]
pub unsafe extern "C" fn docrag_total_reward(
    components: *const f64,
    weights: *const f64,
    out: *mut f64,
) -> DocragStatus {
    guard(|| {
        let c: [f64; 5] = slice_arg(components, 5, "components")?
            .try_into()
            .expect("length 5");
        let w = if weights.is_null() {
            RewardWeights::default()
        } else {
            RewardWeights(
                slice_arg(weights, 5, "weights")?
                    .try_into()
                    .expect("length 5"),
            )
        };
        *out_arg(out, "out")? = total_reward(c, &w).map_err(Failure::invalid)?.total;
        Ok(())
    })
}

/// Intersection over union of two `[x1, y1, x2, y2]` boxes.
///
/// # Safety
/// `a` and `b` each hold 4 integers.
#[no_mangle]
pub unsafe extern "C" fn docrag_iou(a: *const i64, b: *const i64, out: *mut f64) -> DocragStatus {
    guard(|| {
        let bbox = |p: *const i64, name: &str| -> Result<BBox, Failure> {
            let v = slice_arg(p, 4, name)?;
            BBox::new(v[0], v[1], v[2], v[3]).map_err(Failure::invalid)
        };
        *out_arg(out, "out")? = bbox(a, "a")?.iou(&bbox(b, "b")?);
        Ok(())
    })
}

/// Scores a trajectory given as JSON with the built-in judge. `weights` may
/// be NULL for the defaults. Writes the reward breakdown as JSON.
///
/// # Safety
/// `trajectory_json` is a valid C string; `weights` is NULL or holds 5
/// doubles; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn docrag_score_trajectory(
    trajectory_json: *const c_char,
    weights: *const f64,
    out_json: *mut *mut c_char,
) -> DocragStatus {
    guard(|| {
        let traj: Trajectory = serde_json::from_str(str_arg(trajectory_json, "trajectory_json")?)
            .map_err(Failure::invalid)?;
        let w = if weights.is_null() {
            RewardWeights::default()
        } else {
            RewardWeights(
                slice_arg(weights, 5, "weights")?
                    .try_into()
                    .expect("length 5"),
            )
        };
        let out = out_arg(out_json, "out_json")?;
        let b = score_trajectory(&traj, &BuiltinJudge, &w).map_err(Failure::invalid)?;
        *out = give_json(&b)?;
        Ok(())
    })
}

/// Loads a line-delimited corpus manifest.
///
/// # Safety
/// `manifest_path` is a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn docrag_corpus_load(
    manifest_path: *const c_char,
    out: *mut *mut DocragCorpus,
) -> DocragStatus {
    guard(|| {
        let path = str_arg(manifest_path, "manifest_path")?;
        let out = out_arg(out, "out")?;
        let corpus =
            ingest_corpus(Path::new(path)).map_err(|e| Failure(DocragStatus::Io, e.to_string()))?;
        *out = Box::into_raw(Box::new(DocragCorpus {
            corpus: Arc::new(corpus),
        }));
        Ok(())
    })
}

/// Number of pages, or 0 for NULL.
///
/// # Safety
/// `corpus` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn docrag_corpus_len(corpus: *const DocragCorpus) -> usize {
    corpus.as_ref().map_or(0, |c| c.corpus.len())
}

/// # Safety
/// `corpus` is NULL or a handle not yet freed. Environments built from it
/// stay valid.
#[no_mangle]
pub unsafe extern "C" fn docrag_corpus_free(corpus: *mut DocragCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Builds an environment over `corpus` with the hashed term-frequency
/// retriever. `config_json` may be NULL for default session settings, or a
/// JSON object with any of `t_max`, `k`, `zoom`, `max_prompt_chars`,
/// `max_response_chars`.
///
/// # Safety
/// `corpus` is a live handle; `config_json` is NULL or a valid C string;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn docrag_env_new(
    corpus: *const DocragCorpus,
    config_json: *const c_char,
    out: *mut *mut DocragEnv,
) -> DocragStatus {
    guard(|| {
        let corpus = corpus
            .as_ref()
            .ok_or_else(|| Failure(DocragStatus::NullArgument, "corpus is null".into()))?;
        let cfg: SessionConfig = if config_json.is_null() {
            SessionConfig::default()
        } else {
            serde_json::from_str(str_arg(config_json, "config_json")?).map_err(Failure::invalid)?
        };
        let out = out_arg(out, "out")?;
        let index = TfIndex::build(&corpus.corpus, DEFAULT_DIMS).map_err(Failure::invalid)?;
        let env = Environment::new(corpus.corpus.clone(), Arc::new(index), cfg)
            .map_err(Failure::invalid)?;
        *out = Box::into_raw(Box::new(DocragEnv { env }));
        Ok(())
    })
}

/// # Safety
/// `env` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn docrag_env_free(env: *mut DocragEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Starts an episode for a query given as JSON
/// `{id, text, reference_answer, golden_doc_ids, golden_boxes}`.
///
/// # Safety
/// `env` is a live handle; `query_json` is a valid C string; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn docrag_session_new(
    env: *const DocragEnv,
    query_json: *const c_char,
    out: *mut *mut DocragSession,
) -> DocragStatus {
    guard(|| {
        let env = env
            .as_ref()
            .ok_or_else(|| Failure(DocragStatus::NullArgument, "env is null".into()))?;
        let query: Query =
            serde_json::from_str(str_arg(query_json, "query_json")?).map_err(Failure::invalid)?;
        let out = out_arg(out, "out")?;
        let session = env.env.create_session(query).map_err(Failure::invalid)?;
        *out = Box::into_raw(Box::new(DocragSession { session }));
        Ok(())
    })
}

/// Applies one assistant turn and writes the step result as JSON.
/// Returns `DOCRAG_STATUS_TERMINATED` once the episode has ended.
///
/// # Safety
/// `session` is a live handle not used concurrently; `assistant_text` is a
/// valid C string; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn docrag_session_step(
    session: *mut DocragSession,
    assistant_text: *const c_char,
    out_json: *mut *mut c_char,
) -> DocragStatus {
    guard(|| {
        let s = session
            .as_mut()
            .ok_or_else(|| Failure(DocragStatus::NullArgument, "session is null".into()))?;
        let text = str_arg(assistant_text, "assistant_text")?;
        let out = out_arg(out_json, "out_json")?;
        let result = s.session.step(text).map_err(|e| match e {
            EnvError::StepAfterTermination => Failure(DocragStatus::Terminated, e.to_string()),
            other => Failure::invalid(other),
        })?;
        *out = give_json(&result)?;
        Ok(())
    })
}

/// 1 if the episode has ended, 0 if not or for NULL.
///
/// # Safety
/// `session` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn docrag_session_is_terminated(session: *const DocragSession) -> bool {
    session.as_ref().is_some_and(|s| s.session.is_terminated())
}

/// Writes the trajectory so far as JSON.
///
/// # Safety
/// `session` is a live handle; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn docrag_session_trajectory(
    session: *const DocragSession,
    out_json: *mut *mut c_char,
) -> DocragStatus {
    guard(|| {
        let s = session
            .as_ref()
            .ok_or_else(|| Failure(DocragStatus::NullArgument, "session is null".into()))?;
        let out = out_arg(out_json, "out_json")?;
        *out = give_json(s.session.trajectory())?;
        Ok(())
    })
}

/// # Safety
/// `session` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn docrag_session_free(session: *mut DocragSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}
