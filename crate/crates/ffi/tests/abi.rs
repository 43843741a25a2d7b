use std::ffi::{CStr, CString};
use std::ptr;

use docrag_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

unsafe fn take(p: *mut libc::c_char) -> String {
    let s = CStr::from_ptr(p).to_str().unwrap().to_string();
    docrag_string_free(p);
    s
}

fn last_error() -> String {
    unsafe {
        CStr::from_ptr(docrag_last_error())
            .to_str()
            .unwrap()
            .to_string()
    }
}

#[test]
fn normalize_and_parse() {
    unsafe {
        let mut out = ptr::null_mut();
        let text = cstr("The  Eiffel Tower!");
        assert_eq!(
            docrag_normalize_answer(text.as_ptr(), &mut out),
            DocragStatus::Ok
        );
        assert_eq!(take(out), "eiffel tower");

        let turn = cstr("<think>t</think><select>0,2</select>");
        assert_eq!(docrag_parse_turn(turn.as_ptr(), &mut out), DocragStatus::Ok);
        let v: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(v["action"]["kind"], "select");
        assert_eq!(v["action"]["indices"], serde_json::json!([0, 2]));
        assert_eq!(v["thought"], "t");

        assert_eq!(
            docrag_normalize_answer(ptr::null(), &mut out),
            DocragStatus::NullArgument
        );
        assert!(last_error().contains("text"));
    }
}

#[test]
fn numeric_entry_points() {
    unsafe {
        let rewards = [1.0, 0.0, 0.0, 0.0, 0.0];
        let mut adv = [0.0; 5];
        assert_eq!(
            docrag_group_advantages(rewards.as_ptr(), 5, 1e-15, adv.as_mut_ptr()),
            DocragStatus::Ok
        );
        for (a, want) in adv.iter().zip([2.0, -0.5, -0.5, -0.5, -0.5]) {
            assert!((a - want).abs() < 1e-12);
        }
        assert_eq!(
            docrag_group_advantages(rewards.as_ptr(), 1, 1e-8, adv.as_mut_ptr()),
            DocragStatus::InvalidArgument
        );

        let ranked: Vec<CString> = ["d2", "d7", "d1"].iter().map(|s| cstr(s)).collect();
        let golden: Vec<CString> = ["d1", "d7"].iter().map(|s| cstr(s)).collect();
        let rp: Vec<*const libc::c_char> = ranked.iter().map(|s| s.as_ptr()).collect();
        let gp: Vec<*const libc::c_char> = golden.iter().map(|s| s.as_ptr()).collect();
        let mut n = 0.0;
        assert_eq!(
            docrag_ndcg(rp.as_ptr(), 3, gp.as_ptr(), 2, &mut n),
            DocragStatus::Ok
        );
        assert!((n - 0.6934).abs() < 1e-4);

        let mut total = 0.0;
        let c = [1.0, 0.5, 1.0, 0.0, 1.0];
        assert_eq!(
            docrag_total_reward(c.as_ptr(), ptr::null(), &mut total),
            DocragStatus::Ok
        );
        assert!((total - 0.85).abs() < 1e-12);
        let bad = [-1.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(
            docrag_total_reward(c.as_ptr(), bad.as_ptr(), &mut total),
            DocragStatus::InvalidArgument
        );

        let a = [0i64, 0, 10, 10];
        let b = [5i64, 0, 15, 10];
        let mut iou = 0.0;
        assert_eq!(
            docrag_iou(a.as_ptr(), b.as_ptr(), &mut iou),
            DocragStatus::Ok
        );
        assert!((iou - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn session_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("corpus.jsonl");
    std::fs::write(
        &manifest,
        concat!(
            r#"{"doc_id":"p1","width":100,"height":100,"text_proxy":"tower height 330 metres"}"#,
            "\n",
            r#"{"doc_id":"p2","width":100,"height":100,"text_proxy":"bridge length"}"#,
            "\n"
        ),
    )
    .unwrap();
    unsafe {
        let mut corpus = ptr::null_mut();
        let path = cstr(manifest.to_str().unwrap());
        assert_eq!(
            docrag_corpus_load(path.as_ptr(), &mut corpus),
            DocragStatus::Ok
        );
        assert_eq!(docrag_corpus_len(corpus), 2);

        let mut env = ptr::null_mut();
        let cfg = cstr(r#"{"t_max": 3, "k": 2}"#);
        assert_eq!(
            docrag_env_new(corpus, cfg.as_ptr(), &mut env),
            DocragStatus::Ok
        );
        docrag_corpus_free(corpus);

        let q = cstr(
            r#"{"id":"q1","text":"how tall is the tower","reference_answer":"330 metres","golden_doc_ids":["p1"]}"#,
        );
        let mut session = ptr::null_mut();
        assert_eq!(
            docrag_session_new(env, q.as_ptr(), &mut session),
            DocragStatus::Ok
        );

        let mut out = ptr::null_mut();
        for turn in [
            "<think>look</think><search>tower height</search>",
            "<think>first</think><select>0</select>",
            "<think>done</think><answer>330 metres</answer>",
        ] {
            let t = cstr(turn);
            assert_eq!(
                docrag_session_step(session, t.as_ptr(), &mut out),
                DocragStatus::Ok
            );
            take(out);
        }
        assert!(docrag_session_is_terminated(session));
        let t = cstr("<answer>again</answer>");
        assert_eq!(
            docrag_session_step(session, t.as_ptr(), &mut out),
            DocragStatus::Terminated
        );

        assert_eq!(
            docrag_session_trajectory(session, &mut out),
            DocragStatus::Ok
        );
        let traj = cstr(&take(out));
        assert_eq!(
            docrag_score_trajectory(traj.as_ptr(), ptr::null(), &mut out),
            DocragStatus::Ok
        );
        let r: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(r["r_ans"], 1.0);
        assert_eq!(r["r_sel"], 1.0);
        assert_eq!(r["r_ir"], 1.0);

        docrag_session_free(session);
        docrag_env_free(env);
    }
}

#[test]
fn bad_inputs_report_errors() {
    unsafe {
        let mut corpus = ptr::null_mut();
        let path = cstr("/nonexistent/corpus.jsonl");
        assert_eq!(
            docrag_corpus_load(path.as_ptr(), &mut corpus),
            DocragStatus::Io
        );
        assert!(!last_error().is_empty());
        let mut env = ptr::null_mut();
        assert_eq!(
            docrag_env_new(ptr::null(), ptr::null(), &mut env),
            DocragStatus::NullArgument
        );
        let mut out = ptr::null_mut();
        let junk = cstr("{not json");
        assert_eq!(
            docrag_score_trajectory(junk.as_ptr(), ptr::null(), &mut out),
            DocragStatus::InvalidArgument
        );
        docrag_string_free(ptr::null_mut());
        docrag_session_free(ptr::null_mut());
    }
}
