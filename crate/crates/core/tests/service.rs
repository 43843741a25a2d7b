mod common;

use serde_json::{json, Value};

fn world() -> std::sync::Arc<docrag::grpo::MicroWorld> {
    common::world(7, 20, 10)
}

fn create(server: &common::Server, body: &str) -> String {
    let (status, text) = server.post("/sessions", body);
    assert_eq!(status, 200, "{text}");
    let v: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["initial_observation"]["role"], "user");
    v["session_id"].as_str().unwrap().to_string()
}

fn step(server: &common::Server, id: &str, text: &str) -> (u16, Value) {
    let (status, body) = server.post(
        &format!("/sessions/{id}/step"),
        &json!({ "assistant_text": text }).to_string(),
    );
    (status, serde_json::from_str(&body).unwrap_or(Value::Null))
}

#[test]
fn episode_then_score() {
    let w = world();
    let server = common::spawn(&w, 10);
    let q = &w.queries[0];
    let id = create(&server, &json!({ "query_id": q.id }).to_string());

    let (status, r) = step(&server, &id, &format!("<search>{}</search>", q.text));
    assert_eq!(status, 200);
    assert_eq!(r["terminated"], false);
    assert_eq!(r["observation"]["images"].as_array().unwrap().len(), 5);

    let (_, r) = step(&server, &id, "<answer>guess</answer>");
    assert_eq!(r["terminated"], true);
    assert_eq!(r["termination_reason"], "answered");

    let (status, body) = server.get(&format!("/sessions/{id}/trajectory"));
    assert_eq!(status, 200);
    let traj: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(traj["schema_version"], 1);
    assert_eq!(traj["final_answer"], "guess");

    let (status, body) = server.post("/score", &json!({ "session_id": id }).to_string());
    assert_eq!(status, 200, "{body}");
    let b: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(b["r_pat"], 0.0);
    assert_eq!(b["r_ans"], 0.0);
    assert_eq!(b["r_ir"], 1.0);

    // the same trajectory posted inline, with custom weights
    let body = json!({ "trajectory": traj, "weights": [0.0, 1.0, 0.0, 0.0, 0.0] }).to_string();
    let (status, text) = server.post("/score", &body);
    assert_eq!(status, 200, "{text}");
    let b: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(b["total"], 1.0);
}

#[test]
fn status_codes() {
    let w = world();
    let server = common::spawn(&w, 2);
    assert_eq!(server.post("/sessions", r#"{"query_id":"nope"}"#).0, 404);
    assert_eq!(server.post("/sessions", "{").0, 400);
    assert_eq!(server.post("/sessions", "{}").0, 400);
    assert_eq!(
        server
            .post("/sessions", r#"{"query_id":"q000","extra":1}"#)
            .0,
        400
    );
    assert_eq!(step(&server, "s999", "<answer>x</answer>").0, 404);
    assert_eq!(server.get("/sessions/s999/trajectory").0, 404);

    let id = create(&server, r#"{"query_id":"q001"}"#);
    assert_eq!(
        server
            .post(&format!("/sessions/{id}/step"), r#"{"text":"x"}"#)
            .0,
        400
    );
    let (status, r) = step(&server, &id, "not a tag in sight");
    assert_eq!(status, 200);
    assert_eq!(r["errors"][1]["code"], "missing_action");
    let (_, r) = step(&server, &id, "still nothing");
    assert_eq!(r["terminated"], true);
    assert_eq!(r["termination_reason"], "budget_exhausted");
    assert_eq!(step(&server, &id, "<answer>late</answer>").0, 409);

    assert_eq!(server.delete(&format!("/sessions/{id}")), 204);
    assert_eq!(server.delete(&format!("/sessions/{id}")), 404);
    assert_eq!(server.get(&format!("/sessions/{id}/trajectory")).0, 404);
}

#[test]
fn inline_query_sessions() {
    let w = world();
    let server = common::spawn(&w, 4);
    let mut q = serde_json::to_value(&w.queries[2]).unwrap();
    q["id"] = json!("custom");
    let id = create(&server, &json!({ "query": q }).to_string());
    let (status, _) = step(&server, &id, "<search>anything</search>");
    assert_eq!(status, 200);
    let mut bad = q.clone();
    bad["golden_doc_ids"] = json!([]);
    assert_eq!(
        server
            .post("/sessions", &json!({ "query": bad }).to_string())
            .0,
        400
    );
}

#[test]
fn advantages_endpoint() {
    let server = common::spawn(&world(), 4);
    let (status, body) = server.post("/advantages", r#"{"rewards":[1,0,0,0,0],"eps":1e-15}"#);
    assert_eq!(status, 200);
    let adv: Vec<f64> =
        serde_json::from_value(serde_json::from_str::<Value>(&body).unwrap()["advantages"].clone())
            .unwrap();
    for (a, want) in adv.iter().zip([2.0, -0.5, -0.5, -0.5, -0.5]) {
        assert!((a - want).abs() < 1e-12);
    }
    let (_, body) = server.post("/advantages", r#"{"rewards":[0.3,0.3,0.3]}"#);
    assert_eq!(body, r#"{"advantages":[0.0,0.0,0.0]}"#);
    assert_eq!(server.post("/advantages", r#"{"rewards":[1]}"#).0, 400);
    assert_eq!(
        server
            .post("/advantages", r#"{"rewards":[1,0],"eps":-1}"#)
            .0,
        400
    );
}

#[test]
fn concurrent_sessions_are_independent() {
    let w = world();
    let server = common::spawn(&w, 10);
    let ids: Vec<String> = (0..8)
        .map(|i| create(&server, &json!({ "query_id": w.queries[i].id }).to_string()))
        .collect();
    std::thread::scope(|s| {
        for (i, id) in ids.iter().enumerate() {
            let server = &server;
            let q = &w.queries[i];
            s.spawn(move || {
                step(server, id, &format!("<search>{}</search>", q.text));
                let (_, r) = step(
                    server,
                    id,
                    &format!("<answer>{}</answer>", q.reference_answer),
                );
                assert_eq!(r["terminated"], true);
            });
        }
    });
    for (i, id) in ids.iter().enumerate() {
        let (_, body) = server.post("/score", &json!({ "session_id": id }).to_string());
        let b: Value = serde_json::from_str(&body).unwrap();
        assert_eq!(b["r_ans"], 1.0, "session {i}: {body}");
    }
}
