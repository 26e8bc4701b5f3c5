mod common;

use common::*;
use mlcluster_core::clock::SECOND;
use mlcluster_core::sim::fixtures::{user, ALICE, FACES, MNIST};
use mlcluster_core::sim::telemetry::aggregate_utilization;
use serde_json::{json, Value};

#[test]
fn requests_without_a_valid_token_are_unauthorized() {
    let gw = start();
    let http = Http::new(&gw);
    let body = run_body(MNIST, 1, &quick(5), &[]);
    let r = http.post("/v1/sessions", None, &body);
    assert_eq!(r.status, 401);
    assert_eq!(r.json()["error"], "unauthorized");
    assert_eq!(http.post("/v1/sessions", Some("nope"), &body).status, 401);
    assert_eq!(
        http.post("/v1/sessions", Some(ALICE_TOKEN), &body).status,
        201
    );
}

#[test]
fn every_mutating_endpoint_requires_a_token() {
    let gw = start();
    let http = Http::new(&gw);
    let sid = run(&http, ALICE_TOKEN, MNIST, 1, 5, &[]);
    let s = enc(&sid);
    let posts = [
        "/v1/logout".to_owned(),
        "/v1/sessions".into(),
        format!("/v1/sessions/{s}/stop"),
        format!("/v1/sessions/{s}/rm"),
        format!("/v1/sessions/{s}/resume"),
        format!("/v1/sessions/{s}/fork"),
        format!("/v1/sessions/{s}/serve"),
        format!("/v1/sessions/{s}/submit"),
        format!("/v1/sessions/{s}/infer"),
        format!("/v1/sessions/{s}/memo"),
        "/v1/datasets".into(),
        "/v1/sweeps".into(),
        "/v1/users".into(),
        "/v1/users/alice/credit".into(),
        "/v1/admin/advance".into(),
        "/v1/admin/faults".into(),
    ];
    let before = gw
        .cluster()
        .read(|sim| sim.primary().unwrap().log().max_seq());
    for path in &posts {
        for token in [None, Some("forged")] {
            let r = http.post(path, token, &json!({}));
            assert_eq!(r.status, 401, "{path} with {token:?}: {}", r.body);
        }
    }
    let after = gw
        .cluster()
        .read(|sim| sim.primary().unwrap().log().max_seq());
    assert_eq!(before, after);
    assert_eq!(state_of(&http, ALICE_TOKEN, &sid), "Queued");
}

#[test]
fn status_reads_back_the_fleet() {
    let gw = start();
    let http = Http::new(&gw);
    let r = http.get("/v1/status", None);
    assert_eq!(r.status, 200);
    let v = r.json();
    assert_eq!(v["scheduler_epoch"], 1);
    assert_eq!(v["queue_depth"], 0);
    assert_eq!(v["primary"], 0);
    assert_eq!(v["nodes"].as_array().unwrap().len(), 4);
    assert!(v["nodes"]
        .as_array()
        .unwrap()
        .iter()
        .all(|n| n["available_gpus"] == 8 && n["alive"] == true));
    assert_eq!(v["replicas"].as_array().unwrap().len(), 2);
    assert!(r.body.ends_with("}\n"));
}

#[test]
fn repeated_reads_are_identical() {
    let gw = start();
    let http = Http::new(&gw);
    run(&http, ALICE_TOKEN, MNIST, 2, 5, &[]);
    advance(&gw, 3 * SECOND);
    for path in [
        "/v1/status",
        "/v1/sessions",
        "/v1/datasets",
        "/v1/telemetry/nodes",
    ] {
        let a = http.get(path, Some(ALICE_TOKEN));
        let b = http.get(path, Some(ALICE_TOKEN));
        assert_eq!(a.status, 200, "{path}");
        assert_eq!(a.body, b.body, "{path}");
    }
}

#[test]
fn session_ids_with_slashes_survive_the_path() {
    let gw = start();
    let http = Http::new(&gw);
    let sid = run(&http, ALICE_TOKEN, MNIST, 1, 5, &[]);
    assert_eq!(sid, "alice/mnist/1");
    let r = http.get("/v1/sessions/alice%2Fmnist%2F1", Some(ALICE_TOKEN));
    assert_eq!(r.status, 200, "{}", r.body);
    assert_eq!(r.json()["session_id"], "alice/mnist/1");
    assert_eq!(
        http.get("/v1/sessions/alice%2Fmnist%2F9", Some(ALICE_TOKEN))
            .status,
        404
    );
}

#[test]
fn errors_map_to_statuses() {
    let gw = start();
    let http = Http::new(&gw);
    // Private dataset for a non-member.
    let r = http.post(
        "/v1/sessions",
        Some(BOB_TOKEN),
        &run_body(FACES, 1, &quick(5), &[]),
    );
    assert_eq!(r.status, 403, "{}", r.body);
    // More GPUs than any node has.
    let r = http.post(
        "/v1/sessions",
        Some(ALICE_TOKEN),
        &run_body(MNIST, 16, &quick(5), &[]),
    );
    assert_eq!(
        (r.status, r.json()["error"].clone()),
        (422, json!("infeasible"))
    );
    // Malformed body.
    let r = http.post("/v1/sessions", Some(ALICE_TOKEN), &json!({"gpus": "many"}));
    assert_eq!(r.status, 400);
    // Credit exhausted.
    let r = http.post(
        "/v1/users/bob/credit",
        Some(ROOT_TOKEN),
        &json!({"credit": 0}),
    );
    assert_eq!(r.status, 200, "{}", r.body);
    let r = http.post(
        "/v1/sessions",
        Some(BOB_TOKEN),
        &run_body(MNIST, 1, &quick(5), &[]),
    );
    assert_eq!(r.status, 402, "{}", r.body);
    // Admin-only.
    let r = http.post(
        "/v1/users/bob/credit",
        Some(ALICE_TOKEN),
        &json!({"credit": 5}),
    );
    assert_eq!(r.status, 403);
    assert_eq!(http.get("/v1/admin/audit", Some(ALICE_TOKEN)).status, 403);
    // Wrong state.
    let sid = run(&http, ALICE_TOKEN, MNIST, 1, 5, &[]);
    let r = http.post(
        &format!("/v1/sessions/{}/rm", enc(&sid)),
        Some(ALICE_TOKEN),
        &json!({}),
    );
    assert_eq!(r.status, 409);
    assert_eq!(http.get("/v1/nowhere", None).status, 404);
}

#[test]
fn leaderboard_matches_the_direct_call() {
    let gw = start();
    let http = Http::new(&gw);
    let mut sids = Vec::new();
    for (token, steps) in [(ALICE_TOKEN, 8), (BOB_TOKEN, 12), (ALICE_TOKEN, 20)] {
        sids.push((token, run(&http, token, MNIST, 2, steps, &[])));
    }
    advance(&gw, 60 * SECOND);
    for (token, sid) in &sids {
        assert_eq!(state_of(&http, token, sid), "Done");
        let r = http.post(
            &format!("/v1/sessions/{}/submit", enc(sid)),
            Some(token),
            &json!({}),
        );
        assert_eq!(r.status, 200, "{}", r.body);
    }
    let r = http.get("/v1/leaderboard/mnist", Some(BOB_TOKEN));
    assert_eq!(r.status, 200);
    let direct = gw
        .cluster()
        .query(|p| p.leaderboard(&user("bob"), &MNIST.into()))
        .unwrap();
    let mut expected = serde_json::to_string(&direct).unwrap();
    expected.push('\n');
    assert_eq!(r.body, expected);
    let entries = r.json()["entries"].as_array().unwrap().clone();
    assert_eq!(entries.len(), 2);
    assert_eq!(entries[0]["user_id"], "alice");
}

#[test]
fn aggregate_matches_recomputation() {
    let gw = start();
    let http = Http::new(&gw);
    run(&http, ALICE_TOKEN, MNIST, 4, 30, &[]);
    run(&http, BOB_TOKEN, MNIST, 2, 10, &[]);
    advance(&gw, 40 * SECOND);
    let r = http.get("/v1/telemetry/aggregate?window=20000", Some(BOB_TOKEN));
    assert_eq!(r.status, 200, "{}", r.body);
    let v = r.json();
    let (now, summary) = gw.cluster().read(|sim| {
        let now = sim.now();
        (
            now,
            aggregate_utilization(sim.telemetry().samples(), now - 20_000, now),
        )
    });
    assert_eq!(v["from"], now - 20_000);
    assert_eq!(v["to"], now);
    assert_eq!(v["running_ratio"], json!(summary.running_ratio));
    assert_eq!(v["over80_ratio"], json!(summary.over80_ratio));
    assert!(summary.running_ratio > 0.0);
}

#[test]
fn serving_answers_deterministically() {
    let gw = start();
    let http = Http::new(&gw);
    let sid = run(&http, ALICE_TOKEN, MNIST, 1, 10, &[]);
    let infer = format!("/v1/sessions/{}/infer", enc(&sid));
    let payload = json!({"pixels": [0, 1, 2, 3]});
    let r = http.post(&infer, Some(ALICE_TOKEN), &payload);
    assert_eq!(r.status, 409, "{}", r.body);
    advance(&gw, 30 * SECOND);
    let r = http.post(
        &format!("/v1/sessions/{}/serve", enc(&sid)),
        Some(ALICE_TOKEN),
        &json!({}),
    );
    assert_eq!(r.status, 200, "{}", r.body);
    assert_eq!(r.json()["state"], "Serving");
    let a = http.post(&infer, Some(ALICE_TOKEN), &payload);
    let b = http.post(&infer, Some(ALICE_TOKEN), &payload);
    assert_eq!(a.status, 200, "{}", a.body);
    assert_eq!(a.body, b.body);
    let other = http.post(&infer, Some(ALICE_TOKEN), &json!({"pixels": [9]}));
    assert_ne!(a.json()["output"], other.json()["output"]);
    assert_eq!(a.json()["latency_ms"], 10);
    assert_eq!(http.post(&infer, Some(BOB_TOKEN), &payload).status, 403);
}

#[test]
fn follow_streams_logs_until_the_session_ends() {
    let gw = start();
    let http = Http::new(&gw);
    let sid = run(&http, ALICE_TOKEN, MNIST, 1, 6, &[]);
    let url = format!("{}/v1/sessions/{}/logs?follow=true", http.base, enc(&sid));
    let reader = std::thread::spawn(move || {
        let resp = reqwest::blocking::Client::new()
            .get(url)
            .bearer_auth(ALICE_TOKEN)
            .send()
            .unwrap();
        assert_eq!(
            resp.headers()["content-type"].to_str().unwrap(),
            "application/x-ndjson"
        );
        resp.text().unwrap()
    });
    for _ in 0..30 {
        std::thread::sleep(std::time::Duration::from_millis(20));
        advance(&gw, SECOND);
    }
    let streamed = reader.join().unwrap();
    let lines: Vec<Value> = streamed
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let full = http.get(
        &format!("/v1/sessions/{}/logs", enc(&sid)),
        Some(ALICE_TOKEN),
    );
    assert_eq!(Value::Array(lines), full.json());
    assert_eq!(state_of(&http, ALICE_TOKEN, &sid), "Done");
}

#[test]
fn events_stream_ends_for_finished_sessions() {
    let gw = start();
    let http = Http::new(&gw);
    let sid = run(&http, ALICE_TOKEN, MNIST, 1, 5, &[]);
    advance(&gw, 30 * SECOND);
    let r = http.get(
        &format!("/v1/sessions/{}/events?follow=true&name=acc", enc(&sid)),
        Some(ALICE_TOKEN),
    );
    assert_eq!(r.status, 200);
    assert_eq!(r.body.lines().count(), 5);
    let r = http.get(
        &format!("/v1/sessions/{}/eventlen", enc(&sid)),
        Some(ALICE_TOKEN),
    );
    assert!(r.json()["count"].as_u64().unwrap() >= 5);
    let r = http.get(
        &format!("/v1/sessions/{}/events?limit=2&offset=1", enc(&sid)),
        Some(ALICE_TOKEN),
    );
    assert_eq!(r.json().as_array().unwrap().len(), 2);
}

#[test]
fn fork_and_diff_over_http() {
    let gw = start();
    let http = Http::new(&gw);
    let sid = run(&http, ALICE_TOKEN, MNIST, 1, 20, &[("lr", 0.1)]);
    advance(&gw, 30 * SECOND);
    let r = http.post(
        &format!("/v1/sessions/{}/fork", enc(&sid)),
        Some(ALICE_TOKEN),
        &json!({"overrides": {"lr": 0.01}}),
    );
    assert_eq!(r.status, 201, "{}", r.body);
    let child = r.json()["session_id"].as_str().unwrap().to_owned();
    let r = http.get(
        &format!("/v1/sessions/{}/diff?other={}", enc(&sid), enc(&child)),
        Some(ALICE_TOKEN),
    );
    assert_eq!(r.status, 200, "{}", r.body);
    assert_eq!(r.json()["lines"], json!(["lr: 0.1 | 0.01"]));
}

#[test]
fn sweeps_launch_and_report() {
    let gw = start();
    let http = Http::new(&gw);
    let body = json!({
        "spec": {
            "strategy": {"kind": "grid"},
            "space": {
                "lr": [0.1, 0.01],
                "batch": [32, 64]
            },
            "objective": {"metric": "acc", "order": "descending"}
        },
        "template": {
            "dataset_id": MNIST,
            "image_id": "pytorch-1.0",
            "gpus": 1,
            "memory": 4u64 << 30,
            "profile": quick(10)
        }
    });
    let r = http.post("/v1/sweeps", Some(ALICE_TOKEN), &body);
    assert_eq!(r.status, 201, "{}", r.body);
    let launch = r.json();
    assert_eq!(launch["sessions"].as_array().unwrap().len(), 4);
    advance(&gw, 40 * SECOND);
    let id = launch["sweep_id"].as_str().unwrap();
    let r = http.get(&format!("/v1/sweeps/{}", enc(id)), Some(ALICE_TOKEN));
    assert_eq!(r.status, 200, "{}", r.body);
    assert!(r.json()["best"].is_array());
}

#[test]
fn users_and_credit_are_admin_managed() {
    let gw = start();
    let http = Http::new(&gw);
    let r = http.post(
        "/v1/users",
        Some(ROOT_TOKEN),
        &json!({"user_id": "dave", "credit": 7, "teams": ["vision"]}),
    );
    assert_eq!(r.status, 201, "{}", r.body);
    assert_eq!(r.json()["credit_balance"], 7);
    let r = http.post(
        "/v1/users/dave/credit",
        Some(ROOT_TOKEN),
        &json!({"credit": 9}),
    );
    assert_eq!(r.json()["credit_balance"], 9);
    let me = http.get("/v1/users/me", Some(ALICE_TOKEN)).json();
    assert_eq!(me["user_id"], ALICE);
    let r = http.post("/v1/login", None, &json!({"token": ALICE_TOKEN}));
    assert_eq!(r.json(), json!({"user_id": "alice", "role": "user"}));
    assert_eq!(
        http.post("/v1/login", None, &json!({"token": "x"})).status,
        401
    );
}

#[test]
fn datasets_push_and_list() {
    let gw = start();
    let http = Http::new(&gw);
    let r = http.post(
        "/v1/datasets",
        Some(BOB_TOKEN),
        &json!({"dataset_id": "speech", "size": 1000, "evaluation": {"metric_name": "mse", "order": "ascending"}}),
    );
    assert_eq!(r.status, 201, "{}", r.body);
    let bob = http.get("/v1/datasets", Some(BOB_TOKEN)).json();
    let names: Vec<&str> = bob
        .as_array()
        .unwrap()
        .iter()
        .map(|d| d["dataset_id"].as_str().unwrap())
        .collect();
    assert!(names.contains(&"speech") && names.contains(&MNIST) && !names.contains(&FACES));
    let r = http.post(
        "/v1/datasets",
        Some(BOB_TOKEN),
        &json!({"dataset_id": "speech", "size": 1}),
    );
    assert_eq!(r.status, 409);
}

#[test]
fn admin_faults_and_internal_replication_endpoints() {
    let gw = start();
    let http = Http::new(&gw);
    run(&http, ALICE_TOKEN, MNIST, 1, 50, &[]);
    advance(&gw, 2 * SECOND);
    let hb = http.get("/internal/heartbeat", Some(ROOT_TOKEN));
    assert_eq!(hb.status, 200, "{}", hb.body);
    assert_eq!(hb.json()["epoch"], 1);
    let log = http.get("/internal/log?from=1&to=3", Some(ROOT_TOKEN));
    assert_eq!(log.body.lines().count(), 3);
    assert_eq!(http.get("/internal/log", Some(ALICE_TOKEN)).status, 403);

    let r = http.post(
        "/v1/admin/faults",
        Some(ROOT_TOKEN),
        &json!({"at": 0, "target": "primary", "kind": "crash"}),
    );
    assert_eq!(r.status, 200, "{}", r.body);
    let r = http.post(
        "/v1/admin/advance",
        Some(ROOT_TOKEN),
        &json!({"ms": 10_000}),
    );
    assert_eq!(r.status, 200, "{}", r.body);
    let status = http.get("/v1/status", None).json();
    assert_eq!(status["primary"], 1);
    assert_eq!(status["scheduler_epoch"], 2);
    let audit = http.get("/v1/admin/audit", Some(ROOT_TOKEN));
    assert_eq!(audit.status, 200, "{}", audit.body);
}

#[test]
fn bundle_checkpoints_and_memos() {
    let gw = start();
    let http = Http::new(&gw);
    let sid = run(&http, ALICE_TOKEN, MNIST, 1, 20, &[]);
    advance(&gw, 40 * SECOND);
    let s = enc(&sid);
    let r = http.post(
        &format!("/v1/sessions/{s}/memo"),
        Some(ALICE_TOKEN),
        &json!({"text": "baseline"}),
    );
    assert_eq!(r.status, 200, "{}", r.body);
    let manifest = http
        .get(&format!("/v1/sessions/{s}/checkpoints"), Some(ALICE_TOKEN))
        .json();
    let ckpts = manifest["checkpoints"].as_array().unwrap();
    assert!(!ckpts.is_empty());
    let first = ckpts[0]["checkpoint_id"].as_str().unwrap();
    let one = http.get(
        &format!("/v1/sessions/{s}/checkpoints/{}", enc(first)),
        Some(ALICE_TOKEN),
    );
    assert_eq!(one.status, 200, "{}", one.body);
    assert_eq!(one.json(), ckpts[0]);
    let bundle = http
        .get(&format!("/v1/sessions/{s}/bundle"), Some(ALICE_TOKEN))
        .json();
    assert_eq!(bundle["session"]["session_id"], sid.as_str());
    assert_eq!(bundle["memos"][0]["text"], "baseline");
    assert_eq!(bundle["checkpoints"], manifest);
    assert_eq!(
        http.get(&format!("/v1/sessions/{s}/bundle"), Some(BOB_TOKEN))
            .status,
        403
    );
}
