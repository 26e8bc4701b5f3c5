//! One PASS/FAIL line per headline criterion. Exits nonzero if any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use mlcluster_core::domain::{
    Liveness, NodeDescriptor, ResourceRequest, ScoreOrder, Submission, GIB,
};
use mlcluster_core::ids::{DatasetId, ImageId, NodeId, UserId};
use mlcluster_core::log::LogRecord;
use mlcluster_core::scheduler::placement::place;
use mlcluster_core::session::leaderboard::build;
use mlcluster_core::sim::experiments::*;
use mlcluster_core::sim::{SimConfig, Simulation};
use mlcluster_gateway::Gateway;
use proptest::prelude::*;
use proptest::test_runner::{Config as RunnerConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use common::*;

type Check = Result<(bool, String), String>;
type Criterion = (&'static str, fn() -> Check);

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- placement

const DATASETS: [&str; 3] = ["mnist", "coco", "faces"];
const IMAGES: [&str; 2] = ["torch", "tf"];

fn random_fleet(rng: &mut ChaCha8Rng) -> Vec<NodeDescriptor> {
    let n = rng.gen_range(0..=12);
    let mut ids: Vec<u32> = (0..40).collect();
    (0..n)
        .map(|i| {
            let pick = rng.gen_range(i..ids.len());
            ids.swap(i, pick);
            let total = [1u32, 2, 4, 8, 16][rng.gen_range(0..5)];
            let mem = rng.gen_range(1..=64u64);
            NodeDescriptor {
                node_id: NodeId::new(format!("n{:02}", ids[i])),
                total_gpus: total,
                available_gpus: rng.gen_range(0..=total),
                total_memory: mem * GIB,
                available_memory: rng.gen_range(0..=mem) * GIB,
                cached_datasets: DATASETS
                    .iter()
                    .filter(|_| rng.gen_bool(0.4))
                    .map(|d| DatasetId::new(*d))
                    .collect(),
                cached_images: IMAGES
                    .iter()
                    .filter(|_| rng.gen_bool(0.5))
                    .map(|i| ImageId::new(*i))
                    .collect(),
                liveness: if rng.gen_bool(0.9) {
                    Liveness::Alive
                } else {
                    Liveness::Dead
                },
                last_heartbeat: 0,
            }
        })
        .collect()
}

fn random_request(rng: &mut ChaCha8Rng) -> ResourceRequest {
    ResourceRequest {
        gpus: rng.gen_range(0..=16),
        memory: rng.gen_range(1..=48) * GIB,
        dataset_id: DATASETS[rng.gen_range(0..3)].into(),
        image_id: IMAGES[rng.gen_range(0..2)].into(),
    }
}

/// Filters feasible nodes, then minimizes (available, -locality, id) by scanning.
fn brute_force(req: &ResourceRequest, nodes: &[NodeDescriptor]) -> Option<NodeId> {
    let mut best: Option<(u32, i32, &str)> = None;
    for n in nodes {
        if n.liveness != Liveness::Alive
            || n.available_gpus < req.gpus
            || n.available_memory < req.memory
        {
            continue;
        }
        let locality = 2 * i32::from(n.cached_datasets.contains(&req.dataset_id))
            + i32::from(n.cached_images.contains(&req.image_id));
        let key = (n.available_gpus, -locality, n.node_id.as_str());
        if best.is_none_or(|b| key < b) {
            best = Some(key);
        }
    }
    best.map(|b| NodeId::new(b.2))
}

fn placement_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x91ace);
    let started = Instant::now();
    let mut mismatches = 0;
    let mut placed = 0;
    for _ in 0..10_000 {
        let nodes = random_fleet(&mut rng);
        let req = random_request(&mut rng);
        let got = place(&req, &nodes);
        placed += usize::from(got.is_some());
        if got != brute_force(&req, &nodes) {
            mismatches += 1;
        }
    }
    let elapsed = started.elapsed();
    Ok((
        mismatches == 0 && elapsed < Duration::from_secs(10),
        format!(
            "10000 instances ({placed} placeable), {mismatches} mismatches, {:.2}s (limit 10s)",
            elapsed.as_secs_f64()
        ),
    ))
}

// ---------------------------------------------------------------- scenarios

fn defragmentation() -> Check {
    let mut wins = 0;
    for seed in 0..50 {
        if defrag_trial(seed).map_err(err)?.policy_wins() {
            wins += 1;
        }
    }
    Ok((
        wins >= 45,
        format!("policy kept a free 8-GPU node longer in {wins}/50 runs (need >= 45)"),
    ))
}

fn locality() -> Check {
    let out = locality_trial(0).map_err(err)?;
    let golden = (26_000, 80_000);
    let got = (out.cached_copy_ms, out.uncached_copy_ms);
    Ok((
        out.reduction() >= 0.5 && got == golden,
        format!(
            "copy time {} ms cached vs {} ms uncached, {:.1}% reduction (need >= 50%), golden {:?}",
            got.0,
            got.1,
            out.reduction() * 100.0,
            golden
        ),
    ))
}

fn failover() -> Check {
    let mut passed = 0;
    let mut first_failure = None;
    for seed in 0..100 {
        let out = failover_trial(seed).map_err(err)?;
        if out.passed() {
            passed += 1;
        } else if first_failure.is_none() {
            first_failure = Some(format!("seed {seed}: {out:?}"));
        }
    }
    let mut detail = format!(
        "{passed}/100 drills promoted in time with a matching table, drained, one leader per epoch"
    );
    if let Some(f) = first_failure {
        detail.push_str(&format!("; first failure {f}"));
    }
    Ok((passed == 100, detail))
}

/// Walks a log independently of the state machine and checks bound GPUs and
/// memory against node totals after every record.
fn audit_records(records: &[LogRecord]) -> Result<usize, String> {
    let mut totals: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    let mut bound: BTreeMap<String, (String, BTreeSet<u64>, u64)> = BTreeMap::new();
    for r in records {
        let p = &r.payload;
        match p["type"].as_str().unwrap_or_default() {
            "node_registered" => {
                let n = &p["node"];
                totals.insert(
                    n["node_id"].as_str().unwrap_or_default().to_owned(),
                    (
                        n["total_gpus"].as_u64().unwrap_or(0),
                        n["total_memory"].as_u64().unwrap_or(0),
                    ),
                );
            }
            "bound" => {
                let sid = p["session_id"].as_str().unwrap_or_default().to_owned();
                if bound.contains_key(&sid) {
                    return Err(format!("seq {}: {sid} bound twice", r.seq));
                }
                let gpus: BTreeSet<u64> = p["gpus"]
                    .as_array()
                    .map(|a| a.iter().filter_map(Value::as_u64).collect())
                    .unwrap_or_default();
                bound.insert(
                    sid,
                    (
                        p["node_id"].as_str().unwrap_or_default().to_owned(),
                        gpus,
                        p["memory"].as_u64().unwrap_or(0),
                    ),
                );
            }
            "released" => {
                bound.remove(p["session_id"].as_str().unwrap_or_default());
            }
            _ => continue,
        }
        let mut per_node: BTreeMap<&str, (BTreeSet<u64>, u64, u64)> = BTreeMap::new();
        for (node, gpus, memory) in bound.values() {
            let e = per_node.entry(node).or_default();
            for g in gpus {
                if !e.0.insert(*g) {
                    return Err(format!("seq {}: gpu {g} on {node} bound twice", r.seq));
                }
            }
            e.1 += gpus.len() as u64;
            e.2 += memory;
        }
        for (node, (gpus, count, memory)) in per_node {
            let (tg, tm) = totals.get(node).copied().unwrap_or((0, 0));
            if count > tg || memory > tm || gpus.iter().any(|g| *g >= tg) {
                return Err(format!(
                    "seq {}: {node} holds {count} gpus / {memory} bytes of {tg} / {tm}",
                    r.seq
                ));
            }
        }
    }
    Ok(records.len())
}

fn audited(sim: &Simulation) -> Result<usize, String> {
    sim.audit().map_err(err)?;
    let records = sim.primary().map_err(err)?.log().replay(1).map_err(err)?;
    audit_records(&records)
}

fn never_oversubscribed() -> Check {
    let mut logs = 0;
    let mut records = 0;
    let base = SimConfig {
        standby: false,
        telemetry: false,
        ..SimConfig::default()
    };
    for seed in 0..10 {
        for policy in [
            mlcluster_core::scheduler::placement::PlacementPolicy::DefragLocality,
            mlcluster_core::scheduler::placement::PlacementPolicy::RandomFeasible,
        ] {
            let mut config = base.clone();
            config.plane.placement = policy;
            config.plane.placement_seed = seed;
            let sim = run_trace(config, 4, 8, &defrag_trace(seed), &[]).map_err(err)?;
            records += audited(&sim)?;
            logs += 1;
        }
        for cache in [true, false] {
            let mut config = base.clone();
            config.plane.cache_enabled = cache;
            let (trace, datasets) = locality_trace(seed);
            let sim = run_trace(config, 4, 8, &trace, &datasets).map_err(err)?;
            records += audited(&sim)?;
            logs += 1;
        }
    }
    for seed in 0..20 {
        if !failover_trial(seed).map_err(err)?.audit_ok {
            return Ok((false, format!("failover drill {seed} failed its audit")));
        }
        logs += 1;
    }
    Ok((
        true,
        format!("{logs} scenario logs, {records} records walked, no point over capacity"),
    ))
}

fn reproducibility() -> Check {
    let mut passed = 0;
    let mut first_failure = None;
    for case in 0..200 {
        let out = reproducibility_case(case).map_err(err)?;
        if out.passed() {
            passed += 1;
        } else if first_failure.is_none() {
            first_failure = Some(case);
        }
    }
    Ok((
        passed == 200,
        format!(
            "{passed}/200 cases bit-identical across run-twice, resume splice, fork splice and scores{}",
            first_failure.map_or(String::new(), |c| format!("; first failure case {c}"))
        ),
    ))
}

fn credit() -> Check {
    let out = credit_trial().map_err(err)?;
    Ok((
        out.passed(),
        format!(
            "balance hit 0 at {:?} ms, stop lag {:?} ms (tick {} ms), all stopped with checkpoint: {}, next run rejected: {}",
            out.exhausted_at, out.stop_lag, out.tick_interval, out.all_stopped_with_checkpoint, out.rejected_after
        ),
    ))
}

fn oom() -> Check {
    let out = oom_trial().map_err(err)?;
    Ok((
        out.passed(),
        format!(
            "killed {:?} at step {} (modeled {}), neighbour {:?} at step {}, {} notification(s)",
            out.killed_state,
            out.killed_progress + 1,
            out.expected_step,
            out.neighbour_state,
            out.neighbour_progress,
            out.oom_notifications
        ),
    ))
}

fn utilization() -> Check {
    let s = utilization_fleet().map_err(err)?;
    let ok = (s.running_ratio - 0.70).abs() <= 0.01 && (s.over80_ratio - 0.40).abs() <= 0.01;
    Ok((
        ok,
        format!(
            "running {:.4} (0.70 +/- 0.01), over80 {:.4} (0.40 +/- 0.01)",
            s.running_ratio, s.over80_ratio
        ),
    ))
}

// -------------------------------------------------------------- leaderboard

fn reference_ranking(subs: &[Submission], order: ScoreOrder) -> Vec<(UserId, f64, u64)> {
    let better = |a: f64, b: f64| match order {
        ScoreOrder::Ascending => a < b,
        ScoreOrder::Descending => a > b,
    };
    let mut best: BTreeMap<UserId, (f64, u64, String)> = BTreeMap::new();
    for s in subs {
        let cand = (s.score, s.timestamp, s.submission_id.to_string());
        match best.get(&s.owner) {
            Some(b)
                if !(better(cand.0, b.0) || (cand.0 == b.0 && (cand.1, &cand.2) < (b.1, &b.2))) => {
            }
            _ => {
                best.insert(s.owner.clone(), cand);
            }
        }
    }
    let mut rows: Vec<(UserId, f64, u64)> = best.into_iter().map(|(u, b)| (u, b.0, b.1)).collect();
    let mut sorted: Vec<(UserId, f64, u64)> = Vec::new();
    for row in rows.drain(..) {
        let pos = sorted
            .iter()
            .position(|o| better(row.1, o.1) || (row.1 == o.1 && (row.2, &row.0) < (o.2, &o.0)))
            .unwrap_or(sorted.len());
        sorted.insert(pos, row);
    }
    sorted
}

fn submission_set() -> impl Strategy<Value = (Vec<Submission>, ScoreOrder)> {
    (
        prop::collection::vec((0u8..6, 0u8..10, 0u64..40), 0..50),
        prop_oneof![Just(ScoreOrder::Ascending), Just(ScoreOrder::Descending)],
    )
        .prop_map(|(raw, order)| {
            let subs = raw
                .into_iter()
                .enumerate()
                .map(|(i, (u, s, ts))| Submission {
                    submission_id: format!("sub-{:04}", i + 1).into(),
                    session_id: format!("u{u}/d/{i}").into(),
                    owner: UserId::new(format!("u{u}")),
                    dataset_id: "d".into(),
                    checkpoint_id: format!("ck-{i}").into(),
                    metric_name: "m".into(),
                    order,
                    score: f64::from(s) / 10.0,
                    timestamp: ts,
                })
                .collect();
            (subs, order)
        })
}

fn leaderboard() -> Check {
    let mut runner = TestRunner::new(RunnerConfig {
        cases: 1000,
        failure_persistence: None,
        ..RunnerConfig::default()
    });
    let property = runner.run(&submission_set(), |(subs, order)| {
        let board = build(&"d".into(), "m", order, &subs);
        let got: Vec<_> = board
            .entries
            .iter()
            .map(|e| (e.user_id.clone(), e.score, e.timestamp))
            .collect();
        prop_assert_eq!(got, reference_ranking(&subs, order));
        Ok(())
    });
    if let Err(e) = property {
        return Ok((false, format!("property failed: {e}")));
    }

    let gw = start();
    let http = Http::new(&gw);
    let home = tempfile::tempdir().map_err(err)?;
    let mut submitted = 0;
    for (token, steps, dataset) in [
        (ALICE_TOKEN, 6, "mnist"),
        (BOB_TOKEN, 14, "mnist"),
        (ALICE_TOKEN, 30, "faces"),
        (ALICE_TOKEN, 9, "faces"),
    ] {
        let sid = run(&http, token, dataset, 1, steps, &[]);
        gw.cluster().advance(60_000).map_err(err)?;
        let r = http.post(
            &format!("/v1/sessions/{}/submit", enc(&sid)),
            Some(token),
            &json!({}),
        );
        submitted += usize::from(r.status == 200);
    }
    let mut equal = 0;
    for (dataset, token) in [("mnist", BOB_TOKEN), ("faces", ALICE_TOKEN)] {
        let api = http.get(&format!("/v1/leaderboard/{dataset}"), Some(token));
        let out = cli(
            &gw,
            home.path(),
            Some(token),
            &["--json", "leaderboard", dataset],
        );
        if out.status.success() && out.stdout == api.body.as_bytes() && api.status == 200 {
            equal += 1;
        }
    }
    Ok((
        equal == 2 && submitted == 4,
        format!("1000 random submission sets match the reference ranking; API and CLI bodies byte-equal on {equal}/2 boards"),
    ))
}

// --------------------------------------------------------------- end to end

fn cli_ok(
    gw: &Gateway,
    home: &std::path::Path,
    token: &str,
    args: &[&str],
) -> Result<String, String> {
    let out = cli(gw, home, Some(token), args);
    if !out.status.success() {
        return Err(format!(
            "`{}` failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn end_to_end() -> Check {
    let started = Instant::now();
    let mut config = config();
    config.datasets.clear();
    config.sim.standby = true;
    let gw = Gateway::start(config).map_err(err)?;
    let home = tempfile::tempdir().map_err(err)?;
    let h = home.path();
    let json_of = |s: String| serde_json::from_str::<Value>(&s).map_err(err);

    let status = json_of(cli_ok(&gw, h, ALICE_TOKEN, &["--json", "status"])?)?;
    let replicas = status["replicas"].as_array().map_or(0, Vec::len);
    let nodes = status["nodes"].as_array().map_or(0, Vec::len);

    cli_ok(
        &gw,
        h,
        ALICE_TOKEN,
        &[
            "dataset",
            "push",
            "cifar",
            "--size",
            "2147483648",
            "--metric",
            "acc",
        ],
    )?;
    cli_ok(
        &gw,
        h,
        BOB_TOKEN,
        &[
            "dataset",
            "push",
            "speech",
            "--size",
            "1073741824",
            "--metric",
            "mse",
        ],
    )?;
    let datasets = json_of(cli_ok(&gw, h, ALICE_TOKEN, &["--json", "dataset", "list"])?)?;

    let mut profile = quick(20);
    profile.response = vec![mlcluster_core::domain::ParamResponse {
        param: "lr".into(),
        optimum: 0.01,
        width: 2.0,
    }];
    let sweep = json!({
        "spec": {
            "strategy": {"kind": "grid"},
            "space": {"lr": [0.1, 0.01], "batch": [32, 64]},
            "objective": {"metric": "acc", "order": "descending"}
        },
        "template": {
            "dataset_id": "cifar",
            "image_id": "pytorch-1.0",
            "gpus": 2,
            "memory": 4 * GIB,
            "profile": profile
        }
    });
    let sweep_file = h.join("sweep.json");
    std::fs::write(&sweep_file, sweep.to_string()).map_err(err)?;
    let launch = json_of(cli_ok(
        &gw,
        h,
        ALICE_TOKEN,
        &["--json", "automl", "run", sweep_file.to_str().unwrap()],
    )?)?;
    let sweep_id = launch["sweep_id"].as_str().unwrap_or_default().to_owned();
    let members = launch["sessions"].as_array().map_or(0, Vec::len);

    let mut st = Value::Null;
    for _ in 0..20 {
        cli_ok(&gw, h, ROOT_TOKEN, &["admin", "advance", "10000"])?;
        st = json_of(cli_ok(
            &gw,
            h,
            ALICE_TOKEN,
            &["--json", "automl", "status", &sweep_id],
        )?)?;
        let done = st["members"]
            .as_array()
            .is_some_and(|m| m.iter().all(|m| m["state"] == "Done"));
        if done {
            break;
        }
    }
    let best = st["best"][0].as_str().unwrap_or_default().to_owned();
    if best.is_empty() {
        return Ok((false, format!("sweep never produced a best member: {st}")));
    }
    let submission = json_of(cli_ok(&gw, h, ALICE_TOKEN, &["--json", "submit", &best])?)?;
    let board = json_of(cli_ok(
        &gw,
        h,
        BOB_TOKEN,
        &["--json", "leaderboard", "cifar"],
    )?)?;
    let served = json_of(cli_ok(&gw, h, ALICE_TOKEN, &["--json", "serve", &best])?)?;
    let payload = r#"{"image": [0.1, 0.5, 0.9]}"#;
    let a = cli_ok(&gw, h, ALICE_TOKEN, &["--json", "infer", &best, payload])?;
    let b = cli_ok(&gw, h, ALICE_TOKEN, &["--json", "infer", &best, payload])?;
    let answer = json_of(a.clone())?;
    let audit = json_of(cli_ok(&gw, h, ROOT_TOKEN, &["--json", "admin", "audit"])?)?;
    let walked = gw.cluster().read(audited)?;
    let standby_in_sync = gw.cluster().read(|sim| {
        let p = sim.replica(0).plane.log().max_seq();
        let s = sim.replica(1).plane.log().max_seq();
        s > 0 && s <= p
    });
    let elapsed = started.elapsed();

    let ok = replicas == 2
        && standby_in_sync
        && nodes == 4
        && datasets.as_array().map_or(0, Vec::len) == 2
        && members == 4
        && submission["session_id"] == best.as_str()
        && board["entries"][0]["session_id"] == best.as_str()
        && served["state"] == "Serving"
        && a == b
        && answer["output"]["probabilities"]
            .as_array()
            .is_some_and(|p| p.len() == 10)
        && audit["records"].as_u64().is_some_and(|r| r > 0)
        && elapsed < Duration::from_secs(60);
    Ok((
        ok,
        format!(
            "{replicas} replicas, {nodes} nodes, 2 datasets, {members}-member grid, best {best} scored {} and served, inference repeatable, {walked} records audited, {:.2}s wall (limit 60s)",
            submission["score"],
            elapsed.as_secs_f64()
        ),
    ))
}

fn main() {
    let checks: [Criterion; 11] = [
        ("placement-oracle", placement_oracle),
        ("defragmentation", defragmentation),
        ("locality", locality),
        ("failover-drill", failover),
        ("never-oversubscribed", never_oversubscribed),
        ("reproducibility", reproducibility),
        ("credit-policy", credit),
        ("oom-enforcement", oom),
        ("utilization", utilization),
        ("leaderboard", leaderboard),
        ("end-to-end", end_to_end),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let (ok, detail) = match check() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!ok);
        println!(
            "{} {name}: {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
