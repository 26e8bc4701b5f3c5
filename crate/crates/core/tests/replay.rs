use std::io::Write;
use std::sync::Arc;

use mlcluster_core::audit::audit_log;
use mlcluster_core::clock::{VirtualClock, SECOND};
use mlcluster_core::domain::GIB;
use mlcluster_core::log::{EventLog, LogError, Snapshot};
use mlcluster_core::sim::fixtures::*;
use mlcluster_core::sim::{SimConfig, Simulation};
use mlcluster_core::{ControlPlane, ControlState, PlaneConfig};

fn busy_sim(logs: Vec<EventLog>) -> Simulation {
    let config = SimConfig {
        standby: logs.len() > 1,
        ..SimConfig::default()
    };
    let mut sim = Simulation::with_logs(config, logs).unwrap();
    seed_registry(&mut sim).unwrap();
    sim.spawn_node(Some("n1".into()), 4, 64 * GIB).unwrap();
    sim.spawn_node(Some("n2".into()), 8, 64 * GIB).unwrap();
    for gpus in [1, 2, 4, 8, 2] {
        sim.command(|p| p.run(&user(ALICE), request(MNIST, gpus, 4 * GIB, profile(15))))
            .unwrap();
    }
    sim.run_until_idle(600 * SECOND).unwrap();
    sim
}

#[test]
fn a_reopened_file_log_rebuilds_the_same_state() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("primary.log");
    let sim = busy_sim(vec![EventLog::open(&path).unwrap()]);
    let live = sim.primary().unwrap().state().clone();
    drop(sim);

    let clock = Arc::new(VirtualClock::new(0));
    let plane = ControlPlane::new(
        "reopened",
        EventLog::open(&path).unwrap(),
        clock,
        PlaneConfig::default(),
    )
    .unwrap();
    assert_eq!(plane.state(), &live);
    plane.verify_replay().unwrap();
}

#[test]
fn snapshot_plus_suffix_equals_full_replay() {
    let sim = busy_sim(vec![EventLog::in_memory()]);
    let log = sim.primary().unwrap().log();
    let records = log.replay(1).unwrap();
    let cut = records.len() as u64 / 2;
    let prefix = ControlState::from_records(&records[..cut as usize]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.snap");
    Snapshot {
        max_seq: cut,
        state: prefix,
    }
    .write(&path)
    .unwrap();
    let mut restored: Snapshot<ControlState> = Snapshot::read(&path).unwrap();
    for r in log.replay(cut + 1).unwrap() {
        restored.state.apply_record(&r).unwrap();
    }
    assert_eq!(&restored.state, sim.primary().unwrap().state());
}

#[test]
fn truncated_tail_is_reported_with_the_last_good_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("primary.log");
    let max = {
        let sim = busy_sim(vec![EventLog::open(&path).unwrap()]);
        sim.primary().unwrap().log().max_seq()
    };
    let mut f = std::fs::OpenOptions::new()
        .append(true)
        .open(&path)
        .unwrap();
    f.write_all(br#"{"seq": 999999, "kind": "sess"#).unwrap();
    drop(f);
    match EventLog::open(&path) {
        Err(LogError::Corrupt { last_good, .. }) => assert_eq!(last_good, max),
        other => panic!("expected corruption, got {other:?}"),
    }
}

#[test]
fn every_sequence_point_respects_capacity() {
    let sim = busy_sim(vec![EventLog::in_memory(), EventLog::in_memory()]);
    let report = audit_log(&sim.primary().unwrap().log().replay(1).unwrap()).unwrap();
    assert!(report.peak_bound_gpus["n2"] <= 8);
    assert!(report.peak_bound_gpus["n1"] <= 4);
    sim.audit().unwrap();
    let standby = sim.replica(1).plane.log().replay(1).unwrap();
    let primary = sim.primary().unwrap().log().replay(1).unwrap();
    assert_eq!(standby[..], primary[..standby.len()]);
}
