use std::sync::Arc;

use proptest::prelude::{any, prop, prop_assert, prop_oneof, proptest, Just, ProptestConfig};
use proptest::strategy::Strategy as _;

use super::failover::{FailoverConfig, HeartbeatAck, Replica, Role};
use super::*;
use crate::audit::audit_log;
use crate::clock::{VirtualClock, SECOND};
use crate::control::PlaneConfig;
use crate::domain::GIB;
use crate::log::EventLog;
use crate::sim::fixtures::*;

fn plane_with(nodes: &[(&str, u32)]) -> (ControlPlane, VirtualClock) {
    let clock = VirtualClock::new(0);
    let mut p = ControlPlane::in_memory(Arc::new(clock.clone()), PlaneConfig::default());
    seed_plane(&mut p).unwrap();
    for (id, gpus) in nodes {
        p.register_node((*id).into(), *gpus, 64 * GIB).unwrap();
    }
    (p, clock)
}

fn submit(p: &mut ControlPlane, gpus: u32) -> SessionId {
    p.run(&user(ALICE), request(MNIST, gpus, GIB, profile(10)))
        .unwrap()
}

fn probe(gpus: u32) -> ResourceRequest {
    ResourceRequest {
        gpus,
        memory: GIB,
        dataset_id: MNIST.into(),
        image_id: IMAGE.into(),
    }
}

#[test]
fn admission_examples() {
    let (mut p, _) = plane_with(&[("n1", 8)]);
    assert_eq!(
        p.admit(&user(ALICE), &probe(1)).unwrap(),
        AdmissionDecision::Accepted { position: 1 }
    );
    assert_eq!(
        p.admit(&user(ALICE), &probe(16)).unwrap(),
        AdmissionDecision::Rejected {
            reason: RejectReason::Infeasible
        }
    );
    p.emit(Event::CreditSet {
        user_id: user(BOB),
        balance: 0,
    })
    .unwrap();
    assert_eq!(
        p.admit(&user(BOB), &probe(1)).unwrap(),
        AdmissionDecision::Rejected {
            reason: RejectReason::CreditExhausted
        }
    );
    let mut private = probe(16);
    private.dataset_id = FACES.into();
    assert_eq!(
        p.admit(&user(BOB), &private).unwrap(),
        AdmissionDecision::Rejected {
            reason: RejectReason::PermissionDenied
        }
    );
}

#[test]
fn rejected_admission_leaves_no_state() {
    let (mut p, _) = plane_with(&[("n1", 8)]);
    let before = p.log().max_seq();
    let err = p
        .run(&user(ALICE), request(MNIST, 16, GIB, profile(10)))
        .unwrap_err();
    assert!(matches!(err, Error::Rejected(RejectReason::Infeasible)));
    assert_eq!(p.log().max_seq(), before);
    assert!(p.state().sessions.is_empty());
}

#[test]
fn backfill_keeps_the_head_in_place() {
    let (mut p, _) = plane_with(&[("n1", 8)]);
    let filler = submit(&mut p, 4);
    p.drain_queue().unwrap();
    let big = submit(&mut p, 8);
    let small = submit(&mut p, 1);
    let placed = p.drain_queue().unwrap();
    assert_eq!(placed, vec![(small.clone(), "n1".into())]);
    assert_eq!(p.state().queue.front(), Some(&big));
    assert_eq!(p.state().sessions[&filler].state, SessionState::Preparing);
}

#[test]
fn fifo_when_everything_fits() {
    let (mut p, _) = plane_with(&[("n1", 3)]);
    let ids: Vec<_> = (0..3).map(|_| submit(&mut p, 1)).collect();
    let placed: Vec<SessionId> = p
        .drain_queue()
        .unwrap()
        .into_iter()
        .map(|(s, _)| s)
        .collect();
    assert_eq!(placed, ids);
    assert!(p.drain_queue().unwrap().is_empty());
}

#[test]
fn bind_and_release_are_inverse_and_release_is_idempotent() {
    let (mut p, _) = plane_with(&[("n1", 4)]);
    let sid = submit(&mut p, 2);
    let node = p.bind(&sid, &"n1".into()).unwrap();
    assert_eq!(node.available_gpus, 2);
    p.emit(Event::DatasetCached {
        node_id: "n1".into(),
        dataset_id: MNIST.into(),
    })
    .unwrap();
    let node = p.release(&sid).unwrap().unwrap();
    assert_eq!(node.available_gpus, 4);
    assert_eq!(node.available_memory, 64 * GIB);
    assert!(node.cached_datasets.contains(&DatasetId::from(MNIST)));
    assert_eq!(p.release(&sid).unwrap(), None);
    assert_eq!(p.state().nodes[&NodeId::from("n1")].available_gpus, 4);
}

#[test]
fn a_starving_head_reserves_a_node_after_the_grace_period() {
    let (mut p, _) = plane_with(&[("n1", 16), ("n2", 16)]);
    for gpus in [12, 4, 2] {
        submit(&mut p, gpus);
    }
    p.drain_queue().unwrap();
    let avail = |p: &ControlPlane, n: &str| p.state().nodes[&NodeId::from(n)].available_gpus;
    assert_eq!((avail(&p, "n1"), avail(&p, "n2")), (0, 14));
    let head = submit(&mut p, 16);
    // Ten backfills while the head is within its grace period.
    for _ in 0..p.config().backfill_grace_ticks {
        submit(&mut p, 1);
        p.drain_queue().unwrap();
    }
    assert_eq!((avail(&p, "n1"), avail(&p, "n2")), (0, 4));
    // From now on n2 is held for the head.
    let late: Vec<_> = (0..3).map(|_| submit(&mut p, 1)).collect();
    p.drain_queue().unwrap();
    p.drain_queue().unwrap();
    assert_eq!(avail(&p, "n2"), 4);
    assert_eq!(p.state().queue.front(), Some(&head));
    assert!(late
        .iter()
        .all(|s| p.state().sessions[s].state == SessionState::Queued));
}

#[test]
fn heartbeat_ships_missing_records_to_the_secondary() {
    let clock = VirtualClock::new(0);
    let shared: Arc<dyn crate::clock::Clock> = Arc::new(clock.clone());
    let primary_plane = ControlPlane::new(
        "a",
        EventLog::in_memory(),
        shared.clone(),
        PlaneConfig::default(),
    )
    .unwrap();
    let mut primary = Replica::new(primary_plane, Role::Primary, FailoverConfig::default());
    primary.bootstrap().unwrap();
    seed_plane(&mut primary.plane).unwrap();
    let secondary_plane =
        ControlPlane::new("b", EventLog::in_memory(), shared, PlaneConfig::default()).unwrap();
    let mut secondary = Replica::new(secondary_plane, Role::Secondary, FailoverConfig::default());
    let upto = primary.plane.log().max_seq();
    let early = primary.plane.log().range(1, upto - 2);
    secondary.replicate(&early).unwrap();
    assert_eq!(secondary.plane.log().max_seq(), upto - 2);

    let msg = primary.heartbeat(SECOND);
    let ack = secondary.record_heartbeat(&msg, &[], SECOND).unwrap();
    assert_eq!(
        ack,
        HeartbeatAck::Ok {
            epoch: 1,
            max_seq: upto - 2,
            pull: Some((upto - 1, upto)),
        }
    );
    let records = primary.unacked_records();
    let ack = secondary.record_heartbeat(&msg, &records, SECOND).unwrap();
    assert!(matches!(ack, HeartbeatAck::Ok { max_seq, pull: None, .. } if max_seq == upto));
    primary.record_ack(&ack).unwrap();
    assert_eq!(primary.peer_acked(), upto);
    assert_eq!(secondary.plane.state(), primary.plane.state());
}

#[test]
fn stale_epochs_are_rejected_and_deposed_primaries_step_down() {
    let clock = VirtualClock::new(0);
    let shared: Arc<dyn crate::clock::Clock> = Arc::new(clock.clone());
    let mk = |name: &str, role| {
        let plane = ControlPlane::new(
            name,
            EventLog::in_memory(),
            shared.clone(),
            PlaneConfig::default(),
        )
        .unwrap();
        Replica::new(plane, role, FailoverConfig::default())
    };
    let mut old = mk("a", Role::Primary);
    old.bootstrap().unwrap();
    let mut standby = mk("b", Role::Secondary);
    standby
        .record_heartbeat(&old.heartbeat(0), &old.unacked_records(), 0)
        .unwrap();

    clock.advance_to(3 * SECOND);
    assert_eq!(standby.failover_check(3 * SECOND).unwrap(), None);
    clock.advance_to(3 * SECOND + 1);
    let promo = standby.failover_check(3 * SECOND + 1).unwrap().unwrap();
    assert_eq!(promo.epoch, 2);
    assert!(standby.is_primary());

    let ack = standby
        .record_heartbeat(&old.heartbeat(4 * SECOND), &[], 4 * SECOND)
        .unwrap();
    assert_eq!(ack, HeartbeatAck::StaleEpoch { current_epoch: 2 });
    old.record_ack(&ack).unwrap();
    assert_eq!(old.role(), Role::Secondary);
    assert_eq!(old.epoch(), 2);
    assert_eq!(old.plane.log().max_seq(), 0);
}

#[test]
fn failover_config_requires_twice_the_interval() {
    let bad = FailoverConfig {
        heartbeat_interval: SECOND,
        failover_timeout: 2 * SECOND,
    };
    assert!(bad.validate().is_err());
    assert!(FailoverConfig::default().validate().is_ok());
}

#[derive(Debug, Clone)]
enum Op {
    Submit(u32, u64),
    Drain,
    Finish(usize),
    Kill(usize),
}

fn op() -> impl proptest::strategy::Strategy<Value = Op> {
    prop_oneof![
        4 => (1u32..=8, 1u64..=40).prop_map(|(g, m)| Op::Submit(g, m)),
        3 => Just(Op::Drain),
        2 => any::<usize>().prop_map(Op::Finish),
        1 => any::<usize>().prop_map(Op::Kill),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn interleaved_binds_never_oversubscribe(ops in prop::collection::vec(op(), 1..80)) {
        let (mut p, _) = plane_with(&[("n1", 8), ("n2", 4), ("n3", 2)]);
        let mut sessions = Vec::new();
        for op in ops {
            match op {
                Op::Submit(g, m) => {
                    if let Ok(sid) = p.run(&user(ALICE), request(MNIST, g, m * GIB, profile(10))) {
                        sessions.push(sid);
                    }
                }
                Op::Drain => { p.drain_queue().unwrap(); }
                Op::Finish(i) | Op::Kill(i) if !sessions.is_empty() => {
                    let sid = sessions[i % sessions.len()].clone();
                    if p.state().bindings.contains_key(&sid) {
                        p.end_session(&sid, SessionState::Failed, "test").unwrap();
                    }
                }
                _ => {}
            }
            p.state().check_invariants().unwrap();
        }
        let report = audit_log(&p.log().replay(1).unwrap()).unwrap();
        prop_assert!(report.records > 0);
    }
}
