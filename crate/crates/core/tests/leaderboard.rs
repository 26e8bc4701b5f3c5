use std::collections::BTreeMap;

use mlcluster_core::domain::{ScoreOrder, Submission};
use mlcluster_core::ids::UserId;
use mlcluster_core::session::leaderboard::build;
use proptest::prelude::*;

fn sub(i: usize, user: u8, score: f64, ts: u64) -> Submission {
    Submission {
        submission_id: format!("sub-{:04}", i + 1).into(),
        session_id: format!("u{user}/d/1").into(),
        owner: UserId::new(format!("u{user}")),
        dataset_id: "d".into(),
        checkpoint_id: format!("ck-{i}").into(),
        metric_name: "m".into(),
        order: ScoreOrder::Descending,
        score,
        timestamp: ts,
    }
}

/// Expected (user, score, timestamp) ranking, computed without the library.
fn oracle(subs: &[Submission], order: ScoreOrder) -> Vec<(UserId, f64, u64)> {
    let key = |s: f64| match order {
        ScoreOrder::Ascending => s,
        ScoreOrder::Descending => -s,
    };
    let mut best: BTreeMap<UserId, &Submission> = BTreeMap::new();
    for s in subs {
        let replace = match best.get(&s.owner) {
            None => true,
            Some(b) => {
                key(s.score) < key(b.score)
                    || (key(s.score) == key(b.score)
                        && (s.timestamp, &s.submission_id) < (b.timestamp, &b.submission_id))
            }
        };
        if replace {
            best.insert(s.owner.clone(), s);
        }
    }
    let mut rows: Vec<_> = best
        .values()
        .map(|s| (s.owner.clone(), s.score, s.timestamp))
        .collect();
    rows.sort_by(|a, b| {
        key(a.1)
            .partial_cmp(&key(b.1))
            .unwrap()
            .then(a.2.cmp(&b.2))
            .then(a.0.cmp(&b.0))
    });
    rows
}

fn submissions() -> impl Strategy<Value = Vec<Submission>> {
    prop::collection::vec((0u8..6, 0u8..8, 0u64..50), 0..40).prop_map(|raw| {
        raw.into_iter()
            .enumerate()
            .map(|(i, (u, s, ts))| sub(i, u, s as f64 / 8.0, ts))
            .collect()
    })
}

fn order() -> impl Strategy<Value = ScoreOrder> {
    prop_oneof![Just(ScoreOrder::Ascending), Just(ScoreOrder::Descending)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn ranking_matches_the_oracle(subs in submissions(), order in order()) {
        let board = build(&"d".into(), "m", order, &subs);
        let got: Vec<_> = board
            .entries
            .iter()
            .map(|e| (e.user_id.clone(), e.score, e.timestamp))
            .collect();
        prop_assert_eq!(got, oracle(&subs, order));
        for (i, e) in board.entries.iter().enumerate() {
            prop_assert_eq!(e.rank, i + 1);
        }
        let total: usize = board.history.values().map(Vec::len).sum();
        prop_assert_eq!(total, subs.len());
        for h in board.history.values() {
            prop_assert!(h.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        }
    }

    #[test]
    fn a_users_ranked_score_never_worsens(subs in submissions(), order in order()) {
        let mut last: BTreeMap<UserId, f64> = BTreeMap::new();
        let mut sorted = subs.clone();
        sorted.sort_by_key(|s| s.timestamp);
        for n in 1..=sorted.len() {
            let board = build(&"d".into(), "m", order, &sorted[..n]);
            for e in &board.entries {
                if let Some(prev) = last.get(&e.user_id) {
                    prop_assert!(!order.better(*prev, e.score));
                }
                last.insert(e.user_id.clone(), e.score);
            }
        }
    }
}

#[test]
fn documented_orderings() {
    let desc = build(
        &"d".into(),
        "accuracy",
        ScoreOrder::Descending,
        &[sub(0, 1, 0.8, 1), sub(1, 2, 0.9, 2)],
    );
    assert_eq!(desc.entries[0].user_id.as_str(), "u2");
    let asc = build(
        &"d".into(),
        "mse",
        ScoreOrder::Ascending,
        &[sub(0, 1, 0.30, 1), sub(1, 2, 0.25, 2)],
    );
    assert_eq!(asc.entries[0].user_id.as_str(), "u2");
    let tie = build(
        &"d".into(),
        "accuracy",
        ScoreOrder::Descending,
        &[sub(0, 2, 0.5, 3), sub(1, 1, 0.5, 1)],
    );
    assert_eq!(tie.entries[0].user_id.as_str(), "u1");
}
