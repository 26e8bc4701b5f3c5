use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clock::Millis;
use crate::domain::{ScoreOrder, Submission};
use crate::ids::{DatasetId, SessionId, SubmissionId, UserId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub rank: usize,
    pub user_id: UserId,
    pub score: f64,
    pub submission_id: SubmissionId,
    pub session_id: SessionId,
    pub timestamp: Millis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leaderboard {
    pub dataset_id: DatasetId,
    pub metric_name: String,
    pub order: ScoreOrder,
    pub entries: Vec<LeaderboardEntry>,
    /// Every submission per user, oldest first.
    pub history: BTreeMap<UserId, Vec<Submission>>,
}

/// Ranks users by their best score; equal scores go to the earlier submission.
pub fn build(
    dataset_id: &DatasetId,
    metric_name: &str,
    order: ScoreOrder,
    submissions: &[Submission],
) -> Leaderboard {
    let mut history: BTreeMap<UserId, Vec<Submission>> = BTreeMap::new();
    for s in submissions.iter().filter(|s| &s.dataset_id == dataset_id) {
        history.entry(s.owner.clone()).or_default().push(s.clone());
    }
    for subs in history.values_mut() {
        subs.sort_by(|a, b| {
            a.timestamp
                .cmp(&b.timestamp)
                .then_with(|| a.submission_id.cmp(&b.submission_id))
        });
    }
    let mut best: Vec<&Submission> = history
        .values()
        .filter_map(|subs| {
            subs.iter().fold(None::<&Submission>, |acc, s| match acc {
                Some(b) if !order.better(s.score, b.score) => Some(b),
                _ => Some(s),
            })
        })
        .collect();
    best.sort_by(|a, b| {
        let by_score = match order {
            ScoreOrder::Ascending => a.score.total_cmp(&b.score),
            ScoreOrder::Descending => b.score.total_cmp(&a.score),
        };
        by_score
            .then_with(|| a.timestamp.cmp(&b.timestamp))
            .then_with(|| a.owner.cmp(&b.owner))
    });
    let entries = best
        .into_iter()
        .enumerate()
        .map(|(i, s)| LeaderboardEntry {
            rank: i + 1,
            user_id: s.owner.clone(),
            score: s.score,
            submission_id: s.submission_id.clone(),
            session_id: s.session_id.clone(),
            timestamp: s.timestamp,
        })
        .collect();
    Leaderboard {
        dataset_id: dataset_id.clone(),
        metric_name: metric_name.to_owned(),
        order,
        entries,
        history,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sub(n: u32, user: &str, score: f64, ts: Millis) -> Submission {
        Submission {
            submission_id: format!("sub-{n}").into(),
            session_id: format!("{user}/d/1").into(),
            owner: user.into(),
            dataset_id: "d".into(),
            checkpoint_id: "ckpt-1".into(),
            metric_name: "accuracy".into(),
            order: ScoreOrder::Descending,
            score,
            timestamp: ts,
        }
    }

    fn users(lb: &Leaderboard) -> Vec<(String, usize)> {
        lb.entries
            .iter()
            .map(|e| (e.user_id.to_string(), e.rank))
            .collect()
    }

    #[test]
    fn descending_ranks_high_scores_first() {
        let subs = [sub(1, "u1", 0.8, 1), sub(2, "u2", 0.9, 2)];
        let lb = build(&"d".into(), "accuracy", ScoreOrder::Descending, &subs);
        assert_eq!(users(&lb), vec![("u2".into(), 1), ("u1".into(), 2)]);
    }

    #[test]
    fn ascending_ranks_low_scores_first() {
        let subs = [sub(1, "u1", 0.30, 1), sub(2, "u2", 0.25, 2)];
        let lb = build(&"d".into(), "mse", ScoreOrder::Ascending, &subs);
        assert_eq!(users(&lb)[0].0, "u2");
    }

    #[test]
    fn earlier_submission_wins_a_tie() {
        let subs = [sub(1, "u2", 0.5, 5), sub(2, "u1", 0.5, 3)];
        let lb = build(&"d".into(), "accuracy", ScoreOrder::Descending, &subs);
        assert_eq!(users(&lb), vec![("u1".into(), 1), ("u2".into(), 2)]);
    }

    #[test]
    fn best_per_user_and_full_history() {
        let subs = [
            sub(1, "u1", 0.5, 1),
            sub(2, "u1", 0.7, 2),
            sub(3, "u1", 0.6, 3),
            sub(4, "u2", 0.65, 4),
        ];
        let lb = build(&"d".into(), "accuracy", ScoreOrder::Descending, &subs);
        assert_eq!(lb.entries[0].score, 0.7);
        assert_eq!(lb.entries[0].submission_id.as_str(), "sub-2");
        assert_eq!(lb.history[&UserId::new("u1")].len(), 3);
    }

    #[test]
    fn other_datasets_are_ignored() {
        let mut other = sub(1, "u1", 0.99, 1);
        other.dataset_id = "e".into();
        let lb = build(&"d".into(), "accuracy", ScoreOrder::Descending, &[other]);
        assert!(lb.entries.is_empty());
        assert!(lb.history.is_empty());
    }
}
