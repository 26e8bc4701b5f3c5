//! Defragmenting, locality-aware node selection.
//!
//! Candidates are ordered by fewest available GPUs first, so large free GPU
//! blocks survive for large jobs. Among equal GPU counts, nodes already caching
//! the job's dataset (worth 2) and image (worth 1) win; node id breaks the rest.

use std::cmp::Reverse;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{NodeDescriptor, ResourceRequest};
use crate::ids::NodeId;

/// Sort key for a feasible node; smaller is preferred.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct PlacementKey {
    pub available_gpus: u32,
    pub locality: Reverse<u8>,
    pub node_id: NodeId,
}

impl PlacementKey {
    pub fn of(node: &NodeDescriptor, request: &ResourceRequest) -> Self {
        Self {
            available_gpus: node.available_gpus,
            locality: Reverse(node.locality_score(request)),
            node_id: node.node_id.clone(),
        }
    }
}

fn feasible<'a>(
    request: &'a ResourceRequest,
    nodes: &'a [NodeDescriptor],
) -> impl Iterator<Item = &'a NodeDescriptor> + 'a {
    nodes
        .iter()
        .filter(move |n| n.is_alive() && n.fits_now(request))
}

/// Chooses the node for `request`, or `None` when nothing fits. Pure.
pub fn place(request: &ResourceRequest, nodes: &[NodeDescriptor]) -> Option<NodeId> {
    feasible(request, nodes)
        .min_by_key(|n| PlacementKey::of(n, request))
        .map(|n| n.node_id.clone())
}

/// Which placement rule the scheduler applies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementPolicy {
    #[default]
    DefragLocality,
    /// Uniformly random feasible node; the comparison baseline.
    RandomFeasible,
}

impl PlacementPolicy {
    pub fn choose<R: Rng + ?Sized>(
        self,
        request: &ResourceRequest,
        nodes: &[NodeDescriptor],
        rng: &mut R,
    ) -> Option<NodeId> {
        match self {
            PlacementPolicy::DefragLocality => place(request, nodes),
            PlacementPolicy::RandomFeasible => {
                let candidates: Vec<_> = feasible(request, nodes).collect();
                candidates.choose(rng).map(|n| n.node_id.clone())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Liveness, GIB};

    fn node(id: &str, avail: u32) -> NodeDescriptor {
        let mut n = NodeDescriptor::new(id.into(), 8, 64 * GIB, 0);
        n.available_gpus = avail;
        n
    }

    fn request(gpus: u32) -> ResourceRequest {
        ResourceRequest {
            gpus,
            memory: GIB,
            dataset_id: "d".into(),
            image_id: "img".into(),
        }
    }

    #[test]
    fn smallest_sufficient_block_wins() {
        let nodes = [node("A", 1), node("B", 4), node("C", 8)];
        assert_eq!(place(&request(1), &nodes), Some("A".into()));
        assert_eq!(place(&request(2), &nodes), Some("B".into()));
        assert_eq!(place(&request(8), &nodes), Some("C".into()));
    }

    #[test]
    fn dataset_locality_breaks_ties() {
        let mut b = node("B", 2);
        b.cached_datasets.insert("d".into());
        let nodes = [node("A", 2), b];
        assert_eq!(place(&request(2), &nodes), Some("B".into()));
    }

    #[test]
    fn dataset_beats_image() {
        let mut a = node("A", 2);
        a.cached_images.insert("img".into());
        let mut b = node("B", 2);
        b.cached_datasets.insert("d".into());
        assert_eq!(place(&request(1), &[a, b]), Some("B".into()));
    }

    #[test]
    fn locality_never_overrides_gpu_count() {
        let mut c = node("C", 8);
        c.cached_datasets.insert("d".into());
        c.cached_images.insert("img".into());
        assert_eq!(place(&request(1), &[node("A", 3), c]), Some("A".into()));
    }

    #[test]
    fn nothing_fits() {
        assert_eq!(place(&request(1), &[node("A", 0)]), None);
        assert_eq!(place(&request(1), &[]), None);
    }

    #[test]
    fn memory_is_a_filter() {
        let mut a = node("A", 1);
        a.available_memory = GIB / 2;
        assert_eq!(place(&request(1), &[a, node("B", 4)]), Some("B".into()));
    }

    #[test]
    fn dead_nodes_are_skipped() {
        let mut a = node("A", 1);
        a.liveness = Liveness::Dead;
        assert_eq!(place(&request(1), &[a, node("B", 4)]), Some("B".into()));
    }

    #[test]
    fn random_policy_only_picks_feasible_nodes() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let nodes = [node("A", 0), node("B", 4), node("C", 8)];
        for _ in 0..100 {
            let pick = PlacementPolicy::RandomFeasible
                .choose(&request(2), &nodes, &mut rng)
                .unwrap();
            assert_ne!(pick.as_str(), "A");
        }
    }
}
