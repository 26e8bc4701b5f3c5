use std::collections::BTreeSet;

use mlcluster_core::domain::{Liveness, NodeDescriptor, ResourceRequest, GIB};
use mlcluster_core::ids::{DatasetId, ImageId, NodeId};
use mlcluster_core::scheduler::placement::place;
use proptest::prelude::*;

/// Every feasible node, scored independently and sorted; the head wins.
fn oracle(req: &ResourceRequest, nodes: &[NodeDescriptor]) -> Option<NodeId> {
    let mut scored: Vec<(u32, i32, String)> = Vec::new();
    for n in nodes {
        let alive = matches!(n.liveness, Liveness::Alive);
        if !alive || n.available_gpus < req.gpus || n.available_memory < req.memory {
            continue;
        }
        let mut locality = 0;
        if n.cached_datasets.iter().any(|d| d == &req.dataset_id) {
            locality += 2;
        }
        if n.cached_images.iter().any(|i| i == &req.image_id) {
            locality += 1;
        }
        scored.push((n.available_gpus, -locality, n.node_id.as_str().to_owned()));
    }
    scored.sort();
    scored.first().map(|s| NodeId::new(s.2.clone()))
}

const DATASETS: [&str; 3] = ["mnist", "coco", "faces"];
const IMAGES: [&str; 2] = ["torch", "tf"];

fn node() -> impl Strategy<Value = NodeDescriptor> {
    (
        0u32..40,
        prop::sample::select(vec![1u32, 2, 4, 8, 16]),
        0u32..=16,
        1u64..=64,
        0u64..=64,
        prop::collection::btree_set(prop::sample::select(DATASETS.to_vec()), 0..=3),
        prop::collection::btree_set(prop::sample::select(IMAGES.to_vec()), 0..=2),
        prop::bool::weighted(0.9),
    )
        .prop_map(
            |(id, total, avail, mem, mem_avail, ds, imgs, alive)| NodeDescriptor {
                node_id: NodeId::new(format!("n{id:02}")),
                total_gpus: total,
                available_gpus: avail.min(total),
                total_memory: mem * GIB,
                available_memory: mem_avail.min(mem) * GIB,
                cached_datasets: ds.into_iter().map(DatasetId::new).collect(),
                cached_images: imgs.into_iter().map(ImageId::new).collect(),
                liveness: if alive {
                    Liveness::Alive
                } else {
                    Liveness::Dead
                },
                last_heartbeat: 0,
            },
        )
}

fn fleet() -> impl Strategy<Value = Vec<NodeDescriptor>> {
    prop::collection::vec(node(), 0..12).prop_map(|nodes| {
        let mut seen = BTreeSet::new();
        nodes
            .into_iter()
            .filter(|n| seen.insert(n.node_id.clone()))
            .collect()
    })
}

fn request() -> impl Strategy<Value = ResourceRequest> {
    (
        0u32..=16,
        1u64..=48,
        prop::sample::select(DATASETS.to_vec()),
        prop::sample::select(IMAGES.to_vec()),
    )
        .prop_map(|(gpus, mem, ds, img)| ResourceRequest {
            gpus,
            memory: mem * GIB,
            dataset_id: ds.into(),
            image_id: img.into(),
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn place_matches_the_brute_force_oracle(nodes in fleet(), req in request()) {
        prop_assert_eq!(place(&req, &nodes), oracle(&req, &nodes));
    }

    #[test]
    fn placement_ignores_node_order(mut nodes in fleet(), req in request(), rot in 0usize..12) {
        let before = place(&req, &nodes);
        if !nodes.is_empty() {
            let k = rot % nodes.len();
            nodes.rotate_left(k);
        }
        prop_assert_eq!(place(&req, &nodes), before);
    }
}

#[test]
fn tie_on_gpus_goes_to_the_cached_node() {
    let mut a = NodeDescriptor::new("a".into(), 8, 64 * GIB, 0);
    let mut b = NodeDescriptor::new("b".into(), 8, 64 * GIB, 0);
    a.available_gpus = 4;
    b.available_gpus = 4;
    b.cached_datasets.insert("mnist".into());
    let req = ResourceRequest {
        gpus: 2,
        memory: GIB,
        dataset_id: "mnist".into(),
        image_id: "torch".into(),
    };
    assert_eq!(place(&req, &[a.clone(), b.clone()]), Some("b".into()));
    b.available_gpus = 6;
    assert_eq!(place(&req, &[a, b]), Some("a".into()));
}
