//! Ready-made fleets, accounts and workloads for tests and demos.

use super::{SimConfig, Simulation};
use crate::clock::SECOND;
use crate::control::ControlPlane;
use crate::domain::{Evaluation, Role, UserAccount, Visibility, WorkloadProfile, GIB};
use crate::error::Result;
use crate::ids::{NodeId, UserId};
use crate::registry::DatasetPush;
use crate::session::RunRequest;

pub const ADMIN: &str = "root";
pub const ALICE: &str = "alice";
pub const BOB: &str = "bob";
pub const VISION: &str = "vision";
/// Public dataset with an accuracy evaluation.
pub const MNIST: &str = "mnist";
/// Team-private dataset owned by alice's team.
pub const FACES: &str = "faces";
pub const IMAGE: &str = "pytorch-1.0";
pub const CREDIT: u64 = 1_000_000_000;

pub fn user(id: &str) -> UserId {
    UserId::new(id)
}

/// A quick, noise-free run of `steps` one-second steps.
pub fn profile(steps: u64) -> WorkloadProfile {
    let mut p = WorkloadProfile::simple(0.9, 0.1, steps, 2 * GIB);
    p.step_duration = SECOND;
    p
}

pub fn request(dataset: &str, gpus: u32, memory: u64, profile: WorkloadProfile) -> RunRequest {
    RunRequest {
        dataset_id: dataset.into(),
        image_id: IMAGE.into(),
        config: Default::default(),
        gpus,
        memory,
        profile,
        seed: None,
        team: None,
    }
}

/// Seeds accounts and two datasets on a running simulation.
pub fn seed_registry(sim: &mut Simulation) -> Result<()> {
    sim.command(seed_plane)
}

/// Seeds accounts and two datasets directly on a plane.
pub fn seed_plane(p: &mut ControlPlane) -> Result<()> {
    p.ensure_user(UserAccount::new(user(ADMIN), Role::Admin, CREDIT))?;
    let mut alice = UserAccount::new(user(ALICE), Role::User, CREDIT);
    alice.teams.insert(VISION.into());
    p.ensure_user(alice)?;
    p.ensure_user(UserAccount::new(user(BOB), Role::User, CREDIT))?;
    p.push_dataset(
        &user(ALICE),
        DatasetPush {
            dataset_id: MNIST.into(),
            size: GIB,
            visibility: Visibility::Public,
            evaluation: Some(Evaluation::named("accuracy")),
            path: None,
        },
    )?;
    p.push_dataset(
        &user(ALICE),
        DatasetPush {
            dataset_id: FACES.into(),
            size: 4 * GIB,
            visibility: Visibility::TeamPrivate(VISION.into()),
            evaluation: Some(Evaluation::named("mse")),
            path: None,
        },
    )?;
    Ok(())
}

/// A simulation with `nodes` identical nodes named `node-1..` and seeded accounts.
pub fn cluster(config: SimConfig, nodes: usize, gpus: u32, memory: u64) -> Result<Simulation> {
    let mut sim = Simulation::new(config)?;
    seed_registry(&mut sim)?;
    for i in 1..=nodes {
        sim.spawn_node(Some(NodeId::new(format!("node-{i}"))), gpus, memory)?;
    }
    Ok(sim)
}
