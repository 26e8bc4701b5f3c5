use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::clock::Millis;
use crate::error::{Error, Result};
use crate::ids::{DatasetId, ImageId, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Liveness {
    Alive,
    Dead,
}

/// A compute node as the scheduler accounts for it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeDescriptor {
    pub node_id: NodeId,
    pub total_gpus: u32,
    pub available_gpus: u32,
    pub total_memory: u64,
    pub available_memory: u64,
    pub cached_datasets: BTreeSet<DatasetId>,
    pub cached_images: BTreeSet<ImageId>,
    pub liveness: Liveness,
    pub last_heartbeat: Millis,
}

impl NodeDescriptor {
    pub fn new(node_id: NodeId, total_gpus: u32, total_memory: u64, now: Millis) -> Self {
        Self {
            node_id,
            total_gpus,
            available_gpus: total_gpus,
            total_memory,
            available_memory: total_memory,
            cached_datasets: BTreeSet::new(),
            cached_images: BTreeSet::new(),
            liveness: Liveness::Alive,
            last_heartbeat: now,
        }
    }

    pub fn is_alive(&self) -> bool {
        self.liveness == Liveness::Alive
    }

    pub fn fits_now(&self, request: &ResourceRequest) -> bool {
        self.available_gpus >= request.gpus && self.available_memory >= request.memory
    }

    /// Whether the node could ever host the request, ignoring current load.
    pub fn fits_when_empty(&self, request: &ResourceRequest) -> bool {
        self.total_gpus >= request.gpus && self.total_memory >= request.memory
    }

    /// 2 for a cached dataset plus 1 for a cached image.
    pub fn locality_score(&self, request: &ResourceRequest) -> u8 {
        2 * u8::from(self.cached_datasets.contains(&request.dataset_id))
            + u8::from(self.cached_images.contains(&request.image_id))
    }

    pub fn validate(&self) -> Result<()> {
        if self.available_gpus > self.total_gpus {
            return Err(Error::Invariant(format!(
                "node {}: {} GPUs available of {}",
                self.node_id, self.available_gpus, self.total_gpus
            )));
        }
        if self.available_memory > self.total_memory {
            return Err(Error::Invariant(format!(
                "node {}: {} bytes available of {}",
                self.node_id, self.available_memory, self.total_memory
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceRequest {
    pub gpus: u32,
    pub memory: u64,
    pub dataset_id: DatasetId,
    pub image_id: ImageId,
}

impl ResourceRequest {
    pub fn validate(&self) -> Result<()> {
        if self.memory == 0 {
            return Err(Error::invalid("memory request must be positive"));
        }
        Ok(())
    }
}
