//! Persistence hook for the crash-recover flavor.
//!
//! A node with a store saves its vote and every bucket it accepts before it
//! acknowledges them. A restarted node rebuilds from the store; without one it
//! would come back with no memory of its votes and could vote twice in the
//! same election.

use std::collections::BTreeMap;

use crate::bucket::Bucket;
use crate::types::{ElectId, ServerId};

pub trait Store: Send {
    fn save_vote(&mut self, voted_elect_id: ElectId, leader: Option<ServerId>);
    fn save_bucket(&mut self, bucket: &Bucket);
    fn load(&self) -> Persisted;
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Persisted {
    pub voted_elect_id: ElectId,
    pub leader: Option<ServerId>,
    pub buckets: BTreeMap<u32, Bucket>,
}

/// In-memory store that outlives the node it belongs to. The simulator keeps
/// it across a crash-recover cycle.
#[derive(Clone, Debug, Default)]
pub struct MemStore {
    state: Persisted,
    pub writes: u64,
}

impl Store for MemStore {
    fn save_vote(&mut self, voted_elect_id: ElectId, leader: Option<ServerId>) {
        self.state.voted_elect_id = voted_elect_id;
        self.state.leader = leader;
        self.writes += 1;
    }

    fn save_bucket(&mut self, bucket: &Bucket) {
        self.state.buckets.insert(bucket.index, bucket.clone());
        self.writes += 1;
    }

    fn load(&self) -> Persisted {
        self.state.clone()
    }
}
