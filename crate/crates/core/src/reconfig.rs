//! Membership change through a second instance, and the static shard map.
//!
//! A reconfiguration of one instance (old) to a new member set runs as:
//!
//! 1. spawn the new instance with every bucket flagged `needs_copy`;
//! 2. switch old to draining, so every client request there is redirected;
//! 3. publish the new descriptor to clients;
//! 4. wait until the new leader has copied every bucket, then mark it normal;
//! 5. retire old after a quiescence grace period.
//!
//! The new instance copies lazily: the first access to a flagged bucket reads
//! it from old, clears the flag and writes it to new. A background sweep does
//! the same for untouched buckets. [`ReconfigController`] sequences the steps;
//! the per-bucket copy lives in the node.

use std::collections::BTreeMap;

use bytes::{Buf, BufMut, Bytes, BytesMut};
use thiserror::Error;

use crate::hash::{hash_key, hash_key_seeded};
use crate::time::SimTime;
use crate::types::{InstanceId, ServerId};

/// Fixed number of logical shards.
pub const NUM_SHARDS: u32 = 256;
const SHARD_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InstanceMode {
    Normal,
    /// Buckets still carry `needs_copy` and are pulled from `from` on access.
    Reconfig { from: InstanceId },
    /// Rejects every client request with a redirect.
    Draining,
    Retired,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceDescriptor {
    /// Epoch: a successor always has a higher id.
    pub instance_id: InstanceId,
    pub members: Vec<ServerId>,
    pub mode: InstanceMode,
}

impl InstanceDescriptor {
    pub fn new(instance_id: InstanceId, members: Vec<ServerId>) -> Self {
        InstanceDescriptor {
            instance_id,
            members,
            mode: InstanceMode::Normal,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReconfigError {
    #[error("shard {0} is already being reconfigured")]
    InProgress(u16),
    #[error("instance {0} is not in normal mode")]
    NotNormal(InstanceId),
    #[error("new membership is empty")]
    EmptyMembership,
    #[error("descriptor publication is malformed")]
    MalformedPublication,
}

/// Descriptor publication: `epoch u64 | shard u16 | count u16 | count × server u32`,
/// little-endian.
pub fn encode_publication(shard: u16, descriptor: &InstanceDescriptor) -> Bytes {
    let mut out = BytesMut::with_capacity(12 + 4 * descriptor.members.len());
    out.put_u64_le(descriptor.instance_id.0);
    out.put_u16_le(shard);
    out.put_u16_le(descriptor.members.len() as u16);
    for m in &descriptor.members {
        out.put_u32_le(m.0);
    }
    out.freeze()
}

pub fn decode_publication(mut buf: &[u8]) -> Result<(u16, InstanceDescriptor), ReconfigError> {
    if buf.len() < 12 {
        return Err(ReconfigError::MalformedPublication);
    }
    let epoch = buf.get_u64_le();
    let shard = buf.get_u16_le();
    let count = buf.get_u16_le() as usize;
    if buf.len() != 4 * count {
        return Err(ReconfigError::MalformedPublication);
    }
    let members = (0..count).map(|_| ServerId(buf.get_u32_le())).collect();
    Ok((shard, InstanceDescriptor::new(InstanceId(epoch), members)))
}

/// Maps each of the 256 logical shards to the instance serving it.
///
/// Several shards may share an instance. Within an instance a key lives in
/// bucket `hash_key(key, buckets_per_instance)`; the shard hash is seeded
/// differently so the two levels are independent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShardMap {
    slots: Vec<InstanceId>,
    instances: BTreeMap<InstanceId, InstanceDescriptor>,
    buckets_per_instance: u32,
}

pub fn shard_of(key: &[u8]) -> u16 {
    hash_key_seeded(key, NUM_SHARDS, SHARD_SEED) as u16
}

impl ShardMap {
    /// Every shard served by the single instance `descriptor`.
    pub fn single(descriptor: InstanceDescriptor, buckets_per_instance: u32) -> Self {
        Self::round_robin(vec![descriptor], buckets_per_instance)
    }

    /// Shard `s` is served by `descriptors[s % len]`.
    pub fn round_robin(descriptors: Vec<InstanceDescriptor>, buckets_per_instance: u32) -> Self {
        assert!(!descriptors.is_empty());
        let slots = (0..NUM_SHARDS as usize)
            .map(|s| descriptors[s % descriptors.len()].instance_id)
            .collect();
        ShardMap {
            slots,
            instances: descriptors.into_iter().map(|d| (d.instance_id, d)).collect(),
            buckets_per_instance,
        }
    }

    pub fn buckets_per_instance(&self) -> u32 {
        self.buckets_per_instance
    }

    /// `(shard, bucket index within the instance, descriptor)`.
    pub fn route(&self, key: &[u8]) -> (u16, &InstanceDescriptor, u32) {
        let shard = shard_of(key);
        (
            shard,
            self.descriptor_for_shard(shard),
            hash_key(key, self.buckets_per_instance),
        )
    }

    pub fn descriptor_for_shard(&self, shard: u16) -> &InstanceDescriptor {
        &self.instances[&self.slots[shard as usize]]
    }

    pub fn instance(&self, id: InstanceId) -> Option<&InstanceDescriptor> {
        self.instances.get(&id)
    }

    pub fn instances(&self) -> impl Iterator<Item = &InstanceDescriptor> {
        self.instances.values()
    }

    pub fn shards_of(&self, id: InstanceId) -> Vec<u16> {
        (0..NUM_SHARDS as u16)
            .filter(|s| self.slots[*s as usize] == id)
            .collect()
    }

    /// Records a mode change of a known instance.
    pub fn set_mode(&mut self, id: InstanceId, mode: InstanceMode) {
        if let Some(d) = self.instances.get_mut(&id) {
            d.mode = mode;
        }
    }

    /// Points `shard` at `descriptor` if its epoch is newer than the current
    /// one. Returns whether anything changed.
    pub fn update(&mut self, shard: u16, descriptor: InstanceDescriptor) -> bool {
        let current = self.slots[shard as usize];
        if descriptor.instance_id <= current {
            if descriptor.instance_id == current {
                self.instances.insert(descriptor.instance_id, descriptor);
            }
            return false;
        }
        self.slots[shard as usize] = descriptor.instance_id;
        self.instances.insert(descriptor.instance_id, descriptor);
        true
    }

    /// Spreads shards over groups of `replication` servers taken in order from
    /// `servers`, shard `s` to group `s % groups`. Returns the shards whose
    /// target membership differs from their current one.
    pub fn plan_expansion(&self, servers: &[ServerId], replication: usize) -> Vec<(u16, Vec<ServerId>)> {
        let groups: Vec<Vec<ServerId>> = servers
            .chunks(replication)
            .filter(|g| g.len() == replication)
            .map(|g| g.to_vec())
            .collect();
        assert!(!groups.is_empty(), "not enough servers for one group");
        (0..NUM_SHARDS as u16)
            .filter_map(|s| {
                let target = &groups[s as usize % groups.len()];
                let mut current = self.descriptor_for_shard(s).members.clone();
                let mut t = target.clone();
                current.sort();
                t.sort();
                (current != t).then(|| (s, target.clone()))
            })
            .collect()
    }
}

/// What the controller asks its driver to do.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ControlAction {
    SpawnInstance(InstanceDescriptor),
    SetDraining {
        instance: InstanceId,
        successor: InstanceDescriptor,
    },
    Publish {
        shard: u16,
        descriptor: InstanceDescriptor,
    },
    TriggerElection {
        instance: InstanceId,
        server: ServerId,
    },
    SetNormal(InstanceId),
    Retire(InstanceId),
    WakeAt(SimTime),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Copying,
    Grace { until: SimTime },
    Done,
}

/// Sequences one reconfiguration. Nothing here talks to the network; the
/// driver executes the returned actions in order.
#[derive(Clone, Debug)]
pub struct ReconfigController {
    old: InstanceDescriptor,
    new: InstanceDescriptor,
    shards: Vec<u16>,
    phase: Phase,
    detection_timeout: SimTime,
    kick_interval: SimTime,
    kicks: usize,
}

impl ReconfigController {
    /// Validates the request and returns the controller plus the actions for
    /// steps one to three.
    pub fn start(
        map: &ShardMap,
        old: InstanceId,
        new_id: InstanceId,
        new_members: Vec<ServerId>,
        now: SimTime,
        detection_timeout: SimTime,
    ) -> Result<(Self, Vec<ControlAction>), ReconfigError> {
        let old_desc = map
            .instance(old)
            .cloned()
            .ok_or(ReconfigError::NotNormal(old))?;
        if old_desc.mode != InstanceMode::Normal {
            return Err(ReconfigError::NotNormal(old));
        }
        if new_members.is_empty() {
            return Err(ReconfigError::EmptyMembership);
        }
        assert!(new_id > old, "successor epoch must increase");
        let new = InstanceDescriptor {
            instance_id: new_id,
            members: new_members,
            mode: InstanceMode::Reconfig { from: old },
        };
        let shards = map.shards_of(old);
        let mut actions = vec![
            ControlAction::SpawnInstance(new.clone()),
            ControlAction::SetDraining {
                instance: old,
                successor: new.clone(),
            },
        ];
        actions.extend(shards.iter().map(|s| ControlAction::Publish {
            shard: *s,
            descriptor: new.clone(),
        }));
        let ctl = ReconfigController {
            old: old_desc,
            new,
            shards,
            phase: Phase::Copying,
            detection_timeout,
            kick_interval: SimTime::from_millis(500),
            kicks: 0,
        };
        actions.push(ctl.kick());
        actions.push(ControlAction::WakeAt(now + ctl.kick_interval));
        Ok((ctl, actions))
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn old(&self) -> &InstanceDescriptor {
        &self.old
    }

    pub fn new_instance(&self) -> &InstanceDescriptor {
        &self.new
    }

    pub fn shards(&self) -> &[u16] {
        &self.shards
    }

    fn kick(&self) -> ControlAction {
        let m = &self.new.members;
        ControlAction::TriggerElection {
            instance: self.new.instance_id,
            server: m[self.kicks % m.len()],
        }
    }

    /// The new instance's leader reports that every bucket has been copied.
    pub fn on_copy_complete(&mut self, now: SimTime) -> Vec<ControlAction> {
        if self.phase != Phase::Copying {
            return Vec::new();
        }
        let until = now + SimTime(2 * self.detection_timeout.0);
        self.phase = Phase::Grace { until };
        self.new.mode = InstanceMode::Normal;
        vec![
            ControlAction::SetNormal(self.new.instance_id),
            ControlAction::WakeAt(until),
        ]
    }

    pub fn on_wake(&mut self, now: SimTime) -> Vec<ControlAction> {
        match self.phase {
            Phase::Copying => {
                // No completion yet: the new instance may have no leader.
                self.kicks += 1;
                vec![self.kick(), ControlAction::WakeAt(now + self.kick_interval)]
            }
            Phase::Grace { until } if now >= until => {
                self.phase = Phase::Done;
                self.old.mode = InstanceMode::Retired;
                vec![ControlAction::Retire(self.old.instance_id)]
            }
            _ => Vec::new(),
        }
    }
}
