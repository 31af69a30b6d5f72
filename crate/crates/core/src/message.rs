//! Envelopes exchanged between servers, clients and the reconfiguration
//! controller.

use std::fmt;

use crate::bucket::Bucket;
use crate::kv::{KvRequest, KvResponse};
use crate::reconfig::InstanceDescriptor;
use crate::types::{ClientId, ElectId, InstanceId, ServerId};

/// Correlation id. Responses carry the id of the request they answer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MsgId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Endpoint {
    Server { server: ServerId, instance: InstanceId },
    Client(ClientId),
    Controller,
}

impl Endpoint {
    pub fn server(self) -> Option<ServerId> {
        match self {
            Endpoint::Server { server, .. } => Some(server),
            _ => None,
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Server { server, instance } => write!(f, "{server}/{instance}"),
            Endpoint::Client(c) => write!(f, "{c}"),
            Endpoint::Controller => f.write_str("ctl"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Envelope {
    pub msg_id: MsgId,
    pub from: Endpoint,
    pub to: Endpoint,
    pub payload: Payload,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CopyOutcome {
    Bucket(Bucket),
    NotALeader { hint: Option<ServerId> },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Payload {
    PleaseVote { elect_id: ElectId },
    AckVote,
    NackVote,
    ReplicaWrite { bucket: Bucket },
    AckWrite,
    NackWrite,
    /// With `with_data == false` the request only checks that the sender is
    /// still the leader and the ack carries no bucket.
    ReplicaRead {
        index: u32,
        elect_id: ElectId,
        with_data: bool,
    },
    /// Leadership check covering buckets `first..first + count`.
    ReplicaValidate {
        elect_id: ElectId,
        first: u32,
        count: u32,
    },
    AckRead { bucket: Option<Bucket> },
    NackRead,
    ClientRequest(KvRequest),
    ClientResponse(KvResponse),
    TriggerElection,
    ElectionResult { won: bool },
    /// Internal read of one bucket from the previous instance during a
    /// reconfiguration. Served even while that instance is draining.
    CopyRead { index: u32 },
    CopyReply(CopyOutcome),
    DescriptorUpdate { shard: u16, descriptor: InstanceDescriptor },
}

impl Payload {
    pub fn tag(&self) -> &'static str {
        match self {
            Payload::PleaseVote { .. } => "PleaseVote",
            Payload::AckVote => "AckVote",
            Payload::NackVote => "NackVote",
            Payload::ReplicaWrite { .. } => "ReplicaWrite",
            Payload::AckWrite => "AckWrite",
            Payload::NackWrite => "NackWrite",
            Payload::ReplicaRead { with_data: true, .. } => "ReplicaRead",
            Payload::ReplicaRead { with_data: false, .. } => "ReplicaReadCheck",
            Payload::ReplicaValidate { .. } => "ReplicaValidate",
            Payload::AckRead { bucket: Some(_) } => "AckRead",
            Payload::AckRead { bucket: None } => "AckReadEmpty",
            Payload::NackRead => "NackRead",
            Payload::ClientRequest(_) => "ClientRequest",
            Payload::ClientResponse(_) => "ClientResponse",
            Payload::TriggerElection => "TriggerElection",
            Payload::ElectionResult { .. } => "ElectionResult",
            Payload::CopyRead { .. } => "CopyRead",
            Payload::CopyReply(_) => "CopyReply",
            Payload::DescriptorUpdate { .. } => "DescriptorUpdate",
        }
    }

    /// Bucket index a replication request concerns, if any.
    pub fn bucket_index(&self) -> Option<u32> {
        match self {
            Payload::ReplicaWrite { bucket } => Some(bucket.index),
            Payload::ReplicaRead { index, .. } => Some(*index),
            Payload::CopyRead { index } => Some(*index),
            _ => None,
        }
    }

    /// Server-to-server requests that open a quorum round.
    pub fn is_quorum_request(&self) -> bool {
        matches!(
            self,
            Payload::PleaseVote { .. }
                | Payload::ReplicaWrite { .. }
                | Payload::ReplicaRead { .. }
                | Payload::ReplicaValidate { .. }
        )
    }

    /// Whether a bucket travels in this message.
    pub fn carries_bucket(&self) -> bool {
        matches!(
            self,
            Payload::ReplicaWrite { .. }
                | Payload::AckRead { bucket: Some(_) }
                | Payload::CopyReply(CopyOutcome::Bucket(_))
        )
    }
}
