//! Key-value requests and their effect on a bucket.

use bytes::Bytes;

use crate::bucket::{Bucket, MAX_KEY_LEN, MAX_VALUE_LEN};
use crate::reconfig::InstanceDescriptor;
use crate::types::ServerId;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum KvRequest {
    Get { key: Bytes },
    Set { key: Bytes, value: Bytes },
    Delete { key: Bytes },
    /// `expected == None` matches an absent key.
    CasSet {
        key: Bytes,
        expected: Option<Bytes>,
        value: Bytes,
    },
    CasDelete { key: Bytes, expected: Option<Bytes> },
    IterateKeys,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum KvResponse {
    Value(Bytes),
    Absent,
    Ok,
    CasMismatch(Option<Bytes>),
    Keys(Vec<Bytes>),
    /// `maybe_applied` is set when a mutation reached the replicas before the
    /// leader lost its quorum: the client cannot tell whether it took effect.
    NotALeader {
        hint: Option<ServerId>,
        maybe_applied: bool,
    },
    /// The instance is draining; `successor` is where to retry.
    ReconfigRedirect {
        successor: Option<InstanceDescriptor>,
        maybe_applied: bool,
    },
    Rejected(String),
}

impl KvResponse {
    pub fn is_success(&self) -> bool {
        matches!(
            self,
            KvResponse::Value(_)
                | KvResponse::Absent
                | KvResponse::Ok
                | KvResponse::CasMismatch(_)
                | KvResponse::Keys(_)
        )
    }

    pub fn maybe_applied(&self) -> bool {
        match self {
            KvResponse::NotALeader { maybe_applied, .. }
            | KvResponse::ReconfigRedirect { maybe_applied, .. } => *maybe_applied,
            _ => false,
        }
    }
}

impl KvRequest {
    pub fn key(&self) -> Option<&Bytes> {
        match self {
            KvRequest::Get { key }
            | KvRequest::Set { key, .. }
            | KvRequest::Delete { key }
            | KvRequest::CasSet { key, .. }
            | KvRequest::CasDelete { key, .. } => Some(key),
            KvRequest::IterateKeys => None,
        }
    }

    pub fn is_mutation(&self) -> bool {
        !matches!(self, KvRequest::Get { .. } | KvRequest::IterateKeys)
    }

    pub fn validate(&self) -> Result<(), String> {
        if let Some(key) = self.key() {
            if key.len() > MAX_KEY_LEN {
                return Err(format!("key of {} bytes exceeds 4 KiB", key.len()));
            }
        }
        let value = match self {
            KvRequest::Set { value, .. } | KvRequest::CasSet { value, .. } => Some(value),
            _ => None,
        };
        match value {
            Some(v) if v.len() > MAX_VALUE_LEN => {
                Err(format!("value of {} bytes exceeds 64 KiB", v.len()))
            }
            _ => Ok(()),
        }
    }
}

/// Applies a single-key request to the bucket owning its key. Returns the
/// response and whether the bucket changed.
///
/// Panics on `IterateKeys`, which is not a single-bucket operation.
pub fn apply(bucket: &mut Bucket, request: &KvRequest) -> (KvResponse, bool) {
    let current = |b: &Bucket, key: &Bytes| b.decode(key).cloned();
    match request {
        KvRequest::Get { key } => match bucket.decode(key) {
            Some(v) => (KvResponse::Value(v.clone()), false),
            None => (KvResponse::Absent, false),
        },
        KvRequest::Set { key, value } => {
            bucket.encode_set(key.clone(), value.clone());
            (KvResponse::Ok, true)
        }
        KvRequest::Delete { key } => {
            let present = bucket.decode(key).is_some();
            bucket.encode_delete(key);
            (KvResponse::Ok, present)
        }
        KvRequest::CasSet {
            key,
            expected,
            value,
        } => {
            let actual = current(bucket, key);
            if actual == *expected {
                bucket.encode_set(key.clone(), value.clone());
                (KvResponse::Ok, true)
            } else {
                (KvResponse::CasMismatch(actual), false)
            }
        }
        KvRequest::CasDelete { key, expected } => {
            let actual = current(bucket, key);
            if actual == *expected {
                let present = actual.is_some();
                bucket.encode_delete(key);
                (KvResponse::Ok, present)
            } else {
                (KvResponse::CasMismatch(actual), false)
            }
        }
        KvRequest::IterateKeys => panic!("IterateKeys spans buckets"),
    }
}
