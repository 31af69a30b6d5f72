//! Identifiers and the bucket version order.

use std::cmp::Ordering;
use std::fmt;

/// A server within one Bizur instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ServerId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClientId(pub u32);

/// Epoch of a Bizur instance. A reconfiguration creates an instance with a
/// strictly higher id than the one it replaces.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InstanceId(pub u64);

/// Election number. At most one server wins any given value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ElectId(pub u64);

impl ElectId {
    pub fn next(self) -> ElectId {
        ElectId(self.0 + 1)
    }
}

impl fmt::Display for ServerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "i{}", self.0)
    }
}

impl fmt::Display for ElectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Version of a bucket: the writing leader's election, then a per-election
/// write counter. Ordered lexicographically.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct BucketVersion {
    pub elect_id: ElectId,
    pub counter: u64,
}

impl BucketVersion {
    pub const fn new(elect_id: u64, counter: u64) -> Self {
        BucketVersion {
            elect_id: ElectId(elect_id),
            counter,
        }
    }
}

pub fn compare_versions(a: BucketVersion, b: BucketVersion) -> Ordering {
    a.elect_id
        .cmp(&b.elect_id)
        .then_with(|| a.counter.cmp(&b.counter))
}

impl Ord for BucketVersion {
    fn cmp(&self, other: &Self) -> Ordering {
        compare_versions(*self, *other)
    }
}

impl PartialOrd for BucketVersion {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for BucketVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.elect_id.0, self.counter)
    }
}
