//! Quorum tally for one broadcast request.

use std::collections::BTreeSet;

use crate::bucket::Bucket;
use crate::types::ServerId;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Pending,
    Succeeded,
    Failed,
}

/// Counts acks and nacks from distinct members. Decides once: success at a
/// majority of acks, failure as soon as a majority can no longer be reached.
#[derive(Clone, Debug)]
pub struct QuorumTally {
    members: usize,
    responded: BTreeSet<ServerId>,
    acks: usize,
    nacks: usize,
    /// Buckets carried by acks, in arrival order.
    pub buckets: Vec<Bucket>,
    decided: bool,
}

pub fn majority(members: usize) -> usize {
    members / 2 + 1
}

impl QuorumTally {
    pub fn new(members: usize) -> Self {
        QuorumTally {
            members,
            responded: BTreeSet::new(),
            acks: 0,
            nacks: 0,
            buckets: Vec::new(),
            decided: false,
        }
    }

    pub fn has_responded(&self, from: ServerId) -> bool {
        self.responded.contains(&from)
    }

    pub fn acks(&self) -> usize {
        self.acks
    }

    pub fn nacks(&self) -> usize {
        self.nacks
    }

    /// Records a response. Duplicates and anything after the decision are
    /// ignored; the decision is reported exactly once.
    pub fn record(&mut self, from: ServerId, ack: bool, bucket: Option<Bucket>) -> Decision {
        if self.decided || !self.responded.insert(from) {
            return Decision::Pending;
        }
        if ack {
            self.acks += 1;
            if let Some(b) = bucket {
                self.buckets.push(b);
            }
        } else {
            self.nacks += 1;
        }
        if self.acks >= majority(self.members) {
            self.decided = true;
            Decision::Succeeded
        } else if self.nacks > self.members - majority(self.members) {
            self.decided = true;
            Decision::Failed
        } else {
            Decision::Pending
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn majority_of_three() {
        let mut t = QuorumTally::new(3);
        assert_eq!(t.record(ServerId(0), true, None), Decision::Pending);
        assert_eq!(t.record(ServerId(0), true, None), Decision::Pending);
        assert_eq!(t.acks(), 1);
        assert_eq!(t.record(ServerId(1), true, None), Decision::Succeeded);
        assert_eq!(t.record(ServerId(2), false, None), Decision::Pending);
        assert_eq!(t.nacks(), 0);
    }

    #[test]
    fn early_failure_at_half_rounded_up() {
        for n in 1..=7usize {
            let mut t = QuorumTally::new(n);
            let fail_at = n.div_ceil(2);
            for i in 0..fail_at {
                let d = t.record(ServerId(i as u32), false, None);
                if i + 1 == fail_at {
                    assert_eq!(d, Decision::Failed, "n={n}");
                } else {
                    assert_eq!(d, Decision::Pending, "n={n}");
                }
            }
        }
    }

    #[test]
    fn one_ack_two_nacks_fails() {
        let mut t = QuorumTally::new(3);
        t.record(ServerId(0), true, None);
        assert_eq!(t.record(ServerId(1), false, None), Decision::Pending);
        assert_eq!(t.record(ServerId(2), false, None), Decision::Failed);
    }
}
