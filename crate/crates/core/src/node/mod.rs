//! The per-server Bizur state machine.
//!
//! A [`Node`] is one server's replica of one instance. It is driven by three
//! kinds of input, each followed by draining [`Node::drain_outputs`]:
//! delivered envelopes ([`Node::handle`]), timer expirations
//! ([`Node::on_timer`]), and control-plane calls (elections, mode changes).
//!
//! Leader-side work is organised as jobs. Each job holds the exclusive lock of
//! the buckets it touches, so operations on one bucket are serialized while
//! operations on different buckets interleave freely. A job on a bucket that
//! has not been written in the current election first recovers it: read a
//! majority, keep the highest version, restamp it for this election and write
//! it back. The write-back is merged with the job's own mutation, so the first
//! access after an election costs one read round and one write round.

mod job;
mod round;
mod store;

use std::collections::{BTreeMap, VecDeque};

use crate::bucket::Bucket;
use crate::client::Router;
use crate::kv::KvResponse;
use crate::message::{CopyOutcome, Endpoint, Envelope, MsgId, Payload};
use crate::reconfig::InstanceDescriptor;
use crate::time::SimTime;
use crate::types::{ClientId, ElectId, InstanceId, ServerId};

pub use round::{majority, Decision, QuorumTally};
pub use store::{MemStore, Persisted, Store};

use job::{Job, JobId};

#[derive(Clone, Debug)]
pub struct NodeConfig {
    pub num_buckets: u32,
    /// Missing responses count as nacks after this long.
    pub quorum_timeout: SimTime,
    /// Unanswered members are re-sent the request at this interval.
    pub retransmit_interval: SimTime,
    /// Per-attempt timeout when reading from a previous instance.
    pub detection_timeout: SimTime,
    /// Token period for elections this node triggers in a previous instance.
    pub election_period: SimTime,
    /// Recover every bucket in the background after winning an election.
    pub background_recovery: bool,
    pub sweep_interval: SimTime,
    /// Buckets per leadership check in IterateKeys; 0 means all of them.
    pub iterate_batch: u32,
    /// Persist votes and buckets before acknowledging them.
    pub persist: bool,
    /// Report chaos points so the driver can perturb the schedule there.
    pub chaos_points: bool,
    /// Deliberately broken variant for checker self-tests: recovery uses the
    /// chosen bucket without writing it back anywhere.
    pub skip_recovery_writeback: bool,
}

impl Default for NodeConfig {
    fn default() -> Self {
        NodeConfig {
            num_buckets: 64,
            quorum_timeout: SimTime::from_millis(100),
            retransmit_interval: SimTime::from_millis(10),
            detection_timeout: SimTime::from_millis(100),
            election_period: SimTime::from_millis(500),
            background_recovery: true,
            sweep_interval: SimTime::from_millis(1),
            iterate_batch: 0,
            persist: false,
            chaos_points: false,
            skip_recovery_writeback: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NodeMode {
    Normal,
    /// New instance of a reconfiguration, copying from `old`.
    Reconfig { old: InstanceDescriptor },
    /// Old instance of a reconfiguration: clients are sent to `successor`.
    Draining { successor: InstanceDescriptor },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ChaosPoint {
    /// After a recovery read picked its bucket, before writing it back.
    BeforeRecoveryWriteBack,
    /// Before a steady-state write is sent.
    BeforeWrite,
}

impl ChaosPoint {
    pub fn name(self) -> &'static str {
        match self {
            ChaosPoint::BeforeRecoveryWriteBack => "recovery.before_writeback",
            ChaosPoint::BeforeWrite => "write.before_send",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Timer {
    Retransmit(MsgId),
    RoundTimeout(MsgId),
    Sweep { elect_id: ElectId },
    FetchRetransmit { fetch: u64, msg: MsgId },
    FetchTimeout { fetch: u64, msg: MsgId },
    FetchResume { fetch: u64 },
    ChaosResume(u64),
}

#[derive(Clone, Debug)]
pub enum Output {
    Send(Envelope),
    SetTimer { after: SimTime, timer: Timer },
    /// This node set `is_leader` for `elect_id`.
    BecameLeader { elect_id: ElectId },
    /// Execution reached a chaos point; continue with [`Node::resume_chaos`].
    ChaosPoint { point: ChaosPoint, token: u64 },
    /// Every bucket of this reconfiguring instance has been copied.
    CopyComplete { elect_id: ElectId },
}

/// Counters for tests and metrics.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NodeStats {
    pub elections_started: u64,
    pub elections_won: u64,
    pub recovery_reads: u64,
    pub writes: u64,
    pub checks: u64,
    pub batch_checks: u64,
    pub copies: u64,
    pub client_jobs: u64,
    /// Client jobs accepted or client writes started while draining. Stays 0.
    pub client_work_while_draining: u64,
    pub redirects: u64,
}

#[derive(Clone, Copy, Debug)]
enum Purpose {
    Election,
    Job(JobId),
}

#[derive(Clone, Debug)]
struct Round {
    tally: QuorumTally,
    request: Payload,
    purpose: Purpose,
}

#[derive(Clone, Debug)]
struct PendingElection {
    msg: MsgId,
    elect_id: ElectId,
    waiters: Vec<(Endpoint, MsgId)>,
}

#[derive(Clone, Debug)]
struct ClientSlot {
    msg: MsgId,
    response: Option<KvResponse>,
}

#[derive(Clone, Debug)]
struct Sweep {
    elect_id: ElectId,
    cursor: u32,
}

#[derive(Clone, Debug)]
struct OldLink {
    instance: InstanceId,
    router: Router,
}

#[derive(Clone, Debug)]
struct Fetch {
    job: JobId,
    index: u32,
    /// Server, correlation id, and whether it is an election trigger.
    attempt: Option<(ServerId, MsgId, bool)>,
}

enum Work {
    Run(JobId),
    RoundDone {
        purpose: Purpose,
        msg: MsgId,
        ok: bool,
        buckets: Vec<Bucket>,
    },
}

#[derive(Clone, Debug, Default)]
struct BucketLock {
    holder: Option<JobId>,
    waiters: VecDeque<JobId>,
}

pub struct Node {
    config: NodeConfig,
    id: ServerId,
    instance: InstanceId,
    members: Vec<ServerId>,
    incarnation: u64,

    elect_id: ElectId,
    voted_elect_id: ElectId,
    leader: Option<ServerId>,
    is_leader: bool,
    /// Last time a request from `leader` was accepted.
    leader_heard_at: Option<SimTime>,
    local: Vec<Bucket>,
    store: Option<Box<dyn Store>>,
    mode: NodeMode,

    next_msg: u64,
    rounds: BTreeMap<MsgId, Round>,
    election: Option<PendingElection>,

    jobs: BTreeMap<JobId, Job>,
    next_job: u64,
    locks: Vec<BucketLock>,
    work: VecDeque<Work>,
    clients: BTreeMap<ClientId, ClientSlot>,
    sweep: Option<Sweep>,
    old_link: Option<OldLink>,
    fetches: BTreeMap<u64, Fetch>,
    next_fetch: u64,
    chaos_waiting: BTreeMap<u64, JobId>,
    next_chaos: u64,
    copy_reported: Option<ElectId>,

    stats: NodeStats,
    outbox: Vec<Output>,
}

impl std::fmt::Debug for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Node")
            .field("id", &self.id)
            .field("instance", &self.instance)
            .field("elect_id", &self.elect_id)
            .field("voted_elect_id", &self.voted_elect_id)
            .field("leader", &self.leader)
            .field("is_leader", &self.is_leader)
            .finish_non_exhaustive()
    }
}

impl Node {
    pub fn new(
        config: NodeConfig,
        id: ServerId,
        instance: InstanceId,
        members: Vec<ServerId>,
        mode: NodeMode,
    ) -> Self {
        let store: Option<Box<dyn Store>> = config
            .persist
            .then(|| Box::new(MemStore::default()) as Box<dyn Store>);
        let needs_copy = matches!(mode, NodeMode::Reconfig { .. });
        let local = (0..config.num_buckets)
            .map(|i| {
                let mut b = Bucket::empty(i);
                b.needs_copy = needs_copy;
                b
            })
            .collect();
        Self::assemble(config, id, instance, members, mode, local, store, 0)
    }

    /// Rebuilds a node after a crash from what it persisted. Volatile state
    /// (leadership, pending rounds, jobs) starts empty.
    pub fn restore(
        config: NodeConfig,
        id: ServerId,
        instance: InstanceId,
        members: Vec<ServerId>,
        mode: NodeMode,
        store: Box<dyn Store>,
        incarnation: u64,
    ) -> Self {
        let persisted = store.load();
        let needs_copy = matches!(mode, NodeMode::Reconfig { .. });
        let local = (0..config.num_buckets)
            .map(|i| {
                persisted.buckets.get(&i).cloned().unwrap_or_else(|| {
                    let mut b = Bucket::empty(i);
                    b.needs_copy = needs_copy;
                    b
                })
            })
            .collect();
        let mut node = Self::assemble(config, id, instance, members, mode, local, Some(store), incarnation);
        node.voted_elect_id = persisted.voted_elect_id;
        node.leader = persisted.leader;
        node
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: NodeConfig,
        id: ServerId,
        instance: InstanceId,
        members: Vec<ServerId>,
        mode: NodeMode,
        local: Vec<Bucket>,
        store: Option<Box<dyn Store>>,
        incarnation: u64,
    ) -> Self {
        assert!(members.contains(&id), "{id} is not a member of {instance}");
        let old_link = match &mode {
            NodeMode::Reconfig { old } => Some(OldLink {
                instance: old.instance_id,
                router: Router::new(old.members.clone(), config.election_period),
            }),
            _ => None,
        };
        let locks = vec![BucketLock::default(); config.num_buckets as usize];
        Node {
            id,
            instance,
            members,
            incarnation,
            elect_id: ElectId(0),
            voted_elect_id: ElectId(0),
            leader: None,
            is_leader: false,
            leader_heard_at: None,
            local,
            store,
            mode,
            next_msg: 0,
            rounds: BTreeMap::new(),
            election: None,
            jobs: BTreeMap::new(),
            next_job: 0,
            locks,
            work: VecDeque::new(),
            clients: BTreeMap::new(),
            sweep: None,
            old_link,
            fetches: BTreeMap::new(),
            next_fetch: 0,
            chaos_waiting: BTreeMap::new(),
            next_chaos: 0,
            copy_reported: None,
            stats: NodeStats::default(),
            outbox: Vec::new(),
            config,
        }
    }

    /// Hands back the persistent store, consuming the node (crash).
    pub fn into_store(self) -> Option<Box<dyn Store>> {
        self.store
    }

    pub fn id(&self) -> ServerId {
        self.id
    }

    pub fn instance(&self) -> InstanceId {
        self.instance
    }

    pub fn members(&self) -> &[ServerId] {
        &self.members
    }

    pub fn elect_id(&self) -> ElectId {
        self.elect_id
    }

    pub fn voted_elect_id(&self) -> ElectId {
        self.voted_elect_id
    }

    pub fn leader(&self) -> Option<ServerId> {
        self.leader
    }

    pub fn is_leader(&self) -> bool {
        self.is_leader
    }

    pub fn mode(&self) -> &NodeMode {
        &self.mode
    }

    pub fn stats(&self) -> &NodeStats {
        &self.stats
    }

    pub fn config(&self) -> &NodeConfig {
        &self.config
    }

    pub fn local_bucket(&self, index: u32) -> &Bucket {
        &self.local[index as usize]
    }

    pub fn local_buckets(&self) -> &[Bucket] {
        &self.local
    }

    /// Whether the bucket has been written in the current election.
    pub fn is_recovered(&self, index: u32) -> bool {
        self.local[index as usize].ver.elect_id == self.elect_id
    }

    pub fn needs_copy_count(&self) -> usize {
        self.local.iter().filter(|b| b.needs_copy).count()
    }

    pub fn has_pending_work(&self) -> bool {
        !self.jobs.is_empty() || !self.rounds.is_empty()
    }

    pub fn drain_outputs(&mut self) -> Vec<Output> {
        std::mem::take(&mut self.outbox)
    }

    fn endpoint(&self) -> Endpoint {
        Endpoint::Server {
            server: self.id,
            instance: self.instance,
        }
    }

    fn peer(&self, server: ServerId) -> Endpoint {
        Endpoint::Server {
            server,
            instance: self.instance,
        }
    }

    fn fresh_msg(&mut self) -> MsgId {
        self.next_msg += 1;
        MsgId((self.incarnation << 40) | self.next_msg)
    }

    fn send(&mut self, msg_id: MsgId, to: Endpoint, payload: Payload) {
        self.outbox.push(Output::Send(Envelope {
            msg_id,
            from: self.endpoint(),
            to,
            payload,
        }));
    }

    fn timer(&mut self, after: SimTime, timer: Timer) {
        self.outbox.push(Output::SetTimer { after, timer });
    }

    fn hint(&self) -> Option<ServerId> {
        self.leader.filter(|l| *l != self.id)
    }

    // ---------------------------------------------------------------------
    // Replica side

    fn persist_vote(&mut self) {
        if let Some(s) = self.store.as_mut() {
            s.save_vote(self.voted_elect_id, self.leader);
        }
    }

    /// Records that `source` leads election `elect_id`. Never moves the vote
    /// backwards; drops our own leadership if a newer election exists.
    fn adopt_vote(&mut self, elect_id: ElectId, source: ServerId) {
        debug_assert!(elect_id >= self.voted_elect_id);
        if elect_id != self.voted_elect_id || self.leader != Some(source) {
            self.voted_elect_id = elect_id;
            self.leader = Some(source);
            self.persist_vote();
        }
        if self.is_leader && self.voted_elect_id > self.elect_id {
            self.is_leader = false;
        }
    }

    /// Vote request. Returns whether the vote was granted.
    pub fn handle_please_vote(&mut self, elect_id: ElectId, source: ServerId) -> bool {
        if elect_id > self.voted_elect_id {
            self.adopt_vote(elect_id, source);
            true
        } else {
            elect_id == self.voted_elect_id && self.leader == Some(source)
        }
    }

    /// Write request. A bucket older than the local copy at an acceptable
    /// election is a delayed duplicate from the same leader: it is acked but
    /// not stored, so a replica never moves a bucket backwards.
    pub fn handle_replica_write(&mut self, bucket: &Bucket, source: ServerId) -> bool {
        if bucket.ver.elect_id < self.voted_elect_id {
            return false;
        }
        self.adopt_vote(bucket.ver.elect_id, source);
        let slot = bucket.index as usize;
        if bucket.ver >= self.local[slot].ver {
            self.local[slot] = bucket.clone();
            if let Some(s) = self.store.as_mut() {
                s.save_bucket(bucket);
            }
        }
        true
    }

    /// Read request. `None` is a nack; `Some(payload)` is an ack carrying the
    /// local bucket when `with_data`.
    pub fn handle_replica_read(
        &mut self,
        index: u32,
        elect_id: ElectId,
        with_data: bool,
        source: ServerId,
    ) -> Option<Option<Bucket>> {
        if elect_id < self.voted_elect_id || index >= self.config.num_buckets {
            return None;
        }
        self.adopt_vote(elect_id, source);
        Some(with_data.then(|| self.local[index as usize].clone()))
    }

    fn replica_response(&mut self, request: &Payload, source: ServerId) -> (bool, Payload, Option<Bucket>) {
        match request {
            Payload::PleaseVote { elect_id } => {
                let ok = self.handle_please_vote(*elect_id, source);
                (ok, if ok { Payload::AckVote } else { Payload::NackVote }, None)
            }
            Payload::ReplicaWrite { bucket } => {
                let ok = self.handle_replica_write(bucket, source);
                (ok, if ok { Payload::AckWrite } else { Payload::NackWrite }, None)
            }
            Payload::ReplicaRead {
                index,
                elect_id,
                with_data,
            } => match self.handle_replica_read(*index, *elect_id, *with_data, source) {
                Some(bucket) => (
                    true,
                    Payload::AckRead {
                        bucket: bucket.clone(),
                    },
                    bucket,
                ),
                None => (false, Payload::NackRead, None),
            },
            Payload::ReplicaValidate { elect_id, .. } => {
                if *elect_id < self.voted_elect_id {
                    (false, Payload::NackRead, None)
                } else {
                    self.adopt_vote(*elect_id, source);
                    (true, Payload::AckRead { bucket: None }, None)
                }
            }
            other => unreachable!("not a quorum request: {}", other.tag()),
        }
    }

    // ---------------------------------------------------------------------
    // Quorum rounds

    /// Sends `request` to every member and counts our own answer immediately:
    /// self-delivery is a local call and cannot be lost.
    fn open_round(&mut self, purpose: Purpose, request: Payload) -> MsgId {
        let msg = self.fresh_msg();
        let (ok, _, bucket) = self.replica_response(&request, self.id);
        let mut tally = QuorumTally::new(self.members.len());
        let decision = tally.record(self.id, ok, bucket);
        for m in self.members.clone() {
            if m != self.id {
                self.send(msg, self.peer(m), request.clone());
            }
        }
        self.rounds.insert(
            msg,
            Round {
                tally,
                request,
                purpose,
            },
        );
        if decision != Decision::Pending {
            self.resolve_round(msg, decision == Decision::Succeeded);
        } else {
            self.timer(self.config.retransmit_interval, Timer::Retransmit(msg));
            self.timer(self.config.quorum_timeout, Timer::RoundTimeout(msg));
        }
        msg
    }

    fn resolve_round(&mut self, msg: MsgId, ok: bool) {
        let round = self.rounds.remove(&msg).expect("resolving unknown round");
        self.work.push_back(Work::RoundDone {
            purpose: round.purpose,
            msg,
            ok,
            buckets: round.tally.buckets,
        });
    }

    fn on_round_response(&mut self, msg: MsgId, from: ServerId, ack: bool, bucket: Option<Bucket>) {
        if !self.members.contains(&from) {
            return;
        }
        let Some(round) = self.rounds.get_mut(&msg) else {
            return;
        };
        match round.tally.record(from, ack, bucket) {
            Decision::Pending => {}
            Decision::Succeeded => self.resolve_round(msg, true),
            Decision::Failed => self.resolve_round(msg, false),
        }
    }

    fn on_round_retransmit(&mut self, msg: MsgId) {
        let Some(round) = self.rounds.get(&msg) else {
            return;
        };
        let missing: Vec<ServerId> = self
            .members
            .iter()
            .copied()
            .filter(|m| !round.tally.has_responded(*m))
            .collect();
        let request = round.request.clone();
        for m in missing {
            self.send(msg, self.peer(m), request.clone());
        }
        self.timer(self.config.retransmit_interval, Timer::Retransmit(msg));
    }

    fn on_round_timeout(&mut self, msg: MsgId) {
        let Some(round) = self.rounds.get_mut(&msg) else {
            return;
        };
        let missing: Vec<ServerId> = self
            .members
            .iter()
            .copied()
            .filter(|m| !round.tally.has_responded(*m))
            .collect();
        let mut decision = Decision::Pending;
        for m in missing {
            let d = round.tally.record(m, false, None);
            if d != Decision::Pending {
                decision = d;
            }
        }
        // Every member has now answered, so the tally has decided.
        debug_assert_ne!(decision, Decision::Pending);
        self.resolve_round(msg, decision == Decision::Succeeded);
    }

    // ---------------------------------------------------------------------
    // Elections

    /// Starts a new election unless one is already running.
    pub fn start_election(&mut self, now: SimTime) {
        if self.election.is_none() {
            self.is_leader = false;
            // Skipping past elections we already voted in keeps our own
            // candidacy from being refused outright.
            self.elect_id = self.elect_id.max(self.voted_elect_id).next();
            self.stats.elections_started += 1;
            let elect_id = self.elect_id;
            self.election = Some(PendingElection {
                msg: MsgId(0),
                elect_id,
                waiters: Vec::new(),
            });
            let real = self.open_round(Purpose::Election, Payload::PleaseVote { elect_id });
            self.election.as_mut().unwrap().msg = real;
        }
        self.pump(now);
    }

    fn on_trigger_election(&mut self, now: SimTime, from: Endpoint, msg: MsgId) {
        if self.is_leader {
            self.send(msg, from, Payload::ElectionResult { won: true });
            return;
        }
        // Clients only suspect the leader; a follower that heard from it
        // recently keeps it. Operators and peer instances always get an election.
        let leader_alive = self.leader.is_some_and(|l| l != self.id)
            && self.leader_heard_at.is_some_and(|t| now < t + self.config.detection_timeout);
        if leader_alive && matches!(from, Endpoint::Client(_)) {
            self.send(msg, from, Payload::ElectionResult { won: false });
            return;
        }
        if self.election.is_none() {
            self.start_election(now);
        }
        match self.election.as_mut() {
            Some(e) => e.waiters.push((from, msg)),
            // single-member instance: decided synchronously
            None => {
                let won = self.is_leader;
                self.send(msg, from, Payload::ElectionResult { won });
            }
        }
    }

    fn finish_election(&mut self, now: SimTime, msg: MsgId, ok: bool) {
        let Some(e) = self.election.take_if(|e| e.msg == msg) else {
            return;
        };
        let won = ok
            && self.elect_id == e.elect_id
            && self.voted_elect_id == e.elect_id
            && self.leader == Some(self.id);
        if won {
            self.is_leader = true;
            self.stats.elections_won += 1;
            self.outbox.push(Output::BecameLeader {
                elect_id: e.elect_id,
            });
            self.start_sweep();
        }
        for (to, m) in e.waiters {
            self.send(m, to, Payload::ElectionResult { won });
        }
        let _ = now;
    }

    // ---------------------------------------------------------------------
    // Inputs

    pub fn handle(&mut self, now: SimTime, envelope: Envelope) {
        let Envelope {
            msg_id,
            from,
            payload,
            ..
        } = envelope;
        match (from, payload) {
            (Endpoint::Server { server, instance }, payload) if instance == self.instance => {
                self.handle_peer(now, msg_id, server, payload);
            }
            (Endpoint::Server { server, instance }, payload) => {
                self.handle_foreign(now, msg_id, server, instance, payload);
            }
            (Endpoint::Client(client), Payload::ClientRequest(request)) => {
                self.on_client_request(now, client, msg_id, request);
            }
            (from, Payload::TriggerElection) => self.on_trigger_election(now, from, msg_id),
            _ => {}
        }
        self.pump(now);
    }

    fn handle_peer(&mut self, now: SimTime, msg: MsgId, server: ServerId, payload: Payload) {
        if !self.members.contains(&server) {
            return;
        }
        if payload.is_quorum_request() {
            let (_, reply, _) = self.replica_response(&payload, server);
            if self.leader == Some(server) {
                self.leader_heard_at = Some(now);
            }
            self.send(msg, self.peer(server), reply);
            return;
        }
        match payload {
            Payload::AckVote | Payload::AckWrite => self.on_round_response(msg, server, true, None),
            Payload::NackVote | Payload::NackWrite | Payload::NackRead => {
                self.on_round_response(msg, server, false, None)
            }
            Payload::AckRead { bucket } => self.on_round_response(msg, server, true, bucket),
            Payload::TriggerElection => self.on_trigger_election(now, self.peer(server), msg),
            _ => {}
        }
    }

    /// Messages from another instance: copy traffic of a reconfiguration.
    fn handle_foreign(
        &mut self,
        now: SimTime,
        msg: MsgId,
        server: ServerId,
        instance: InstanceId,
        payload: Payload,
    ) {
        let from = Endpoint::Server { server, instance };
        match payload {
            Payload::CopyRead { index } => self.on_copy_read(from, msg, index),
            Payload::TriggerElection => self.on_trigger_election(now, from, msg),
            Payload::CopyReply(outcome) => self.on_copy_reply(now, msg, server, outcome),
            Payload::ElectionResult { won } => self.on_fetch_election_result(now, msg, server, won),
            _ => {}
        }
    }

    pub fn on_timer(&mut self, now: SimTime, timer: Timer) {
        match timer {
            Timer::Retransmit(msg) => self.on_round_retransmit(msg),
            Timer::RoundTimeout(msg) => self.on_round_timeout(msg),
            Timer::Sweep { elect_id } => self.on_sweep_tick(elect_id),
            Timer::FetchRetransmit { fetch, msg } => self.on_fetch_retransmit(fetch, msg),
            Timer::FetchTimeout { fetch, msg } => self.on_fetch_timeout(now, fetch, msg),
            Timer::FetchResume { fetch } => self.fetch_step(now, fetch),
            Timer::ChaosResume(token) => self.resume_chaos_inner(now, token),
        }
        self.pump(now);
    }

    /// Continues the job parked at a chaos point.
    pub fn resume_chaos(&mut self, now: SimTime, token: u64) {
        self.resume_chaos_inner(now, token);
        self.pump(now);
    }

    pub fn set_mode(&mut self, now: SimTime, mode: NodeMode) {
        let draining = matches!(mode, NodeMode::Draining { .. });
        if !matches!(mode, NodeMode::Reconfig { .. }) {
            self.old_link = None;
        }
        self.mode = mode;
        if draining {
            self.cancel_client_jobs(now);
        }
        self.pump(now);
    }

    fn pump(&mut self, now: SimTime) {
        while let Some(w) = self.work.pop_front() {
            match w {
                Work::Run(id) => self.begin_bucket(now, id),
                Work::RoundDone {
                    purpose: Purpose::Election,
                    msg,
                    ok,
                    ..
                } => self.finish_election(now, msg, ok),
                Work::RoundDone {
                    purpose: Purpose::Job(id),
                    msg,
                    ok,
                    buckets,
                } => self.on_job_round(now, id, msg, ok, buckets),
            }
        }
    }

    // ---------------------------------------------------------------------
    // Client intake

    fn reply_client(&mut self, client: ClientId, msg: MsgId, response: KvResponse) {
        self.send(msg, Endpoint::Client(client), Payload::ClientResponse(response));
    }

    fn on_client_request(&mut self, _now: SimTime, client: ClientId, msg: MsgId, request: crate::kv::KvRequest) {
        if let NodeMode::Draining { successor } = &self.mode {
            let successor = Some(successor.clone());
            self.stats.redirects += 1;
            self.reply_client(
                client,
                msg,
                KvResponse::ReconfigRedirect {
                    successor,
                    maybe_applied: false,
                },
            );
            return;
        }
        if let Some(slot) = self.clients.get(&client) {
            if slot.msg == msg {
                if let Some(r) = slot.response.clone() {
                    self.reply_client(client, msg, r);
                }
                return;
            }
            if msg < slot.msg {
                return;
            }
        }
        // Refusals are cached too, so a delayed duplicate of a refused
        // request cannot run if this node becomes leader later.
        let refusal = if !self.is_leader {
            Some(KvResponse::NotALeader {
                hint: self.hint(),
                maybe_applied: false,
            })
        } else {
            request.validate().err().map(KvResponse::Rejected)
        };
        if let Some(response) = refusal {
            self.clients.insert(
                client,
                ClientSlot {
                    msg,
                    response: Some(response.clone()),
                },
            );
            self.reply_client(client, msg, response);
            return;
        }
        self.clients.insert(client, ClientSlot { msg, response: None });
        self.stats.client_jobs += 1;
        let job = Job::client(client, msg, request, self.config.num_buckets, self.iterate_batch());
        self.submit_job(job);
    }

    fn iterate_batch(&self) -> u32 {
        match self.config.iterate_batch {
            0 => self.config.num_buckets,
            n => n.min(self.config.num_buckets),
        }
    }

    // ---------------------------------------------------------------------
    // Serving copy reads for a successor instance

    fn on_copy_read(&mut self, from: Endpoint, msg: MsgId, index: u32) {
        if !self.is_leader || index >= self.config.num_buckets {
            let hint = self.hint();
            self.send(msg, from, Payload::CopyReply(CopyOutcome::NotALeader { hint }));
            return;
        }
        let job = Job::serve_copy(from, msg, index);
        self.submit_job(job);
    }

    // ---------------------------------------------------------------------
    // Background sweep

    fn start_sweep(&mut self) {
        let reconfig = matches!(self.mode, NodeMode::Reconfig { .. });
        if !self.config.background_recovery && !reconfig {
            return;
        }
        self.sweep = Some(Sweep {
            elect_id: self.elect_id,
            cursor: 0,
        });
        self.timer(
            self.config.sweep_interval,
            Timer::Sweep {
                elect_id: self.elect_id,
            },
        );
    }

    fn bucket_ready(&self, index: u32) -> bool {
        let b = &self.local[index as usize];
        b.ver.elect_id == self.elect_id && !b.needs_copy
    }

    /// One sweep step: queue a recovery job for the next bucket that is not
    /// yet recovered (and copied, when reconfiguring).
    fn on_sweep_tick(&mut self, elect_id: ElectId) {
        let active = self.sweep.as_ref().is_some_and(|s| s.elect_id == elect_id);
        if !active {
            return;
        }
        if !self.is_leader || self.elect_id != elect_id {
            self.sweep = None;
            return;
        }
        let n = self.config.num_buckets;
        let mut cursor = self.sweep.as_ref().unwrap().cursor;
        while cursor < n && self.bucket_ready(cursor) {
            cursor += 1;
        }
        if cursor < n {
            self.submit_job(Job::recover(cursor));
            self.sweep.as_mut().unwrap().cursor = cursor + 1;
            self.timer(self.config.sweep_interval, Timer::Sweep { elect_id });
            return;
        }
        if matches!(self.mode, NodeMode::Reconfig { .. }) && !self.all_copied() {
            // Some copies failed; go around again.
            self.sweep.as_mut().unwrap().cursor = 0;
            self.timer(self.config.detection_timeout, Timer::Sweep { elect_id });
        } else {
            self.sweep = None;
        }
    }

    fn all_copied(&self) -> bool {
        (0..self.config.num_buckets).all(|i| self.bucket_ready(i))
    }

    fn check_copy_complete(&mut self) {
        if !matches!(self.mode, NodeMode::Reconfig { .. }) || !self.is_leader {
            return;
        }
        if self.copy_reported == Some(self.elect_id) || !self.all_copied() {
            return;
        }
        self.copy_reported = Some(self.elect_id);
        self.outbox.push(Output::CopyComplete {
            elect_id: self.elect_id,
        });
    }

    // ---------------------------------------------------------------------
    // Fetching buckets from the previous instance

    fn start_fetch(&mut self, now: SimTime, job: JobId, index: u32) -> u64 {
        self.next_fetch += 1;
        let id = self.next_fetch;
        self.fetches.insert(
            id,
            Fetch {
                job,
                index,
                attempt: None,
            },
        );
        self.fetch_step(now, id);
        id
    }

    fn fetch_step(&mut self, now: SimTime, fetch: u64) {
        let Some(f) = self.fetches.get(&fetch) else {
            return;
        };
        let index = f.index;
        let Some(link) = self.old_link.as_mut() else {
            return;
        };
        let old = link.instance;
        let step = link.router.next_step(now);
        let msg = self.fresh_msg();
        let (server, payload, election) = match step {
            crate::client::RouteStep::Send(s) => (s, Payload::CopyRead { index }, false),
            crate::client::RouteStep::TriggerElection(s) => (s, Payload::TriggerElection, true),
            crate::client::RouteStep::Wait(at) => {
                self.fetches.get_mut(&fetch).unwrap().attempt = None;
                self.timer(at.saturating_sub(now), Timer::FetchResume { fetch });
                return;
            }
        };
        self.fetches.get_mut(&fetch).unwrap().attempt = Some((server, msg, election));
        self.send(
            msg,
            Endpoint::Server {
                server,
                instance: old,
            },
            payload,
        );
        self.timer(
            self.config.retransmit_interval,
            Timer::FetchRetransmit { fetch, msg },
        );
        self.timer(
            self.config.detection_timeout,
            Timer::FetchTimeout { fetch, msg },
        );
    }

    fn fetch_by_msg(&self, msg: MsgId, server: ServerId) -> Option<(u64, bool)> {
        self.fetches.iter().find_map(|(id, f)| match f.attempt {
            Some((s, m, election)) if m == msg && s == server => Some((*id, election)),
            _ => None,
        })
    }

    fn on_fetch_retransmit(&mut self, fetch: u64, msg: MsgId) {
        let Some(f) = self.fetches.get(&fetch) else {
            return;
        };
        let Some((server, m, election)) = f.attempt else {
            return;
        };
        if m != msg {
            return;
        }
        let Some(link) = self.old_link.as_ref() else {
            return;
        };
        let payload = if election {
            Payload::TriggerElection
        } else {
            Payload::CopyRead { index: f.index }
        };
        let to = Endpoint::Server {
            server,
            instance: link.instance,
        };
        self.send(msg, to, payload);
        self.timer(
            self.config.retransmit_interval,
            Timer::FetchRetransmit { fetch, msg },
        );
    }

    fn on_fetch_timeout(&mut self, now: SimTime, fetch: u64, msg: MsgId) {
        let Some(f) = self.fetches.get(&fetch) else {
            return;
        };
        let Some((server, m, _)) = f.attempt else {
            return;
        };
        if m != msg {
            return;
        }
        if let Some(link) = self.old_link.as_mut() {
            link.router.on_timeout(server);
        }
        self.fetch_step(now, fetch);
    }

    fn on_fetch_election_result(&mut self, now: SimTime, msg: MsgId, server: ServerId, won: bool) {
        let Some((fetch, true)) = self.fetch_by_msg(msg, server) else {
            return;
        };
        if let Some(link) = self.old_link.as_mut() {
            link.router.on_election_result(server, won);
        }
        self.fetch_step(now, fetch);
    }

    fn on_copy_reply(&mut self, now: SimTime, msg: MsgId, server: ServerId, outcome: CopyOutcome) {
        let Some((fetch, false)) = self.fetch_by_msg(msg, server) else {
            return;
        };
        match outcome {
            CopyOutcome::NotALeader { hint } => {
                if let Some(link) = self.old_link.as_mut() {
                    link.router.on_not_leader(server, hint);
                }
                self.fetch_step(now, fetch);
            }
            CopyOutcome::Bucket(bucket) => {
                if let Some(link) = self.old_link.as_mut() {
                    link.router.on_success(server);
                }
                let f = self.fetches.remove(&fetch).unwrap();
                self.on_fetch_done(now, f.job, fetch, bucket);
            }
        }
    }
}

#[cfg(test)]
mod tests;
