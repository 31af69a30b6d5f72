//! Discrete-event simulation of servers, clients and the network.
//!
//! All randomness comes from one seeded stream consumed in event order, and
//! simultaneous events run in scheduling order, so a seed fully determines an
//! execution.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt::Write as _;

use bizur::client::{Client, ClientConfig, ClientOutput, ClientTimer, Completion};
use bizur::node::{MemStore, Node, NodeConfig, NodeMode, Output, Store, Timer};
use bizur::reconfig::{ControlAction, InstanceMode, Phase, ReconfigController, ReconfigError, ShardMap};
use bizur::{hash_key, ClientId, ElectId, Endpoint, Envelope, InstanceId, KvRequest, MsgId, Payload, ServerId, SimTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::history::{History, OpKind, Outcome};
use crate::metrics::Sample;
use crate::workload::ClientProgram;

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub seed: u64,
    pub latency_min: SimTime,
    pub latency_max: SimTime,
    /// Probability that a message between different servers, or between a
    /// client and a server, is lost.
    pub drop_rate: f64,
    pub trace: bool,
    /// Delay jobs at their chaos points by up to `chaos_max_delay`.
    pub chaos: bool,
    pub chaos_max_delay: SimTime,
    pub node: NodeConfig,
    pub client: ClientConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            latency_min: SimTime::from_micros(500),
            latency_max: SimTime::from_millis(2),
            drop_rate: 0.0,
            trace: false,
            chaos: false,
            chaos_max_delay: SimTime::from_millis(5),
            node: NodeConfig::default(),
            client: ClientConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return Err(SimError::Config(format!("drop_rate {} outside [0, 1]", self.drop_rate)));
        }
        if self.latency_min > self.latency_max {
            return Err(SimError::Config("latency min exceeds max".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("event budget of {0} exhausted before quiescence")]
    EventBudget(u64),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Reconfig(#[from] ReconfigError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrashMode {
    Stop,
    /// Restart from the persisted store after the delay.
    RecoverAfter(SimTime),
}

/// Fault or control action scheduled at a virtual time.
#[derive(Clone, Debug, PartialEq)]
pub enum Fault {
    Crash { server: ServerId, mode: CrashMode },
    /// Crashes whichever server currently leads `instance` (the instance of
    /// shard 0 when `None`). No-op without a leader.
    KillLeader { instance: Option<InstanceId>, mode: CrashMode },
    /// Blocks traffic between servers of different groups.
    Partition(Vec<Vec<ServerId>>),
    Heal,
    DropRate(f64),
    /// Asks a server to run an election, as an operator would.
    Election { instance: InstanceId, server: ServerId },
    Reconfigure { instance: InstanceId, members: Vec<ServerId> },
}

/// Extra one-way latency for replication requests of one bucket.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DelayRule {
    pub instance: InstanceId,
    pub bucket: u32,
    pub extra: SimTime,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LeaderConflict {
    pub instance: InstanceId,
    pub elect_id: ElectId,
    pub first: ServerId,
    pub second: ServerId,
    pub at: SimTime,
}

enum Event {
    Deliver { env: Envelope, from_epoch: u64, to_epoch: u64 },
    NodeTimer { instance: InstanceId, server: ServerId, epoch: u64, timer: Timer },
    ClientTimer { client: ClientId, timer: ClientTimer },
    ClientNext { client: ClientId },
    Recover { server: ServerId, epoch: u64 },
    Fault(Fault),
    ControllerWake { ctl: usize },
}

struct Scheduled {
    at: SimTime,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    // BinaryHeap is a max-heap; the earliest (time, seq) must come out first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

struct NodeSlot {
    node: Option<Node>,
    store: Option<Box<dyn Store>>,
    mode: NodeMode,
    members: Vec<ServerId>,
    /// Client jobs the node had accepted when it started draining.
    drain_baseline: Option<u64>,
}

enum Driver {
    Manual,
    Program { program: Box<ClientProgram>, until: SimTime },
}

struct ClientSlot {
    client: Client,
    driver: Driver,
    current: Option<usize>,
    completions: Vec<Completion>,
}

pub struct Sim {
    config: SimConfig,
    now: SimTime,
    seq: u64,
    queue: BinaryHeap<Scheduled>,
    rng: ChaCha8Rng,
    drop_rate: f64,
    nodes: BTreeMap<(InstanceId, ServerId), NodeSlot>,
    epochs: BTreeMap<ServerId, u64>,
    down: BTreeSet<ServerId>,
    blocked: BTreeSet<(ServerId, ServerId)>,
    delays: Vec<DelayRule>,
    map: ShardMap,
    next_instance: u64,
    controllers: Vec<ReconfigController>,
    controller_msgs: u64,
    clients: Vec<ClientSlot>,
    history: History,
    samples: Vec<Sample>,
    leaders: BTreeMap<(InstanceId, ElectId), ServerId>,
    conflicts: Vec<LeaderConflict>,
    counters: BTreeMap<&'static str, u64>,
    trace: String,
    events: u64,
    draining_client_jobs: u64,
    reconfig_errors: Vec<ReconfigError>,
}

impl Sim {
    /// A simulation serving `map`; every instance in it starts in normal mode
    /// with no leader.
    pub fn new(config: SimConfig, map: ShardMap) -> Result<Self, SimError> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut config = config;
        config.node.num_buckets = map.buckets_per_instance();
        let instances: Vec<_> = map.instances().cloned().collect();
        let next_instance = instances.iter().map(|d| d.instance_id.0).max().unwrap_or(0) + 1;
        let mut sim = Sim {
            drop_rate: config.drop_rate,
            config,
            now: SimTime::ZERO,
            seq: 0,
            queue: BinaryHeap::new(),
            rng,
            nodes: BTreeMap::new(),
            epochs: BTreeMap::new(),
            down: BTreeSet::new(),
            blocked: BTreeSet::new(),
            delays: Vec::new(),
            map,
            next_instance,
            controllers: Vec::new(),
            controller_msgs: 0,
            clients: Vec::new(),
            history: History::new(),
            samples: Vec::new(),
            leaders: BTreeMap::new(),
            conflicts: Vec::new(),
            counters: BTreeMap::new(),
            trace: String::new(),
            events: 0,
            draining_client_jobs: 0,
            reconfig_errors: Vec::new(),
        };
        for d in instances {
            sim.spawn(d.instance_id, d.members.clone(), NodeMode::Normal);
        }
        Ok(sim)
    }

    /// One instance (`InstanceId(1)`) on servers `0..servers`.
    pub fn single(config: SimConfig, servers: u32, buckets: u32) -> Result<Self, SimError> {
        let d = bizur::reconfig::InstanceDescriptor::new(InstanceId(1), (0..servers).map(ServerId).collect());
        Sim::new(config, ShardMap::single(d, buckets))
    }

    fn spawn(&mut self, instance: InstanceId, members: Vec<ServerId>, mode: NodeMode) {
        for &server in &members {
            self.epochs.entry(server).or_insert(0);
            let node = Node::new(self.config.node.clone(), server, instance, members.clone(), mode.clone());
            let alive = !self.down.contains(&server);
            let (node, store) = if alive {
                (Some(node), None)
            } else {
                (None, node.into_store())
            };
            self.nodes.insert(
                (instance, server),
                NodeSlot {
                    node,
                    store,
                    mode: mode.clone(),
                    members: members.clone(),
                    drain_baseline: None,
                },
            );
        }
    }

    // ------------------------------------------------------------------
    // Accessors

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn shard_map(&self) -> &ShardMap {
        &self.map
    }

    pub fn node(&self, instance: InstanceId, server: ServerId) -> Option<&Node> {
        self.nodes.get(&(instance, server)).and_then(|s| s.node.as_ref())
    }

    /// Live nodes of an instance.
    pub fn nodes_of(&self, instance: InstanceId) -> impl Iterator<Item = &Node> {
        self.nodes
            .range((instance, ServerId(0))..=(instance, ServerId(u32::MAX)))
            .filter_map(|(_, s)| s.node.as_ref())
    }

    /// The live server marking itself leader with the highest election id.
    pub fn leader_of(&self, instance: InstanceId) -> Option<ServerId> {
        self.nodes_of(instance)
            .filter(|n| n.is_leader())
            .max_by_key(|n| n.elect_id())
            .map(|n| n.id())
    }

    pub fn is_down(&self, server: ServerId) -> bool {
        self.down.contains(&server)
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn leader_conflicts(&self) -> &[LeaderConflict] {
        &self.conflicts
    }

    /// Number of (instance, election) pairs that produced a leader.
    pub fn elections_won(&self) -> usize {
        self.leaders.len()
    }

    pub fn counters(&self) -> &BTreeMap<&'static str, u64> {
        &self.counters
    }

    pub fn count(&self, tag: &str) -> u64 {
        self.counters.get(tag).copied().unwrap_or(0)
    }

    pub fn reset_counters(&mut self) {
        self.counters.clear();
    }

    pub fn trace(&self) -> &str {
        &self.trace
    }

    pub fn events_executed(&self) -> u64 {
        self.events
    }

    pub fn controller_phases(&self) -> Vec<Phase> {
        self.controllers.iter().map(|c| c.phase()).collect()
    }

    pub fn reconfig_errors(&self) -> &[ReconfigError] {
        &self.reconfig_errors
    }

    /// Client jobs accepted by nodes after they started draining.
    pub fn draining_client_jobs(&self) -> u64 {
        let live: u64 = self
            .nodes
            .values()
            .filter_map(|s| {
                let base = s.drain_baseline?;
                let n = s.node.as_ref()?;
                Some(n.stats().client_jobs.saturating_sub(base) + n.stats().client_work_while_draining)
            })
            .sum();
        self.draining_client_jobs + live
    }

    pub fn completions(&self, client: ClientId) -> &[Completion] {
        &self.clients[client.0 as usize].completions
    }

    pub fn client_idle(&self, client: ClientId) -> bool {
        self.clients[client.0 as usize].client.is_idle()
    }

    pub fn all_clients_idle(&self) -> bool {
        self.clients.iter().all(|c| c.client.is_idle())
    }

    pub fn client_election_triggers(&self) -> u64 {
        self.clients.iter().map(|c| c.client.election_triggers()).sum()
    }

    // ------------------------------------------------------------------
    // Scheduling

    fn schedule(&mut self, at: SimTime, event: Event) {
        debug_assert!(at >= self.now);
        self.seq += 1;
        self.queue.push(Scheduled {
            at,
            seq: self.seq,
            event,
        });
    }

    pub fn schedule_fault(&mut self, at: SimTime, fault: Fault) {
        self.schedule(at.max(self.now), Event::Fault(fault));
    }

    fn log(&mut self, kind: &str, from: &dyn std::fmt::Display, to: &dyn std::fmt::Display, tag: &str) {
        if self.config.trace {
            let _ = writeln!(self.trace, "{} {kind} {from} {to} {tag}", self.now.as_micros());
        }
    }

    /// Executes the next event. Returns false when nothing is left.
    pub fn step(&mut self) -> bool {
        let Some(Scheduled { at, event, .. }) = self.queue.pop() else {
            return false;
        };
        debug_assert!(at >= self.now, "time went backwards");
        self.now = at;
        self.events += 1;
        self.execute(event);
        true
    }

    /// Runs every event up to and including time `t`, then sets the clock to `t`.
    pub fn run_until(&mut self, t: SimTime) {
        while self.queue.peek().is_some_and(|e| e.at <= t) {
            self.step();
        }
        self.now = self.now.max(t);
    }

    pub fn run_for(&mut self, d: SimTime) {
        let t = self.now + d;
        self.run_until(t);
    }

    pub fn run_to_quiescence(&mut self, max_events: u64) -> Result<(), SimError> {
        let mut n = 0;
        while self.step() {
            n += 1;
            if n >= max_events {
                return Err(SimError::EventBudget(max_events));
            }
        }
        Ok(())
    }

    /// Runs until `pred` holds or `limit` of virtual time passes. Returns
    /// whether it held.
    pub fn run_until_pred(&mut self, limit: SimTime, mut pred: impl FnMut(&Sim) -> bool) -> bool {
        let end = self.now + limit;
        loop {
            if pred(self) {
                return true;
            }
            match self.queue.peek() {
                Some(e) if e.at <= end => {
                    self.step();
                }
                _ => {
                    self.now = end;
                    return pred(self);
                }
            }
        }
    }

    fn execute(&mut self, event: Event) {
        match event {
            Event::Deliver { env, from_epoch, to_epoch } => self.deliver(env, from_epoch, to_epoch),
            Event::NodeTimer { instance, server, epoch, timer } => {
                if self.epoch(server) != epoch {
                    return;
                }
                let now = self.now;
                if let Some(node) = self.node_mut(instance, server) {
                    node.on_timer(now, timer);
                    self.drain_node(instance, server);
                }
            }
            Event::ClientTimer { client, timer } => {
                let now = self.now;
                self.clients[client.0 as usize].client.on_timer(now, timer);
                self.drain_client(client);
            }
            Event::ClientNext { client } => self.next_program_op(client),
            Event::Recover { server, epoch } => {
                if self.epoch(server) == epoch {
                    self.recover(server);
                }
            }
            Event::Fault(f) => self.apply_fault(f),
            Event::ControllerWake { ctl } => {
                let now = self.now;
                let actions = self.controllers[ctl].on_wake(now);
                self.execute_actions(ctl, actions);
            }
        }
    }

    fn epoch(&self, server: ServerId) -> u64 {
        self.epochs.get(&server).copied().unwrap_or(0)
    }

    fn node_mut(&mut self, instance: InstanceId, server: ServerId) -> Option<&mut Node> {
        self.nodes.get_mut(&(instance, server)).and_then(|s| s.node.as_mut())
    }

    // ------------------------------------------------------------------
    // Network

    fn is_blocked(&self, a: ServerId, b: ServerId) -> bool {
        self.blocked.contains(&(a.min(b), a.max(b)))
    }

    fn transmit(&mut self, env: Envelope) {
        let tag = env.payload.tag();
        *self.counters.entry(tag).or_insert(0) += 1;
        if env.to == Endpoint::Controller {
            self.log("send", &env.from, &env.to, tag);
            return;
        }
        let (from_s, to_s) = (env.from.server(), env.to.server());
        let local = from_s.is_some() && from_s == to_s;
        let lost = !local
            && (matches!((from_s, to_s), (Some(a), Some(b)) if self.is_blocked(a, b))
                || (self.drop_rate > 0.0 && self.rng.random::<f64>() < self.drop_rate));
        if lost {
            self.log("drop", &env.from, &env.to, tag);
            return;
        }
        let (lo, hi) = (self.config.latency_min.as_micros(), self.config.latency_max.as_micros());
        let mut latency = SimTime(self.rng.random_range(lo..=hi));
        if let (Some(index), Endpoint::Server { instance, .. }) = (env.payload.bucket_index(), env.to) {
            for r in &self.delays {
                if r.instance == instance && r.bucket == index && env.payload.is_quorum_request() {
                    latency += r.extra;
                }
            }
        }
        self.log("send", &env.from, &env.to, tag);
        let from_epoch = from_s.map_or(0, |s| self.epoch(s));
        let to_epoch = to_s.map_or(0, |s| self.epoch(s));
        let at = self.now + latency;
        self.schedule(at, Event::Deliver { env, from_epoch, to_epoch });
    }

    fn deliver(&mut self, env: Envelope, from_epoch: u64, to_epoch: u64) {
        if let Some(s) = env.from.server() {
            if self.epoch(s) != from_epoch {
                return;
            }
        }
        match env.to {
            Endpoint::Server { server, instance } => {
                if self.down.contains(&server) || self.epoch(server) != to_epoch {
                    return;
                }
                let now = self.now;
                let tag = env.payload.tag();
                let (from, to) = (env.from, env.to);
                if let Some(node) = self.node_mut(instance, server) {
                    node.handle(now, env);
                    self.log("recv", &from, &to, tag);
                    self.drain_node(instance, server);
                }
            }
            Endpoint::Client(c) => {
                let now = self.now;
                self.log("recv", &env.from, &env.to, env.payload.tag());
                self.clients[c.0 as usize].client.on_message(now, env);
                self.drain_client(c);
            }
            Endpoint::Controller => {}
        }
    }

    fn drain_node(&mut self, instance: InstanceId, server: ServerId) {
        loop {
            let outputs = match self.node_mut(instance, server) {
                Some(n) => n.drain_outputs(),
                None => return,
            };
            if outputs.is_empty() {
                return;
            }
            let epoch = self.epoch(server);
            for out in outputs {
                match out {
                    Output::Send(env) => self.transmit(env),
                    Output::SetTimer { after, timer } => {
                        let at = self.now + after;
                        self.schedule(at, Event::NodeTimer { instance, server, epoch, timer });
                    }
                    Output::BecameLeader { elect_id } => self.observe_leader(instance, server, elect_id),
                    Output::ChaosPoint { token, .. } => {
                        let delay = if self.config.chaos {
                            SimTime(self.rng.random_range(0..=self.config.chaos_max_delay.as_micros()))
                        } else {
                            SimTime::ZERO
                        };
                        let at = self.now + delay;
                        self.schedule(
                            at,
                            Event::NodeTimer { instance, server, epoch, timer: Timer::ChaosResume(token) },
                        );
                    }
                    Output::CopyComplete { .. } => self.on_copy_complete(instance),
                }
            }
        }
    }

    fn observe_leader(&mut self, instance: InstanceId, server: ServerId, elect_id: ElectId) {
        self.log("leader", &server, &instance, &elect_id.0.to_string());
        match self.leaders.get(&(instance, elect_id)) {
            Some(&first) if first != server => self.conflicts.push(LeaderConflict {
                instance,
                elect_id,
                first,
                second: server,
                at: self.now,
            }),
            Some(_) => {}
            None => {
                self.leaders.insert((instance, elect_id), server);
            }
        }
    }

    // ------------------------------------------------------------------
    // Faults

    pub fn set_drop_rate(&mut self, rate: f64) {
        self.drop_rate = rate.clamp(0.0, 1.0);
    }

    pub fn drop_rate(&self) -> f64 {
        self.drop_rate
    }

    pub fn partition(&mut self, groups: &[Vec<ServerId>]) {
        for (i, g) in groups.iter().enumerate() {
            for h in &groups[i + 1..] {
                for &a in g {
                    for &b in h {
                        if a != b {
                            self.blocked.insert((a.min(b), a.max(b)));
                        }
                    }
                }
            }
        }
        self.log("partition", &"-", &"-", &format!("{groups:?}"));
    }

    pub fn heal(&mut self) {
        self.blocked.clear();
        self.log("heal", &"-", &"-", "-");
    }

    pub fn add_delay_rule(&mut self, rule: DelayRule) {
        self.delays.push(rule);
    }

    pub fn crash(&mut self, server: ServerId, mode: CrashMode) {
        if self.down.contains(&server) {
            return;
        }
        self.down.insert(server);
        *self.epochs.entry(server).or_insert(0) += 1;
        let keys: Vec<_> = self.nodes.keys().filter(|(_, s)| *s == server).copied().collect();
        for k in keys {
            let slot = self.nodes.get_mut(&k).unwrap();
            if let Some(node) = slot.node.take() {
                if let Some(base) = slot.drain_baseline {
                    self.draining_client_jobs += node.stats().client_jobs.saturating_sub(base)
                        + node.stats().client_work_while_draining;
                }
                slot.store = node.into_store();
            }
        }
        self.log("crash", &server, &"-", &format!("{mode:?}"));
        if let CrashMode::RecoverAfter(d) = mode {
            let epoch = self.epoch(server);
            let at = self.now + d;
            self.schedule(at, Event::Recover { server, epoch });
        }
    }

    fn recover(&mut self, server: ServerId) {
        if !self.down.remove(&server) {
            return;
        }
        let epoch = self.epoch(server);
        let keys: Vec<_> = self.nodes.keys().filter(|(_, s)| *s == server).copied().collect();
        for (instance, s) in keys {
            let config = self.config.node.clone();
            let slot = self.nodes.get_mut(&(instance, s)).unwrap();
            let store = slot.store.take().unwrap_or_else(|| Box::new(MemStore::default()));
            slot.node = Some(Node::restore(config, s, instance, slot.members.clone(), slot.mode.clone(), store, epoch));
            if slot.drain_baseline.is_some() {
                slot.drain_baseline = Some(0);
            }
        }
        self.log("recover", &server, &"-", "-");
    }

    pub fn kill_leader(&mut self, instance: InstanceId, mode: CrashMode) -> Option<ServerId> {
        let leader = self.leader_of(instance)?;
        self.crash(leader, mode);
        Some(leader)
    }

    /// Sends an election request to `server` as the controller would.
    pub fn trigger_election(&mut self, instance: InstanceId, server: ServerId) {
        self.controller_msgs += 1;
        let env = Envelope {
            msg_id: MsgId(self.controller_msgs),
            from: Endpoint::Controller,
            to: Endpoint::Server { server, instance },
            payload: Payload::TriggerElection,
        };
        self.transmit(env);
    }

    /// Makes `server` start an election right now, bypassing the network.
    pub fn start_election(&mut self, instance: InstanceId, server: ServerId) {
        let now = self.now;
        if let Some(n) = self.node_mut(instance, server) {
            n.start_election(now);
            self.drain_node(instance, server);
        }
    }

    fn apply_fault(&mut self, fault: Fault) {
        match fault {
            Fault::Crash { server, mode } => self.crash(server, mode),
            Fault::KillLeader { instance, mode } => {
                let instance = instance.unwrap_or_else(|| self.map.descriptor_for_shard(0).instance_id);
                self.kill_leader(instance, mode);
            }
            Fault::Partition(groups) => self.partition(&groups),
            Fault::Heal => self.heal(),
            Fault::DropRate(r) => self.set_drop_rate(r),
            Fault::Election { instance, server } => self.trigger_election(instance, server),
            Fault::Reconfigure { instance, members } => {
                if let Err(e) = self.start_reconfiguration(instance, members) {
                    self.reconfig_errors.push(e);
                }
            }
        }
    }

    // ------------------------------------------------------------------
    // Reconfiguration

    /// Starts moving `old`'s shards to a new instance on `members`. Returns
    /// the new instance id.
    pub fn start_reconfiguration(
        &mut self,
        old: InstanceId,
        members: Vec<ServerId>,
    ) -> Result<InstanceId, ReconfigError> {
        for c in &self.controllers {
            let busy = c.phase() != Phase::Done;
            if busy && (c.old().instance_id == old || c.new_instance().instance_id == old) {
                return Err(ReconfigError::InProgress(c.shards().first().copied().unwrap_or(0)));
            }
        }
        let new_id = InstanceId(self.next_instance);
        let (ctl, actions) = ReconfigController::start(
            &self.map,
            old,
            new_id,
            members,
            self.now,
            self.config.node.detection_timeout,
        )?;
        self.next_instance += 1;
        self.controllers.push(ctl);
        let idx = self.controllers.len() - 1;
        self.log("reconfigure", &old, &new_id, "-");
        self.execute_actions(idx, actions);
        Ok(new_id)
    }

    fn execute_actions(&mut self, ctl: usize, actions: Vec<ControlAction>) {
        let now = self.now;
        for action in actions {
            match action {
                ControlAction::SpawnInstance(desc) => {
                    let old_id = self.controllers[ctl].old().instance_id;
                    let old = self.map.instance(old_id).cloned().expect("old instance is mapped");
                    self.spawn(desc.instance_id, desc.members.clone(), NodeMode::Reconfig { old });
                }
                ControlAction::SetDraining { instance, successor } => {
                    self.map.set_mode(instance, InstanceMode::Draining);
                    self.set_instance_mode(instance, NodeMode::Draining { successor });
                }
                ControlAction::Publish { shard, descriptor } => {
                    self.map.update(shard, descriptor.clone());
                    for c in 0..self.clients.len() {
                        self.controller_msgs += 1;
                        let env = Envelope {
                            msg_id: MsgId(self.controller_msgs),
                            from: Endpoint::Controller,
                            to: Endpoint::Client(ClientId(c as u32)),
                            payload: Payload::DescriptorUpdate { shard, descriptor: descriptor.clone() },
                        };
                        self.transmit(env);
                    }
                }
                ControlAction::TriggerElection { instance, server } => self.trigger_election(instance, server),
                ControlAction::SetNormal(instance) => {
                    self.map.set_mode(instance, InstanceMode::Normal);
                    self.set_instance_mode(instance, NodeMode::Normal);
                }
                ControlAction::Retire(instance) => {
                    self.map.set_mode(instance, InstanceMode::Retired);
                    let keys: Vec<_> = self.nodes.keys().filter(|(i, _)| *i == instance).copied().collect();
                    for k in keys {
                        let slot = self.nodes.remove(&k).unwrap();
                        if let (Some(base), Some(n)) = (slot.drain_baseline, slot.node.as_ref()) {
                            self.draining_client_jobs +=
                                n.stats().client_jobs.saturating_sub(base) + n.stats().client_work_while_draining;
                        }
                    }
                    self.log("retire", &instance, &"-", "-");
                }
                ControlAction::WakeAt(t) => self.schedule(t.max(now), Event::ControllerWake { ctl }),
            }
        }
    }

    fn set_instance_mode(&mut self, instance: InstanceId, mode: NodeMode) {
        let now = self.now;
        let draining = matches!(mode, NodeMode::Draining { .. });
        let keys: Vec<_> = self.nodes.keys().filter(|(i, _)| *i == instance).copied().collect();
        for (i, s) in keys {
            let slot = self.nodes.get_mut(&(i, s)).unwrap();
            slot.mode = mode.clone();
            if draining {
                slot.drain_baseline = Some(slot.node.as_ref().map_or(0, |n| n.stats().client_jobs));
            }
            if let Some(n) = slot.node.as_mut() {
                n.set_mode(now, mode.clone());
                self.drain_node(i, s);
            }
        }
    }

    fn on_copy_complete(&mut self, instance: InstanceId) {
        let now = self.now;
        if let Some(ctl) = self
            .controllers
            .iter()
            .position(|c| c.new_instance().instance_id == instance && c.phase() == Phase::Copying)
        {
            let actions = self.controllers[ctl].on_copy_complete(now);
            self.execute_actions(ctl, actions);
        }
    }

    // ------------------------------------------------------------------
    // Clients

    /// A client driven by explicit [`Sim::submit`] calls.
    pub fn add_client(&mut self) -> ClientId {
        self.add_client_with(Driver::Manual)
    }

    /// A closed-loop client issuing `program`'s requests until `until`.
    pub fn add_program_client(&mut self, program: ClientProgram, until: SimTime) -> ClientId {
        let id = self.add_client_with(Driver::Program { program: Box::new(program), until });
        let now = self.now;
        self.schedule(now, Event::ClientNext { client: id });
        id
    }

    fn add_client_with(&mut self, driver: Driver) -> ClientId {
        let id = ClientId(self.clients.len() as u32);
        self.clients.push(ClientSlot {
            client: Client::new(id, self.map.clone(), self.config.client.clone()),
            driver,
            current: None,
            completions: Vec::new(),
        });
        id
    }

    pub fn submit(&mut self, client: ClientId, request: KvRequest) {
        let now = self.now;
        let slot = &mut self.clients[client.0 as usize];
        slot.current = OpKind::from_request(&request).map(|k| self.history.invoke(client, k, now));
        slot.client.submit(now, request);
        self.drain_client(client);
    }

    fn next_program_op(&mut self, client: ClientId) {
        let now = self.now;
        let slot = &mut self.clients[client.0 as usize];
        let Driver::Program { program, until } = &mut slot.driver else {
            return;
        };
        if now >= *until || !slot.client.is_idle() {
            return;
        }
        let request = program.next_request();
        self.submit(client, request);
    }

    fn drain_client(&mut self, client: ClientId) {
        loop {
            let outputs = self.clients[client.0 as usize].client.drain_outputs();
            if outputs.is_empty() {
                return;
            }
            for out in outputs {
                match out {
                    ClientOutput::Send(env) => self.transmit(env),
                    ClientOutput::SetTimer { after, timer } => {
                        let at = self.now + after;
                        self.schedule(at, Event::ClientTimer { client, timer });
                    }
                    ClientOutput::Completed(c) => self.on_completion(client, c),
                }
            }
        }
    }

    fn on_completion(&mut self, client: ClientId, c: Completion) {
        let now = self.now;
        let slot = &mut self.clients[client.0 as usize];
        if let Some(id) = slot.current.take() {
            self.history.complete(id, now, Outcome::from_result(&c.result));
        }
        if c.result.as_ref().is_ok_and(|r| r.is_success()) {
            let bucket = c
                .request
                .key()
                .map_or(u32::MAX, |k| hash_key(k, self.map.buckets_per_instance()));
            self.samples.push(Sample {
                invoked_at: c.invoked_at,
                completed_at: c.completed_at,
                instance: c.instance,
                bucket,
                server: c.server,
            });
        }
        match &mut slot.driver {
            Driver::Manual => slot.completions.push(c),
            Driver::Program { program, .. } => {
                program.observe(&c.request, &c.result);
                self.schedule(now, Event::ClientNext { client });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bizur::client::bytes;
    use bizur::KvResponse;

    fn quiet() -> SimConfig {
        SimConfig {
            node: NodeConfig { background_recovery: false, ..NodeConfig::default() },
            ..SimConfig::default()
        }
    }

    #[test]
    fn empty_queue_is_exhausted() {
        let mut sim = Sim::single(quiet(), 3, 8).unwrap();
        assert!(!sim.step());
        assert!(sim.run_to_quiescence(10).is_ok());
    }

    #[test]
    fn events_fire_in_time_then_sequence_order() {
        let mut sim = Sim::single(SimConfig { trace: true, ..quiet() }, 3, 8).unwrap();
        sim.schedule_fault(SimTime::from_millis(5), Fault::DropRate(0.5));
        sim.schedule_fault(SimTime::from_millis(5), Fault::Heal);
        sim.schedule_fault(SimTime::from_millis(2), Fault::Partition(vec![vec![ServerId(0)], vec![ServerId(1)]]));
        assert!(sim.step());
        assert_eq!(sim.now(), SimTime::from_millis(2));
        assert!(sim.step());
        assert_eq!(sim.now(), SimTime::from_millis(5));
        assert_eq!(sim.drop_rate(), 0.5);
        assert!(sim.step());
        assert!(sim.trace().lines().nth(1).unwrap().starts_with("5000 heal"));
    }

    #[test]
    fn delivery_within_latency_bounds() {
        let mut sim = Sim::single(SimConfig { trace: true, ..quiet() }, 3, 8).unwrap();
        sim.start_election(InstanceId(1), ServerId(0));
        sim.run_to_quiescence(10_000).unwrap();
        for line in sim.trace().lines().filter(|l| l.contains(" recv ") && l.ends_with("PleaseVote")) {
            let t: u64 = line.split(' ').next().unwrap().parse().unwrap();
            assert!((500..=2000).contains(&t), "{line}");
        }
        assert_eq!(sim.leader_of(InstanceId(1)), Some(ServerId(0)));
    }

    #[test]
    fn full_loss_blocks_cross_node_traffic() {
        let mut sim = Sim::single(SimConfig { drop_rate: 1.0, ..quiet() }, 3, 8).unwrap();
        sim.start_election(InstanceId(1), ServerId(0));
        sim.run_to_quiescence(100_000).unwrap();
        assert_eq!(sim.leader_of(InstanceId(1)), None);
        assert_eq!(sim.count("AckVote"), 0);
    }

    #[test]
    fn same_seed_same_trace() {
        let run = |seed| {
            let mut sim = Sim::single(SimConfig { seed, trace: true, drop_rate: 0.1, ..quiet() }, 3, 8).unwrap();
            sim.start_election(InstanceId(1), ServerId(1));
            let c = sim.add_client();
            sim.run_for(SimTime::from_millis(50));
            sim.submit(c, KvRequest::Set { key: bytes("k"), value: bytes("v") });
            sim.run_to_quiescence(100_000).unwrap();
            sim.trace().to_string()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn crashed_leader_is_replaced_and_client_recovers() {
        let mut sim = Sim::single(quiet(), 3, 8).unwrap();
        let c = sim.add_client();
        sim.submit(c, KvRequest::Set { key: bytes("k"), value: bytes("1") });
        sim.run_to_quiescence(100_000).unwrap();
        assert_eq!(sim.completions(c)[0].result, Ok(KvResponse::Ok));
        let leader = sim.leader_of(InstanceId(1)).unwrap();
        sim.crash(leader, CrashMode::Stop);
        sim.submit(c, KvRequest::Get { key: bytes("k") });
        sim.run_to_quiescence(100_000).unwrap();
        assert_eq!(sim.completions(c)[1].result, Ok(KvResponse::Value(bytes("1"))));
        assert_ne!(sim.leader_of(InstanceId(1)), Some(leader));
    }

    #[test]
    fn follower_crash_does_not_interrupt_writes() {
        let mut sim = Sim::single(quiet(), 3, 8).unwrap();
        sim.start_election(InstanceId(1), ServerId(0));
        sim.run_for(SimTime::from_millis(10));
        sim.crash(ServerId(2), CrashMode::Stop);
        let c = sim.add_client();
        for i in 0..5 {
            sim.submit(c, KvRequest::Set { key: bytes("k"), value: bytes(&i.to_string()) });
            sim.run_to_quiescence(100_000).unwrap();
        }
        assert!(sim.completions(c).iter().all(|x| x.result == Ok(KvResponse::Ok)));
        assert_eq!(sim.leader_of(InstanceId(1)), Some(ServerId(0)));
    }

    #[test]
    fn recovered_node_keeps_its_vote() {
        let config = SimConfig {
            node: NodeConfig { persist: true, background_recovery: false, ..NodeConfig::default() },
            ..SimConfig::default()
        };
        let mut sim = Sim::single(config, 3, 8).unwrap();
        sim.start_election(InstanceId(1), ServerId(0));
        sim.run_to_quiescence(10_000).unwrap();
        let voted = sim.node(InstanceId(1), ServerId(1)).unwrap().voted_elect_id();
        sim.crash(ServerId(1), CrashMode::RecoverAfter(SimTime::from_millis(5)));
        assert!(sim.node(InstanceId(1), ServerId(1)).is_none());
        sim.run_to_quiescence(10_000).unwrap();
        let n = sim.node(InstanceId(1), ServerId(1)).unwrap();
        assert_eq!(n.voted_elect_id(), voted);
        assert!(!n.is_leader());
    }

    #[test]
    fn isolated_leader_steps_down_after_heal() {
        let mut sim = Sim::single(quiet(), 3, 8).unwrap();
        let c = sim.add_client();
        sim.submit(c, KvRequest::Set { key: bytes("k"), value: bytes("1") });
        sim.run_to_quiescence(100_000).unwrap();
        let old = sim.leader_of(InstanceId(1)).unwrap();
        let others: Vec<ServerId> = (0..3).map(ServerId).filter(|s| *s != old).collect();
        sim.partition(&[vec![old], others.clone()]);
        sim.start_election(InstanceId(1), others[0]);
        sim.run_to_quiescence(100_000).unwrap();
        assert!(sim.node(InstanceId(1), old).unwrap().is_leader());
        sim.heal();
        // the stale leader's next write is refused
        sim.submit(c, KvRequest::Set { key: bytes("k"), value: bytes("2") });
        sim.run_to_quiescence(100_000).unwrap();
        assert!(!sim.node(InstanceId(1), old).unwrap().is_leader());
        assert!(sim.leader_conflicts().is_empty());
    }
}
