//! Client-side request routing.
//!
//! [`Router`] decides which server of an instance to talk to: the presumed
//! leader if known, otherwise round-robin. After a full cycle of members
//! without finding a leader it asks a server known to be alive to start an
//! election, at most once per token period. [`Client`] drives one outstanding
//! request at a time through the router, with retransmission, timeouts, and
//! reconfiguration redirects.

use std::collections::{BTreeMap, BTreeSet};

use bytes::Bytes;

use crate::kv::{KvRequest, KvResponse};
use crate::message::{Endpoint, Envelope, MsgId, Payload};
use crate::reconfig::{InstanceDescriptor, ShardMap};
use crate::time::SimTime;
use crate::types::{ClientId, InstanceId, ServerId};

/// Single-token bucket: one token, refilled `period` after it is spent.
#[derive(Clone, Debug)]
pub struct TokenBucket {
    period: SimTime,
    next_available: SimTime,
}

impl TokenBucket {
    pub fn new(period: SimTime) -> Self {
        TokenBucket {
            period,
            next_available: SimTime::ZERO,
        }
    }

    pub fn try_take(&mut self, now: SimTime) -> bool {
        if now >= self.next_available {
            self.next_available = now + self.period;
            true
        } else {
            false
        }
    }

    pub fn available_at(&self) -> SimTime {
        self.next_available
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RouteStep {
    Send(ServerId),
    TriggerElection(ServerId),
    /// Out of election tokens; try again at the given time.
    Wait(SimTime),
}

#[derive(Clone, Debug)]
pub struct Router {
    members: Vec<ServerId>,
    presumed_leader: Option<ServerId>,
    rr_cursor: usize,
    failures_in_cycle: usize,
    last_responsive: Option<ServerId>,
    suspected: BTreeSet<ServerId>,
    budget: TokenBucket,
    election_triggers: u64,
}

impl Router {
    pub fn new(members: Vec<ServerId>, election_period: SimTime) -> Self {
        assert!(!members.is_empty(), "router needs at least one member");
        Router {
            members,
            presumed_leader: None,
            rr_cursor: 0,
            failures_in_cycle: 0,
            last_responsive: None,
            suspected: BTreeSet::new(),
            budget: TokenBucket::new(election_period),
            election_triggers: 0,
        }
    }

    pub fn members(&self) -> &[ServerId] {
        &self.members
    }

    pub fn presumed_leader(&self) -> Option<ServerId> {
        self.presumed_leader
    }

    pub fn election_triggers(&self) -> u64 {
        self.election_triggers
    }

    pub fn next_step(&mut self, now: SimTime) -> RouteStep {
        if self.failures_in_cycle >= self.members.len() {
            if !self.budget.try_take(now) {
                return RouteStep::Wait(self.budget.available_at());
            }
            self.election_triggers += 1;
            self.failures_in_cycle = 0;
            let target = self
                .last_responsive
                .filter(|s| !self.suspected.contains(s))
                .unwrap_or(self.members[self.rr_cursor]);
            self.suspected.clear();
            return RouteStep::TriggerElection(target);
        }
        match self.presumed_leader {
            Some(l) => RouteStep::Send(l),
            None => RouteStep::Send(self.members[self.rr_cursor]),
        }
    }

    pub fn on_success(&mut self, server: ServerId) {
        self.presumed_leader = Some(server);
        self.failures_in_cycle = 0;
        self.suspected.clear();
        if let Some(i) = self.position(server) {
            self.rr_cursor = i;
        }
    }

    pub fn on_not_leader(&mut self, server: ServerId, hint: Option<ServerId>) {
        self.last_responsive = Some(server);
        self.suspected.remove(&server);
        self.failures_in_cycle += 1;
        self.presumed_leader = hint.filter(|h| {
            *h != server && !self.suspected.contains(h) && self.members.contains(h)
        });
        if self.presumed_leader.is_none() {
            self.advance_past(server);
        }
    }

    pub fn on_timeout(&mut self, server: ServerId) {
        self.suspected.insert(server);
        self.failures_in_cycle += 1;
        self.presumed_leader = None;
        self.advance_past(server);
    }

    pub fn on_election_result(&mut self, server: ServerId, won: bool) {
        if won {
            self.on_success(server);
        } else {
            self.last_responsive = Some(server);
            self.presumed_leader = None;
            self.advance_past(server);
        }
    }

    fn position(&self, server: ServerId) -> Option<usize> {
        self.members.iter().position(|m| *m == server)
    }

    fn advance_past(&mut self, server: ServerId) {
        let i = self.position(server).unwrap_or(self.rr_cursor);
        self.rr_cursor = (i + 1) % self.members.len();
    }
}

/// Timing knobs shared by clients.
#[derive(Clone, Debug)]
pub struct ClientConfig {
    /// Give up on a server after this long without a response.
    pub request_timeout: SimTime,
    pub retransmit_interval: SimTime,
    pub election_period: SimTime,
    /// Attempts per request before reporting [`SubmitError::RetriesExhausted`].
    pub max_attempts: u32,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            request_timeout: SimTime::from_millis(100),
            retransmit_interval: SimTime::from_millis(10),
            election_period: SimTime::from_millis(500),
            max_attempts: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SubmitError {
    /// The request may or may not have taken effect.
    Indeterminate,
    /// The attempt cap was reached without any attempt possibly applying.
    RetriesExhausted,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Completion {
    pub request: KvRequest,
    pub result: Result<KvResponse, SubmitError>,
    pub invoked_at: SimTime,
    pub completed_at: SimTime,
    pub instance: InstanceId,
    /// Server that produced the final answer, when there was one.
    pub server: Option<ServerId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ClientTimer {
    Retransmit { msg: MsgId },
    Timeout { msg: MsgId },
    Resume { op: u64 },
}

#[derive(Clone, Debug)]
pub enum ClientOutput {
    Send(Envelope),
    SetTimer { after: SimTime, timer: ClientTimer },
    Completed(Completion),
}

#[derive(Clone, Debug)]
enum Attempt {
    Request { server: ServerId, msg: MsgId },
    Election { server: ServerId, msg: MsgId },
    Waiting,
}

#[derive(Clone, Debug)]
struct Pending {
    op: u64,
    request: KvRequest,
    invoked_at: SimTime,
    instance: InstanceId,
    attempt: Attempt,
    attempts: u32,
    maybe_applied: bool,
}

/// One closed-loop client: at most one request outstanding.
#[derive(Debug)]
pub struct Client {
    id: ClientId,
    config: ClientConfig,
    shards: ShardMap,
    routers: BTreeMap<InstanceId, Router>,
    pending: Option<Pending>,
    next_msg: u64,
    next_op: u64,
    outbox: Vec<ClientOutput>,
}

impl Client {
    pub fn new(id: ClientId, shards: ShardMap, config: ClientConfig) -> Self {
        Client {
            id,
            config,
            shards,
            routers: BTreeMap::new(),
            pending: None,
            next_msg: 0,
            next_op: 0,
            outbox: Vec::new(),
        }
    }

    pub fn id(&self) -> ClientId {
        self.id
    }

    pub fn is_idle(&self) -> bool {
        self.pending.is_none()
    }

    pub fn shard_map(&self) -> &ShardMap {
        &self.shards
    }

    pub fn election_triggers(&self) -> u64 {
        self.routers.values().map(Router::election_triggers).sum()
    }

    pub fn drain_outputs(&mut self) -> Vec<ClientOutput> {
        std::mem::take(&mut self.outbox)
    }

    /// Starts a request. Panics if one is already outstanding.
    pub fn submit(&mut self, now: SimTime, request: KvRequest) {
        assert!(self.pending.is_none(), "client {} is busy", self.id);
        let instance = self.instance_for(&request);
        self.next_op += 1;
        self.pending = Some(Pending {
            op: self.next_op,
            request,
            invoked_at: now,
            instance,
            attempt: Attempt::Waiting,
            attempts: 0,
            maybe_applied: false,
        });
        self.step(now);
    }

    /// Learns a newer descriptor, whether published by the controller or
    /// carried in a redirect. Older epochs are ignored.
    pub fn learn_descriptor(&mut self, shard: u16, descriptor: &InstanceDescriptor) {
        self.shards.update(shard, descriptor.clone());
    }

    fn instance_for(&self, request: &KvRequest) -> InstanceId {
        match request.key() {
            Some(key) => self.shards.route(key).1.instance_id,
            None => self.shards.descriptor_for_shard(0).instance_id,
        }
    }

    fn router(&mut self, instance: InstanceId) -> &mut Router {
        let members = self
            .shards
            .instance(instance)
            .map(|d| d.members.clone())
            .expect("routing to an unknown instance");
        let period = self.config.election_period;
        self.routers
            .entry(instance)
            .or_insert_with(|| Router::new(members, period))
    }

    fn fresh_msg(&mut self) -> MsgId {
        self.next_msg += 1;
        MsgId(self.next_msg)
    }

    fn step(&mut self, now: SimTime) {
        let Some(p) = self.pending.as_ref() else {
            return;
        };
        if p.attempts >= self.config.max_attempts {
            let err = if p.maybe_applied {
                SubmitError::Indeterminate
            } else {
                SubmitError::RetriesExhausted
            };
            self.finish(now, Err(err), None);
            return;
        }
        let instance = p.instance;
        let step = self.router(instance).next_step(now);
        let msg = self.fresh_msg();
        let p = self.pending.as_mut().unwrap();
        p.attempts += 1;
        let (server, payload) = match step {
            RouteStep::Send(server) => {
                p.attempt = Attempt::Request { server, msg };
                (server, Payload::ClientRequest(p.request.clone()))
            }
            RouteStep::TriggerElection(server) => {
                p.attempt = Attempt::Election { server, msg };
                (server, Payload::TriggerElection)
            }
            RouteStep::Wait(at) => {
                p.attempt = Attempt::Waiting;
                let op = p.op;
                self.outbox.push(ClientOutput::SetTimer {
                    after: at.saturating_sub(now),
                    timer: ClientTimer::Resume { op },
                });
                return;
            }
        };
        self.outbox.push(ClientOutput::Send(Envelope {
            msg_id: msg,
            from: Endpoint::Client(self.id),
            to: Endpoint::Server { server, instance },
            payload,
        }));
        self.outbox.push(ClientOutput::SetTimer {
            after: self.config.retransmit_interval,
            timer: ClientTimer::Retransmit { msg },
        });
        self.outbox.push(ClientOutput::SetTimer {
            after: self.config.request_timeout,
            timer: ClientTimer::Timeout { msg },
        });
    }

    fn current_msg(&self) -> Option<(MsgId, ServerId, bool)> {
        match self.pending.as_ref()?.attempt {
            Attempt::Request { server, msg } => Some((msg, server, false)),
            Attempt::Election { server, msg } => Some((msg, server, true)),
            Attempt::Waiting => None,
        }
    }

    fn finish(&mut self, now: SimTime, result: Result<KvResponse, SubmitError>, server: Option<ServerId>) {
        let p = self.pending.take().expect("finish without pending request");
        self.outbox.push(ClientOutput::Completed(Completion {
            request: p.request,
            result,
            invoked_at: p.invoked_at,
            completed_at: now,
            instance: p.instance,
            server,
        }));
    }

    pub fn on_timer(&mut self, now: SimTime, timer: ClientTimer) {
        match timer {
            ClientTimer::Retransmit { msg } => {
                let Some((current, server, election)) = self.current_msg() else {
                    return;
                };
                if current != msg {
                    return;
                }
                let p = self.pending.as_ref().unwrap();
                let payload = if election {
                    Payload::TriggerElection
                } else {
                    Payload::ClientRequest(p.request.clone())
                };
                let instance = p.instance;
                self.outbox.push(ClientOutput::Send(Envelope {
                    msg_id: msg,
                    from: Endpoint::Client(self.id),
                    to: Endpoint::Server { server, instance },
                    payload,
                }));
                self.outbox.push(ClientOutput::SetTimer {
                    after: self.config.retransmit_interval,
                    timer: ClientTimer::Retransmit { msg },
                });
            }
            ClientTimer::Timeout { msg } => {
                let Some((current, server, election)) = self.current_msg() else {
                    return;
                };
                if current != msg {
                    return;
                }
                let p = self.pending.as_mut().unwrap();
                let instance = p.instance;
                let mutation = p.request.is_mutation();
                self.router(instance).on_timeout(server);
                if !election && mutation {
                    // The server may have applied it and lost the reply.
                    self.finish(now, Err(SubmitError::Indeterminate), None);
                } else {
                    self.step(now);
                }
            }
            ClientTimer::Resume { op } => {
                if self
                    .pending
                    .as_ref()
                    .is_some_and(|p| p.op == op && matches!(p.attempt, Attempt::Waiting))
                {
                    self.step(now);
                }
            }
        }
    }

    pub fn on_message(&mut self, now: SimTime, envelope: Envelope) {
        match envelope.payload {
            Payload::DescriptorUpdate { shard, descriptor } => {
                self.learn_descriptor(shard, &descriptor);
                return;
            }
            Payload::ClientResponse(_) | Payload::ElectionResult { .. } => {}
            _ => return,
        }
        let Some((current, server, _)) = self.current_msg() else {
            return;
        };
        if envelope.msg_id != current || envelope.from.server() != Some(server) {
            return;
        }
        let instance = self.pending.as_ref().unwrap().instance;
        match envelope.payload {
            Payload::ElectionResult { won } => {
                self.router(instance).on_election_result(server, won);
                self.step(now);
            }
            Payload::ClientResponse(response) => self.on_response(now, server, instance, response),
            _ => unreachable!(),
        }
    }

    fn on_response(&mut self, now: SimTime, server: ServerId, instance: InstanceId, response: KvResponse) {
        match response {
            KvResponse::NotALeader {
                hint,
                maybe_applied,
            } => {
                self.router(instance).on_not_leader(server, hint);
                if maybe_applied {
                    self.finish(now, Err(SubmitError::Indeterminate), Some(server));
                } else {
                    self.step(now);
                }
            }
            KvResponse::ReconfigRedirect {
                successor,
                maybe_applied,
            } => {
                if let Some(d) = successor.as_ref() {
                    let shards: Vec<u16> = self.shards.shards_of(instance);
                    for s in shards {
                        self.learn_descriptor(s, d);
                    }
                }
                if maybe_applied {
                    self.finish(now, Err(SubmitError::Indeterminate), Some(server));
                    return;
                }
                let request = self.pending.as_ref().unwrap().request.clone();
                let target = self.instance_for(&request);
                self.pending.as_mut().unwrap().instance = target;
                self.step(now);
            }
            other => {
                self.router(instance).on_success(server);
                self.finish(now, Ok(other), Some(server));
            }
        }
    }
}

/// Convenience for building keys and values from strings in tests and tools.
pub fn bytes(s: &str) -> Bytes {
    Bytes::copy_from_slice(s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn router() -> Router {
        Router::new(
            vec![ServerId(0), ServerId(1), ServerId(2)],
            SimTime::from_millis(500),
        )
    }

    #[test]
    fn stable_leader_is_one_hop() {
        let mut r = router();
        r.on_success(ServerId(1));
        assert_eq!(r.next_step(SimTime::ZERO), RouteStep::Send(ServerId(1)));
    }

    #[test]
    fn crashed_leader_cycle_then_election_on_responsive_server() {
        let mut r = router();
        r.on_success(ServerId(0));
        let t = SimTime::from_millis(1);
        r.on_timeout(ServerId(0));
        assert_eq!(r.next_step(t), RouteStep::Send(ServerId(1)));
        // hint points at the dead leader, which is suspected
        r.on_not_leader(ServerId(1), Some(ServerId(0)));
        assert_eq!(r.next_step(t), RouteStep::Send(ServerId(2)));
        r.on_not_leader(ServerId(2), Some(ServerId(0)));
        assert_eq!(r.next_step(t), RouteStep::TriggerElection(ServerId(2)));
        r.on_election_result(ServerId(2), true);
        assert_eq!(r.next_step(t), RouteStep::Send(ServerId(2)));
    }

    #[test]
    fn follows_fresh_hint() {
        let mut r = router();
        r.on_not_leader(ServerId(0), Some(ServerId(2)));
        assert_eq!(r.next_step(SimTime::ZERO), RouteStep::Send(ServerId(2)));
    }

    #[test]
    fn election_triggers_rate_limited() {
        let mut r = router();
        let mut triggers = Vec::new();
        // a server that never leads: every request is refused
        let mut now = SimTime::ZERO;
        while now < SimTime::from_secs(3) {
            match r.next_step(now) {
                RouteStep::Send(s) => r.on_not_leader(s, None),
                RouteStep::TriggerElection(s) => {
                    triggers.push(now);
                    r.on_election_result(s, false);
                }
                RouteStep::Wait(at) => now = at,
            }
            now += SimTime::from_millis(1);
        }
        for w in triggers.windows(2) {
            assert!(w[1] - w[0] >= SimTime::from_millis(500));
        }
        for sec in 0..3u64 {
            let lo = SimTime::from_secs(sec);
            let hi = SimTime::from_secs(sec + 1);
            let n = triggers.iter().filter(|t| **t >= lo && **t < hi).count();
            assert!(n <= 2, "{n} triggers in second {sec}");
        }
        assert!(triggers.len() >= 5);
    }
}
