use std::collections::VecDeque;

use super::*;
use crate::client::bytes;
use crate::hash::hash_key;
use crate::kv::KvRequest;
use crate::types::BucketVersion;

fn cfg() -> NodeConfig {
    NodeConfig {
        num_buckets: 8,
        background_recovery: false,
        ..NodeConfig::default()
    }
}

fn s(n: u32) -> ServerId {
    ServerId(n)
}

const INST: InstanceId = InstanceId(1);

fn node(id: u32, n: u32) -> Node {
    Node::new(cfg(), s(id), INST, (0..n).map(s).collect(), NodeMode::Normal)
}

fn bucket_at(index: u32, e: u64, c: u64, kv: &[(&str, &str)]) -> Bucket {
    let mut b = Bucket::empty(index);
    for (k, v) in kv {
        b.encode_set(bytes(k), bytes(v));
    }
    b.ver = BucketVersion::new(e, c);
    b
}

/// Lossless in-order network between the nodes of one instance. Messages to
/// crashed nodes vanish; client-bound messages are collected.
struct Net {
    nodes: Vec<Option<Node>>,
    queue: VecDeque<Envelope>,
    to_clients: Vec<Envelope>,
    sent: Vec<&'static str>,
    timers: Vec<(ServerId, Timer)>,
    now: SimTime,
}

impl Net {
    fn new(n: u32, config: NodeConfig) -> Self {
        let members: Vec<ServerId> = (0..n).map(s).collect();
        Net {
            nodes: (0..n)
                .map(|i| Some(Node::new(config.clone(), s(i), INST, members.clone(), NodeMode::Normal)))
                .collect(),
            queue: VecDeque::new(),
            to_clients: Vec::new(),
            sent: Vec::new(),
            timers: Vec::new(),
            now: SimTime::ZERO,
        }
    }

    fn node(&mut self, i: u32) -> &mut Node {
        self.nodes[i as usize].as_mut().unwrap()
    }

    fn collect(&mut self, i: u32) {
        let Some(n) = self.nodes[i as usize].as_mut() else {
            return;
        };
        for out in n.drain_outputs() {
            match out {
                Output::Send(env) => {
                    self.sent.push(env.payload.tag());
                    match env.to {
                        Endpoint::Server { .. } => self.queue.push_back(env),
                        _ => self.to_clients.push(env),
                    }
                }
                Output::SetTimer { timer, .. } => self.timers.push((s(i), timer)),
                _ => {}
            }
        }
    }

    fn run(&mut self) {
        for i in 0..self.nodes.len() as u32 {
            self.collect(i);
        }
        while let Some(env) = self.queue.pop_front() {
            let to = env.to.server().unwrap();
            if let Some(n) = self.nodes[to.0 as usize].as_mut() {
                n.handle(self.now, env);
                self.collect(to.0);
            }
        }
    }

    fn elect(&mut self, i: u32) {
        let now = self.now;
        self.node(i).start_election(now);
        self.run();
    }

    /// Fires every pending timer once, in the order they were set.
    fn fire_timers(&mut self) {
        self.now += SimTime::from_millis(100);
        let timers = std::mem::take(&mut self.timers);
        for (srv, t) in timers {
            let now = self.now;
            if let Some(n) = self.nodes[srv.0 as usize].as_mut() {
                n.on_timer(now, t);
                self.collect(srv.0);
            }
        }
        self.run();
    }

    fn request(&mut self, leader: u32, msg: u64, req: KvRequest) -> KvResponse {
        self.sent.clear();
        let env = Envelope {
            msg_id: MsgId(msg),
            from: Endpoint::Client(ClientId(7)),
            to: Endpoint::Server {
                server: s(leader),
                instance: INST,
            },
            payload: Payload::ClientRequest(req),
        };
        let now = self.now;
        self.node(leader).handle(now, env);
        self.run();
        for _ in 0..5 {
            if let Some(r) = self.take_response(msg) {
                return r;
            }
            self.fire_timers();
        }
        panic!("no response to {msg}");
    }

    fn take_response(&mut self, msg: u64) -> Option<KvResponse> {
        let pos = self.to_clients.iter().position(|e| e.msg_id == MsgId(msg))?;
        match self.to_clients.remove(pos).payload {
            Payload::ClientResponse(r) => Some(r),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn count(&self, tag: &str) -> usize {
        self.sent.iter().filter(|t| **t == tag).count()
    }
}

#[test]
fn vote_rules() {
    let mut n = node(0, 3);
    assert!(n.handle_please_vote(ElectId(3), s(1)));
    assert_eq!((n.voted_elect_id(), n.leader()), (ElectId(3), Some(s(1))));
    // same election, same candidate: idempotent ack
    assert!(n.handle_please_vote(ElectId(3), s(1)));
    // same election, other candidate
    assert!(!n.handle_please_vote(ElectId(3), s(2)));
    // older election
    assert!(!n.handle_please_vote(ElectId(2), s(2)));
    assert_eq!(n.leader(), Some(s(1)));
    assert!(n.handle_please_vote(ElectId(4), s(2)));
    assert_eq!(n.leader(), Some(s(2)));
}

#[test]
fn replica_write_rules() {
    let mut n = node(0, 3);
    n.handle_please_vote(ElectId(5), s(1));
    assert!(!n.handle_replica_write(&bucket_at(2, 4, 9, &[("k", "v")]), s(2)));
    assert_eq!(n.local_bucket(2).ver, BucketVersion::default());

    let b = bucket_at(2, 6, 1, &[("k", "v")]);
    assert!(n.handle_replica_write(&b, s(2)));
    assert_eq!((n.voted_elect_id(), n.leader()), (ElectId(6), Some(s(2))));
    assert_eq!(n.local_bucket(2), &b);

    // a delayed older write of the same election is acked but ignored
    assert!(n.handle_replica_write(&bucket_at(2, 6, 0, &[]), s(2)));
    assert_eq!(n.local_bucket(2), &b);
}

#[test]
fn replica_read_rules() {
    let mut n = node(0, 3);
    n.handle_please_vote(ElectId(5), s(1));
    assert_eq!(n.handle_replica_read(0, ElectId(4), true, s(2)), None);
    assert_eq!(
        n.handle_replica_read(0, ElectId(5), true, s(1)),
        Some(Some(Bucket::empty(0)))
    );
    assert_eq!(n.handle_replica_read(0, ElectId(7), false, s(2)), Some(None));
    assert_eq!((n.voted_elect_id(), n.leader()), (ElectId(7), Some(s(2))));
}

#[test]
fn newer_vote_clears_leadership() {
    let mut net = Net::new(3, cfg());
    net.elect(0);
    assert!(net.node(0).is_leader());
    assert_eq!(net.node(0).elect_id(), ElectId(1));
    net.elect(1);
    assert!(net.node(1).is_leader());
    // s0 voted for s1 when asked, so it no longer considers itself leader
    assert!(!net.node(0).is_leader());
    assert_eq!(net.node(1).elect_id(), ElectId(2));
}

#[test]
fn election_skips_past_voted_elections() {
    let mut n = node(0, 3);
    n.handle_please_vote(ElectId(9), s(1));
    n.start_election(SimTime::ZERO);
    assert_eq!(n.elect_id(), ElectId(10));
}

#[test]
fn write_stamps_next_counter() {
    let mut net = Net::new(3, cfg());
    net.elect(0);
    let key = bytes("alpha");
    let index = hash_key(&key, 8);
    let mut b = bucket_at(index, 5, 7, &[]);
    b.ver = BucketVersion::new(1, 7);
    for i in 0..3 {
        net.node(i).local[index as usize] = b.clone();
    }
    let r = net.request(
        0,
        1,
        KvRequest::Set {
            key: key.clone(),
            value: bytes("x"),
        },
    );
    assert_eq!(r, KvResponse::Ok);
    for i in 0..3 {
        assert_eq!(
            net.node(i).local_bucket(index).ver,
            BucketVersion::new(1, 8)
        );
    }
}

#[test]
fn recovery_takes_highest_version() {
    let mut net = Net::new(3, cfg());
    let key = bytes("k");
    let index = hash_key(&key, 8);
    net.node(0).local[index as usize] = bucket_at(index, 3, 7, &[("k", "a")]);
    net.node(1).local[index as usize] = bucket_at(index, 3, 9, &[("k", "b")]);
    net.node(2).local[index as usize] = bucket_at(index, 2, 4, &[("k", "c")]);
    for _ in 0..5 {
        net.elect(0);
    }
    assert_eq!(net.node(0).elect_id(), ElectId(5));
    let r = net.request(0, 1, KvRequest::Get { key: key.clone() });
    assert_eq!(r, KvResponse::Value(bytes("b")));
    for i in 0..3 {
        let b = net.node(i).local_bucket(index);
        assert_eq!(b.ver, BucketVersion::new(5, 1));
        assert_eq!(b.decode(b"k"), Some(&bytes("b")));
    }
}

#[test]
fn message_counts_per_operation() {
    let mut net = Net::new(3, cfg());
    net.elect(0);
    let key = bytes("k");
    // first access after the election: one read round, one write round
    net.request(0, 1, KvRequest::Set { key: key.clone(), value: bytes("1") });
    assert_eq!(net.count("ReplicaRead"), 2);
    assert_eq!(net.count("ReplicaWrite"), 2);
    // recovered bucket: a single write round
    net.request(0, 2, KvRequest::Set { key: key.clone(), value: bytes("2") });
    assert_eq!((net.count("ReplicaRead"), net.count("ReplicaWrite")), (0, 2));
    net.request(0, 3, KvRequest::Delete { key: key.clone() });
    assert_eq!((net.count("ReplicaRead"), net.count("ReplicaWrite")), (0, 2));
    // reads validate leadership without data
    let r = net.request(0, 4, KvRequest::Get { key: key.clone() });
    assert_eq!(r, KvResponse::Absent);
    assert_eq!(net.count("ReplicaReadCheck"), 2);
    assert_eq!(net.count("ReplicaWrite"), 0);
    assert_eq!(net.count("AckReadEmpty"), 2);
}

#[test]
fn iterate_uses_one_validation_round() {
    let mut net = Net::new(3, cfg());
    net.elect(0);
    for (i, k) in ["a", "b", "c", "d", "e"].iter().enumerate() {
        net.request(0, i as u64 + 1, KvRequest::Set { key: bytes(k), value: bytes("v") });
    }
    // recover the rest
    for b in 0..8 {
        if !net.node(0).is_recovered(b) {
            net.node(0).submit_job(Job::recover(b));
            let now = net.now;
            net.node(0).pump(now);
            net.run();
        }
    }
    let r = net.request(0, 10, KvRequest::IterateKeys);
    let expected: Vec<Bytes> = ["a", "b", "c", "d", "e"].iter().map(|k| bytes(k)).collect();
    assert_eq!(r, KvResponse::Keys(expected));
    assert_eq!(net.count("ReplicaValidate"), 2);
    assert_eq!(net.sent.len(), 4 + 1);
}

use bytes::Bytes;
use super::job::Job;

#[test]
fn non_leader_redirects_with_hint() {
    let mut net = Net::new(3, cfg());
    net.elect(1);
    let r = net.request(0, 1, KvRequest::Get { key: bytes("k") });
    assert_eq!(
        r,
        KvResponse::NotALeader {
            hint: Some(s(1)),
            maybe_applied: false
        }
    );
}

#[test]
fn duplicate_and_late_responses_are_ignored() {
    let mut net = Net::new(3, cfg());
    net.elect(0);
    net.request(0, 1, KvRequest::Set { key: bytes("k"), value: bytes("1") });
    // replay every ack of the last round
    let stale = Envelope {
        msg_id: MsgId(99_999),
        from: Endpoint::Server { server: s(1), instance: INST },
        to: Endpoint::Server { server: s(0), instance: INST },
        payload: Payload::AckWrite,
    };
    let now = net.now;
    net.node(0).handle(now, stale);
    assert!(net.node(0).drain_outputs().is_empty());
    // a client retransmission gets the cached answer without new rounds
    net.sent.clear();
    let env = Envelope {
        msg_id: MsgId(1),
        from: Endpoint::Client(ClientId(7)),
        to: Endpoint::Server { server: s(0), instance: INST },
        payload: Payload::ClientRequest(KvRequest::Set { key: bytes("k"), value: bytes("1") }),
    };
    net.node(0).handle(now, env);
    net.run();
    assert_eq!(net.sent, vec!["ClientResponse"]);
}

#[test]
fn lost_majority_fails_request() {
    let mut net = Net::new(3, cfg());
    net.elect(0);
    net.request(0, 1, KvRequest::Set { key: bytes("k"), value: bytes("1") });
    net.nodes[1] = None;
    net.nodes[2] = None;
    let r = net.request(0, 2, KvRequest::Set { key: bytes("k"), value: bytes("2") });
    assert_eq!(
        r,
        KvResponse::NotALeader {
            hint: None,
            maybe_applied: true
        }
    );
    assert!(!net.node(0).is_leader());
}

#[test]
fn minority_failure_is_tolerated() {
    let mut net = Net::new(5, cfg());
    net.elect(0);
    net.nodes[3] = None;
    net.nodes[4] = None;
    let r = net.request(0, 1, KvRequest::Set { key: bytes("k"), value: bytes("1") });
    assert_eq!(r, KvResponse::Ok);
    let r = net.request(0, 2, KvRequest::Get { key: bytes("k") });
    assert_eq!(r, KvResponse::Value(bytes("1")));
}

#[test]
fn sweep_recovers_every_bucket_then_stops() {
    let mut net = Net::new(3, NodeConfig { num_buckets: 8, ..NodeConfig::default() });
    net.elect(0);
    for _ in 0..20 {
        net.fire_timers();
    }
    assert!((0..8).all(|b| net.node(0).is_recovered(b)));
    assert_eq!(net.node(0).stats().recovery_reads, 8);
    assert!(net.timers.is_empty());
    // non-leaders never sweep
    assert_eq!(net.node(1).stats().recovery_reads, 0);
}

#[test]
fn sweep_stops_when_leadership_is_lost() {
    let mut net = Net::new(3, NodeConfig { num_buckets: 8, ..NodeConfig::default() });
    net.elect(0);
    net.fire_timers();
    net.elect(1);
    let before = net.node(0).stats().recovery_reads;
    for _ in 0..20 {
        net.fire_timers();
    }
    assert_eq!(net.node(0).stats().recovery_reads, before);
}

#[test]
fn crash_recover_keeps_votes() {
    let config = NodeConfig { persist: true, ..cfg() };
    let members: Vec<ServerId> = (0..3).map(s).collect();
    let mut n = Node::new(config.clone(), s(0), INST, members.clone(), NodeMode::Normal);
    assert!(n.handle_please_vote(ElectId(4), s(1)));
    let b = bucket_at(3, 4, 1, &[("k", "v")]);
    assert!(n.handle_replica_write(&b, s(1)));
    let store = n.into_store().unwrap();
    let mut n = Node::restore(config, s(0), INST, members, NodeMode::Normal, store, 1);
    assert_eq!(n.voted_elect_id(), ElectId(4));
    assert!(!n.handle_please_vote(ElectId(4), s(2)));
    assert_eq!(n.local_bucket(3), &b);
}

#[test]
fn skipped_writeback_leaves_replicas_stale() {
    let config = NodeConfig { skip_recovery_writeback: true, ..cfg() };
    let mut net = Net::new(3, config);
    let index = hash_key(b"k", 8);
    net.node(1).local[index as usize] = bucket_at(index, 1, 1, &[("k", "a")]);
    net.elect(0);
    let r = net.request(0, 1, KvRequest::Get { key: bytes("k") });
    assert_eq!(r, KvResponse::Value(bytes("a")));
    assert_eq!(net.count("ReplicaWrite"), 0);
    assert_eq!(net.node(2).local_bucket(index).ver, BucketVersion::default());
    // nothing was stored, so the next access recovers again
    net.request(0, 2, KvRequest::Get { key: bytes("k") });
    assert_eq!(net.count("ReplicaRead"), 2);
    assert!(!net.node(0).is_recovered(index));
}

#[test]
fn chaos_points_pause_and_resume() {
    let config = NodeConfig { chaos_points: true, ..cfg() };
    let mut net = Net::new(3, config);
    net.elect(0);
    let env = Envelope {
        msg_id: MsgId(1),
        from: Endpoint::Client(ClientId(7)),
        to: Endpoint::Server { server: s(0), instance: INST },
        payload: Payload::ClientRequest(KvRequest::Set { key: bytes("k"), value: bytes("1") }),
    };
    let mut points = Vec::new();
    net.node(0).handle(SimTime::ZERO, env);
    for _ in 0..8 {
        let outs = net.node(0).drain_outputs();
        for o in outs {
            match o {
                Output::ChaosPoint { point, token } => {
                    points.push(point);
                    net.node(0).resume_chaos(SimTime::ZERO, token);
                }
                Output::Send(e) => match e.to {
                    Endpoint::Server { .. } => net.queue.push_back(e),
                    _ => net.to_clients.push(e),
                },
                _ => {}
            }
        }
        while let Some(env) = net.queue.pop_front() {
            let to = env.to.server().unwrap().0;
            net.node(to).handle(SimTime::ZERO, env);
            if to != 0 {
                net.collect(to);
            }
        }
    }
    assert_eq!(
        points,
        vec![ChaosPoint::BeforeRecoveryWriteBack, ChaosPoint::BeforeWrite]
    );
    assert_eq!(net.take_response(1), Some(KvResponse::Ok));
}

/// Every interleaving of vote requests and replies among three servers with
/// two concurrent candidates: at most one winner per election id. Worlds are
/// rebuilt by replaying the delivery order since nodes are not cloneable.
#[test]
fn at_most_one_leader_per_election_exhaustive() {
    struct World {
        nodes: Vec<Node>,
        inflight: Vec<Envelope>,
        winners: Vec<(ElectId, ServerId)>,
    }
    fn absorb(w: &mut World, i: usize) {
        for o in w.nodes[i].drain_outputs() {
            match o {
                Output::Send(e) => w.inflight.push(e),
                Output::BecameLeader { elect_id } => w.winners.push((elect_id, s(i as u32))),
                _ => {}
            }
        }
    }
    fn build(a: usize, b: usize, preset: u64, path: &[usize]) -> World {
        let mut nodes: Vec<Node> = (0..3).map(|i| node(i, 3)).collect();
        // a prior vote for itself moves `b` to a later election id
        nodes[b].handle_please_vote(ElectId(preset), s(b as u32));
        let mut w = World {
            nodes,
            inflight: Vec::new(),
            winners: Vec::new(),
        };
        w.nodes[a].start_election(SimTime::ZERO);
        absorb(&mut w, a);
        w.nodes[b].start_election(SimTime::ZERO);
        absorb(&mut w, b);
        for &k in path {
            let env = w.inflight.remove(k);
            let to = env.to.server().unwrap().0 as usize;
            w.nodes[to].handle(SimTime::ZERO, env);
            absorb(&mut w, to);
        }
        w
    }
    fn explore(a: usize, b: usize, preset: u64, path: &mut Vec<usize>, explored: &mut u64) {
        let w = build(a, b, preset, path);
        if w.inflight.is_empty() {
            *explored += 1;
            let mut seen = std::collections::BTreeMap::new();
            for (e, srv) in &w.winners {
                if let Some(prev) = seen.insert(*e, *srv) {
                    assert_eq!(prev, *srv, "two leaders for {e:?}");
                }
            }
            return;
        }
        for k in 0..w.inflight.len() {
            path.push(k);
            explore(a, b, preset, path, explored);
            path.pop();
        }
    }
    let mut explored = 0;
    for (a, b) in [(0usize, 1usize), (1, 0), (0, 2)] {
        for preset in [0u64, 1] {
            explore(a, b, preset, &mut Vec::new(), &mut explored);
        }
    }
    assert!(explored > 1000, "explored {explored}");
}

fn trigger(net: &mut Net, at: u32, from: Endpoint, msg: u64) -> bool {
    let env = Envelope {
        msg_id: MsgId(msg),
        from,
        to: Endpoint::Server { server: s(at), instance: INST },
        payload: Payload::TriggerElection,
    };
    let now = net.now;
    net.node(at).handle(now, env);
    net.run();
    let pos = net.to_clients.iter().position(|e| e.msg_id == MsgId(msg)).unwrap();
    match net.to_clients.remove(pos).payload {
        Payload::ElectionResult { won } => won,
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn follower_keeps_a_recently_heard_leader() {
    let mut net = Net::new(3, cfg());
    net.elect(0);
    let client = Endpoint::Client(ClientId(1));
    assert!(!trigger(&mut net, 1, client, 1));
    assert!(net.node(0).is_leader());
    // an operator request always runs
    assert!(trigger(&mut net, 1, Endpoint::Controller, 2));
    assert!(net.node(1).is_leader());
    assert!(!net.node(0).is_leader() || net.node(0).elect_id() < net.node(1).elect_id());
    // silence longer than the detection timeout lets clients move leadership
    net.now += SimTime::from_millis(150);
    assert!(trigger(&mut net, 2, client, 3));
    assert_eq!(net.node(2).leader(), Some(s(2)));
}
