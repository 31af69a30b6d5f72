//! Seeded experiment runs shared by the acceptance tests and the CLI.

use std::collections::{BTreeMap, BTreeSet};

use bizur::client::bytes;
use bizur::node::NodeConfig;
use bizur::reconfig::Phase;
use bizur::{hash_key, InstanceId, KvRequest, KvResponse, ServerId, SimTime};
use bytes::Bytes;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checker::{self, step, CheckError, Verdict};
use crate::history::{History, Outcome};
use crate::metrics::{self, percentile, Row, Sample};
use crate::net::{CrashMode, DelayRule, Fault, LeaderConflict, Sim, SimConfig};
use crate::scenario::{FaultEntry, FaultKind, Scenario};
use crate::workload::{generate_workload, key_name, ClientProgram, WorkloadParams};

fn params_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// ----------------------------------------------------------------------
// Election safety

#[derive(Clone, Debug)]
pub struct SafetyOutcome {
    pub servers: u32,
    pub drop_rate: f64,
    /// (instance, election) pairs that produced a leader.
    pub elections: usize,
    pub conflicts: Vec<LeaderConflict>,
}

/// A short run on 3 or 5 persistent servers with loss, partitions,
/// crash-recover and frequent election requests at random servers.
pub fn election_safety_run(seed: u64) -> SafetyOutcome {
    let mut rng = params_rng(seed, 101);
    let servers = if seed.is_multiple_of(2) { 3 } else { 5 };
    let drop_rate = rng.random_range(0.0..=0.2);
    let config = SimConfig {
        seed,
        drop_rate,
        node: NodeConfig {
            persist: true,
            ..NodeConfig::default()
        },
        ..SimConfig::default()
    };
    let mut sim = Sim::single(config, servers, 4).expect("valid config");
    let horizon = SimTime::from_millis(600);
    let params = WorkloadParams {
        clients: 2,
        keys: 4,
        ..WorkloadParams::default()
    };
    for program in generate_workload(seed, &params) {
        sim.add_program_client(program, horizon);
    }
    let instance = InstanceId(1);
    let ids: Vec<ServerId> = (0..servers).map(ServerId).collect();
    let mut t = SimTime::ZERO;
    loop {
        t += SimTime::from_millis(rng.random_range(2..40));
        if t >= horizon {
            break;
        }
        let server = ids[rng.random_range(0..ids.len())];
        let recover = CrashMode::RecoverAfter(SimTime::from_millis(rng.random_range(5..150)));
        let fault = match rng.random_range(0..100) {
            0..45 => Fault::Election { instance, server },
            45..60 => {
                let mut shuffled = ids.clone();
                shuffled.shuffle(&mut rng);
                let cut = rng.random_range(1..shuffled.len());
                let (a, b) = shuffled.split_at(cut);
                Fault::Partition(vec![a.to_vec(), b.to_vec()])
            }
            60..72 => Fault::Heal,
            72..90 => Fault::Crash { server, mode: recover },
            _ => Fault::KillLeader { instance: Some(instance), mode: recover },
        };
        sim.schedule_fault(t, fault);
    }
    sim.run_until(horizon + SimTime::from_millis(300));
    SafetyOutcome {
        servers,
        drop_rate,
        elections: sim.elections_won(),
        conflicts: sim.leader_conflicts().to_vec(),
    }
}

// ----------------------------------------------------------------------
// Linearizability

#[derive(Clone, Debug, PartialEq)]
pub struct LinParams {
    pub seed: u64,
    pub servers: u32,
    pub clients: u32,
    pub keys: u32,
    pub drop_rate: f64,
    pub duration: SimTime,
    pub kill_at: SimTime,
    pub chaos: bool,
    /// Run the node variant that skips the recovery write-back.
    pub mutant: bool,
    /// Extra election requests at random servers every 20-120ms.
    pub election_churn: bool,
}

impl LinParams {
    /// 3 or 5 servers by parity, 8 clients, 1 to 64 keys, 5% loss and one
    /// leader kill; chaos delays on every fourth seed.
    pub fn for_seed(seed: u64) -> Self {
        let mut rng = params_rng(seed, 102);
        LinParams {
            seed,
            servers: if seed.is_multiple_of(2) { 3 } else { 5 },
            clients: 8,
            keys: 1 + (seed % 64) as u32,
            drop_rate: 0.05,
            duration: SimTime::from_millis(1000),
            kill_at: SimTime::from_millis(rng.random_range(200..800)),
            chaos: seed % 4 == 1,
            mutant: false,
            election_churn: false,
        }
    }

    /// The same run against the mutant node, with election churn so that
    /// recoveries happen often enough to expose it.
    pub fn mutant_for_seed(seed: u64) -> Self {
        LinParams {
            mutant: true,
            election_churn: true,
            ..LinParams::for_seed(seed)
        }
    }

    pub fn scenario(&self) -> Scenario {
        let mut s = Scenario {
            seed: self.seed,
            duration_secs: self.duration.as_secs_f64(),
            cluster: Default::default(),
            network: Default::default(),
            workload: Default::default(),
            faults: Vec::new(),
            sweep: None,
            check: Default::default(),
        };
        s.cluster.servers = self.servers;
        s.cluster.buckets = 16;
        s.cluster.skip_recovery_writeback = self.mutant;
        s.network.drop_rate = self.drop_rate;
        s.network.chaos = self.chaos;
        s.workload.clients = self.clients;
        s.workload.keys = self.keys;
        s.check.linearizability = true;
        s.faults.push(fault(self.kill_at, FaultKind::KillLeader));
        if self.election_churn {
            let mut rng = params_rng(self.seed, 103);
            let mut t = SimTime::ZERO;
            loop {
                t += SimTime::from_millis(rng.random_range(20..120));
                if t >= self.duration {
                    break;
                }
                let mut f = fault(t, FaultKind::Election);
                f.server = Some(rng.random_range(0..self.servers));
                s.faults.push(f);
            }
        }
        s
    }
}

fn fault(at: SimTime, kind: FaultKind) -> FaultEntry {
    FaultEntry {
        at_ms: at.as_millis_f64(),
        kind,
        server: None,
        shard: None,
        recover_after_ms: None,
        groups: None,
        rate: None,
        members: None,
    }
}

#[derive(Clone, Debug)]
pub struct LinOutcome {
    pub verdict: Result<Verdict, CheckError>,
    pub history: History,
    /// Operations with a definite result.
    pub acknowledged: usize,
    pub leader_conflicts: usize,
}

impl LinOutcome {
    pub fn is_violation(&self) -> bool {
        matches!(self.verdict, Ok(Verdict::Violation(_)))
    }
}

pub fn linearizability_run(params: &LinParams) -> LinOutcome {
    let out = params.scenario().execute(false).expect("generated scenario is valid");
    let acknowledged = out
        .history
        .ops()
        .iter()
        .filter(|o| !o.outcome.is_uncertain() && o.outcome != Outcome::Failed)
        .count();
    LinOutcome {
        verdict: out.verdict.expect("check enabled"),
        history: out.history,
        acknowledged,
        leader_conflicts: out.leader_conflicts.len(),
    }
}

// ----------------------------------------------------------------------
// Leader failure

#[derive(Clone, Debug)]
pub struct LeaderKillOutcome {
    pub old_leader: Option<ServerId>,
    /// From the kill to the first acknowledged operation served by another
    /// server.
    pub first_ack_after: Option<SimTime>,
    /// Mean ops per second over whole seconds before the kill, skipping the
    /// first.
    pub pre_rate: f64,
    /// Ops completed in `[kill + 1s, kill + 2s)`.
    pub post_rate: f64,
    pub rows: Vec<Row>,
    pub leader_conflicts: usize,
}

/// Kills the leader of a 3-server cluster at `kill_secs` under a
/// closed-loop load, observing until `end_secs`.
pub fn leader_kill_run(seed: u64, clients: u32, keys: u32, kill_secs: u64, end_secs: u64) -> LeaderKillOutcome {
    let mut s = base_scenario(seed, end_secs as f64);
    s.workload.clients = clients;
    s.workload.keys = keys;
    let mut sim = s.build(false).expect("valid scenario");
    let kill_at = SimTime::from_secs(kill_secs);
    sim.run_until(kill_at);
    let old_leader = sim.kill_leader(InstanceId(1), CrashMode::Stop);
    let end = SimTime::from_secs(end_secs);
    sim.run_until(end);
    let first_ack_after = sim
        .samples()
        .iter()
        .filter(|x| x.completed_at >= kill_at && x.server.is_some() && x.server != old_leader)
        .map(|x| x.completed_at - kill_at)
        .min();
    let rows = metrics::per_second(sim.samples(), end);
    let pre: Vec<u64> = rows[1..kill_secs as usize].iter().map(|r| r.ops_completed).collect();
    let pre_rate = pre.iter().sum::<u64>() as f64 / pre.len().max(1) as f64;
    let post_rate = rows.get(kill_secs as usize + 1).map_or(0.0, |r| r.ops_completed as f64);
    LeaderKillOutcome {
        old_leader,
        first_ack_after,
        pre_rate,
        post_rate,
        rows,
        leader_conflicts: sim.leader_conflicts().len(),
    }
}

/// 3 servers, 64 buckets, default network, no checking.
pub fn base_scenario(seed: u64, duration_secs: f64) -> Scenario {
    Scenario {
        seed,
        duration_secs,
        cluster: Default::default(),
        network: Default::default(),
        workload: Default::default(),
        faults: Vec::new(),
        sweep: None,
        check: Default::default(),
    }
}

// ----------------------------------------------------------------------
// Reconfiguration

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Overlap {
    Same,
    Overlapping,
    Disjoint,
}

impl Overlap {
    pub const ALL: [Overlap; 3] = [Overlap::Same, Overlap::Overlapping, Overlap::Disjoint];

    /// New membership for an old instance on servers 0, 1, 2.
    pub fn members(self) -> Vec<ServerId> {
        let ids: &[u32] = match self {
            Overlap::Same => &[0, 1, 2],
            Overlap::Overlapping => &[1, 2, 3],
            Overlap::Disjoint => &[3, 4, 5],
        };
        ids.iter().copied().map(ServerId).collect()
    }

    /// One server of the old and one of the new membership to crash. They
    /// coincide when the memberships do.
    pub fn victims(self) -> [ServerId; 2] {
        match self {
            Overlap::Same => [ServerId(2), ServerId(2)],
            Overlap::Overlapping => [ServerId(0), ServerId(3)],
            Overlap::Disjoint => [ServerId(1), ServerId(4)],
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReconfigOutcome {
    pub new_instance: Option<InstanceId>,
    /// The controller reached its final phase and the old instance retired.
    pub finished: bool,
    pub keys_checked: usize,
    /// Keys whose final value the acknowledged operations cannot explain.
    pub mismatches: Vec<String>,
    pub draining_client_jobs: u64,
    pub verdict: Result<Verdict, CheckError>,
    pub acknowledged: usize,
}

/// Values a key may hold after `ops`, all issued sequentially by its only
/// client, starting from absent.
pub fn possible_values(ops: &[&crate::history::Operation]) -> BTreeSet<Option<Bytes>> {
    let mut states = BTreeSet::from([None]);
    for op in ops {
        if op.outcome == Outcome::Failed {
            continue;
        }
        let next: BTreeSet<_> = states.iter().filter_map(|s| step(s, op)).collect();
        if op.outcome.is_uncertain() {
            states.extend(next);
        } else {
            states = next;
        }
    }
    states
}

/// Moves a 3-server instance to `overlap`'s membership under load from six
/// clients with disjoint key sets, crashing one member of each instance
/// during the copy.
pub fn reconfig_run(seed: u64, overlap: Overlap) -> ReconfigOutcome {
    let mut s = base_scenario(seed, 3.0);
    s.cluster.buckets = 16;
    s.workload.clients = 6;
    s.workload.keys = 48;
    s.workload.disjoint_keys = true;
    let mut sim = s.build(false).expect("valid scenario");
    sim.run_until(SimTime::from_millis(500));
    let new_instance = sim.start_reconfiguration(InstanceId(1), overlap.members()).ok();
    let [old_victim, new_victim] = overlap.victims();
    sim.schedule_fault(SimTime::from_millis(600), Fault::Crash { server: old_victim, mode: CrashMode::Stop });
    sim.schedule_fault(SimTime::from_millis(800), Fault::Crash { server: new_victim, mode: CrashMode::Stop });
    sim.run_until(s.duration());
    let done = |sim: &Sim| sim.all_clients_idle() && sim.controller_phases().iter().all(|p| *p == Phase::Done);
    let finished = sim.run_until_pred(SimTime::from_secs(10), done) && new_instance.is_some();

    let history = sim.history().clone();
    let verdict = checker::check(&history);
    let by_key = history.by_key();
    let reader = sim.add_client();
    let mut mismatches = Vec::new();
    for i in 0..s.workload.keys {
        let key = key_name(i);
        sim.submit(reader, KvRequest::Get { key: key.clone() });
        sim.run_until_pred(SimTime::from_secs(5), |sim| sim.client_idle(reader));
        let got = match sim.completions(reader).last().map(|c| c.result.clone()) {
            Some(Ok(KvResponse::Value(v))) => Some(v),
            Some(Ok(KvResponse::Absent)) => None,
            other => {
                mismatches.push(format!("{}: final read failed: {other:?}", bytes_str(&key)));
                continue;
            }
        };
        let ops = by_key.get(&key).cloned().unwrap_or_default();
        let allowed = possible_values(&ops);
        if !allowed.contains(&got) {
            mismatches.push(format!("{}: read {:?}, expected one of {:?}", bytes_str(&key), got, allowed));
        }
    }
    let acknowledged = history
        .ops()
        .iter()
        .filter(|o| !o.outcome.is_uncertain() && o.outcome != Outcome::Failed)
        .count();
    ReconfigOutcome {
        new_instance,
        finished,
        keys_checked: s.workload.keys as usize,
        mismatches,
        draining_client_jobs: sim.draining_client_jobs(),
        verdict,
        acknowledged,
    }
}

fn bytes_str(b: &Bytes) -> String {
    String::from_utf8_lossy(b).into_owned()
}

// ----------------------------------------------------------------------
// Independence and scaling

#[derive(Clone, Copy, Debug)]
pub struct BucketDelayOutcome {
    pub other_p99_ms: f64,
    pub other_ops: usize,
    pub slow_p99_ms: f64,
    pub slow_ops: usize,
}

const WARMUP: SimTime = SimTime(500_000);

/// 32 clients on one instance for 4s: 31 over 1024 keys outside bucket 0,
/// one over 16 keys inside it. With `delay`, every replication request for
/// bucket 0 takes that much longer one way. Samples invoked in the first
/// 500ms are discarded.
pub fn bucket_delay_run(seed: u64, delay: Option<SimTime>) -> BucketDelayOutcome {
    let mut s = base_scenario(seed, 4.0);
    // The slow bucket's client must not give up on the leader.
    s.workload.request_timeout_ms = Some(2000.0);
    let buckets = s.cluster.buckets;
    let (mut slow_keys, mut other_keys) = (Vec::new(), Vec::new());
    for i in 0.. {
        let k = key_name(i);
        if hash_key(&k, buckets) == 0 {
            if slow_keys.len() < 16 {
                slow_keys.push(k);
            }
        } else if other_keys.len() < 1024 {
            other_keys.push(k);
        }
        if slow_keys.len() == 16 && other_keys.len() == 1024 {
            break;
        }
    }
    let mut sim = Sim::new(s.sim_config(false), s.shard_map()).expect("valid config");
    sim.start_election(InstanceId(1), ServerId(0));
    if let Some(extra) = delay {
        sim.add_delay_rule(DelayRule {
            instance: InstanceId(1),
            bucket: 0,
            extra,
        });
    }
    let params = s.workload_params();
    let end = s.duration();
    for c in 0..31 {
        sim.add_program_client(ClientProgram::with_keys(seed, c, params.clone(), other_keys.clone()), end);
    }
    sim.add_program_client(ClientProgram::with_keys(seed, 31, params, slow_keys), end);
    sim.run_until(end);
    let (mut other, mut slow): (Vec<SimTime>, Vec<SimTime>) = (Vec::new(), Vec::new());
    for x in sim.samples().iter().filter(|x| x.invoked_at >= WARMUP) {
        if x.bucket == 0 {
            slow.push(x.latency());
        } else {
            other.push(x.latency());
        }
    }
    BucketDelayOutcome {
        other_ops: other.len(),
        other_p99_ms: percentile(&mut other, 99.0).as_millis_f64(),
        slow_ops: slow.len(),
        slow_p99_ms: percentile(&mut slow, 99.0).as_millis_f64(),
    }
}

/// Mean over instances of each instance's p99 latency, with `shards`
/// instances on the same 3 servers and 8 clients and 256 keys per instance.
pub fn per_shard_p99(seed: u64, shards: u32) -> f64 {
    let mut s = base_scenario(seed, 4.0);
    s.cluster.shards = shards;
    s.cluster.buckets = 16;
    s.workload.clients = 8 * shards;
    s.workload.keys = 256 * shards;
    let out = s.execute(false).expect("valid scenario");
    let mut per: BTreeMap<InstanceId, Vec<SimTime>> = BTreeMap::new();
    for x in out.samples.iter().filter(|x| x.invoked_at >= WARMUP) {
        per.entry(x.instance).or_default().push(x.latency());
    }
    let p99s: Vec<f64> = per
        .into_values()
        .map(|mut v| percentile(&mut v, 99.0).as_millis_f64())
        .collect();
    p99s.iter().sum::<f64>() / p99s.len().max(1) as f64
}

/// Buckets of `keys` within an instance of `buckets` buckets.
pub fn bucket_of(key: &str, buckets: u32) -> u32 {
    hash_key(&bytes(key), buckets)
}

/// Samples grouped per second of completion; handy for timelines.
pub fn ops_per_second(samples: &[Sample], duration: SimTime) -> Vec<u64> {
    metrics::per_second(samples, duration)
        .into_iter()
        .map(|r| r.ops_completed)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::history::{OpKind, Operation};
    use bizur::ClientId;

    fn op(kind: OpKind, outcome: Outcome) -> Operation {
        Operation {
            id: 0,
            client: ClientId(0),
            kind,
            invoked_at: SimTime::ZERO,
            completed_at: Some(SimTime(1)),
            outcome,
        }
    }

    #[test]
    fn oracle_tracks_uncertain_writes() {
        let k = bytes("k");
        let set = |v: &str, o| op(OpKind::Set { key: k.clone(), value: bytes(v) }, o);
        let a = set("a", Outcome::Ok);
        let b = set("b", Outcome::Indeterminate);
        let c = set("c", Outcome::Failed);
        let ops = [&a, &b, &c];
        let vals = possible_values(&ops);
        assert_eq!(vals, BTreeSet::from([Some(bytes("a")), Some(bytes("b"))]));
        let read = op(OpKind::Get { key: k.clone() }, Outcome::Value(Some(bytes("b"))));
        let ops = [&a, &b, &c, &read];
        assert_eq!(possible_values(&ops), BTreeSet::from([Some(bytes("b"))]));
    }

    #[test]
    fn lin_params_cover_the_ranges() {
        let ps: Vec<_> = (0..128).map(LinParams::for_seed).collect();
        assert!(ps.iter().any(|p| p.servers == 3) && ps.iter().any(|p| p.servers == 5));
        assert_eq!(ps.iter().map(|p| p.keys).min(), Some(1));
        assert_eq!(ps.iter().map(|p| p.keys).max(), Some(64));
        assert!(ps.iter().all(|p| p.kill_at < p.duration));
        let m = LinParams::mutant_for_seed(3).scenario();
        assert!(m.cluster.skip_recovery_writeback);
        assert!(m.faults.len() > 2);
        assert!(m.validate().is_ok());
    }

    #[test]
    fn safety_run_is_deterministic() {
        let a = election_safety_run(9);
        let b = election_safety_run(9);
        assert_eq!(a.elections, b.elections);
        assert!(a.elections > 0);
        assert!(a.conflicts.is_empty());
    }

    #[test]
    fn small_linearizability_run_is_clean() {
        let out = linearizability_run(&LinParams::for_seed(2));
        assert!(matches!(out.verdict, Ok(Verdict::Linearizable { .. })));
        assert!(out.acknowledged > 100);
    }
}
