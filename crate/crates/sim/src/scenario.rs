//! TOML scenario files: cluster shape, network, workload and a fault
//! timeline, executed as one seeded simulation per sweep point.
//!
//! ```toml
//! seed = 7
//! duration_secs = 10
//!
//! [cluster]
//! servers = 3
//! buckets = 64
//!
//! [network]
//! drop_rate = 0.01
//!
//! [workload]
//! clients = 64
//! keys = 1024
//! mix = { get = 0.5, set = 0.5, delete = 0.0, cas = 0.0 }
//!
//! [[faults]]
//! at_ms = 5000
//! kind = "kill_leader"
//! ```

use std::fmt;

use bizur::client::ClientConfig;
use bizur::node::NodeConfig;
use bizur::reconfig::{InstanceDescriptor, ShardMap};
use bizur::{InstanceId, ServerId, SimTime};
use serde::Deserialize;

use crate::checker::{self, CheckError, Verdict, DEFAULT_BUDGET};
use crate::history::History;
use crate::metrics::{self, Row, Sample, Summary};
use crate::net::{CrashMode, Fault, LeaderConflict, Sim, SimConfig};
use crate::workload::{generate_workload, KeyDistribution, OpMix, WorkloadParams};

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    pub duration_secs: f64,
    #[serde(default)]
    pub cluster: Cluster,
    #[serde(default)]
    pub network: Network,
    #[serde(default)]
    pub workload: Workload,
    #[serde(default)]
    pub faults: Vec<FaultEntry>,
    #[serde(default)]
    pub sweep: Option<Sweep>,
    #[serde(default)]
    pub check: Check,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Cluster {
    pub servers: u32,
    /// Number of instances; the 256 shards are dealt to them round robin.
    pub shards: u32,
    /// Members per instance, placed on consecutive servers. Defaults to all.
    pub replicas: Option<u32>,
    pub buckets: u32,
    pub persist: bool,
    pub background_recovery: bool,
    pub detection_timeout_ms: f64,
    /// Mutant that never writes recovered buckets back.
    pub skip_recovery_writeback: bool,
}

impl Default for Cluster {
    fn default() -> Self {
        Cluster {
            servers: 3,
            shards: 1,
            replicas: None,
            buckets: 64,
            persist: false,
            background_recovery: true,
            detection_timeout_ms: 100.0,
            skip_recovery_writeback: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Network {
    pub latency_min_ms: f64,
    pub latency_max_ms: f64,
    pub drop_rate: f64,
    pub chaos: bool,
    pub chaos_max_delay_ms: f64,
}

impl Default for Network {
    fn default() -> Self {
        Network {
            latency_min_ms: 0.5,
            latency_max_ms: 2.0,
            drop_rate: 0.0,
            chaos: false,
            chaos_max_delay_ms: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Workload {
    pub clients: u32,
    pub keys: u32,
    pub disjoint_keys: bool,
    pub mix: OpMix,
    pub distribution: KeyDistribution,
    /// Client patience per server. Defaults to the detection timeout.
    pub request_timeout_ms: Option<f64>,
}

impl Default for Workload {
    fn default() -> Self {
        Workload {
            clients: 8,
            keys: 64,
            disjoint_keys: false,
            mix: OpMix::default(),
            distribution: KeyDistribution::Uniform,
            request_timeout_ms: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    Crash,
    KillLeader,
    Partition,
    Heal,
    DropRate,
    Election,
    Reconfigure,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultEntry {
    pub at_ms: f64,
    pub kind: FaultKind,
    pub server: Option<u32>,
    /// Selects the instance serving this shard; shard 0 when absent.
    pub shard: Option<u16>,
    pub recover_after_ms: Option<f64>,
    pub groups: Option<Vec<Vec<u32>>>,
    pub rate: Option<f64>,
    pub members: Option<Vec<u32>>,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub keys: Option<Vec<u32>>,
    pub drop_rate: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Check {
    pub linearizability: bool,
    pub budget: u64,
}

impl Default for Check {
    fn default() -> Self {
        Check {
            linearizability: false,
            budget: DEFAULT_BUDGET,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(l) = self.line {
            write!(f, "line {l}: ")?;
        }
        if !self.field.is_empty() {
            write!(f, "{}: ", self.field)?;
        }
        f.write_str(&self.message)
    }
}

impl std::error::Error for ConfigError {}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError {
        line: None,
        field: field.into(),
        message: message.into(),
    }
}

/// 1-based line of `field` ("section.key" or "key") in `src`, if it appears.
fn locate(src: &str, field: &str) -> Option<usize> {
    let (section, key) = match field.rsplit_once('.') {
        Some((s, k)) => (s.split('[').next().unwrap_or(s), k),
        None => ("", field),
    };
    let key = key.split('[').next().unwrap_or(key);
    let mut current = String::new();
    for (i, line) in src.lines().enumerate() {
        let t = line.trim();
        if let Some(h) = t.strip_prefix('[') {
            current = h.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            continue;
        }
        let matches_key = t
            .split_once('=')
            .is_some_and(|(k, _)| k.trim() == key);
        if matches_key && current == section {
            return Some(i + 1);
        }
    }
    None
}

fn line_of_offset(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

impl Scenario {
    pub fn from_toml(src: &str) -> Result<Scenario, ConfigError> {
        let scenario: Scenario = toml::from_str(src).map_err(|e| ConfigError {
            line: e.span().map(|s| line_of_offset(src, s.start)),
            field: String::new(),
            message: e.message().trim().to_string(),
        })?;
        scenario.validate().map_err(|mut e| {
            e.line = locate(src, &e.field);
            e
        })?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.duration_secs > 0.0 && self.duration_secs.is_finite()) {
            return Err(invalid("duration_secs", "must be positive"));
        }
        let c = &self.cluster;
        if c.servers == 0 {
            return Err(invalid("cluster.servers", "must be at least 1"));
        }
        if c.shards == 0 || c.shards > bizur::reconfig::NUM_SHARDS {
            return Err(invalid("cluster.shards", "must be between 1 and 256"));
        }
        if c.replicas.is_some_and(|r| r == 0 || r > c.servers) {
            return Err(invalid("cluster.replicas", "must be between 1 and servers"));
        }
        if c.buckets == 0 {
            return Err(invalid("cluster.buckets", "must be at least 1"));
        }
        if c.detection_timeout_ms <= 0.0 {
            return Err(invalid("cluster.detection_timeout_ms", "must be positive"));
        }
        let n = &self.network;
        if !(0.0..=1.0).contains(&n.drop_rate) {
            return Err(invalid("network.drop_rate", "must be within [0, 1]"));
        }
        if n.latency_min_ms < 0.0 || n.latency_min_ms > n.latency_max_ms {
            return Err(invalid("network.latency_min_ms", "must be within [0, latency_max_ms]"));
        }
        self.workload_params()
            .validate()
            .map_err(|m| invalid("workload.clients", m))?;
        if self.workload.request_timeout_ms.is_some_and(|t| t <= 0.0) {
            return Err(invalid("workload.request_timeout_ms", "must be positive"));
        }
        for (i, f) in self.faults.iter().enumerate() {
            self.validate_fault(f).map_err(|(k, m)| invalid(format!("faults[{i}].{k}"), m))?;
        }
        if let Some(s) = &self.sweep {
            if s.keys.as_ref().is_some_and(|k| k.is_empty() || k.contains(&0)) {
                return Err(invalid("sweep.keys", "must list positive key counts"));
            }
            if s.drop_rate
                .as_ref()
                .is_some_and(|d| d.is_empty() || d.iter().any(|r| !(0.0..=1.0).contains(r)))
            {
                return Err(invalid("sweep.drop_rate", "must list rates within [0, 1]"));
            }
        }
        Ok(())
    }

    fn validate_fault(&self, f: &FaultEntry) -> Result<(), (&'static str, String)> {
        let servers = self.cluster.servers;
        let server_ok = |s: u32| {
            if s < servers {
                Ok(())
            } else {
                Err(("server", format!("server {s} does not exist")))
            }
        };
        if !(f.at_ms >= 0.0 && f.at_ms.is_finite()) {
            return Err(("at_ms", "must be non-negative".into()));
        }
        if f.shard.is_some_and(|s| u32::from(s) >= bizur::reconfig::NUM_SHARDS) {
            return Err(("shard", "must be below 256".into()));
        }
        if f.recover_after_ms.is_some() && !self.cluster.persist {
            return Err(("recover_after_ms", "crash-recover needs cluster.persist = true".into()));
        }
        match f.kind {
            FaultKind::Crash => server_ok(f.server.ok_or(("server", "required for crash".to_string()))?),
            FaultKind::Election => server_ok(f.server.ok_or(("server", "required for election".to_string()))?),
            FaultKind::Partition => {
                let groups = f.groups.as_ref().ok_or(("groups", "required for partition".to_string()))?;
                groups.iter().flatten().try_for_each(|&s| server_ok(s).map_err(|(_, m)| ("groups", m)))
            }
            FaultKind::DropRate => match f.rate {
                Some(r) if (0.0..=1.0).contains(&r) => Ok(()),
                _ => Err(("rate", "required, within [0, 1]".into())),
            },
            FaultKind::Reconfigure => {
                let m = f.members.as_ref().ok_or(("members", "required for reconfigure".to_string()))?;
                if m.is_empty() {
                    return Err(("members", "must not be empty".into()));
                }
                m.iter().try_for_each(|&s| server_ok(s).map_err(|(_, m)| ("members", m)))
            }
            FaultKind::KillLeader | FaultKind::Heal => Ok(()),
        }
    }

    pub fn duration(&self) -> SimTime {
        SimTime::from_secs_f64(self.duration_secs)
    }

    pub fn workload_params(&self) -> WorkloadParams {
        let w = &self.workload;
        WorkloadParams {
            clients: w.clients,
            keys: w.keys,
            mix: w.mix.clone(),
            distribution: w.distribution,
            disjoint_keys: w.disjoint_keys,
        }
    }

    pub fn sim_config(&self, trace: bool) -> SimConfig {
        let c = &self.cluster;
        let n = &self.network;
        let detection = SimTime::from_millis_f64(c.detection_timeout_ms);
        SimConfig {
            seed: self.seed,
            latency_min: SimTime::from_millis_f64(n.latency_min_ms),
            latency_max: SimTime::from_millis_f64(n.latency_max_ms),
            drop_rate: n.drop_rate,
            trace,
            chaos: n.chaos,
            chaos_max_delay: SimTime::from_millis_f64(n.chaos_max_delay_ms),
            node: NodeConfig {
                num_buckets: c.buckets,
                detection_timeout: detection,
                background_recovery: c.background_recovery,
                persist: c.persist,
                chaos_points: n.chaos,
                skip_recovery_writeback: c.skip_recovery_writeback,
                ..NodeConfig::default()
            },
            client: ClientConfig {
                request_timeout: self.workload.request_timeout_ms.map_or(detection, SimTime::from_millis_f64),
                ..ClientConfig::default()
            },
        }
    }

    pub fn shard_map(&self) -> ShardMap {
        let c = &self.cluster;
        let replicas = c.replicas.unwrap_or(c.servers);
        let descriptors = (0..c.shards)
            .map(|i| {
                let members = (0..replicas).map(|j| ServerId((i + j) % c.servers)).collect();
                InstanceDescriptor::new(InstanceId(u64::from(i) + 1), members)
            })
            .collect();
        ShardMap::round_robin(descriptors, c.buckets)
    }

    /// One scenario per sweep point with a label, or just this one.
    pub fn points(&self) -> Vec<(String, Scenario)> {
        let Some(sweep) = &self.sweep else {
            return vec![(String::new(), self.clone())];
        };
        let keys: Vec<Option<u32>> = match &sweep.keys {
            Some(k) => k.iter().copied().map(Some).collect(),
            None => vec![None],
        };
        let drops: Vec<Option<f64>> = match &sweep.drop_rate {
            Some(d) => d.iter().copied().map(Some).collect(),
            None => vec![None],
        };
        let mut out = Vec::new();
        for k in &keys {
            for d in &drops {
                let mut s = self.clone();
                s.sweep = None;
                let mut label = Vec::new();
                if let Some(k) = k {
                    s.workload.keys = *k;
                    label.push(format!("keys{k}"));
                }
                if let Some(d) = d {
                    s.network.drop_rate = *d;
                    label.push(format!("drop{d}"));
                }
                out.push((label.join("-"), s));
            }
        }
        out
    }

    /// The simulation at time zero: leaders requested, clients and faults scheduled.
    pub fn build(&self, trace: bool) -> Result<Sim, ConfigError> {
        let map = self.shard_map();
        let mut sim = Sim::new(self.sim_config(trace), map.clone()).map_err(|e| invalid("", e.to_string()))?;
        for d in map.instances() {
            let first = d.members[(d.instance_id.0 as usize - 1) % d.members.len()];
            sim.start_election(d.instance_id, first);
        }
        let until = self.duration();
        for program in generate_workload(self.seed, &self.workload_params()) {
            sim.add_program_client(program, until);
        }
        for f in &self.faults {
            let instance = map.descriptor_for_shard(f.shard.unwrap_or(0)).instance_id;
            let mode = match f.recover_after_ms {
                Some(ms) => CrashMode::RecoverAfter(SimTime::from_millis_f64(ms)),
                None => CrashMode::Stop,
            };
            let fault = match f.kind {
                FaultKind::Crash => Fault::Crash { server: ServerId(f.server.unwrap_or(0)), mode },
                FaultKind::KillLeader => Fault::KillLeader { instance: Some(instance), mode },
                FaultKind::Partition => Fault::Partition(
                    f.groups
                        .iter()
                        .flatten()
                        .map(|g| g.iter().copied().map(ServerId).collect())
                        .collect(),
                ),
                FaultKind::Heal => Fault::Heal,
                FaultKind::DropRate => Fault::DropRate(f.rate.unwrap_or(0.0)),
                FaultKind::Election => Fault::Election { instance, server: ServerId(f.server.unwrap_or(0)) },
                FaultKind::Reconfigure => Fault::Reconfigure {
                    instance,
                    members: f.members.iter().flatten().copied().map(ServerId).collect(),
                },
            };
            sim.schedule_fault(SimTime::from_millis_f64(f.at_ms), fault);
        }
        Ok(sim)
    }

    /// Runs the scenario (ignoring any sweep) to its duration, lets in-flight
    /// requests settle, and collects metrics and checks.
    pub fn execute(&self, trace: bool) -> Result<RunOutput, ConfigError> {
        self.validate()?;
        let mut sim = self.build(trace)?;
        let duration = self.duration();
        sim.run_until(duration);
        sim.run_until_pred(SimTime::from_secs(5), Sim::all_clients_idle);
        let rows = metrics::per_second(sim.samples(), duration);
        let summary = metrics::summarize(sim.samples(), SimTime::ZERO, duration);
        let verdict = self
            .check
            .linearizability
            .then(|| checker::check_with_budget(sim.history(), self.check.budget));
        let mut problems = Vec::new();
        for c in sim.leader_conflicts() {
            problems.push(format!(
                "two leaders for election {} of instance {}: {} and {}",
                c.elect_id, c.instance, c.first, c.second
            ));
        }
        for e in sim.reconfig_errors() {
            problems.push(format!("reconfiguration failed: {e}"));
        }
        match &verdict {
            Some(Ok(Verdict::Violation(v))) => {
                problems.push(format!("linearizability violation on key {}", hex::encode(&v.key)))
            }
            Some(Err(e)) => problems.push(e.to_string()),
            _ => {}
        }
        Ok(RunOutput {
            csv: metrics::to_csv(&rows),
            rows,
            summary,
            trace: sim.trace().to_string(),
            history: sim.history().clone(),
            samples: sim.samples().to_vec(),
            verdict,
            leader_conflicts: sim.leader_conflicts().to_vec(),
            problems,
            events: sim.events_executed(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub rows: Vec<Row>,
    pub summary: Summary,
    pub csv: String,
    pub trace: String,
    pub history: History,
    pub samples: Vec<Sample>,
    pub verdict: Option<Result<Verdict, CheckError>>,
    pub leader_conflicts: Vec<LeaderConflict>,
    /// Invariant breaches; empty when the run passed.
    pub problems: Vec<String>,
    pub events: u64,
}

impl RunOutput {
    pub fn passed(&self) -> bool {
        self.problems.is_empty()
    }
}

pub const SUMMARY_HEADER: &str = "point,keys,drop_rate,ops_per_sec,latency_mean_ms,latency_p99_ms";

pub fn summary_row(label: &str, scenario: &Scenario, s: &Summary) -> String {
    format!(
        "{},{},{},{:.3},{:.3},{:.3}",
        label,
        scenario.workload.keys,
        scenario.network.drop_rate,
        s.ops_per_sec,
        s.latency_mean_ms,
        s.latency_p99_ms
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"
seed = 3
duration_secs = 1

[cluster]
servers = 3
buckets = 16

[workload]
clients = 4
keys = 16

[[faults]]
at_ms = 400
kind = "kill_leader"
"#;

    #[test]
    fn parses_with_defaults() {
        let s = Scenario::from_toml(BASIC).unwrap();
        assert_eq!(s.cluster.shards, 1);
        assert_eq!(s.network.latency_max_ms, 2.0);
        assert_eq!(s.workload.mix, OpMix::default());
        assert_eq!(s.faults[0].kind, FaultKind::KillLeader);
        assert_eq!(s.points().len(), 1);
    }

    #[test]
    fn unknown_field_reports_line() {
        let src = "duration_secs = 1\n[cluster]\nservers = 3\nserverz = 4\n";
        let e = Scenario::from_toml(src).unwrap_err();
        assert_eq!(e.line, Some(4));
        assert!(e.message.contains("serverz"), "{e}");
    }

    #[test]
    fn invalid_value_reports_field_and_line() {
        let src = "duration_secs = 1\n\n[network]\ndrop_rate = 1.5\n";
        let e = Scenario::from_toml(src).unwrap_err();
        assert_eq!(e.field, "network.drop_rate");
        assert_eq!(e.line, Some(4));
        assert_eq!(e.to_string(), "line 4: network.drop_rate: must be within [0, 1]");
    }

    #[test]
    fn recover_needs_persistence() {
        let src = "duration_secs = 1\n[[faults]]\nat_ms = 5\nkind = \"crash\"\nserver = 0\nrecover_after_ms = 10\n";
        let e = Scenario::from_toml(src).unwrap_err();
        assert_eq!(e.field, "faults[0].recover_after_ms");
        assert_eq!(e.line, Some(6));
    }

    #[test]
    fn sweep_points() {
        let src = "duration_secs = 1\n[sweep]\nkeys = [4, 64]\ndrop_rate = [0.0, 0.05]\n";
        let s = Scenario::from_toml(src).unwrap();
        let labels: Vec<String> = s.points().into_iter().map(|(l, _)| l).collect();
        assert_eq!(labels, ["keys4-drop0", "keys4-drop0.05", "keys64-drop0", "keys64-drop0.05"]);
    }

    #[test]
    fn execute_is_deterministic_and_clean() {
        let s = Scenario::from_toml(BASIC).unwrap();
        let a = s.execute(true).unwrap();
        let b = s.execute(true).unwrap();
        assert!(a.passed(), "{:?}", a.problems);
        assert_eq!(a.csv, b.csv);
        assert_eq!(a.trace, b.trace);
        assert!(a.summary.ops > 100);
    }

    #[test]
    fn shards_spread_over_servers() {
        let mut s = Scenario::from_toml(BASIC).unwrap();
        s.cluster.servers = 5;
        s.cluster.shards = 4;
        s.cluster.replicas = Some(3);
        let map = s.shard_map();
        let inst: Vec<_> = map.instances().map(|d| d.members.clone()).collect();
        assert_eq!(inst.len(), 4);
        assert_eq!(inst[1], vec![ServerId(1), ServerId(2), ServerId(3)]);
        assert_eq!(inst[3], vec![ServerId(3), ServerId(4), ServerId(0)]);
    }
}
