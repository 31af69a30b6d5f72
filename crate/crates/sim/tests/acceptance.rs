//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines always reach stdout.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use bizur::client::bytes;
use bizur::node::NodeConfig;
use bizur::{ClientId, InstanceId, KvRequest, KvResponse, ServerId, SimTime};
use bizur_sim::scenario::Scenario;
use bizur_sim::suite::{
    base_scenario, bucket_delay_run, election_safety_run, leader_kill_run, linearizability_run, per_shard_p99,
    reconfig_run, LinParams, Overlap,
};
use bizur_sim::{Sim, SimConfig, Verdict};

type Outcome = (bool, String);
type Criterion = (&'static str, fn() -> Outcome);

// One-way latency is uniform in [0.5ms, 2ms].
const RTT_MS: f64 = 2.0 * 1.25;
const DETECTION_MS: f64 = 100.0;

fn election_safety() -> Outcome {
    let start = Instant::now();
    let (mut conflicts, mut leaders, mut five) = (0, 0, 0);
    let mut max_drop: f64 = 0.0;
    for seed in 0..10_000 {
        let r = election_safety_run(seed);
        conflicts += r.conflicts.len();
        leaders += r.elections;
        five += usize::from(r.servers == 5);
        max_drop = max_drop.max(r.drop_rate);
    }
    let took = start.elapsed();
    let ok = conflicts == 0 && took < Duration::from_secs(300);
    (
        ok,
        format!(
            "10000 runs ({five} with 5 servers, drop up to {:.0}%), {leaders} leaders elected, {conflicts} conflicts, {:.1}s",
            max_drop * 100.0,
            took.as_secs_f64()
        ),
    )
}

fn linearizability() -> Outcome {
    let (mut clean, mut acked, mut failures) = (0, 0, Vec::new());
    for seed in 0..1000 {
        let r = linearizability_run(&LinParams::for_seed(seed));
        acked += r.acknowledged;
        match r.verdict {
            Ok(Verdict::Linearizable { .. }) if r.leader_conflicts == 0 => clean += 1,
            other => failures.push((seed, format!("{other:?}").chars().take(80).collect::<String>())),
        }
    }
    let caught = (0..200).find(|&seed| linearizability_run(&LinParams::mutant_for_seed(seed)).is_violation());
    let ok = clean == 1000 && caught.is_some();
    let mutant = match caught {
        Some(s) => format!("mutant caught at seed {s}"),
        None => "mutant not caught in 200 seeds".into(),
    };
    (
        ok,
        format!("{clean}/1000 linearizable ({acked} acknowledged ops), {mutant}; failures {failures:?}"),
    )
}

fn leader_failure() -> Outcome {
    let r = leader_kill_run(1, 64, 1024, 5, 25);
    let bound = DETECTION_MS + 10.0 * RTT_MS;
    let first = r.first_ack_after.map(SimTime::as_millis_f64);
    let ratio = r.post_rate / r.pre_rate;
    let ok = first.is_some_and(|f| f <= bound) && ratio >= 0.9 && r.leader_conflicts == 0;
    (
        ok,
        format!(
            "first ack on new leader {:.1}ms after kill (bound {bound:.0}ms); second after recovery at {:.1}% of pre-kill {:.0} ops/s",
            first.unwrap_or(f64::NAN),
            ratio * 100.0,
            r.pre_rate
        ),
    )
}

fn drop_robustness() -> Outcome {
    let run = |drop: f64| {
        let mut s = base_scenario(1, 10.0);
        s.workload.clients = 64;
        s.workload.keys = 16384;
        s.network.drop_rate = drop;
        s.execute(false).expect("valid scenario")
    };
    let base = run(0.0);
    let lossy = run(0.05);
    let ratio = lossy.summary.ops_per_sec / base.summary.ops_per_sec;
    let empty = lossy.rows.iter().filter(|r| r.ops_completed == 0).count();
    let ok = ratio >= 0.5 && empty == 0 && lossy.passed();
    (
        ok,
        format!(
            "5% drop at {:.1}% of baseline {:.0} ops/s, {empty} empty seconds",
            ratio * 100.0,
            base.summary.ops_per_sec
        ),
    )
}

fn quiet_sim(buckets: u32, background_recovery: bool) -> Sim {
    let config = SimConfig {
        seed: 5,
        node: NodeConfig {
            background_recovery,
            ..NodeConfig::default()
        },
        ..SimConfig::default()
    };
    let mut sim = Sim::single(config, 3, buckets).expect("valid config");
    sim.start_election(InstanceId(1), ServerId(0));
    sim.run_to_quiescence(1_000_000).expect("quiesces");
    sim
}

/// Round trips per quorum message kind for one request on a 3-server
/// instance: (read, read check, write, validate), plus the response.
fn rounds(sim: &mut Sim, client: ClientId, request: KvRequest) -> ([u64; 4], Option<KvResponse>) {
    sim.reset_counters();
    sim.submit(client, request);
    sim.run_to_quiescence(1_000_000).expect("quiesces");
    let per = |tag| sim.count(tag) / 2;
    let counts = [per("ReplicaRead"), per("ReplicaReadCheck"), per("ReplicaWrite"), per("ReplicaValidate")];
    let response = sim.completions(client).last().and_then(|c| c.result.clone().ok());
    (counts, response)
}

fn message_counts() -> Outcome {
    let mut sim = quiet_sim(64, false);
    let c = sim.add_client();
    let key = bytes("k");
    let (first, _) = rounds(&mut sim, c, KvRequest::Set { key: key.clone(), value: bytes("1") });
    let (set, _) = rounds(&mut sim, c, KvRequest::Set { key: key.clone(), value: bytes("2") });
    let (del, _) = rounds(&mut sim, c, KvRequest::Delete { key: key.clone() });
    let (get, r) = rounds(&mut sim, c, KvRequest::Get { key });
    let first_total: u64 = first.iter().sum();

    let mut swept = quiet_sim(64, true);
    let all_recovered = (0..64).all(|b| swept.node(InstanceId(1), ServerId(0)).unwrap().is_recovered(b));
    let c = swept.add_client();
    let (iter, keys) = rounds(&mut swept, c, KvRequest::IterateKeys);
    let ok = first_total <= 2
        && set == [0, 0, 1, 0]
        && del == [0, 0, 1, 0]
        && get == [0, 1, 0, 0]
        && r == Some(KvResponse::Absent)
        && all_recovered
        && iter == [0, 0, 0, 1]
        && keys == Some(KvResponse::Keys(Vec::new()));
    (
        ok,
        format!(
            "round trips [read, check, write, validate]: first access {first:?}, set {set:?}, delete {del:?}, get {get:?}, iterate over 64 buckets {iter:?}"
        ),
    )
}

fn lazy_recovery() -> Outcome {
    let mut sim = quiet_sim(64, false);
    sim.reset_counters();
    sim.run_for(SimTime::from_secs(1));
    let idle: u64 = ["ReplicaRead", "ReplicaReadCheck", "ReplicaWrite"].iter().map(|t| sim.count(t)).sum();
    let c = sim.add_client();
    let key = bytes("lazy");
    let (first, _) = rounds(&mut sim, c, KvRequest::Get { key: key.clone() });
    let (second, _) = rounds(&mut sim, c, KvRequest::Get { key });
    let leader = sim.node(InstanceId(1), ServerId(0)).unwrap();
    let recovered = (0..64).filter(|&b| leader.is_recovered(b)).count();
    let ok = idle == 0 && first == [1, 0, 1, 0] && second == [0, 1, 0, 0] && recovered == 1;
    (
        ok,
        format!(
            "idle second after election: {idle} replication messages; first get {first:?}, second get {second:?}, {recovered}/64 buckets recovered"
        ),
    )
}

fn reconfiguration() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for overlap in Overlap::ALL {
        let mut acked = 0;
        let mut bad = Vec::new();
        for seed in 1..=3 {
            let r = reconfig_run(seed, overlap);
            acked += r.acknowledged;
            let lin = matches!(r.verdict, Ok(Verdict::Linearizable { .. }));
            if !(r.finished && r.mismatches.is_empty() && r.draining_client_jobs == 0 && lin) {
                bad.push(format!(
                    "seed {seed}: finished={} mismatches={:?} draining_jobs={} linearizable={lin}",
                    r.finished, r.mismatches, r.draining_client_jobs
                ));
            }
        }
        ok &= bad.is_empty();
        parts.push(format!("{overlap:?} {acked} acked ops{}", if bad.is_empty() { String::new() } else { format!(" {bad:?}") }));
    }
    (ok, format!("{}; final state matches oracle, draining instance served 0 client ops", parts.join(", ")))
}

fn independence() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut slow: f64 = 0.0;
    for seed in 1..=3 {
        let base = bucket_delay_run(seed, None);
        let delayed = bucket_delay_run(seed, Some(SimTime::from_millis(50)));
        worst = worst.max((delayed.other_p99_ms - base.other_p99_ms).abs());
        slow = slow.max(delayed.slow_p99_ms);
    }
    let mut scaling = Vec::new();
    for k in [1, 2, 4] {
        let a = per_shard_p99(1, k);
        let b = per_shard_p99(1, 2 * k);
        scaling.push((k, a, b, (b - a).abs() / a));
    }
    let worst_scale = scaling.iter().map(|s| s.3).fold(0.0, f64::max);
    let ok = worst < 1.0 && slow > 50.0 && worst_scale < 0.05;
    let scale_text: Vec<String> = scaling
        .iter()
        .map(|(k, a, b, _)| format!("{k}->{}: {a:.2}->{b:.2}ms", 2 * k))
        .collect();
    (
        ok,
        format!(
            "other-bucket p99 moved at most {worst:.3}ms with the slow bucket at p99 {slow:.1}ms; per-shard p99 {} (max change {:.1}%)",
            scale_text.join(", "),
            worst_scale * 100.0
        ),
    )
}

fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn determinism() -> Outcome {
    let mut checked = Vec::new();
    let mut ok = true;
    for name in ["leader-kill", "reconfigure", "chaos-check", "drop-sweep"] {
        let src = std::fs::read_to_string(scenario_dir().join(format!("{name}.toml"))).expect("scenario file");
        let scenario = Scenario::from_toml(&src).expect("valid scenario");
        let (label, point) = scenario.points().pop().expect("at least one point");
        let a = point.execute(true).expect("runs");
        let b = point.execute(true).expect("runs");
        let same = a.csv == b.csv && a.trace == b.trace && !a.trace.is_empty();
        ok &= same && a.passed();
        let label = if label.is_empty() { name.to_string() } else { format!("{name}/{label}") };
        checked.push(format!("{label} ({} trace lines)", a.trace.lines().count()));
    }
    (ok, format!("identical CSV and trace on reruns of {}", checked.join(", ")))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("election safety", election_safety),
        ("linearizability", linearizability),
        ("leader failure recovery", leader_failure),
        ("packet drop robustness", drop_robustness),
        ("optimization message counts", message_counts),
        ("lazy recovery", lazy_recovery),
        ("reconfiguration correctness", reconfiguration),
        ("independence and scaling", independence),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let (ok, detail) = run();
        failed += usize::from(!ok);
        println!("{} criterion {} ({name}): {detail}", if ok { "PASS" } else { "FAIL" }, i + 1);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
