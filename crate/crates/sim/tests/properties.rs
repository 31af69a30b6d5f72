use bizur::{ClientId, SimTime};
use bizur_sim::checker::{brute_force_linearizable, check};
use bizur_sim::suite::{election_safety_run, linearizability_run, LinParams};
use bizur_sim::{History, OpKind, Operation, Outcome};
use bytes::Bytes;
use proptest::prelude::*;

fn value() -> impl Strategy<Value = Option<Bytes>> {
    prop_oneof![Just(None), (0..3u8).prop_map(|v| Some(Bytes::from(vec![b'a' + v])))]
}

fn op_kind() -> impl Strategy<Value = OpKind> {
    let key = Bytes::from_static(b"k");
    let (k1, k2, k3, k4) = (key.clone(), key.clone(), key.clone(), key.clone());
    prop_oneof![
        Just(OpKind::Get { key }),
        value().prop_filter_map("set needs a value", move |v| v.map(|value| OpKind::Set { key: k1.clone(), value })),
        Just(OpKind::Delete { key: k2 }),
        (value(), value()).prop_filter_map("cas needs a value", move |(expected, v)| {
            v.map(|value| OpKind::CasSet { key: k3.clone(), expected, value })
        }),
        value().prop_map(move |expected| OpKind::CasDelete { key: k4.clone(), expected }),
    ]
}

fn outcome_for(kind: &OpKind) -> BoxedStrategy<Outcome> {
    let uncertain = prop_oneof![Just(Outcome::Indeterminate), Just(Outcome::Failed)];
    match kind {
        OpKind::Get { .. } => prop_oneof![4 => value().prop_map(Outcome::Value), 1 => uncertain].boxed(),
        OpKind::Set { .. } | OpKind::Delete { .. } => prop_oneof![4 => Just(Outcome::Ok), 1 => uncertain].boxed(),
        _ => prop_oneof![2 => Just(Outcome::Ok), 2 => value().prop_map(Outcome::CasMismatch), 1 => uncertain].boxed(),
    }
}

fn operation() -> impl Strategy<Value = (OpKind, Outcome, u64, u64)> {
    op_kind().prop_flat_map(|kind| {
        let o = outcome_for(&kind);
        (Just(kind), o, 0..20u64, 0..8u64)
    })
}

fn history(mut ops: Vec<(OpKind, Outcome, u64, u64)>) -> History {
    ops.sort_by_key(|o| o.2);
    History::from_ops(
        ops.into_iter()
            .enumerate()
            .map(|(id, (kind, outcome, start, len))| Operation {
                id,
                client: ClientId(id as u32),
                kind,
                invoked_at: SimTime(start),
                completed_at: Some(SimTime(start + len)),
                outcome,
            })
            .collect(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 400, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn checker_agrees_with_brute_force(ops in proptest::collection::vec(operation(), 1..=6)) {
        let h = history(ops);
        let all: Vec<&Operation> = h.ops().iter().collect();
        let fast = check(&h).unwrap().is_linearizable();
        prop_assert_eq!(fast, brute_force_linearizable(&all), "{}", h.to_text());
    }

    #[test]
    fn history_text_roundtrips(ops in proptest::collection::vec(operation(), 0..12)) {
        let h = history(ops);
        prop_assert_eq!(History::parse(&h.to_text()).unwrap(), h);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn any_seed_has_one_leader_per_election(seed in any::<u64>()) {
        let r = election_safety_run(seed);
        prop_assert!(r.conflicts.is_empty(), "{:?}", r.conflicts);
    }

    #[test]
    fn any_small_workload_is_linearizable(seed in any::<u64>(), keys in 1..8u32, five in any::<bool>(), drop in 0.0..0.15f64) {
        let p = LinParams {
            servers: if five { 5 } else { 3 },
            keys,
            drop_rate: drop,
            duration: SimTime::from_millis(600),
            kill_at: SimTime::from_millis(300),
            ..LinParams::for_seed(seed)
        };
        let out = linearizability_run(&p);
        prop_assert!(out.verdict.as_ref().is_ok_and(|v| v.is_linearizable()), "{:?}", p);
        prop_assert_eq!(out.leader_conflicts, 0);
    }
}
