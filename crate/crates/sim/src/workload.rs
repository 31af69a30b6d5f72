//! Seeded closed-loop client programs.

use std::collections::BTreeMap;

use bizur::client::SubmitError;
use bizur::{KvRequest, KvResponse};
use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::Deserialize;

/// Relative weights of the operation kinds.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpMix {
    pub get: f64,
    pub set: f64,
    pub delete: f64,
    pub cas: f64,
}

impl Default for OpMix {
    fn default() -> Self {
        OpMix {
            get: 0.5,
            set: 0.3,
            delete: 0.1,
            cas: 0.1,
        }
    }
}

impl OpMix {
    pub fn validate(&self) -> Result<(), String> {
        let w = [self.get, self.set, self.delete, self.cas];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err("operation weights must be non-negative".into());
        }
        if w.iter().sum::<f64>() <= 0.0 {
            return Err("at least one operation weight must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum KeyDistribution {
    #[default]
    Uniform,
    Zipf { exponent: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorkloadParams {
    pub clients: u32,
    pub keys: u32,
    pub mix: OpMix,
    pub distribution: KeyDistribution,
    /// Client `c` only touches keys `k` with `k % clients == c`.
    pub disjoint_keys: bool,
}

impl Default for WorkloadParams {
    fn default() -> Self {
        WorkloadParams {
            clients: 8,
            keys: 64,
            mix: OpMix::default(),
            distribution: KeyDistribution::Uniform,
            disjoint_keys: false,
        }
    }
}

impl WorkloadParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.clients == 0 {
            return Err("clients must be at least 1".into());
        }
        if self.keys == 0 {
            return Err("keys must be at least 1".into());
        }
        if self.disjoint_keys && self.keys < self.clients {
            return Err("disjoint keys need at least one key per client".into());
        }
        if let KeyDistribution::Zipf { exponent } = self.distribution {
            if !(exponent > 0.0 && exponent.is_finite()) {
                return Err("zipf exponent must be positive".into());
            }
        }
        self.mix.validate()
    }
}

pub fn key_name(i: u32) -> Bytes {
    Bytes::from(format!("key{i:05}"))
}

/// One client's operation generator. Values are unique per client and
/// counter; CAS requests expect the value the client last observed.
#[derive(Clone, Debug)]
pub struct ClientProgram {
    client: u32,
    params: WorkloadParams,
    rng: ChaCha8Rng,
    zipf: Option<Zipf<f64>>,
    counter: u64,
    known: BTreeMap<Bytes, Option<Bytes>>,
    pool: Option<Vec<Bytes>>,
}

/// One program per client, each seeded from `seed` and the client index.
pub fn generate_workload(seed: u64, params: &WorkloadParams) -> Vec<ClientProgram> {
    (0..params.clients)
        .map(|c| ClientProgram::new(seed, c, params.clone()))
        .collect()
}

impl ClientProgram {
    pub fn new(seed: u64, client: u32, params: WorkloadParams) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::from(client) + 1);
        let pool = Self::pool_size(&params, client);
        let zipf = match params.distribution {
            KeyDistribution::Zipf { exponent } => Some(Zipf::new(pool as f64, exponent).expect("validated")),
            KeyDistribution::Uniform => None,
        };
        ClientProgram {
            client,
            params,
            rng,
            zipf,
            counter: 0,
            known: BTreeMap::new(),
            pool: None,
        }
    }

    /// A program drawing keys from `keys` instead of the numbered key space.
    pub fn with_keys(seed: u64, client: u32, params: WorkloadParams, keys: Vec<Bytes>) -> Self {
        assert!(!keys.is_empty(), "empty key pool");
        let params = WorkloadParams {
            keys: keys.len() as u32,
            disjoint_keys: false,
            ..params
        };
        ClientProgram {
            pool: Some(keys),
            ..ClientProgram::new(seed, client, params)
        }
    }

    fn pool_size(params: &WorkloadParams, client: u32) -> u32 {
        if params.disjoint_keys {
            (params.keys - client).div_ceil(params.clients)
        } else {
            params.keys
        }
    }

    fn pick_key(&mut self) -> Bytes {
        let pool = Self::pool_size(&self.params, self.client);
        let i = match &self.zipf {
            Some(z) => (z.sample(&mut self.rng) as u32).clamp(1, pool) - 1,
            None => self.rng.random_range(0..pool),
        };
        if let Some(keys) = &self.pool {
            return keys[i as usize].clone();
        }
        let k = if self.params.disjoint_keys {
            i * self.params.clients + self.client
        } else {
            i
        };
        key_name(k)
    }

    pub fn next_request(&mut self) -> KvRequest {
        let key = self.pick_key();
        let m = &self.params.mix;
        let total = m.get + m.set + m.delete + m.cas;
        let x = self.rng.random::<f64>() * total;
        self.counter += 1;
        let value = Bytes::from(format!("c{}n{}", self.client, self.counter));
        if x < m.get {
            KvRequest::Get { key }
        } else if x < m.get + m.set {
            KvRequest::Set { key, value }
        } else if x < m.get + m.set + m.delete {
            KvRequest::Delete { key }
        } else {
            let expected = self.known.get(&key).cloned().flatten();
            if self.rng.random_bool(0.25) {
                KvRequest::CasDelete { key, expected }
            } else {
                KvRequest::CasSet { key, expected, value }
            }
        }
    }

    /// Remembers what the response revealed about the key.
    pub fn observe(&mut self, request: &KvRequest, result: &Result<KvResponse, SubmitError>) {
        let Some(key) = request.key() else {
            return;
        };
        let learned = match (request, result) {
            (_, Ok(KvResponse::Value(v))) => Some(Some(v.clone())),
            (_, Ok(KvResponse::Absent)) => Some(None),
            (_, Ok(KvResponse::CasMismatch(c))) => Some(c.clone()),
            (KvRequest::Set { value, .. }, Ok(KvResponse::Ok))
            | (KvRequest::CasSet { value, .. }, Ok(KvResponse::Ok)) => Some(Some(value.clone())),
            (KvRequest::Delete { .. }, Ok(KvResponse::Ok))
            | (KvRequest::CasDelete { .. }, Ok(KvResponse::Ok)) => Some(None),
            _ => None,
        };
        if let Some(v) = learned {
            self.known.insert(key.clone(), v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scripts() {
        let p = WorkloadParams::default();
        let mut a = generate_workload(5, &p);
        let mut b = generate_workload(5, &p);
        for (x, y) in a.iter_mut().zip(b.iter_mut()) {
            for _ in 0..100 {
                assert_eq!(x.next_request(), y.next_request());
            }
        }
        let mut c = generate_workload(6, &p);
        let differs = (0..20).any(|_| a[0].next_request() != c[0].next_request());
        assert!(differs);
    }

    #[test]
    fn single_key_is_a_hot_key() {
        let p = WorkloadParams { keys: 1, ..WorkloadParams::default() };
        let mut prog = generate_workload(1, &p).remove(0);
        for _ in 0..50 {
            assert_eq!(prog.next_request().key(), Some(&key_name(0)));
        }
    }

    #[test]
    fn disjoint_keys_partition_the_space() {
        let p = WorkloadParams { clients: 3, keys: 10, disjoint_keys: true, ..WorkloadParams::default() };
        for (c, mut prog) in generate_workload(2, &p).into_iter().enumerate() {
            for _ in 0..100 {
                let k = prog.next_request().key().unwrap().clone();
                let i: u32 = std::str::from_utf8(&k[3..]).unwrap().parse().unwrap();
                assert!(i < 10 && i % 3 == c as u32);
            }
        }
    }

    #[test]
    fn zipf_prefers_low_ranks() {
        let p = WorkloadParams {
            keys: 100,
            distribution: KeyDistribution::Zipf { exponent: 1.2 },
            ..WorkloadParams::default()
        };
        let mut prog = generate_workload(3, &p).remove(0);
        let hot = (0..2000)
            .filter(|_| prog.next_request().key() == Some(&key_name(0)))
            .count();
        assert!(hot > 200, "{hot}");
    }

    #[test]
    fn cas_uses_observed_value() {
        let p = WorkloadParams {
            keys: 1,
            mix: OpMix { get: 0.0, set: 0.0, delete: 0.0, cas: 1.0 },
            ..WorkloadParams::default()
        };
        let mut prog = generate_workload(4, &p).remove(0);
        let get = KvRequest::Get { key: key_name(0) };
        prog.observe(&get, &Ok(KvResponse::Value(Bytes::from_static(b"seen"))));
        for _ in 0..10 {
            match prog.next_request() {
                KvRequest::CasSet { expected, .. } | KvRequest::CasDelete { expected, .. } => {
                    assert_eq!(expected, Some(Bytes::from_static(b"seen")));
                }
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn explicit_pool() {
        let keys = vec![Bytes::from_static(b"a"), Bytes::from_static(b"b")];
        let mut prog = ClientProgram::with_keys(1, 0, WorkloadParams::default(), keys.clone());
        for _ in 0..50 {
            assert!(keys.contains(prog.next_request().key().unwrap()));
        }
    }

    #[test]
    fn validation() {
        assert!(WorkloadParams { clients: 0, ..Default::default() }.validate().is_err());
        let bad = OpMix { get: -1.0, ..OpMix::default() };
        assert!(bad.validate().is_err());
        assert!(WorkloadParams::default().validate().is_ok());
    }
}
