//! Latency samples and per-second metrics.

use std::fmt::Write as _;

use bizur::{InstanceId, ServerId, SimTime};

pub const CSV_HEADER: &str = "t_sec,ops_completed,latency_mean_ms,latency_p99_ms";

/// One successfully acknowledged client operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sample {
    pub invoked_at: SimTime,
    pub completed_at: SimTime,
    pub instance: InstanceId,
    /// Bucket of the key within its instance; `u32::MAX` for IterateKeys.
    pub bucket: u32,
    pub server: Option<ServerId>,
}

impl Sample {
    pub fn latency(&self) -> SimTime {
        self.completed_at - self.invoked_at
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Row {
    pub t_sec: u64,
    pub ops_completed: u64,
    pub latency_mean_ms: f64,
    pub latency_p99_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub ops: u64,
    pub ops_per_sec: f64,
    pub latency_mean_ms: f64,
    pub latency_p99_ms: f64,
}

/// Nearest-rank percentile, `p` in (0, 100]. Sorts `values`.
pub fn percentile(values: &mut [SimTime], p: f64) -> SimTime {
    if values.is_empty() {
        return SimTime::ZERO;
    }
    values.sort_unstable();
    let rank = ((p / 100.0) * values.len() as f64).ceil() as usize;
    values[rank.clamp(1, values.len()) - 1]
}

/// Aggregates samples completing in `[from, to)`.
pub fn summarize<'a>(samples: impl IntoIterator<Item = &'a Sample>, from: SimTime, to: SimTime) -> Summary {
    let mut lat: Vec<SimTime> = samples
        .into_iter()
        .filter(|s| s.completed_at >= from && s.completed_at < to)
        .map(Sample::latency)
        .collect();
    let ops = lat.len() as u64;
    let mean = if lat.is_empty() {
        0.0
    } else {
        lat.iter().map(|l| l.as_millis_f64()).sum::<f64>() / lat.len() as f64
    };
    let p99 = percentile(&mut lat, 99.0).as_millis_f64();
    let secs = (to - from).as_secs_f64();
    Summary {
        ops,
        ops_per_sec: if secs > 0.0 { ops as f64 / secs } else { 0.0 },
        latency_mean_ms: mean,
        latency_p99_ms: p99,
    }
}

/// One row per whole second of `[0, duration)`.
pub fn per_second(samples: &[Sample], duration: SimTime) -> Vec<Row> {
    let secs = duration.as_micros().div_ceil(1_000_000);
    let mut buckets: Vec<Vec<SimTime>> = vec![Vec::new(); secs as usize];
    for s in samples {
        let t = s.completed_at.as_micros() / 1_000_000;
        if t < secs {
            buckets[t as usize].push(s.latency());
        }
    }
    buckets
        .into_iter()
        .enumerate()
        .map(|(t, mut lat)| {
            let n = lat.len();
            let mean = if n == 0 {
                0.0
            } else {
                lat.iter().map(|l| l.as_millis_f64()).sum::<f64>() / n as f64
            };
            Row {
                t_sec: t as u64,
                ops_completed: n as u64,
                latency_mean_ms: mean,
                latency_p99_ms: percentile(&mut lat, 99.0).as_millis_f64(),
            }
        })
        .collect()
}

pub fn to_csv(rows: &[Row]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.3},{:.3}",
            r.t_sec, r.ops_completed, r.latency_mean_ms, r.latency_p99_ms
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(start_ms: u64, end_ms: u64) -> Sample {
        Sample {
            invoked_at: SimTime::from_millis(start_ms),
            completed_at: SimTime::from_millis(end_ms),
            instance: InstanceId(1),
            bucket: 0,
            server: None,
        }
    }

    #[test]
    fn nearest_rank() {
        let mut v: Vec<SimTime> = (1..=100).map(SimTime::from_millis).collect();
        assert_eq!(percentile(&mut v, 99.0), SimTime::from_millis(99));
        assert_eq!(percentile(&mut v, 100.0), SimTime::from_millis(100));
        let mut one = vec![SimTime(5)];
        assert_eq!(percentile(&mut one, 99.0), SimTime(5));
        assert_eq!(percentile(&mut [], 99.0), SimTime::ZERO);
    }

    #[test]
    fn rows_and_csv() {
        let s = vec![sample(0, 2), sample(1, 5), sample(999, 1001), sample(2500, 2600)];
        let rows = per_second(&s, SimTime::from_secs(3));
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].ops_completed, 2);
        assert_eq!(rows[0].latency_mean_ms, 3.0);
        assert_eq!(rows[0].latency_p99_ms, 4.0);
        assert_eq!(rows[1].ops_completed, 1);
        assert_eq!(rows[2].latency_p99_ms, 100.0);
        let csv = to_csv(&rows);
        assert_eq!(
            csv,
            "t_sec,ops_completed,latency_mean_ms,latency_p99_ms\n0,2,3.000,4.000\n1,1,2.000,2.000\n2,1,100.000,100.000\n"
        );
    }

    #[test]
    fn summary_window() {
        let s = vec![sample(0, 2), sample(1, 5), sample(999, 1001)];
        let sum = summarize(&s, SimTime::ZERO, SimTime::from_secs(1));
        assert_eq!(sum.ops, 2);
        assert_eq!(sum.ops_per_sec, 2.0);
    }
}
