use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Completed microbatches per fixed-width time bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputSeries {
    pub bucket_s: f64,
    pub counts: Vec<u64>,
}

impl ThroughputSeries {
    pub fn new(bucket_s: f64, buckets: usize) -> Self {
        Self {
            bucket_s,
            counts: vec![0; buckets],
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn as_f64(&self) -> Series {
        Series {
            bucket_s: self.bucket_s,
            values: self.counts.iter().map(|&c| c as f64).collect(),
        }
    }

    pub fn to_csv(&self) -> String {
        self.as_f64().to_csv_with("completed")
    }
}

/// Real-valued per-bucket series, used for seed averages and the oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub bucket_s: f64,
    pub values: Vec<f64>,
}

impl Series {
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Sum over buckets whose start lies in `[from, to)`.
    pub fn window_total(&self, from: f64, to: f64) -> f64 {
        self.values
            .iter()
            .enumerate()
            .filter(|(i, _)| {
                let start = *i as f64 * self.bucket_s;
                start >= from - 1e-9 && start < to - 1e-9
            })
            .map(|(_, v)| v)
            .sum()
    }

    pub fn duration(&self) -> f64 {
        self.values.len() as f64 * self.bucket_s
    }

    /// Element-wise mean. Panics if the series have different lengths.
    pub fn mean(series: &[Series]) -> Series {
        assert!(!series.is_empty(), "mean of no series");
        let n = series[0].values.len();
        assert!(
            series.iter().all(|s| s.values.len() == n),
            "series lengths differ"
        );
        let values = (0..n)
            .map(|i| series.iter().map(|s| s.values[i]).sum::<f64>() / series.len() as f64)
            .collect();
        Series {
            bucket_s: series[0].bucket_s,
            values,
        }
    }

    pub fn to_csv(&self) -> String {
        self.to_csv_with("completed")
    }

    fn to_csv_with(&self, column: &str) -> String {
        let mut out = format!("bucket_start_s,{column}\n");
        for (i, v) in self.values.iter().enumerate() {
            let _ = writeln!(out, "{},{}", i as f64 * self.bucket_s, v);
        }
        out
    }
}

/// Best aggregate pipeline rate for the given per-stage device counts when
/// every device may be assigned to any stage: the minimum over stages of
/// `count_s · rate_s`, maximised by placing devices one at a time on the
/// current bottleneck.
pub fn oracle_throughput(rates: &[f64], total_peers: u64) -> f64 {
    if rates.is_empty() || (total_peers as usize) < rates.len() {
        return 0.0;
    }
    let mut counts = vec![1u64; rates.len()];
    for _ in rates.len() as u64..total_peers {
        let (bottleneck, _) = counts
            .iter()
            .zip(rates)
            .map(|(&c, &r)| c as f64 * r)
            .enumerate()
            .fold(
                (0, f64::INFINITY),
                |best, (i, v)| if v < best.1 { (i, v) } else { best },
            );
        counts[bottleneck] += 1;
    }
    counts
        .iter()
        .zip(rates)
        .map(|(&c, &r)| c as f64 * r)
        .fold(f64::INFINITY, f64::min)
}

/// Expected completions per bucket for an optimally placed swarm whose live
/// population follows the step function `population` (time, count), starting
/// at time 0.
pub fn oracle_series(
    rates: &[f64],
    population: &[(f64, u64)],
    bucket_s: f64,
    buckets: usize,
) -> Series {
    let mut values = vec![0.0; buckets];
    let end = buckets as f64 * bucket_s;
    for (i, &(t, n)) in population.iter().enumerate() {
        let start = t.max(0.0);
        let stop = population.get(i + 1).map_or(end, |next| next.0).min(end);
        if stop <= start {
            continue;
        }
        let rate = oracle_throughput(rates, n);
        // spread rate·(stop−start) over the buckets the interval covers
        let mut a = start;
        while a < stop {
            let b_idx = ((a / bucket_s).floor() as usize).min(buckets - 1);
            let b_end = ((b_idx + 1) as f64 * bucket_s).min(stop);
            values[b_idx] += rate * (b_end - a);
            if b_end <= a {
                break;
            }
            a = b_end;
        }
    }
    Series { bucket_s, values }
}
