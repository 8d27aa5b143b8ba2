//! Preemption traces: timestamped changes in the number of live peers.
//!
//! On disk a trace is JSON lines. An optional first line
//! `{"initial_population": N}` records the starting population; every other
//! line is one event `{"t": seconds, "delta": ±n}`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("cannot read trace {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("trace line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("population falls to {population} at t={t} (event {index}); at least {floor} peers must remain")]
    NegativePopulation {
        index: usize,
        t: f64,
        population: i64,
        floor: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceEvent {
    pub t: f64,
    pub delta: i64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub initial_population: u64,
    pub events: Vec<TraceEvent>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    initial_population: u64,
}

impl Trace {
    pub fn new(initial_population: u64, events: Vec<TraceEvent>) -> Self {
        Self {
            initial_population,
            events,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn end_time(&self) -> f64 {
        self.events.last().map_or(0.0, |e| e.t)
    }

    /// Checks the population starting from `start` never drops below `floor`.
    pub fn check_population(&self, start: u64, floor: u64) -> Result<(), TraceError> {
        let mut pop = start as i64;
        for (index, e) in self.events.iter().enumerate() {
            pop += e.delta;
            if pop < floor as i64 {
                return Err(TraceError::NegativePopulation {
                    index,
                    t: e.t,
                    population: pop,
                    floor,
                });
            }
        }
        Ok(())
    }

    pub fn population_at(&self, t: f64) -> i64 {
        self.initial_population as i64
            + self
                .events
                .iter()
                .take_while(|e| e.t <= t)
                .map(|e| e.delta)
                .sum::<i64>()
    }

    /// Time-weighted mean population over `[0, duration]`.
    pub fn mean_population(&self, duration: f64) -> f64 {
        let mut pop = self.initial_population as f64;
        let mut last = 0.0;
        let mut area = 0.0;
        for e in self.events.iter().take_while(|e| e.t <= duration) {
            area += pop * (e.t - last);
            last = e.t;
            pop += e.delta as f64;
        }
        area += pop * (duration - last);
        area / duration
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        if self.initial_population > 0 {
            let _ = writeln!(
                out,
                "{{\"initial_population\":{}}}",
                self.initial_population
            );
        }
        for e in &self.events {
            let _ = writeln!(
                out,
                "{}",
                serde_json::to_string(e).expect("plain struct serializes")
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, TraceError> {
        let mut trace = Trace::default();
        let mut seen_event = false;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let raw = raw.trim();
            if raw.is_empty() {
                continue;
            }
            if !seen_event && trace.initial_population == 0 {
                if let Ok(h) = serde_json::from_str::<Header>(raw) {
                    trace.initial_population = h.initial_population;
                    continue;
                }
            }
            let e: TraceEvent = serde_json::from_str(raw).map_err(|err| TraceError::Parse {
                line,
                msg: err.to_string(),
            })?;
            if !(e.t.is_finite() && e.t >= 0.0) {
                return Err(TraceError::Parse {
                    line,
                    msg: format!("timestamp {} must be finite and nonnegative", e.t),
                });
            }
            if let Some(prev) = trace.events.last() {
                if e.t < prev.t {
                    return Err(TraceError::Parse {
                        line,
                        msg: format!("timestamp {} precedes previous {}", e.t, prev.t),
                    });
                }
            }
            seen_event = true;
            trace.events.push(e);
        }
        // without a header the starting population comes from the simulation config
        if trace.initial_population > 0 {
            trace.check_population(trace.initial_population, 1)?;
        }
        Ok(trace)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TraceError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| TraceError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TraceError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()).map_err(|source| TraceError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Poisson churn with independent leave and join processes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationaryParams {
    pub initial: u64,
    pub leave_per_hour: f64,
    pub join_per_hour: f64,
    pub hours: f64,
    /// Peers removed by each leave event. Values above 1 model bursty preemption.
    #[serde(default = "one")]
    pub burst: u32,
    /// Leave events that would take the population below this are dropped.
    #[serde(default = "one_u64")]
    pub min_population: u64,
}

fn one() -> u32 {
    1
}

fn one_u64() -> u64 {
    1
}

impl StationaryParams {
    pub fn balanced(initial: u64, rate_per_hour: f64, hours: f64) -> Self {
        Self {
            initial,
            leave_per_hour: rate_per_hour,
            join_per_hour: rate_per_hour,
            hours,
            burst: 1,
            min_population: 1,
        }
    }
}

fn poisson_times(rate_per_hour: f64, horizon_s: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if !(rate_per_hour > 0.0) {
        return Vec::new();
    }
    let gap = Exp::new(rate_per_hour / 3600.0).expect("positive rate");
    let mut out = Vec::new();
    let mut t = 0.0;
    loop {
        t += gap.sample(rng);
        if t > horizon_s {
            return out;
        }
        out.push(t);
    }
}

pub fn generate_stationary(params: &StationaryParams, seed: u64) -> Trace {
    let horizon = params.hours * 3600.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let leaves = poisson_times(params.leave_per_hour, horizon, &mut rng);
    rng.set_stream(2);
    rng.set_word_pos(0);
    let joins = poisson_times(params.join_per_hour, horizon, &mut rng);

    let burst = i64::from(params.burst.max(1));
    let mut events = Vec::with_capacity(leaves.len() + joins.len());
    let mut pop = params.initial as i64;
    let (mut li, mut ji) = (0, 0);
    while li < leaves.len() || ji < joins.len() {
        let take_leave = ji >= joins.len() || (li < leaves.len() && leaves[li] <= joins[ji]);
        if take_leave {
            let t = leaves[li];
            li += 1;
            if pop - burst >= params.min_population as i64 {
                pop -= burst;
                events.push(TraceEvent { t, delta: -burst });
            }
        } else {
            let t = joins[ji];
            ji += 1;
            pop += 1;
            events.push(TraceEvent { t, delta: 1 });
        }
    }
    Trace::new(params.initial, events)
}

/// Rescales the starting population for a pipeline with `to_stages` stages; deltas are kept.
pub fn scale_for_stages(trace: &Trace, from_stages: usize, to_stages: usize) -> Trace {
    let from = from_stages.max(1) as u64;
    let to = to_stages.max(1) as u64;
    Trace::new(
        (trace.initial_population * to).div_ceil(from),
        trace.events.clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_line_file() {
        let t = Trace::parse("{\"t\":0,\"delta\":16}\n{\"t\":3600,\"delta\":-4}\n").unwrap();
        assert_eq!(t.events.len(), 2);
        assert_eq!(t.initial_population, 0);
        assert_eq!(t.population_at(4000.0), 12);
    }

    #[test]
    fn out_of_order_is_a_parse_error() {
        let err = Trace::parse("{\"t\":10,\"delta\":16}\n{\"t\":5,\"delta\":-4}\n").unwrap_err();
        assert!(matches!(err, TraceError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn garbage_is_a_parse_error() {
        let err = Trace::parse("{\"t\":0,\"delta\":16}\nnot json\n").unwrap_err();
        assert!(matches!(err, TraceError::Parse { line: 2, .. }));
        assert!(Trace::parse("{\"t\":0,\"delta\":1,\"x\":2}").is_err());
    }

    #[test]
    fn population_reaching_zero() {
        let err = Trace::parse(
            "{\"initial_population\":2}\n{\"t\":0,\"delta\":2}\n{\"t\":1,\"delta\":-4}\n",
        )
        .unwrap_err();
        assert!(matches!(
            err,
            TraceError::NegativePopulation {
                index: 1,
                population: 0,
                ..
            }
        ));
        let headerless = Trace::parse("{\"t\":0,\"delta\":4}\n{\"t\":1,\"delta\":-4}\n").unwrap();
        assert_eq!(headerless.events.len(), 2);
        assert!(headerless.check_population(0, 1).is_err());
    }

    #[test]
    fn header_round_trip() {
        let t = Trace::new(
            400,
            vec![
                TraceEvent {
                    t: 0.125,
                    delta: -1,
                },
                TraceEvent { t: 7.0, delta: 2 },
            ],
        );
        let text = t.to_jsonl();
        assert!(text.starts_with("{\"initial_population\":400}"));
        assert_eq!(Trace::parse(&text).unwrap(), t);
    }

    #[test]
    fn zero_rates_give_empty_trace() {
        let t = generate_stationary(&StationaryParams::balanced(400, 0.0, 32.0), 3);
        assert!(t.is_empty());
        assert_eq!(t.initial_population, 400);
    }

    #[test]
    fn generator_is_deterministic() {
        let p = StationaryParams::balanced(100, 10.0, 5.0);
        assert_eq!(generate_stationary(&p, 9), generate_stationary(&p, 9));
        assert_ne!(generate_stationary(&p, 9), generate_stationary(&p, 10));
    }

    #[test]
    fn burst_and_floor() {
        let p = StationaryParams {
            initial: 6,
            leave_per_hour: 50.0,
            join_per_hour: 1.0,
            hours: 10.0,
            burst: 3,
            min_population: 4,
        };
        let t = generate_stationary(&p, 1);
        assert!(t
            .events
            .iter()
            .filter(|e| e.delta < 0)
            .all(|e| e.delta == -3));
        t.check_population(6, 4).unwrap();
    }

    #[test]
    fn scaling() {
        let t = Trace::new(16, vec![TraceEvent { t: 1.0, delta: -2 }]);
        assert_eq!(scale_for_stages(&t, 4, 8).initial_population, 32);
        assert_eq!(scale_for_stages(&t, 4, 4), t);
        assert_eq!(scale_for_stages(&t, 4, 32).initial_population, 128);
        assert_eq!(
            scale_for_stages(&Trace::new(5, vec![]), 4, 6).initial_population,
            8
        );
        assert_eq!(scale_for_stages(&t, 4, 32).events, t.events);
    }

    #[test]
    fn mean_population_is_time_weighted() {
        let t = Trace::new(10, vec![TraceEvent { t: 50.0, delta: 10 }]);
        assert_eq!(t.mean_population(100.0), 15.0);
    }
}
