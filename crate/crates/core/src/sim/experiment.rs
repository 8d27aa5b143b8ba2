use serde::Serialize;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ChaosAction, ConfigError, ShapeRef, SimConfig};
use super::engine::{run_seeded, Recovery, SimResult};
use super::series::Series;
use crate::cost_model::DeviceProfile;
use crate::parallel;
use crate::rebalancer::RebalanceMode;
use crate::trace::{scale_for_stages, Trace, TraceEvent};

const HOUR: f64 = 3600.0;

fn grid(modes: &[RebalanceMode], seeds: &[u64]) -> Vec<(RebalanceMode, u64)> {
    modes
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect()
}

/// Every `(mode, seed)` combination, mode-major, on the rayon pool when enabled.
pub fn run_batch(
    cfg: &SimConfig,
    trace: &Trace,
    modes: &[RebalanceMode],
    seeds: &[u64],
) -> Result<Vec<SimResult>, ConfigError> {
    parallel::map(&grid(modes, seeds), |&(m, s)| run_seeded(cfg, trace, m, s))
        .into_iter()
        .collect()
}

/// [`run_batch`] on the calling thread only.
pub fn run_batch_sequential(
    cfg: &SimConfig,
    trace: &Trace,
    modes: &[RebalanceMode],
    seeds: &[u64],
) -> Result<Vec<SimResult>, ConfigError> {
    parallel::map_sequential(&grid(modes, seeds), |&(m, s)| run_seeded(cfg, trace, m, s))
        .into_iter()
        .collect()
}

/// Throughput of one mode relative to the oracle, in percent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub mode: String,
    pub overall_pct: f64,
    pub first_hour_pct: f64,
    pub last_hour_pct: f64,
    pub runs: usize,
    pub starved_runs: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    /// Seed-averaged series per mode, same order as `rows` minus the oracle row.
    pub series: Vec<(String, Series)>,
    pub oracle: Series,
}

impl Comparison {
    pub fn row(&self, mode: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("mode,overall_pct,first_hour_pct,last_hour_pct,runs,starved_runs\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.3},{:.3},{:.3},{},{}",
                r.mode, r.overall_pct, r.first_hour_pct, r.last_hour_pct, r.runs, r.starved_runs
            );
        }
        out
    }
}

fn pct(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        100.0 * num / den
    } else {
        0.0
    }
}

/// Groups results by mode (in first-seen order) and scores each against its runs' oracle.
pub fn compare(results: &[SimResult]) -> Comparison {
    let mut modes: Vec<RebalanceMode> = Vec::new();
    for r in results {
        if !modes.contains(&r.mode) {
            modes.push(r.mode);
        }
    }
    let mut rows = Vec::new();
    let mut series = Vec::new();
    let mut all_oracles = Vec::new();
    for mode in modes {
        let runs: Vec<&SimResult> = results.iter().filter(|r| r.mode == mode).collect();
        let sims: Vec<Series> = runs.iter().map(|r| r.series.as_f64()).collect();
        let oracles: Vec<Series> = runs.iter().map(|r| r.oracle()).collect();
        let sim = Series::mean(&sims);
        let oracle = Series::mean(&oracles);
        let end = sim.duration();
        rows.push(ComparisonRow {
            mode: mode.to_string(),
            overall_pct: pct(sim.total(), oracle.total()),
            first_hour_pct: pct(sim.window_total(0.0, HOUR), oracle.window_total(0.0, HOUR)),
            last_hour_pct: pct(
                sim.window_total(end - HOUR, end),
                oracle.window_total(end - HOUR, end),
            ),
            runs: runs.len(),
            starved_runs: runs.iter().filter(|r| r.starved()).count(),
        });
        series.push((mode.to_string(), sim));
        all_oracles.extend(oracles);
    }
    let oracle = if all_oracles.is_empty() {
        Series {
            bucket_s: 1.0,
            values: Vec::new(),
        }
    } else {
        Series::mean(&all_oracles)
    };
    rows.push(ComparisonRow {
        mode: "oracle".into(),
        overall_pct: 100.0,
        first_hour_pct: 100.0,
        last_hour_pct: 100.0,
        runs: all_oracles.len(),
        starved_runs: 0,
    });
    Comparison {
        rows,
        series,
        oracle,
    }
}

/// Replays one trace at several pipeline depths, with and without rebalancing.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingPlan {
    pub stage_counts: Vec<usize>,
    /// Depth the trace's initial population was recorded for.
    pub base_stages: usize,
    pub period_s: f64,
    pub seeds: Vec<u64>,
    /// Upper bound on trainers; microbatches per trainer grow to compensate.
    pub max_trainers: usize,
    /// Microbatches in flight per initial peer.
    pub inflight_per_peer: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingRow {
    pub stages: usize,
    pub peers: u64,
    pub rebalanced_pct: f64,
    pub baseline_pct: f64,
    pub rebalanced: Series,
    pub baseline: Series,
    pub oracle: Series,
}

impl ScalingRow {
    pub fn csv_header() -> &'static str {
        "stages,peers,rebalanced_pct,baseline_pct\n"
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:.3},{:.3}\n",
            self.stages, self.peers, self.rebalanced_pct, self.baseline_pct
        )
    }
}

/// Configuration used for one depth: `template` with the scaled population spread evenly.
pub fn scaled_config(
    template: &SimConfig,
    trace: &Trace,
    plan: &ScalingPlan,
    stages: usize,
) -> (SimConfig, Trace) {
    let scaled = scale_for_stages(trace, plan.base_stages, stages);
    let peers = scaled.initial_population as usize;
    let mut cfg = SimConfig {
        join_device: Some(template.join_device()),
        ..SimConfig::uniform(
            stages,
            peers,
            template.join_device(),
            template.shape.clone(),
        )
    };
    cfg.compression = template.compression;
    cfg.overlap = template.overlap;
    cfg.bucket_s = template.bucket_s;
    cfg.duration_s = template.duration_s;
    cfg.warmup_s = template.warmup_s;
    cfg.wiring = template.wiring;
    cfg.registry = template.registry;
    cfg.state_transfer_bytes = template.state_transfer_bytes;
    cfg.allreduce = template.allreduce;
    cfg.retry_interval_s = template.retry_interval_s;
    cfg.snapshot_trainers = 0;
    let trainers = peers.clamp(1, plan.max_trainers.max(1));
    cfg.trainers = Some(trainers);
    cfg.inflight_per_trainer = ((plan.inflight_per_peer * peers as f64) / trainers as f64)
        .ceil()
        .max(1.0) as usize;
    (cfg, scaled)
}

pub fn stage_scaling_experiment(
    template: &SimConfig,
    trace: &Trace,
    plan: &ScalingPlan,
) -> Result<Vec<ScalingRow>, ConfigError> {
    let periodic = RebalanceMode::Periodic {
        period_s: plan.period_s,
    };
    let modes = [periodic, RebalanceMode::None];
    let setups: Vec<(SimConfig, Trace)> = plan
        .stage_counts
        .iter()
        .map(|&s| scaled_config(template, trace, plan, s))
        .collect();
    let jobs: Vec<(usize, RebalanceMode, u64)> = (0..setups.len())
        .flat_map(|i| {
            modes
                .iter()
                .flat_map(move |&m| plan.seeds.iter().map(move |&s| (i, m, s)))
        })
        .collect();
    let results: Vec<SimResult> = parallel::map(&jobs, |&(i, m, s)| {
        run_seeded(&setups[i].0, &setups[i].1, m, s)
    })
    .into_iter()
    .collect::<Result<_, _>>()?;

    let per_depth = modes.len() * plan.seeds.len();
    Ok(setups
        .iter()
        .zip(results.chunks(per_depth.max(1)))
        .map(|((cfg, scaled), chunk)| {
            let cmp = compare(chunk);
            let pick = |m: RebalanceMode| {
                let label = m.to_string();
                let row = cmp.row(&label).map_or(0.0, |r| r.overall_pct);
                let series = cmp
                    .series
                    .iter()
                    .find(|(l, _)| *l == label)
                    .map(|(_, s)| s.clone());
                (row, series.expect("mode present in batch"))
            };
            let (rebalanced_pct, rebalanced) = pick(periodic);
            let (baseline_pct, baseline) = pick(RebalanceMode::None);
            ScalingRow {
                stages: cfg.stages,
                peers: scaled.initial_population,
                rebalanced_pct,
                baseline_pct,
                rebalanced,
                baseline,
                oracle: cmp.oracle,
            }
        })
        .collect())
}

/// A starved stage coming back, with the delay until the next completed microbatch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RecoveryCheck {
    pub stage: usize,
    pub resumed_at: f64,
    pub stalled: usize,
    pub first_completion_after_s: Option<f64>,
    /// One traversal of the pipeline for a microbatch queued behind the
    /// stalled forward passes: retry interval, every stage's forward and
    /// backward, and the backlog's forward time on the returning peer.
    pub traversal_s: f64,
}

impl RecoveryCheck {
    pub fn in_time(&self) -> bool {
        self.first_completion_after_s
            .is_some_and(|d| d <= self.traversal_s)
    }
}

/// Outcome of one randomized fault-injection run.
#[derive(Debug, Clone, Serialize)]
pub struct ChaosOutcome {
    pub seed: u64,
    pub stages: usize,
    pub mode: RebalanceMode,
    /// Forward plus backward through every stage on idle peers, plus one retry interval.
    pub unloaded_traversal_s: f64,
    pub recoveries: Vec<RecoveryCheck>,
    /// Microbatches completed after the last chaos action.
    pub completed_after_chaos: u64,
    pub end_population: Vec<usize>,
}

impl ChaosOutcome {
    pub fn recovered_in_time(&self) -> bool {
        self.recoveries.iter().all(RecoveryCheck::in_time)
    }

    /// Largest ratio of recovery delay to traversal time; infinite if a recovery never completed anything.
    pub fn worst_ratio(&self) -> f64 {
        self.recoveries
            .iter()
            .map(|r| {
                r.first_completion_after_s
                    .map_or(f64::INFINITY, |d| d / r.traversal_s)
            })
            .fold(0.0, f64::max)
    }
}

/// A small random swarm that loses all but one peer per stage, and sometimes
/// a whole stage, at random times; joins arrive afterwards to repopulate it.
pub fn chaos_scenario(seed: u64) -> (SimConfig, Trace, RebalanceMode) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stages = rng.random_range(2..=4usize);
    let per_stage = rng.random_range(2..=4usize);
    let device = DeviceProfile {
        effective_flops: 6e11,
        ..DeviceProfile::v100_500mbps()
    };
    let mut cfg = SimConfig::uniform(
        stages,
        stages * per_stage,
        device,
        ShapeRef::Preset("ours".into()),
    );
    let duration = 1800.0;
    cfg.duration_s = Some(duration);
    cfg.bucket_s = 10.0;
    cfg.inflight_per_trainer = rng.random_range(1..=3);
    cfg.state_transfer_bytes = Some(rng.random_range(0..=1_000_000_000));

    let mut chaos = Vec::new();
    for _ in 0..rng.random_range(1..=3) {
        chaos.push(ChaosAction::KillAllButOne {
            t: rng.random_range(60.0..1200.0),
        });
    }
    if rng.random_bool(0.5) {
        chaos.push(ChaosAction::KillStage {
            t: rng.random_range(60.0..1200.0),
            stage: rng.random_range(0..stages),
        });
    }
    chaos.sort_by(|a, b| a.time().total_cmp(&b.time()));
    cfg.chaos = chaos.clone();

    let mut events = Vec::new();
    for c in &chaos {
        for _ in 0..stages * per_stage {
            events.push(TraceEvent {
                t: c.time() + rng.random_range(5.0..240.0),
                delta: 1,
            });
        }
    }
    events.sort_by(|a, b| a.t.total_cmp(&b.t));
    let modes = [
        RebalanceMode::None,
        RebalanceMode::Periodic { period_s: 60.0 },
        RebalanceMode::Periodic { period_s: 300.0 },
    ];
    let mode = modes[rng.random_range(0..modes.len())];
    (cfg, Trace::new((stages * per_stage) as u64, events), mode)
}

pub fn run_chaos(seed: u64) -> Result<ChaosOutcome, ConfigError> {
    let (cfg, trace, mode) = chaos_scenario(seed);
    let result = run_seeded(&cfg, &trace, mode, seed)?;
    let cycle = cfg.cycle_seconds(&cfg.join_device())?;
    let series = result.series.as_f64();
    let end = series.duration();
    let fault_times: Vec<f64> = cfg.chaos.iter().map(ChaosAction::time).collect();
    let unloaded_traversal_s = cfg.stages as f64 * cycle + cfg.retry_interval_s;
    let recoveries = result
        .recoveries
        .iter()
        .map(|r: &Recovery| RecoveryCheck {
            stage: r.stage,
            resumed_at: r.resumed_at,
            stalled: r.stalled,
            first_completion_after_s: r.first_completion_at.map(|t| t - r.resumed_at),
            traversal_s: unloaded_traversal_s + r.stalled as f64 * cycle / 3.0,
        })
        .collect();
    let last_fault = fault_times.iter().copied().fold(0.0, f64::max);
    Ok(ChaosOutcome {
        seed,
        stages: cfg.stages,
        mode,
        unloaded_traversal_s,
        recoveries,
        completed_after_chaos: series.window_total(last_fault, end) as u64,
        end_population: result.end_population,
    })
}
