mod config;
mod engine;
mod experiment;
mod series;

pub use config::{
    AllReduceStall, ChaosAction, ConfigError, JoinPriority, PeerGroup, ShapeRef, SimConfig,
    WiringParams,
};
pub use engine::{run, run_seeded, LogRecord, Recovery, SimResult, SimStats};
pub use experiment::{
    chaos_scenario, compare, run_batch, run_batch_sequential, run_chaos, stage_scaling_experiment,
    ChaosOutcome, Comparison, ComparisonRow, RecoveryCheck, ScalingPlan, ScalingRow,
};
pub use series::{oracle_series, oracle_throughput, Series, ThroughputSeries};
