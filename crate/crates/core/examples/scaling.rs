//! Relative throughput with and without rebalancing as the pipeline deepens.
//!
//! Usage: `cargo run --release --example scaling -- [peers_at_4] [churn_per_hour] [burst] [hours] [seeds]`

use std::time::Instant;

use swarm_core::cost_model::DeviceProfile;
use swarm_core::sim::{stage_scaling_experiment, ScalingPlan, ScalingRow, ShapeRef, SimConfig};
use swarm_core::trace::{generate_stationary, StationaryParams};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args()
        .nth(i)
        .and_then(|a| a.parse().ok())
        .unwrap_or(default)
}

fn main() {
    let peers: u64 = arg(1, 100);
    let rate: f64 = arg(2, 16.0);
    let burst: u32 = arg(3, 2);
    let hours: f64 = arg(4, 8.0);
    let seeds: u64 = arg(5, 10);

    let device = DeviceProfile {
        effective_flops: 6e11,
        ..DeviceProfile::v100_500mbps()
    };
    let mut template =
        SimConfig::uniform(4, peers as usize, device, ShapeRef::Preset("ours".into()));
    template.duration_s = Some(hours * 3600.0);
    template.warmup_s = 600.0;
    let params = StationaryParams {
        leave_per_hour: rate / f64::from(burst),
        burst,
        min_population: 4,
        ..StationaryParams::balanced(peers, rate, hours)
    };
    let plan = ScalingPlan {
        stage_counts: vec![4, 8, 16, 32],
        base_stages: 4,
        period_s: 300.0,
        seeds: (0..seeds).collect(),
        max_trainers: 4,
        inflight_per_peer: 4.0,
    };
    let started = Instant::now();
    // every seed replays the same trace, so seeds vary only the routing
    let trace = generate_stationary(&params, 0);
    let rows = stage_scaling_experiment(&template, &trace, &plan).unwrap();
    print!("{}", ScalingRow::csv_header());
    for r in &rows {
        print!("{}", r.csv_line());
    }
    println!("{:.1} s", started.elapsed().as_secs_f64());
}
