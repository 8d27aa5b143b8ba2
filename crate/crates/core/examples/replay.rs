//! Prints a relative-throughput table for a synthetic stationary trace.
//!
//! Usage: `cargo run --release --example replay -- [churn_per_hour] [seeds] [hours] [flops] [inflight] [trainers] [transfer_bytes] [burst]`
//!
//! Defaults match the stationary-churn acceptance check.

use std::time::Instant;

use swarm_core::cost_model::DeviceProfile;
use swarm_core::rebalancer::RebalanceMode;
use swarm_core::sim::{compare, run_batch, ShapeRef, SimConfig};
use swarm_core::trace::{generate_stationary, StationaryParams};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args()
        .nth(i)
        .and_then(|a| a.parse().ok())
        .unwrap_or(default)
}

fn main() {
    let rate: f64 = arg(1, 48.0);
    let seeds: u64 = arg(2, 10);
    let hours: f64 = arg(3, 32.0);
    let flops: f64 = arg(4, 6e11);
    let inflight: usize = arg(5, 400);
    let trainers: usize = arg(6, 4);

    let device = DeviceProfile {
        effective_flops: flops,
        ..DeviceProfile::v100_500mbps()
    };
    let mut cfg = SimConfig::uniform(4, 400, device, ShapeRef::Preset("ours".into()));
    cfg.duration_s = Some(hours * 3600.0);
    cfg.warmup_s = 600.0;
    cfg.inflight_per_trainer = inflight;
    cfg.trainers = Some(trainers);
    let transfer: f64 = arg(7, 2e9);
    if transfer > 0.0 {
        cfg.state_transfer_bytes = Some(transfer as u64);
    }
    println!("stage cycle {:.2} s", cfg.cycle_seconds(&device).unwrap());

    let modes = [
        RebalanceMode::None,
        RebalanceMode::Periodic { period_s: 300.0 },
        RebalanceMode::Periodic { period_s: 60.0 },
    ];
    let seed_list: Vec<u64> = (0..seeds).collect();
    let started = Instant::now();
    let mut results = Vec::new();
    for &seed in &seed_list {
        let burst: u32 = arg(8, 8);
        let params = StationaryParams {
            leave_per_hour: rate / f64::from(burst),
            burst,
            ..StationaryParams::balanced(400, rate, hours)
        };
        let trace = generate_stationary(&params, seed);
        results.extend(run_batch(&cfg, &trace, &modes, &[seed]).unwrap());
    }
    // run_batch is mode-major per call; regroup so compare sees every mode
    let table = compare(&results);
    print!("{}", table.to_csv());
    let events: u64 = results.iter().map(|r| r.stats.events).sum();
    println!(
        "{} runs, {} events, {:.1} s",
        results.len(),
        events,
        started.elapsed().as_secs_f64()
    );
}
