//! `swarm-sim`: run simulations, generate churn traces and query the cost model.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Environment variable that overrides `--out` for `simulate`.
pub const OUT_ENV: &str = "SWARM_SIM_OUT";

#[derive(Parser)]
#[command(
    name = "swarm-sim",
    version,
    about = "Pipeline-parallel training over unreliable peers, simulated"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replay a churn trace under each rebalancing mode and write CSVs, event logs and a manifest.
    Simulate(SimulateArgs),
    /// Print per-stage compute, communication and utilization as CSV.
    Costmodel(CostmodelArgs),
    /// Write a synthetic stationary churn trace as JSON lines.
    TraceGen(TraceGenArgs),
    /// Print bits per microbatch for every preset and compression scheme.
    Payload(PayloadArgs),
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Simulation config (JSON).
    pub config: PathBuf,
    /// Seeds as `a..b`, a comma list, or a single number. Defaults to the config's seeds, then 0.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Comma-separated modes such as `none,T=300,T=60`. Defaults to the config's modes, then those three.
    #[arg(long)]
    pub modes: Option<String>,
    /// Output directory; `SWARM_SIM_OUT` takes precedence.
    #[arg(long, default_value = "swarm-out")]
    pub out: PathBuf,
    /// Also dump every trainer's routing queues and EMAs at the end of each run.
    #[arg(long)]
    pub inspect: bool,
}

#[derive(Args)]
pub struct CostmodelArgs {
    /// Presets to tabulate (repeatable); all built-in presets by default.
    #[arg(long = "preset")]
    pub presets: Vec<String>,
    /// Link bandwidth in bits per second, both directions; `inf` disables the network cost.
    #[arg(long, default_value_t = 500e6)]
    pub bandwidth: f64,
    /// Round-trip latencies in milliseconds.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 10.0, 50.0, 100.0, 200.0])]
    pub rtt: Vec<f64>,
    /// `none`, `int8`, `bottleneck:<c/m>` or `maxout:<k>`.
    #[arg(long, default_value = "none")]
    pub compression: String,
    /// Achievable FLOP/s of the device.
    #[arg(long, default_value_t = 4.0e12)]
    pub flops: f64,
    /// Serialize compute and communication instead of overlapping them.
    #[arg(long)]
    pub no_overlap: bool,
}

#[derive(Args)]
pub struct TraceGenArgs {
    #[arg(long)]
    pub initial: u64,
    /// Leave and join events per hour, each.
    #[arg(long, conflicts_with_all = ["leave_rate", "join_rate"])]
    pub rate: Option<f64>,
    #[arg(long, requires = "join_rate")]
    pub leave_rate: Option<f64>,
    #[arg(long, requires = "leave_rate")]
    pub join_rate: Option<f64>,
    #[arg(long)]
    pub hours: f64,
    /// Peers lost per leave event.
    #[arg(long, default_value_t = 1)]
    pub burst: u32,
    /// Leave events that would drop the population below this are skipped.
    #[arg(long, default_value_t = 1)]
    pub min_population: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Destination file; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct PayloadArgs {
    /// Schemes to tabulate (repeatable); a fixed selection by default.
    #[arg(long = "compression")]
    pub compressions: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Costmodel(a) => commands::costmodel(&a).map(|()| commands::Status::Ok),
        Command::TraceGen(a) => commands::trace_gen(&a).map(|()| commands::Status::Ok),
        Command::Payload(a) => commands::payload(&a).map(|()| commands::Status::Ok),
    };
    match result {
        Ok(commands::Status::Ok) => ExitCode::SUCCESS,
        Ok(commands::Status::Starved) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
