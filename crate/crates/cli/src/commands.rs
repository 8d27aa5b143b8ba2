use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use swarm_core::compression::{payload_bits, CompressionSpec};
use swarm_core::cost_model::{stage_cost, DeviceProfile, LayerShape, PRESET_NAMES};
use swarm_core::rebalancer::RebalanceMode;
use swarm_core::sim::{compare, run_batch, SimConfig};
use swarm_core::trace::{generate_stationary, StationaryParams, Trace};

use crate::{CostmodelArgs, PayloadArgs, SimulateArgs, TraceGenArgs, OUT_ENV};

pub enum Status {
    Ok,
    /// Some run lost every peer of a stage at least once; outputs were still written.
    Starved,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    config_path: PathBuf,
    config: &'a SimConfig,
    trace_path: Option<PathBuf>,
    seeds: &'a [u64],
    modes: &'a [RebalanceMode],
    out_dir: &'a Path,
    parallel: bool,
    started_unix_s: f64,
    elapsed_s: f64,
    runs: Vec<RunSummary>,
}

#[derive(Serialize)]
struct RunSummary {
    mode: RebalanceMode,
    seed: u64,
    completed: u64,
    oracle: f64,
    starved: bool,
    digest: String,
    events_file: String,
}

pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let text = text.trim();
    if let Some((a, b)) = text.split_once("..") {
        let a: u64 = a
            .trim()
            .parse()
            .with_context(|| format!("bad seed range `{text}`"))?;
        let b: u64 = b
            .trim()
            .parse()
            .with_context(|| format!("bad seed range `{text}`"))?;
        if b <= a {
            bail!("empty seed range `{text}`");
        }
        return Ok((a..b).collect());
    }
    text.split(',')
        .map(|s| s.trim().parse().with_context(|| format!("bad seed `{s}`")))
        .collect()
}

pub fn parse_modes(text: &str) -> Result<Vec<RebalanceMode>> {
    text.split(',')
        .map(|m| m.parse::<RebalanceMode>().map_err(anyhow::Error::from))
        .collect()
}

fn file_label(mode: RebalanceMode) -> String {
    mode.to_string().replace('=', "")
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

pub fn simulate(args: &SimulateArgs) -> Result<Status> {
    let started_unix_s = unix_now();
    let clock = Instant::now();
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("cannot read config {}", args.config.display()))?;
    let cfg = SimConfig::from_json(&text)
        .with_context(|| format!("invalid config {}", args.config.display()))?;
    cfg.validate()
        .with_context(|| format!("invalid config {}", args.config.display()))?;

    let trace_path = cfg.trace.as_ref().map(|p| {
        if p.is_absolute() {
            p.clone()
        } else {
            args.config.parent().unwrap_or(Path::new(".")).join(p)
        }
    });
    let trace = match &trace_path {
        Some(p) => Trace::load(p)?,
        None => Trace::default(),
    };
    let seeds = match &args.seeds {
        Some(s) => parse_seeds(s)?,
        None if !cfg.seeds.is_empty() => cfg.seeds.clone(),
        None => vec![0],
    };
    let modes = match &args.modes {
        Some(m) => parse_modes(m)?,
        None if !cfg.modes.is_empty() => cfg.modes.clone(),
        None => parse_modes("none,T=300,T=60")?,
    };
    let out = std::env::var_os(OUT_ENV).map_or_else(|| args.out.clone(), PathBuf::from);
    let events_dir = out.join("events");
    fs::create_dir_all(&events_dir)
        .with_context(|| format!("cannot create {}", events_dir.display()))?;

    let results = run_batch(&cfg, &trace, &modes, &seeds)?;
    let table = compare(&results);
    write(&out.join("comparison.csv"), table.to_csv())?;

    let mut series = String::from("mode,bucket_start_s,completed,oracle\n");
    for (label, s) in &table.series {
        let oracle: Vec<_> = results
            .iter()
            .filter(|r| r.mode.to_string() == *label)
            .map(|r| r.oracle())
            .collect();
        let oracle = swarm_core::sim::Series::mean(&oracle);
        for (i, (v, o)) in s.values.iter().zip(&oracle.values).enumerate() {
            let _ = writeln!(series, "{label},{},{v},{o}", i as f64 * s.bucket_s);
        }
    }
    write(&out.join("throughput.csv"), series)?;

    let mut runs = Vec::with_capacity(results.len());
    let mut per_run = String::from("mode,seed,completed,oracle,relative_pct,starved,digest\n");
    for r in &results {
        let name = format!("{}_seed{}.jsonl", file_label(r.mode), r.seed);
        write(&events_dir.join(&name), r.events_jsonl())?;
        let oracle = r.oracle().total();
        let completed = r.series.total();
        let digest = format!("{:016x}", r.digest);
        let pct = if oracle > 0.0 {
            100.0 * completed as f64 / oracle
        } else {
            0.0
        };
        let _ = writeln!(
            per_run,
            "{},{},{completed},{oracle:.3},{pct:.3},{},{digest}",
            r.mode,
            r.seed,
            r.starved()
        );
        runs.push(RunSummary {
            mode: r.mode,
            seed: r.seed,
            completed,
            oracle,
            starved: r.starved(),
            digest,
            events_file: format!("events/{name}"),
        });
        if args.inspect {
            let dir = out.join("inspect");
            fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
            let json = serde_json::to_string_pretty(&r.routing)?;
            write(
                &dir.join(format!("{}_seed{}.json", file_label(r.mode), r.seed)),
                json,
            )?;
        }
    }
    write(&out.join("runs.csv"), per_run)?;

    let starved = results.iter().any(|r| r.starved());
    let manifest = Manifest {
        tool: "swarm-sim",
        version: env!("CARGO_PKG_VERSION"),
        config_path: args.config.clone(),
        config: &cfg,
        trace_path,
        seeds: &seeds,
        modes: &modes,
        out_dir: &out,
        parallel: swarm_core::parallel::is_parallel(),
        started_unix_s,
        elapsed_s: clock.elapsed().as_secs_f64(),
        runs,
    };
    write(
        &out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;

    print!("{}", table.to_csv());
    if starved {
        eprintln!("warning: at least one stage lost all of its peers; see events/ for StarvationHalt records");
        return Ok(Status::Starved);
    }
    Ok(Status::Ok)
}

fn presets(requested: &[String]) -> Result<Vec<(String, LayerShape)>> {
    let names: Vec<String> = if requested.is_empty() {
        PRESET_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        requested.to_vec()
    };
    names
        .into_iter()
        .map(|n| {
            LayerShape::preset(&n)
                .map(|s| (n, s))
                .map_err(anyhow::Error::from)
        })
        .collect()
}

pub fn costmodel(args: &CostmodelArgs) -> Result<()> {
    let spec: CompressionSpec = args.compression.parse()?;
    let shapes = presets(&args.presets)?;
    let mut out =
        String::from("preset,rtt_ms,bandwidth_bps,compression,compute_s,comm_s,utilization\n");
    for (name, shape) in &shapes {
        for &rtt_ms in &args.rtt {
            let device = DeviceProfile {
                effective_flops: args.flops,
                upload_bps: args.bandwidth,
                download_bps: args.bandwidth,
                rtt_seconds: rtt_ms / 1000.0,
            };
            device.validate()?;
            let c = stage_cost(&spec.apply(shape), &device, !args.no_overlap);
            let _ = writeln!(
                out,
                "{name},{rtt_ms},{},{spec},{:.6},{:.6},{:.6}",
                args.bandwidth, c.compute_seconds, c.comm_seconds, c.utilization
            );
        }
    }
    print!("{out}");
    Ok(())
}

pub fn trace_gen(args: &TraceGenArgs) -> Result<()> {
    let (leave, join) = match (args.rate, args.leave_rate, args.join_rate) {
        (Some(r), _, _) => (r, r),
        (None, Some(l), Some(j)) => (l, j),
        _ => bail!("give --rate, or both --leave-rate and --join-rate"),
    };
    for (name, v) in [("rate", leave), ("rate", join), ("hours", args.hours)] {
        if !(v >= 0.0 && v.is_finite()) {
            bail!("--{name} must be finite and nonnegative, got {v}");
        }
    }
    if args.burst == 0 {
        bail!("--burst must be at least 1");
    }
    let params = StationaryParams {
        initial: args.initial,
        leave_per_hour: leave,
        join_per_hour: join,
        hours: args.hours,
        burst: args.burst,
        min_population: args.min_population,
    };
    let trace = generate_stationary(&params, args.seed);
    match &args.out {
        Some(path) => trace.save(path)?,
        None => print!("{}", trace.to_jsonl()),
    }
    Ok(())
}

const DEFAULT_SCHEMES: [&str; 5] = [
    "none",
    "int8",
    "bottleneck:0.5",
    "bottleneck:0.25",
    "maxout:4",
];

pub fn payload(args: &PayloadArgs) -> Result<()> {
    let specs: Vec<CompressionSpec> = if args.compressions.is_empty() {
        DEFAULT_SCHEMES
            .iter()
            .map(|s| s.parse())
            .collect::<Result<_, _>>()?
    } else {
        args.compressions
            .iter()
            .map(|s| s.parse())
            .collect::<Result<_, _>>()?
    };
    let mut out = String::from("preset,compression,bits_per_microbatch\n");
    for (name, shape) in presets(&[])? {
        for spec in &specs {
            let _ = writeln!(out, "{name},{spec},{}", payload_bits(&shape, spec));
        }
    }
    print!("{out}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_forms() {
        assert_eq!(parse_seeds("0..3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("7").unwrap(), vec![7]);
        assert_eq!(parse_seeds("4, 2").unwrap(), vec![4, 2]);
        assert!(parse_seeds("3..3").is_err());
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn mode_list() {
        let modes = parse_modes("none,T=300").unwrap();
        assert_eq!(
            modes,
            vec![
                RebalanceMode::None,
                RebalanceMode::Periodic { period_s: 300.0 }
            ]
        );
        assert_eq!(file_label(modes[1]), "T300");
        assert!(parse_modes("sometimes").is_err());
    }
}
