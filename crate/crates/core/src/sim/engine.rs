//! Discrete-event simulation of a swarm pipeline under preemption.
//!
//! Peers (workers) serve one stage each and process tasks FIFO. Trainers keep
//! a fixed number of microbatches in flight; every microbatch walks the stages
//! forward and then backward, choosing a peer per hop through the trainer's
//! own [`RoutingState`]. Peers learn about each other only through the
//! [`Registry`], and trainers learn about failures only by sending to a dead or
//! relocated peer.

use fnv::FnvHasher;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::hash::Hasher;

use super::config::{ChaosAction, ConfigError, JoinPriority, SimConfig};
use super::series::{oracle_series, Series, ThroughputSeries};
use crate::peer::{PeerId, StageIndex};
use crate::rebalancer::{
    self, collect_loads, decide, DecisionReason, Migration, RebalanceMode, StageLoadTable,
};
use crate::registry::Registry;
use crate::trace::Trace;
use crate::wiring::{RoutingSnapshot, RoutingState};

const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dir {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy)]
enum Ev {
    MigrationComplete { worker: u32, epoch: u32 },
    StageComplete { worker: u32, epoch: u32 },
    Trace { index: u32 },
    Chaos { index: u32 },
    Refresh,
    LoadPublish,
    RebalanceTick { round_start: f64 },
    Dispatch { slot: u32 },
}

impl Ev {
    fn rank(&self) -> u8 {
        match self {
            Ev::MigrationComplete { .. } => 0,
            Ev::StageComplete { .. } => 1,
            Ev::Trace { .. } => 2,
            Ev::Chaos { .. } => 3,
            Ev::Refresh => 4,
            Ev::LoadPublish => 5,
            Ev::RebalanceTick { .. } => 6,
            Ev::Dispatch { .. } => 7,
        }
    }
}

struct Scheduled {
    time: f64,
    rank: u8,
    seq: u64,
    ev: Ev,
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed: BinaryHeap is a max-heap
        other
            .time
            .total_cmp(&self.time)
            .then(other.rank.cmp(&self.rank))
            .then(other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scheduled {}

#[derive(Debug, Clone, Copy)]
struct Task {
    slot: u32,
    sent_at: f64,
}

#[derive(Debug)]
enum WorkerState {
    Serving,
    /// Downloading stage state, either after a move or as a newcomer (`from_stage == to_stage`).
    Migrating(Migration),
    /// Joined, waiting for the next rebalancing round to pick its stage.
    Pending,
    Dead,
}

#[derive(Debug)]
struct Worker {
    peer: PeerId,
    /// Current stage, or the destination while migrating.
    stage: StageIndex,
    state: WorkerState,
    fwd_s: f64,
    bwd_s: f64,
    download_bps: f64,
    queue: VecDeque<Task>,
    current: Option<Task>,
    epoch: u32,
    // exponentially smoothed load, accrued up to `load_t`
    load_avg: f64,
    load_t: f64,
}

impl Worker {
    /// Call before any change to the queue or the task in service.
    fn accrue(&mut self, now: f64, tau: f64) {
        let dt = now - self.load_t;
        if dt > 0.0 {
            let w = if tau > 0.0 { (-dt / tau).exp() } else { 0.0 };
            self.load_avg = w * self.load_avg + (1.0 - w) * self.load() as f64;
            self.load_t = now;
        }
    }

    /// Load as reported to the registry: the smoothed value, or the instantaneous one when `tau` is 0.
    fn reported_load(&mut self, now: f64, tau: f64) -> f64 {
        if tau > 0.0 {
            self.accrue(now, tau);
            self.load_avg
        } else {
            self.load() as f64
        }
    }

    fn is_serving(&self, stage: StageIndex) -> bool {
        matches!(self.state, WorkerState::Serving) && self.stage == stage
    }

    fn load(&self) -> usize {
        self.queue.len() + usize::from(self.current.is_some())
    }
}

struct Slot {
    trainer: u32,
    stage: StageIndex,
    dir: Dir,
    route: Vec<Option<PeerId>>,
}

struct Trainer {
    routing: RoutingState,
    cursor: usize,
}

/// Control-plane record, serialized as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    PeerJoin {
        t: f64,
        peer: PeerId,
        /// `None` while the newcomer waits for the next rebalancing round.
        stage: Option<StageIndex>,
    },
    PeerPlaced {
        t: f64,
        peer: PeerId,
        stage: StageIndex,
        serving_at: f64,
    },
    PeerReady {
        t: f64,
        peer: PeerId,
        stage: StageIndex,
    },
    PeerLeave {
        t: f64,
        peer: PeerId,
        stage: StageIndex,
        migrating: bool,
        requeued: usize,
    },
    LeaveSkipped {
        t: f64,
    },
    Rebalance {
        t: f64,
        round_start: f64,
        loads: Vec<f64>,
        mover: Option<PeerId>,
        from_stage: StageIndex,
        to_stage: StageIndex,
        reason: DecisionReason,
        applied: bool,
    },
    MigrationStart {
        t: f64,
        peer: PeerId,
        from_stage: StageIndex,
        to_stage: StageIndex,
        completes_at: f64,
    },
    MigrationComplete {
        t: f64,
        peer: PeerId,
        stage: StageIndex,
    },
    MigrationAbort {
        t: f64,
        peer: PeerId,
    },
    StarvationHalt {
        t: f64,
        stage: StageIndex,
    },
    StarvationResume {
        t: f64,
        stage: StageIndex,
    },
    Summary {
        t: f64,
        started: u64,
        completed: u64,
        in_flight: u64,
        requeued: u64,
        digest: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SimStats {
    /// Microbatches ever started, including warm-up.
    pub started: u64,
    /// Microbatches completed inside the measured window.
    pub completed: u64,
    /// Microbatches completed at any time, including warm-up.
    pub completed_total: u64,
    /// Microbatches queued, in service or waiting to retry when the run ended.
    pub in_flight: u64,
    /// Tasks handed back because their peer died or migrated.
    pub requeued: u64,
    /// Sends to a peer that was no longer serving the stage.
    pub faults: u64,
    /// Dispatch attempts that found no eligible peer.
    pub retries: u64,
    pub joins: u64,
    pub leaves: u64,
    pub leaves_skipped: u64,
    pub migrations: u64,
    pub migrations_aborted: u64,
    pub starvation_halts: u64,
    pub events: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimResult {
    pub mode: RebalanceMode,
    pub seed: u64,
    pub series: ThroughputSeries,
    /// Live peer count as a step function of measured time.
    pub population: Vec<(f64, u64)>,
    /// Per-stage microbatch rate of one reference device.
    pub reference_rates: Vec<f64>,
    pub log: Vec<LogRecord>,
    pub routing: Vec<RoutingSnapshot>,
    pub stats: SimStats,
    pub digest: u64,
    /// One entry per stage that came back from zero serving peers.
    pub recoveries: Vec<Recovery>,
    /// Serving peers per stage when the run ended.
    pub end_population: Vec<usize>,
}

/// A starved stage regaining a peer, and the first microbatch completed afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Recovery {
    pub stage: StageIndex,
    pub resumed_at: f64,
    /// Microbatches that were waiting for this stage when it came back.
    pub stalled: usize,
    pub first_completion_at: Option<f64>,
}

impl SimResult {
    pub fn oracle(&self) -> Series {
        oracle_series(
            &self.reference_rates,
            &self.population,
            self.series.bucket_s,
            self.series.counts.len(),
        )
    }

    pub fn starved(&self) -> bool {
        self.stats.starvation_halts > 0
    }

    pub fn events_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.log {
            out.push_str(&serde_json::to_string(r).expect("log records serialize"));
            out.push('\n');
        }
        out
    }
}

struct Engine<'a> {
    cfg: &'a SimConfig,
    trace: &'a Trace,
    mode: RebalanceMode,
    rng: ChaCha8Rng,
    jitter: ChaCha8Rng,
    now: f64,
    end: f64,
    seq: u64,
    heap: BinaryHeap<Scheduled>,
    workers: Vec<Worker>,
    members: Vec<Vec<u32>>,
    serving: Vec<usize>,
    pending: Vec<u32>,
    recoveries: Vec<Recovery>,
    /// Microbatches per stage waiting to retry because no peer was available.
    stalled: Vec<usize>,
    /// Recoveries before this index have seen a completion.
    recovered: usize,
    trainers: Vec<Trainer>,
    slots: Vec<Slot>,
    registry: Registry,
    last_table: Option<StageLoadTable>,
    transfer_bytes: u64,
    series: ThroughputSeries,
    population: Vec<(f64, u64)>,
    alive: u64,
    log: Vec<LogRecord>,
    stats: SimStats,
    digest: FnvHasher,
}

/// Runs one simulation. The same `(config, trace, mode, seed)` always yields the same result.
pub fn run(
    cfg: &SimConfig,
    trace: &Trace,
    mode: RebalanceMode,
    seed: u64,
) -> Result<SimResult, ConfigError> {
    cfg.validate()?;
    if let Some(p) = mode.period() {
        if !(p > 0.0 && p.is_finite()) {
            return Err(ConfigError::Invalid {
                field: "modes",
                reason: format!("period {p}"),
            });
        }
    }
    let duration = match cfg.duration_s {
        Some(d) => d,
        None if !trace.is_empty() && trace.end_time() > 0.0 => trace.end_time(),
        None => return Err(ConfigError::NoDuration),
    };
    let mut engine = Engine::new(cfg, trace, mode, seed, duration)?;
    engine.run_loop();
    Ok(engine.finish())
}

impl<'a> Engine<'a> {
    fn new(
        cfg: &'a SimConfig,
        trace: &'a Trace,
        mode: RebalanceMode,
        seed: u64,
        duration: f64,
    ) -> Result<Self, ConfigError> {
        let stages = cfg.stages;
        let buckets = (duration / cfg.bucket_s - TIME_EPS).ceil().max(1.0) as usize;
        let mut engine = Engine {
            cfg,
            trace,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            jitter: {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(1);
                r
            },
            now: 0.0,
            end: cfg.warmup_s + duration,
            seq: 0,
            heap: BinaryHeap::new(),
            workers: Vec::new(),
            members: vec![Vec::new(); stages],
            serving: vec![0; stages],
            pending: Vec::new(),
            recoveries: Vec::new(),
            stalled: vec![0; stages],
            recovered: 0,
            trainers: Vec::new(),
            slots: Vec::new(),
            registry: Registry::new(stages, cfg.registry),
            last_table: None,
            transfer_bytes: cfg.transfer_bytes()?,
            series: ThroughputSeries::new(cfg.bucket_s, buckets),
            population: Vec::new(),
            alive: 0,
            log: Vec::new(),
            stats: SimStats::default(),
            digest: FnvHasher::default(),
        };

        let announce_at = -cfg.registry.propagation_delay;
        for g in &cfg.initial_peers {
            let cycle = cfg.cycle_seconds(&g.device)?;
            for _ in 0..g.count {
                engine.spawn_worker(g.stage, cycle, g.device.download_bps, announce_at);
            }
        }
        engine.population.push((0.0, engine.alive));

        let w = cfg.wiring;
        for _ in 0..cfg.trainer_count() {
            let routing = RoutingState::new(stages, w.gamma, w.epsilon).map_err(|e| {
                ConfigError::Invalid {
                    field: "wiring",
                    reason: e.to_string(),
                }
            })?;
            engine.trainers.push(Trainer { routing, cursor: 0 });
        }
        for t in 0..engine.trainers.len() {
            for _ in 0..cfg.inflight_per_trainer {
                engine.slots.push(Slot {
                    trainer: t as u32,
                    stage: 0,
                    dir: Dir::Forward,
                    route: vec![None; stages],
                });
            }
        }

        for (i, e) in trace.events.iter().enumerate() {
            if e.t <= duration + TIME_EPS {
                engine.schedule(cfg.warmup_s + e.t, Ev::Trace { index: i as u32 });
            }
        }
        for (i, c) in cfg.chaos.iter().enumerate() {
            engine.schedule(cfg.warmup_s + c.time(), Ev::Chaos { index: i as u32 });
        }
        engine.schedule(cfg.registry.ttl / 2.0, Ev::Refresh);
        if let Some(p) = mode.period() {
            engine.schedule(p, Ev::LoadPublish);
        }
        Ok(engine)
    }

    fn schedule(&mut self, time: f64, ev: Ev) {
        self.seq += 1;
        self.heap.push(Scheduled {
            time,
            rank: ev.rank(),
            seq: self.seq,
            ev,
        });
    }

    fn run_loop(&mut self) {
        for slot in 0..self.slots.len() {
            self.stats.started += 1;
            self.dispatch(slot);
        }
        while let Some(next) = self.heap.peek() {
            if next.time > self.end + TIME_EPS {
                break;
            }
            let Scheduled { time, rank, ev, .. } = self.heap.pop().expect("peeked");
            self.now = time;
            self.stats.events += 1;
            self.digest.write_u64(time.to_bits());
            self.digest.write_u8(rank);
            match ev {
                Ev::StageComplete { worker, epoch } => {
                    self.digest.write_u32(worker);
                    self.on_stage_complete(worker as usize, epoch);
                }
                Ev::MigrationComplete { worker, epoch } => {
                    self.digest.write_u32(worker);
                    self.on_migration_complete(worker as usize, epoch);
                }
                Ev::Dispatch { slot } => {
                    self.digest.write_u32(slot);
                    self.stalled[self.slots[slot as usize].stage] -= 1;
                    self.dispatch(slot as usize);
                }
                Ev::Trace { index } => {
                    self.digest.write_u32(index);
                    let delta = self.trace.events[index as usize].delta;
                    if delta > 0 {
                        (0..delta).for_each(|_| self.join());
                    } else {
                        (0..-delta).for_each(|_| self.preempt());
                    }
                }
                Ev::Chaos { index } => {
                    self.digest.write_u32(index);
                    self.chaos(self.cfg.chaos[index as usize]);
                }
                Ev::Refresh => self.refresh(),
                Ev::LoadPublish => self.publish_loads(),
                Ev::RebalanceTick { round_start } => self.rebalance(round_start),
            }
        }
        self.now = self.end;
    }

    fn finish(mut self) -> SimResult {
        let waiting = self
            .heap
            .iter()
            .filter(|s| matches!(s.ev, Ev::Dispatch { .. }))
            .count() as u64;
        let held: u64 = self.workers.iter().map(|w| w.load() as u64).sum();
        self.stats.in_flight = waiting + held;
        let digest = self.digest.finish();
        self.log.push(LogRecord::Summary {
            t: self.now - self.cfg.warmup_s,
            started: self.stats.started,
            completed: self.stats.completed_total,
            in_flight: self.stats.in_flight,
            requeued: self.stats.requeued,
            digest: format!("{digest:016x}"),
        });
        let reference_rates = self.cfg.reference_rates().expect("validated");
        let routing = self
            .trainers
            .iter()
            .take(self.cfg.snapshot_trainers)
            .map(|t| t.routing.snapshot())
            .collect();
        SimResult {
            mode: self.mode,
            seed: 0,
            series: self.series,
            population: self.population,
            reference_rates,
            log: self.log,
            routing,
            stats: self.stats,
            digest,
            recoveries: self.recoveries,
            end_population: self.serving,
        }
    }

    fn rel(&self) -> f64 {
        self.now - self.cfg.warmup_s
    }

    fn record_population(&mut self) {
        let t = self.rel().max(0.0);
        match self.population.last_mut() {
            Some(last) if (last.0 - t).abs() <= TIME_EPS => last.1 = self.alive,
            _ => self.population.push((t, self.alive)),
        }
    }

    fn new_worker(
        &mut self,
        stage: StageIndex,
        state: WorkerState,
        cycle: f64,
        download_bps: f64,
    ) -> u32 {
        let id = self.workers.len() as u32;
        let fwd_s = cycle / 3.0;
        self.workers.push(Worker {
            peer: PeerId(u64::from(id)),
            stage,
            state,
            fwd_s,
            bwd_s: cycle - fwd_s,
            download_bps,
            queue: VecDeque::new(),
            current: None,
            epoch: 0,
            load_avg: 0.0,
            load_t: self.now,
        });
        self.alive += 1;
        id
    }

    /// A peer that is serving `stage` from the start of the run.
    fn spawn_worker(
        &mut self,
        stage: StageIndex,
        cycle: f64,
        download_bps: f64,
        announce_at: f64,
    ) -> u32 {
        let id = self.new_worker(stage, WorkerState::Serving, cycle, download_bps);
        self.members[stage].push(id);
        self.inc_serving(stage);
        self.registry
            .announce(
                PeerId(u64::from(id)),
                stage,
                announce_at,
                self.cfg.registry.ttl,
            )
            .expect("stage index checked by config validation");
        id
    }

    fn inc_serving(&mut self, stage: StageIndex) {
        self.serving[stage] += 1;
        if self.serving[stage] == 1 && self.now > 0.0 {
            self.log.push(LogRecord::StarvationResume {
                t: self.rel(),
                stage,
            });
            self.recoveries.push(Recovery {
                stage,
                resumed_at: self.rel(),
                stalled: self.stalled[stage],
                first_completion_at: None,
            });
        }
    }

    fn dec_serving(&mut self, stage: StageIndex) {
        self.serving[stage] -= 1;
        if self.serving[stage] == 0 {
            self.stats.starvation_halts += 1;
            self.log.push(LogRecord::StarvationHalt {
                t: self.rel(),
                stage,
            });
        }
    }

    /// Start time of work that becomes ready now, pushed past any all-reduce pause.
    fn start_time(&self) -> f64 {
        let a = self.cfg.allreduce;
        if a.period_s > 0.0 && a.duration_s > 0.0 {
            let phase = self.now.rem_euclid(a.period_s);
            if phase < a.duration_s {
                return self.now - phase + a.duration_s;
            }
        }
        self.now
    }

    fn sync_trainer(&mut self, t: usize) {
        let changes = self.registry.membership_changes();
        let trainer = &mut self.trainers[t];
        let start = trainer.cursor;
        while changes
            .get(trainer.cursor)
            .is_some_and(|c| c.visible_at <= self.now + TIME_EPS)
        {
            trainer.cursor += 1;
        }
        if start == trainer.cursor {
            return;
        }
        // seeds are taken before the batch so simultaneous discoveries do not stack
        let eps = self.cfg.wiring.epsilon;
        let seeds: Vec<(f64, f64)> = (0..self.cfg.stages)
            .map(|s| match self.cfg.wiring.join_priority {
                JoinPriority::Epsilon => (eps, eps),
                JoinPriority::WarmStart => {
                    match (trainer.routing.min_priority(s), trainer.routing.mean_ema(s)) {
                        (Some(floor), Some(ema)) => (floor, ema),
                        _ => (eps, eps),
                    }
                }
            })
            .collect();
        for c in &changes[start..trainer.cursor] {
            if !trainer.routing.is_eligible(c.peer, c.stage) {
                let (floor, ema) = seeds[c.stage];
                let offset: f64 = self.jitter.random::<f64>() * ema;
                trainer
                    .routing
                    .add_server_warm(c.peer, &[c.stage], floor + offset, ema)
                    .expect("stage index from registry is in range");
            }
        }
    }

    fn dispatch(&mut self, slot: usize) {
        let t = self.slots[slot].trainer as usize;
        let stage = self.slots[slot].stage;
        self.sync_trainer(t);
        let routing = &mut self.trainers[t].routing;
        let mut preferred = match self.slots[slot].dir {
            Dir::Backward => {
                self.slots[slot].route[stage].filter(|&p| routing.is_eligible(p, stage))
            }
            Dir::Forward => None,
        };
        loop {
            let peer = match preferred.take() {
                Some(p) => p,
                None => match routing.choose_server(stage) {
                    Ok(p) => p,
                    Err(_) => {
                        self.stats.retries += 1;
                        self.stalled[stage] += 1;
                        let at = self.now + self.cfg.retry_interval_s;
                        self.schedule(at, Ev::Dispatch { slot: slot as u32 });
                        return;
                    }
                },
            };
            let w = peer.0 as usize;
            if self.workers[w].is_serving(stage) {
                self.enqueue(
                    w,
                    Task {
                        slot: slot as u32,
                        sent_at: self.now,
                    },
                );
                return;
            }
            self.stats.faults += 1;
            routing
                .ban_server(peer)
                .expect("peer came from this routing table");
        }
    }

    fn enqueue(&mut self, w: usize, task: Task) {
        self.workers[w].accrue(self.now, self.cfg.load_smoothing_s);
        self.workers[w].queue.push_back(task);
        if self.workers[w].current.is_none() {
            self.start_next(w);
        }
    }

    fn start_next(&mut self, w: usize) {
        let Some(task) = self.workers[w].queue.pop_front() else {
            return;
        };
        let worker = &mut self.workers[w];
        worker.current = Some(task);
        let service = match self.slots[task.slot as usize].dir {
            Dir::Forward => worker.fwd_s,
            Dir::Backward => worker.bwd_s,
        };
        let epoch = worker.epoch;
        let at = self.start_time() + service;
        self.schedule(
            at,
            Ev::StageComplete {
                worker: w as u32,
                epoch,
            },
        );
    }

    fn on_stage_complete(&mut self, w: usize, epoch: u32) {
        if self.workers[w].epoch != epoch {
            return;
        }
        self.workers[w].accrue(self.now, self.cfg.load_smoothing_s);
        let task = self.workers[w]
            .current
            .take()
            .expect("completion for an idle worker");
        let peer = self.workers[w].peer;
        self.start_next(w);

        let slot = task.slot as usize;
        let n_stages = self.cfg.stages;
        let s = &mut self.slots[slot];
        match s.dir {
            Dir::Forward => {
                let elapsed = self.now - task.sent_at;
                if elapsed > 0.0 {
                    let _ = self.trainers[s.trainer as usize]
                        .routing
                        .record_response(peer, elapsed);
                }
                s.route[s.stage] = Some(peer);
                if s.stage + 1 < n_stages {
                    s.stage += 1;
                } else {
                    s.dir = Dir::Backward;
                }
            }
            Dir::Backward if s.stage > 0 => s.stage -= 1,
            Dir::Backward => {
                s.dir = Dir::Forward;
                s.route.iter_mut().for_each(|r| *r = None);
                self.complete_microbatch();
            }
        }
        self.dispatch(slot);
    }

    fn complete_microbatch(&mut self) {
        self.stats.completed_total += 1;
        let rel = self.rel();
        for r in self.recoveries[self.recovered..].iter_mut() {
            r.first_completion_at = Some(rel);
        }
        self.recovered = self.recoveries.len();
        self.stats.started += 1;
        if rel >= -TIME_EPS {
            let idx = ((rel.max(0.0)) / self.series.bucket_s).floor() as usize;
            let idx = if idx == self.series.counts.len()
                && rel <= self.series.counts.len() as f64 * self.series.bucket_s + TIME_EPS
            {
                idx - 1
            } else {
                idx
            };
            if let Some(c) = self.series.counts.get_mut(idx) {
                *c += 1;
                self.stats.completed += 1;
            }
        }
    }

    /// Takes every task away from `w` and sends each back to its trainer for re-routing.
    fn evict_tasks(&mut self, w: usize) -> usize {
        let worker = &mut self.workers[w];
        worker.accrue(self.now, self.cfg.load_smoothing_s);
        worker.epoch += 1;
        let peer = worker.peer;
        let tasks: Vec<Task> = worker
            .current
            .take()
            .into_iter()
            .chain(worker.queue.drain(..))
            .collect();
        for task in &tasks {
            self.stats.requeued += 1;
            let t = self.slots[task.slot as usize].trainer as usize;
            let _ = self.trainers[t].routing.ban_server(peer);
            self.dispatch(task.slot as usize);
        }
        tasks.len()
    }

    fn kill(&mut self, w: usize) {
        let stage = self.workers[w].stage;
        let state = std::mem::replace(&mut self.workers[w].state, WorkerState::Dead);
        let migrating = match state {
            WorkerState::Dead => return,
            WorkerState::Serving => {
                self.dec_serving(stage);
                false
            }
            WorkerState::Migrating(m) => {
                if m.from_stage != m.to_stage {
                    self.stats.migrations_aborted += 1;
                }
                true
            }
            WorkerState::Pending => {
                self.pending.retain(|&p| p as usize != w);
                false
            }
        };
        self.members[stage].retain(|&m| m as usize != w);
        self.alive -= 1;
        self.stats.leaves += 1;
        let peer = self.workers[w].peer;
        if migrating {
            self.log.push(LogRecord::MigrationAbort {
                t: self.rel(),
                peer,
            });
        }
        let requeued = self.evict_tasks(w);
        self.log.push(LogRecord::PeerLeave {
            t: self.rel(),
            peer,
            stage,
            migrating,
            requeued,
        });
        self.record_population();
    }

    fn empty_stage(&self) -> Option<StageIndex> {
        (0..self.cfg.stages).find(|&s| self.members[s].is_empty())
    }

    fn join(&mut self) {
        let device = self.cfg.join_device();
        let cycle = self.cfg.cycle_seconds(&device).expect("validated");
        let id = self.new_worker(0, WorkerState::Pending, cycle, device.download_bps);
        self.stats.joins += 1;
        let stage = if self.cfg.stages == 1 {
            Some(0)
        } else if let Some(s) = self.empty_stage() {
            Some(s)
        } else if self.mode == RebalanceMode::None {
            Some(self.rng.random_range(0..self.cfg.stages))
        } else {
            None
        };
        self.log.push(LogRecord::PeerJoin {
            t: self.rel(),
            peer: PeerId(u64::from(id)),
            stage,
        });
        match stage {
            Some(s) => self.place(id as usize, s),
            None => self.pending.push(id),
        }
        self.record_population();
    }

    /// Starts the state download of a newcomer on `stage`.
    fn place(&mut self, w: usize, stage: StageIndex) {
        let peer = self.workers[w].peer;
        let downtime = self.transfer_bytes as f64 * 8.0 / self.workers[w].download_bps;
        let migration = Migration {
            peer,
            from_stage: stage,
            to_stage: stage,
            started_at: self.now,
            completes_at: self.now + downtime,
        };
        self.workers[w].stage = stage;
        self.workers[w].state = WorkerState::Migrating(migration);
        self.members[stage].push(w as u32);
        self.log.push(LogRecord::PeerPlaced {
            t: self.rel(),
            peer,
            stage,
            serving_at: migration.completes_at - self.cfg.warmup_s,
        });
        let epoch = self.workers[w].epoch;
        self.schedule(
            migration.completes_at,
            Ev::MigrationComplete {
                worker: w as u32,
                epoch,
            },
        );
    }

    fn removable(&self, stage: StageIndex) -> Vec<u32> {
        let spare = self.serving[stage] >= 2;
        self.members[stage]
            .iter()
            .copied()
            .filter(|&m| match self.workers[m as usize].state {
                WorkerState::Migrating(_) => true,
                WorkerState::Serving => spare,
                WorkerState::Pending | WorkerState::Dead => false,
            })
            .collect()
    }

    /// Removes one random peer, never the last serving peer of a stage.
    fn preempt(&mut self) {
        let stages = self.cfg.stages;
        let mut stage = self.rng.random_range(0..stages);
        let mut candidates = self.removable(stage);
        if candidates.is_empty() {
            let open: Vec<StageIndex> = (0..stages)
                .filter(|&s| !self.removable(s).is_empty())
                .collect();
            if open.is_empty() {
                self.stats.leaves_skipped += 1;
                self.log.push(LogRecord::LeaveSkipped { t: self.rel() });
                return;
            }
            stage = open[self.rng.random_range(0..open.len())];
            candidates = self.removable(stage);
        }
        let victim = candidates[self.rng.random_range(0..candidates.len())];
        self.kill(victim as usize);
    }

    fn chaos(&mut self, action: ChaosAction) {
        match action {
            ChaosAction::KillAllButOne { .. } => {
                for stage in 0..self.cfg.stages {
                    let serving: Vec<u32> = self.members[stage]
                        .iter()
                        .copied()
                        .filter(|&m| self.workers[m as usize].is_serving(stage))
                        .collect();
                    let survivor = (!serving.is_empty())
                        .then(|| serving[self.rng.random_range(0..serving.len())]);
                    let doomed: Vec<u32> = self.members[stage]
                        .iter()
                        .copied()
                        .filter(|&m| Some(m) != survivor)
                        .collect();
                    for m in doomed {
                        self.kill(m as usize);
                    }
                }
            }
            ChaosAction::KillStage { stage, .. } => {
                if stage < self.cfg.stages {
                    for m in self.members[stage].clone() {
                        self.kill(m as usize);
                    }
                }
            }
        }
    }

    fn refresh(&mut self) {
        let ttl = self.cfg.registry.ttl;
        for w in &self.workers {
            if matches!(w.state, WorkerState::Serving) {
                self.registry
                    .announce(w.peer, w.stage, self.now, ttl)
                    .expect("worker stage is in range");
            }
        }
        let horizon =
            self.now - self.cfg.registry.straggler_timeout - self.cfg.registry.propagation_delay;
        self.registry.compact(horizon);
        self.schedule(self.now + ttl / 2.0, Ev::Refresh);
    }

    fn publish_loads(&mut self) {
        let ttl = self.cfg.registry.ttl;
        let tau = self.cfg.load_smoothing_s;
        for w in &mut self.workers {
            if matches!(w.state, WorkerState::Serving) {
                let q = w.reported_load(self.now, tau);
                self.registry
                    .announce(w.peer, w.stage, self.now, ttl)
                    .expect("worker stage is in range");
                self.registry
                    .publish_load(w.peer, w.stage, q, self.now)
                    .expect("announced just above");
            }
        }
        let round_start = self.now;
        self.schedule(
            self.now + self.cfg.registry.straggler_timeout,
            Ev::RebalanceTick { round_start },
        );
        if let Some(p) = self.mode.period() {
            self.schedule(self.now + p, Ev::LoadPublish);
        }
    }

    fn rebalance(&mut self, round_start: f64) {
        let table = collect_loads(
            &self.registry,
            round_start,
            self.cfg.registry.straggler_timeout,
        );
        let decision = decide(&table, self.transfer_bytes);
        let mut applied = false;
        if let Some(peer) = decision.mover {
            let w = peer.0 as usize;
            let valid = self
                .workers
                .get(w)
                .is_some_and(|wk| wk.is_serving(decision.from_stage))
                && self.serving[decision.from_stage] >= 2;
            if valid {
                let download = self.workers[w].download_bps;
                let migration =
                    rebalancer::apply(&decision, &mut self.registry, download, self.now)
                        .expect("mover is announced and bandwidth validated")
                        .expect("decision has a mover");
                self.start_migration(w, migration);
                applied = true;
            }
        }
        self.log.push(LogRecord::Rebalance {
            t: self.rel(),
            round_start: round_start - self.cfg.warmup_s,
            loads: table.loads().to_vec(),
            mover: decision.mover,
            from_stage: decision.from_stage,
            to_stage: decision.to_stage,
            reason: decision.reason,
            applied,
        });
        // each newcomer goes to the stage with the most queued work; a stage's load
        // shrinks by n/(n+1) for every newcomer already sent there
        let mut loads = table.loads().to_vec();
        for w in std::mem::take(&mut self.pending) {
            let stage = self.empty_stage().unwrap_or_else(|| argmax(&loads));
            let n = self.members[stage].len() as f64;
            loads[stage] *= n / (n + 1.0);
            self.place(w as usize, stage);
        }
        self.last_table = Some(table);
    }

    fn start_migration(&mut self, w: usize, migration: Migration) {
        let from = migration.from_stage;
        let to = migration.to_stage;
        self.dec_serving(from);
        self.members[from].retain(|&m| m as usize != w);
        self.members[to].push(w as u32);
        self.workers[w].stage = to;
        self.workers[w].state = WorkerState::Migrating(migration);
        self.stats.migrations += 1;
        self.log.push(LogRecord::MigrationStart {
            t: self.rel(),
            peer: migration.peer,
            from_stage: from,
            to_stage: to,
            completes_at: migration.completes_at - self.cfg.warmup_s,
        });
        self.evict_tasks(w);
        let epoch = self.workers[w].epoch;
        self.schedule(
            migration.completes_at,
            Ev::MigrationComplete {
                worker: w as u32,
                epoch,
            },
        );
    }

    fn on_migration_complete(&mut self, w: usize, epoch: u32) {
        if self.workers[w].epoch != epoch {
            return;
        }
        let WorkerState::Migrating(migration) = self.workers[w].state else {
            return;
        };
        migration
            .complete(&mut self.registry, self.cfg.registry.ttl)
            .expect("destination stage is in range");
        self.workers[w].state = WorkerState::Serving;
        self.inc_serving(migration.to_stage);
        let t = self.rel();
        self.log
            .push(if migration.from_stage == migration.to_stage {
                LogRecord::PeerReady {
                    t,
                    peer: migration.peer,
                    stage: migration.to_stage,
                }
            } else {
                LogRecord::MigrationComplete {
                    t,
                    peer: migration.peer,
                    stage: migration.to_stage,
                }
            });
    }
}

/// [`run`] with the seed recorded in the result.
pub fn run_seeded(
    cfg: &SimConfig,
    trace: &Trace,
    mode: RebalanceMode,
    seed: u64,
) -> Result<SimResult, ConfigError> {
    let mut r = run(cfg, trace, mode, seed)?;
    r.seed = seed;
    Ok(r)
}

fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0
}
