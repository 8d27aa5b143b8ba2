//! Stochastic wiring: interleaved weighted round-robin over the peers of each stage.
//!
//! Every peer carries one priority, the sum of the expected processing times of
//! all requests it has been handed so far. A request for stage `i` goes to the
//! lowest-priority peer serving `i`, whose priority then grows by its current
//! EMA of response time on every stage it serves. Banned peers stay queued with
//! an infinite priority until they are added again.

use serde::Serialize;
use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use thiserror::Error;

use crate::peer::{PeerId, StageIndex};

pub const DEFAULT_GAMMA: f64 = 0.1;
pub const DEFAULT_EPSILON: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum WiringError {
    #[error("no unbanned peer serves stage {0}")]
    NoPeerAvailable(StageIndex),
    #[error("stage {stage} out of range ({stages} stages)")]
    StageOutOfRange { stage: StageIndex, stages: usize },
    #[error("unknown peer {0}")]
    UnknownPeer(PeerId),
    #[error("elapsed time must be positive and finite, got {0}")]
    BadElapsed(f64),
    #[error("invalid smoothing parameters gamma={gamma} epsilon={epsilon}")]
    BadParams { gamma: f64, epsilon: f64 },
    #[error("starting priority must be finite and nonnegative, got {0}")]
    BadPriority(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Priority(f64);

impl Eq for Priority {}

impl PartialOrd for Priority {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Priority {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[derive(Debug, Clone)]
struct PeerRoute {
    ema: f64,
    priority: f64,
    stages: Vec<StageIndex>,
}

/// Per-trainer routing table. Owned by one trainer; `Send` so it can move between threads.
#[derive(Debug, Clone)]
pub struct RoutingState {
    gamma: f64,
    epsilon: f64,
    peers: HashMap<PeerId, PeerRoute>,
    // ties on priority resolve to the lowest PeerId through the tuple ordering
    queues: Vec<BTreeSet<(Priority, PeerId)>>,
}

/// Outcome reported by a server for one forward hop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HopOutcome {
    /// Completed after the given number of seconds.
    Done(f64),
    /// ServerFault or Timeout.
    Fault,
}

impl RoutingState {
    pub fn new(n_stages: usize, gamma: f64, epsilon: f64) -> Result<Self, WiringError> {
        if !(gamma > 0.0 && gamma <= 1.0) || !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(WiringError::BadParams { gamma, epsilon });
        }
        Ok(Self {
            gamma,
            epsilon,
            peers: HashMap::new(),
            queues: vec![BTreeSet::new(); n_stages],
        })
    }

    pub fn with_defaults(n_stages: usize) -> Self {
        Self::new(n_stages, DEFAULT_GAMMA, DEFAULT_EPSILON).expect("default parameters are valid")
    }

    pub fn n_stages(&self) -> usize {
        self.queues.len()
    }

    fn check_stage(&self, stage: StageIndex) -> Result<(), WiringError> {
        if stage < self.queues.len() {
            Ok(())
        } else {
            Err(WiringError::StageOutOfRange {
                stage,
                stages: self.queues.len(),
            })
        }
    }

    fn set_priority(&mut self, peer: PeerId, priority: f64) {
        let route = self
            .peers
            .get_mut(&peer)
            .expect("caller checked membership");
        let old = Priority(route.priority);
        route.priority = priority;
        for &s in &route.stages {
            self.queues[s].remove(&(old, peer));
            self.queues[s].insert((Priority(priority), peer));
        }
    }

    fn insert_peer(
        &mut self,
        peer: PeerId,
        stages: &[StageIndex],
        priority: f64,
        ema: f64,
    ) -> Result<(), WiringError> {
        for &s in stages {
            self.check_stage(s)?;
        }
        if let Some(old) = self.peers.remove(&peer) {
            for s in old.stages {
                self.queues[s].remove(&(Priority(old.priority), peer));
            }
        }
        let mut stages = stages.to_vec();
        stages.sort_unstable();
        stages.dedup();
        for &s in &stages {
            self.queues[s].insert((Priority(priority), peer));
        }
        self.peers.insert(
            peer,
            PeerRoute {
                ema,
                priority,
                stages,
            },
        );
        Ok(())
    }

    /// Registers `peer` on `stages` with priority and EMA both reset to ε.
    ///
    /// The served-stage set replaces whatever the peer served before.
    pub fn add_server(&mut self, peer: PeerId, stages: &[StageIndex]) -> Result<(), WiringError> {
        self.insert_peer(peer, stages, self.epsilon, self.epsilon)
    }

    /// Registers `peer` with an explicit starting priority and EMA instead of ε.
    ///
    /// A trainer that discovers a peer long after start-up can seed it with the
    /// stage's current averages so it is not flooded while its EMA catches up.
    pub fn add_server_warm(
        &mut self,
        peer: PeerId,
        stages: &[StageIndex],
        priority: f64,
        ema: f64,
    ) -> Result<(), WiringError> {
        if !(priority >= 0.0 && priority.is_finite()) {
            return Err(WiringError::BadPriority(priority));
        }
        if !(ema > 0.0 && ema.is_finite()) {
            return Err(WiringError::BadElapsed(ema));
        }
        self.insert_peer(peer, stages, priority, ema)
    }

    /// Mean EMA over unbanned peers queued on `stage`.
    pub fn mean_ema(&self, stage: StageIndex) -> Option<f64> {
        let (sum, n) = self
            .queues
            .get(stage)?
            .iter()
            .take_while(|(p, _)| p.0.is_finite())
            .fold((0.0, 0usize), |(s, n), (_, peer)| {
                (s + self.peers[peer].ema, n + 1)
            });
        (n > 0).then(|| sum / n as f64)
    }

    /// Smallest finite priority queued on `stage`.
    pub fn min_priority(&self, stage: StageIndex) -> Option<f64> {
        self.queues
            .get(stage)?
            .first()
            .map(|(p, _)| p.0)
            .filter(|v| v.is_finite())
    }

    pub fn ban_server(&mut self, peer: PeerId) -> Result<(), WiringError> {
        if !self.peers.contains_key(&peer) {
            return Err(WiringError::UnknownPeer(peer));
        }
        self.set_priority(peer, f64::INFINITY);
        Ok(())
    }

    pub fn choose_server(&mut self, stage: StageIndex) -> Result<PeerId, WiringError> {
        self.check_stage(stage)?;
        let &(Priority(priority), peer) = self.queues[stage]
            .first()
            .filter(|(p, _)| p.0.is_finite())
            .ok_or(WiringError::NoPeerAvailable(stage))?;
        let ema = self.peers[&peer].ema;
        self.set_priority(peer, priority + ema);
        Ok(peer)
    }

    /// `ema ← γ·elapsed + (1−γ)·ema`.
    pub fn record_response(&mut self, peer: PeerId, elapsed: f64) -> Result<(), WiringError> {
        if !(elapsed > 0.0 && elapsed.is_finite()) {
            return Err(WiringError::BadElapsed(elapsed));
        }
        let gamma = self.gamma;
        let route = self
            .peers
            .get_mut(&peer)
            .ok_or(WiringError::UnknownPeer(peer))?;
        route.ema = gamma * elapsed + (1.0 - gamma) * route.ema;
        Ok(())
    }

    /// Routes one microbatch through stages `0..n_stages`.
    ///
    /// `hop` runs the forward pass of a stage on a peer. On a fault the peer is
    /// banned and the same stage is retried; on success the EMA is updated with
    /// the reported elapsed time.
    pub fn route_forward<F>(
        &mut self,
        n_stages: usize,
        mut hop: F,
    ) -> Result<Vec<PeerId>, WiringError>
    where
        F: FnMut(PeerId, StageIndex) -> HopOutcome,
    {
        let mut route = Vec::with_capacity(n_stages);
        let mut stage = 0;
        while stage < n_stages {
            let peer = self.choose_server(stage)?;
            match hop(peer, stage) {
                HopOutcome::Done(elapsed) => {
                    stage += 1;
                    self.record_response(peer, elapsed)?;
                    route.push(peer);
                }
                HopOutcome::Fault => self.ban_server(peer)?,
            }
        }
        Ok(route)
    }

    pub fn ema(&self, peer: PeerId) -> Option<f64> {
        self.peers.get(&peer).map(|r| r.ema)
    }

    pub fn priority(&self, peer: PeerId) -> Option<f64> {
        self.peers.get(&peer).map(|r| r.priority)
    }

    pub fn is_banned(&self, peer: PeerId) -> bool {
        self.peers
            .get(&peer)
            .is_some_and(|r| r.priority.is_infinite())
    }

    /// True when `peer` is known, unbanned and serves `stage`.
    pub fn is_eligible(&self, peer: PeerId, stage: StageIndex) -> bool {
        self.peers
            .get(&peer)
            .is_some_and(|r| r.priority.is_finite() && r.stages.contains(&stage))
    }

    pub fn stages_served(&self, peer: PeerId) -> Option<&[StageIndex]> {
        self.peers.get(&peer).map(|r| r.stages.as_slice())
    }

    /// Queue contents in priority order; banned peers show `priority: null`.
    pub fn snapshot(&self) -> RoutingSnapshot {
        let mut ema: Vec<(PeerId, f64)> = self.peers.iter().map(|(p, r)| (*p, r.ema)).collect();
        ema.sort_unstable_by_key(|(p, _)| *p);
        RoutingSnapshot {
            gamma: self.gamma,
            epsilon: self.epsilon,
            ema: ema
                .into_iter()
                .map(|(peer, ema)| EmaEntry { peer, ema })
                .collect(),
            queues: self
                .queues
                .iter()
                .map(|q| {
                    q.iter()
                        .map(|(pr, peer)| QueueEntry {
                            peer: *peer,
                            priority: pr.0.is_finite().then_some(pr.0),
                        })
                        .collect()
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmaEntry {
    pub peer: PeerId,
    pub ema: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueueEntry {
    pub peer: PeerId,
    pub priority: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutingSnapshot {
    pub gamma: f64,
    pub epsilon: f64,
    pub ema: Vec<EmaEntry>,
    pub queues: Vec<Vec<QueueEntry>>,
}
