//! Periodic cross-stage rebalancing.
//!
//! Every round each peer reports its queue size under its stage's key. All peers
//! then compute the same view: the stage with the largest total queue is the
//! bottleneck, and the peer with the smallest queue in the least-loaded stage
//! moves there after downloading that stage's parameters and optimizer state.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

use crate::cost_model::{params_per_layer, LayerShape};
use crate::peer::{PeerId, StageIndex};
use crate::registry::{Registry, RegistryError};

#[derive(Debug, Error, PartialEq)]
pub enum RebalanceError {
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("download bandwidth must be positive, got {0}")]
    BadBandwidth(f64),
    #[error("invalid rebalance mode `{0}` (expected `none` or `T=<seconds>`)")]
    BadMode(String),
}

/// When rebalancing rounds run.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum RebalanceMode {
    #[default]
    None,
    Periodic {
        period_s: f64,
    },
}

impl RebalanceMode {
    pub fn period(&self) -> Option<f64> {
        match self {
            RebalanceMode::None => None,
            RebalanceMode::Periodic { period_s } => Some(*period_s),
        }
    }
}

impl fmt::Display for RebalanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RebalanceMode::None => f.write_str("none"),
            RebalanceMode::Periodic { period_s } => write!(f, "T={period_s}"),
        }
    }
}

impl FromStr for RebalanceMode {
    type Err = RebalanceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("none") {
            return Ok(RebalanceMode::None);
        }
        let period = s
            .strip_prefix("T=")
            .or_else(|| s.strip_prefix("t="))
            .and_then(|v| v.parse::<f64>().ok())
            .filter(|p| *p > 0.0 && p.is_finite())
            .ok_or_else(|| RebalanceError::BadMode(s.to_string()))?;
        Ok(RebalanceMode::Periodic { period_s: period })
    }
}

impl Serialize for RebalanceMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RebalanceMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Queue sizes reported for one round, grouped by stage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageLoadTable {
    loads: Vec<f64>,
    members: Vec<BTreeMap<PeerId, f64>>,
}

impl StageLoadTable {
    pub fn new(stages: usize) -> Self {
        Self {
            loads: vec![0.0; stages],
            members: vec![BTreeMap::new(); stages],
        }
    }

    pub fn from_members(members: Vec<BTreeMap<PeerId, f64>>) -> Self {
        let loads = members.iter().map(|m| m.values().sum()).collect();
        Self { loads, members }
    }

    /// Records `queue_size` for `peer`, replacing an earlier report on the same stage.
    pub fn insert(&mut self, stage: StageIndex, peer: PeerId, queue_size: f64) {
        if let Some(old) = self.members[stage].insert(peer, queue_size) {
            self.loads[stage] -= old;
        }
        self.loads[stage] += queue_size;
    }

    pub fn stages(&self) -> usize {
        self.loads.len()
    }

    pub fn loads(&self) -> &[f64] {
        &self.loads
    }

    pub fn members(&self, stage: StageIndex) -> &BTreeMap<PeerId, f64> {
        &self.members[stage]
    }

    pub fn peer_count(&self) -> usize {
        self.members.iter().map(BTreeMap::len).sum()
    }

    /// Stage with the largest load, first one on ties.
    pub fn max_load_stage(&self) -> Option<StageIndex> {
        let mut best: Option<(StageIndex, f64)> = None;
        for (s, &l) in self.loads.iter().enumerate() {
            if best.is_none_or(|(_, b)| l > b) {
                best = Some((s, l));
            }
        }
        best.map(|(s, _)| s)
    }
}

/// Loads reported in `[round_start, round_start + straggler_timeout]`; late reports are omitted.
pub fn collect_loads(
    registry: &Registry,
    round_start: f64,
    straggler_timeout: f64,
) -> StageLoadTable {
    let deadline = round_start + straggler_timeout;
    StageLoadTable::from_members(
        (0..registry.stages())
            .map(|s| registry.loads_reported(s, round_start, deadline))
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionReason {
    Move,
    /// Least- and most-loaded stage coincide.
    Balanced,
    /// The least-loaded stage reported no members.
    EmptySource,
    /// The least-loaded stage has a single member, which must stay.
    LastPeer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RebalanceDecision {
    pub mover: Option<PeerId>,
    pub from_stage: StageIndex,
    pub to_stage: StageIndex,
    pub state_transfer_bytes: u64,
    pub reason: DecisionReason,
}

/// One rebalancing decision; see [`decide_counted`] for the operation count.
pub fn decide(table: &StageLoadTable, state_transfer_bytes: u64) -> RebalanceDecision {
    decide_counted(table, state_transfer_bytes).0
}

/// Decision plus the number of elementary steps taken (stage visits and member visits).
pub fn decide_counted(
    table: &StageLoadTable,
    state_transfer_bytes: u64,
) -> (RebalanceDecision, u64) {
    let mut ops = 0u64;
    let (mut s_min, mut s_max) = (0, 0);
    let (mut l_min, mut l_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for (s, members) in table.members.iter().enumerate() {
        ops += 1;
        let mut load = 0.0;
        for q in members.values() {
            ops += 1;
            load += q;
        }
        if load > l_max {
            s_max = s;
            l_max = load;
        }
        if load < l_min {
            s_min = s;
            l_min = load;
        }
    }

    // no move, but the pair that would have been rebalanced is still reported
    let stay = |reason| RebalanceDecision {
        mover: None,
        from_stage: s_min,
        to_stage: s_max,
        state_transfer_bytes: 0,
        reason,
    };
    if s_min == s_max {
        return (stay(DecisionReason::Balanced), ops);
    }
    let source = &table.members[s_min];
    if source.is_empty() {
        return (stay(DecisionReason::EmptySource), ops);
    }
    if source.len() == 1 {
        return (stay(DecisionReason::LastPeer), ops);
    }

    let mut mover = None;
    let mut q_min = f64::INFINITY;
    for (&peer, &q) in source {
        ops += 1;
        if q < q_min {
            mover = Some(peer);
            q_min = q;
        }
    }
    let decision = RebalanceDecision {
        mover,
        from_stage: s_min,
        to_stage: s_max,
        state_transfer_bytes,
        reason: DecisionReason::Move,
    };
    (decision, ops)
}

/// Parameters in 16-bit precision plus two optimizer statistics of the same size.
pub fn default_state_transfer_bytes(shape: &LayerShape) -> u64 {
    let params_bytes = params_per_layer(shape) * shape.layers_per_stage * 2;
    params_bytes * 3
}

/// A peer in the middle of switching stages. It serves neither stage until completed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Migration {
    pub peer: PeerId,
    pub from_stage: StageIndex,
    pub to_stage: StageIndex,
    pub started_at: f64,
    pub completes_at: f64,
}

impl Migration {
    pub fn downtime(&self) -> f64 {
        self.completes_at - self.started_at
    }

    /// Announces the mover on its new stage once the state download finishes.
    pub fn complete(&self, registry: &mut Registry, ttl: f64) -> Result<(), RebalanceError> {
        registry.announce(self.peer, self.to_stage, self.completes_at, ttl)?;
        Ok(())
    }
}

/// Withdraws the mover from its current stage and schedules its arrival on the new one.
///
/// Dropping the returned [`Migration`] without calling `complete` aborts it; the
/// peer then appears on neither stage.
pub fn apply(
    decision: &RebalanceDecision,
    registry: &mut Registry,
    download_bps: f64,
    now: f64,
) -> Result<Option<Migration>, RebalanceError> {
    let Some(peer) = decision.mover else {
        return Ok(None);
    };
    if !(download_bps > 0.0) {
        return Err(RebalanceError::BadBandwidth(download_bps));
    }
    registry.withdraw(peer, decision.from_stage, now)?;
    let downtime = decision.state_transfer_bytes as f64 * 8.0 / download_bps;
    Ok(Some(Migration {
        peer,
        from_stage: decision.from_stage,
        to_stage: decision.to_stage,
        started_at: now,
        completes_at: now + downtime,
    }))
}

/// Elementary-step count of one decision over `stages` stages of `peers_per_stage` members.
pub fn complexity_probe(peers_per_stage: usize, stages: usize) -> u64 {
    let members = (0..stages)
        .map(|s| {
            (0..peers_per_stage)
                .map(|j| {
                    let id = (s * peers_per_stage + j) as u64;
                    // stage 0 is the lightest so a mover search always happens
                    let q = if s == 0 {
                        (j % 3) as f64
                    } else {
                        ((id * 7919) % 13) as f64 + 3.0
                    };
                    (PeerId(id), q)
                })
                .collect()
        })
        .collect();
    decide_counted(&StageLoadTable::from_members(members), 0).1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::RegistryConfig;

    fn table(stages: &[&[(u64, f64)]]) -> StageLoadTable {
        StageLoadTable::from_members(
            stages
                .iter()
                .map(|m| m.iter().map(|&(p, q)| (PeerId(p), q)).collect())
                .collect(),
        )
    }

    #[test]
    fn moves_from_light_to_heavy() {
        let t = table(&[&[(1, 6.0), (2, 4.0)], &[(10, 1.0), (11, 1.0)]]);
        assert_eq!(t.loads(), &[10.0, 2.0]);
        let d = decide(&t, 42);
        assert_eq!(d.mover, Some(PeerId(10)));
        assert_eq!((d.from_stage, d.to_stage), (1, 0));
        assert_eq!(d.state_transfer_bytes, 42);
    }

    #[test]
    fn single_member_source_stays() {
        let t = table(&[&[(1, 6.0), (2, 4.0)], &[(10, 2.0)]]);
        let d = decide(&t, 42);
        assert_eq!(d.mover, None);
        assert_eq!(d.reason, DecisionReason::LastPeer);
        assert_eq!((d.from_stage, d.to_stage), (1, 0));
    }

    #[test]
    fn uniform_is_balanced() {
        let t = table(&[&[(1, 5.0)], &[(2, 5.0)]]);
        let d = decide(&t, 1);
        assert_eq!(d.mover, None);
        assert_eq!((d.from_stage, d.to_stage), (0, 0));
        assert_eq!(d.reason, DecisionReason::Balanced);
    }

    #[test]
    fn smallest_queue_moves() {
        let t = table(&[&[(1, 9.0), (2, 9.0)], &[(3, 3.0), (4, 1.0)]]);
        assert_eq!(decide(&t, 0).mover, Some(PeerId(4)));
    }

    #[test]
    fn empty_source_stage() {
        let t = table(&[&[(1, 9.0)], &[]]);
        let d = decide(&t, 0);
        assert_eq!(d.reason, DecisionReason::EmptySource);
        assert_eq!(d.mover, None);
    }

    #[test]
    fn collect_reproduces_published_loads() {
        let mut r = Registry::new(2, RegistryConfig::default());
        for (p, s) in [(1, 0), (2, 0), (3, 1)] {
            r.announce(PeerId(p), s, 0.0, 600.0).unwrap();
        }
        r.publish_load(PeerId(1), 0, 6.0, 300.0).unwrap();
        r.publish_load(PeerId(2), 0, 4.0, 300.0).unwrap();
        r.publish_load(PeerId(3), 1, 2.0, 300.0).unwrap();
        let t = collect_loads(&r, 300.0, 5.0);
        assert_eq!(t.loads(), &[10.0, 2.0]);
        assert_eq!(t.peer_count(), 3);

        // a straggler reporting after the timeout is left out
        for (p, s) in [(1, 0), (2, 0), (3, 1)] {
            r.announce(PeerId(p), s, 590.0, 600.0).unwrap();
        }
        r.publish_load(PeerId(3), 1, 2.0, 600.0).unwrap();
        r.publish_load(PeerId(1), 0, 6.0, 600.0).unwrap();
        r.publish_load(PeerId(2), 0, 4.0, 604.5).unwrap();
        let t = collect_loads(&r, 600.0, 5.0);
        assert_eq!(t.loads(), &[6.0, 2.0]);

        let empty = collect_loads(&Registry::new(3, RegistryConfig::default()), 0.0, 5.0);
        assert_eq!(empty.loads(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn migration_downtime() {
        let mut r = Registry::new(2, RegistryConfig::default());
        r.announce(PeerId(1), 1, 0.0, 600.0).unwrap();
        let d = RebalanceDecision {
            mover: Some(PeerId(1)),
            from_stage: 1,
            to_stage: 0,
            state_transfer_bytes: 125_000_000, // 1 Gbit
            reason: DecisionReason::Move,
        };
        let m = apply(&d, &mut r, 500e6, 10.0).unwrap().unwrap();
        assert_eq!(m.downtime(), 2.0);
        m.complete(&mut r, 600.0).unwrap();
        assert!(r.get_stage_peers(0, 13.0).contains(&PeerId(1)));
        assert!(!r.get_stage_peers(1, 13.0).contains(&PeerId(1)));

        let zero = RebalanceDecision {
            state_transfer_bytes: 0,
            from_stage: 0,
            to_stage: 1,
            ..d
        };
        let m = apply(&zero, &mut r, 500e6, 20.0).unwrap().unwrap();
        assert_eq!(m.downtime(), 0.0);
    }

    #[test]
    fn aborted_migration_leaves_no_trace() {
        let mut r = Registry::new(2, RegistryConfig::default());
        r.announce(PeerId(1), 1, 0.0, 600.0).unwrap();
        let d = RebalanceDecision {
            mover: Some(PeerId(1)),
            from_stage: 1,
            to_stage: 0,
            state_transfer_bytes: 125_000_000,
            reason: DecisionReason::Move,
        };
        let m = apply(&d, &mut r, 500e6, 10.0).unwrap().unwrap();
        // preempted at half transfer: never completed
        let t = m.started_at + m.downtime() / 2.0;
        for at in [t, t + 5.0, 100.0] {
            assert!(!r.get_stage_peers(0, at).contains(&PeerId(1)));
        }
        assert!(!r.get_stage_peers(1, 12.0).contains(&PeerId(1)));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(
            "none".parse::<RebalanceMode>().unwrap(),
            RebalanceMode::None
        );
        assert_eq!(
            "T=300".parse::<RebalanceMode>().unwrap(),
            RebalanceMode::Periodic { period_s: 300.0 }
        );
        assert!("T=0".parse::<RebalanceMode>().is_err());
        assert!("sometimes".parse::<RebalanceMode>().is_err());
        assert_eq!(
            RebalanceMode::Periodic { period_s: 60.0 }.to_string(),
            "T=60"
        );
    }

    #[test]
    fn probe_counts_grow_with_size() {
        assert!(complexity_probe(1, 1) >= 1);
        assert!(complexity_probe(64, 8) < complexity_probe(128, 8));
    }

    #[test]
    fn transfer_bytes_default() {
        let shape = LayerShape::preset("xxlarge").unwrap();
        assert_eq!(default_state_transfer_bytes(&shape), 201_326_592 * 2 * 3);
    }
}
