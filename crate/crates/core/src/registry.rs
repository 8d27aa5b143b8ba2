//! Key → {subkey → (value, expiration)} store standing in for the DHT.
//!
//! Each stage has two keys: one for peer announcements and one for published
//! queue sizes. Writes become visible after a fixed propagation delay and stay
//! visible until they expire or are superseded (last write wins per subkey).

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

use crate::peer::{PeerId, StageIndex};

#[derive(Debug, Error, PartialEq)]
pub enum RegistryError {
    #[error("stage {stage} out of range (registry has {stages} stages)")]
    StageOutOfRange { stage: StageIndex, stages: usize },
    #[error("negative or non-finite queue size {0}")]
    BadLoad(f64),
    #[error("{peer} has not announced itself on stage {stage}")]
    NotAnnounced { peer: PeerId, stage: StageIndex },
    #[error("ttl must be positive, got {0}")]
    BadTtl(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistryConfig {
    pub propagation_delay: f64,
    pub ttl: f64,
    /// How long a rebalancing round waits for load reports.
    pub straggler_timeout: f64,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        Self {
            propagation_delay: 1.0,
            ttl: 300.0,
            straggler_timeout: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
struct Record {
    written_at: f64,
    visible_at: f64,
    expires_at: f64,
    /// `None` marks a withdrawal.
    value: Option<f64>,
}

impl Record {
    fn live_at(&self, t: f64) -> bool {
        self.value.is_some() && t < self.expires_at
    }
}

type History = Vec<Record>;

fn latest_visible(h: &History, t: f64) -> Option<&Record> {
    let idx = h.partition_point(|r| r.visible_at <= t);
    idx.checked_sub(1).map(|i| &h[i])
}

fn insert_ordered(h: &mut History, rec: Record) {
    let idx = h.partition_point(|r| r.written_at <= rec.written_at);
    h.insert(idx, rec);
}

/// A peer newly appearing on a stage, in write order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MembershipChange {
    pub peer: PeerId,
    pub stage: StageIndex,
    pub visible_at: f64,
}

#[derive(Debug, Clone)]
pub struct Registry {
    config: RegistryConfig,
    announcements: Vec<BTreeMap<PeerId, History>>,
    loads: Vec<BTreeMap<PeerId, History>>,
    changes: Vec<MembershipChange>,
}

impl Registry {
    pub fn new(stages: usize, config: RegistryConfig) -> Self {
        Self {
            config,
            announcements: vec![BTreeMap::new(); stages],
            loads: vec![BTreeMap::new(); stages],
            changes: Vec::new(),
        }
    }

    pub fn config(&self) -> &RegistryConfig {
        &self.config
    }

    pub fn stages(&self) -> usize {
        self.announcements.len()
    }

    fn check_stage(&self, stage: StageIndex) -> Result<(), RegistryError> {
        if stage < self.stages() {
            Ok(())
        } else {
            Err(RegistryError::StageOutOfRange {
                stage,
                stages: self.stages(),
            })
        }
    }

    fn record(&self, now: f64, ttl: f64, value: Option<f64>) -> Record {
        Record {
            written_at: now,
            visible_at: now + self.config.propagation_delay,
            expires_at: now + ttl,
            value,
        }
    }

    /// Whether the most recent write for `peer` on `stage` is a live announcement at `now`,
    /// regardless of propagation.
    fn announced_as_of(&self, peer: PeerId, stage: StageIndex, now: f64) -> bool {
        self.announcements[stage]
            .get(&peer)
            .and_then(|h| {
                let idx = h.partition_point(|r| r.written_at <= now);
                idx.checked_sub(1).map(|i| h[i])
            })
            .is_some_and(|r| r.live_at(now))
    }

    pub fn announce(
        &mut self,
        peer: PeerId,
        stage: StageIndex,
        now: f64,
        ttl: f64,
    ) -> Result<(), RegistryError> {
        self.check_stage(stage)?;
        if !(ttl > 0.0) {
            return Err(RegistryError::BadTtl(ttl));
        }
        let fresh = !self.announced_as_of(peer, stage, now);
        let rec = self.record(now, ttl, Some(1.0));
        insert_ordered(self.announcements[stage].entry(peer).or_default(), rec);
        if fresh {
            self.changes.push(MembershipChange {
                peer,
                stage,
                visible_at: rec.visible_at,
            });
        }
        Ok(())
    }

    /// Removes `peer` from `stage` once the withdrawal propagates.
    pub fn withdraw(
        &mut self,
        peer: PeerId,
        stage: StageIndex,
        now: f64,
    ) -> Result<(), RegistryError> {
        self.check_stage(stage)?;
        let rec = self.record(now, f64::INFINITY, None);
        insert_ordered(self.announcements[stage].entry(peer).or_default(), rec);
        Ok(())
    }

    pub fn publish_load(
        &mut self,
        peer: PeerId,
        stage: StageIndex,
        queue_size: f64,
        now: f64,
    ) -> Result<(), RegistryError> {
        self.check_stage(stage)?;
        if !(queue_size >= 0.0 && queue_size.is_finite()) {
            return Err(RegistryError::BadLoad(queue_size));
        }
        if !self.announced_as_of(peer, stage, now) {
            return Err(RegistryError::NotAnnounced { peer, stage });
        }
        let rec = self.record(now, self.config.ttl, Some(queue_size));
        insert_ordered(self.loads[stage].entry(peer).or_default(), rec);
        Ok(())
    }

    fn visible_member(&self, peer: PeerId, stage: StageIndex, t: f64) -> bool {
        self.announcements[stage]
            .get(&peer)
            .and_then(|h| latest_visible(h, t))
            .is_some_and(|r| r.live_at(t))
    }

    /// Peers whose announcement on `stage` is visible and unexpired at `now`.
    pub fn get_stage_peers(&self, stage: StageIndex, now: f64) -> BTreeSet<PeerId> {
        self.announcements
            .get(stage)
            .into_iter()
            .flatten()
            .filter(|(_, h)| latest_visible(h, now).is_some_and(|r| r.live_at(now)))
            .map(|(p, _)| *p)
            .collect()
    }

    /// Sum of the currently visible queue sizes of live members of `stage`.
    pub fn stage_load(&self, stage: StageIndex, now: f64) -> f64 {
        self.loads
            .get(stage)
            .into_iter()
            .flatten()
            .filter(|(p, _)| self.visible_member(**p, stage, now))
            .filter_map(|(_, h)| latest_visible(h, now).filter(|r| r.live_at(now)))
            .filter_map(|r| r.value)
            .sum()
    }

    /// Loads written in `[since, deadline]` and visible by `deadline`, newest per peer,
    /// restricted to peers still announced at `deadline`.
    pub fn loads_reported(
        &self,
        stage: StageIndex,
        since: f64,
        deadline: f64,
    ) -> BTreeMap<PeerId, f64> {
        let mut out = BTreeMap::new();
        let Some(map) = self.loads.get(stage) else {
            return out;
        };
        for (peer, h) in map {
            if !self.visible_member(*peer, stage, deadline) {
                continue;
            }
            if let Some(r) = latest_visible(h, deadline) {
                if r.written_at >= since && r.live_at(deadline) {
                    out.insert(*peer, r.value.unwrap_or(0.0));
                }
            }
        }
        out
    }

    /// Every peer that newly appeared on some stage, in write order.
    pub fn membership_changes(&self) -> &[MembershipChange] {
        &self.changes
    }

    /// Drops records that can no longer affect queries at or after `horizon`.
    pub fn compact(&mut self, horizon: f64) {
        for map in self.announcements.iter_mut().chain(self.loads.iter_mut()) {
            map.retain(|_, h| {
                let keep_from = h
                    .partition_point(|r| r.visible_at <= horizon)
                    .saturating_sub(1);
                h.drain(..keep_from);
                h.iter()
                    .any(|r| r.value.is_some() && r.expires_at > horizon)
            });
        }
    }

    pub fn dump_json(&self) -> serde_json::Value {
        let dump_key = |maps: &Vec<BTreeMap<PeerId, History>>| {
            maps.iter()
                .map(|m| {
                    m.iter()
                        .map(|(p, h)| (p.to_string(), serde_json::to_value(h).unwrap_or_default()))
                        .collect::<serde_json::Map<_, _>>()
                })
                .collect::<Vec<_>>()
        };
        serde_json::json!({
            "config": self.config,
            "announcements": dump_key(&self.announcements),
            "loads": dump_key(&self.loads),
        })
    }
}
