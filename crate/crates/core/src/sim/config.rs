use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

use crate::compression::CompressionSpec;
use crate::cost_model::{stage_cost, DeviceProfile, LayerShape};
use crate::peer::StageIndex;
use crate::rebalancer::{default_state_transfer_bytes, RebalanceMode};
use crate::registry::RegistryConfig;
use crate::wiring::{DEFAULT_EPSILON, DEFAULT_GAMMA};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("configuration needs at least one stage")]
    NoStages,
    #[error("stage {0} has no initial peers")]
    EmptyStage(StageIndex),
    #[error("peer group refers to stage {stage} but there are only {stages} stages")]
    StageOutOfRange { stage: StageIndex, stages: usize },
    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("no duration given and the trace is empty")]
    NoDuration,
    #[error(transparent)]
    Cost(#[from] crate::cost_model::CostModelError),
    #[error(transparent)]
    Compression(#[from] crate::compression::CompressionError),
    #[error(transparent)]
    Trace(#[from] crate::trace::TraceError),
    #[error("cannot parse configuration: {0}")]
    Json(#[from] serde_json::Error),
}

/// `count` identical peers starting on `stage`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeerGroup {
    pub stage: StageIndex,
    pub count: usize,
    pub device: DeviceProfile,
}

/// A built-in preset name or an explicit layer shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ShapeRef {
    Preset(String),
    Custom(LayerShape),
}

impl ShapeRef {
    pub fn resolve(&self) -> Result<LayerShape, ConfigError> {
        let shape = match self {
            ShapeRef::Preset(name) => LayerShape::preset(name)?,
            ShapeRef::Custom(s) => *s,
        };
        shape.validate()?;
        Ok(shape)
    }
}

/// How a trainer seeds the routing entry of a peer it has just learned about.
///
/// Either way the starting priority gets a random offset of up to one EMA so
/// that independent trainers do not all pick the same newcomer first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JoinPriority {
    /// Priority and EMA start at ε.
    Epsilon,
    /// Priority starts at the stage's lowest priority and the EMA at the stage's mean EMA.
    #[default]
    WarmStart,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WiringParams {
    pub gamma: f64,
    pub epsilon: f64,
    pub join_priority: JoinPriority,
}

impl Default for WiringParams {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            epsilon: DEFAULT_EPSILON,
            join_priority: JoinPriority::WarmStart,
        }
    }
}

/// Stage-wide pause for gradient averaging: no task starts during
/// `[k·period_s, k·period_s + duration_s)`. Disabled when either is zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllReduceStall {
    pub period_s: f64,
    pub duration_s: f64,
}

/// Scripted failures on top of the preemption trace. Times are relative to the
/// end of warm-up, like trace timestamps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChaosAction {
    /// Kill every peer except one random survivor per stage.
    KillAllButOne { t: f64 },
    /// Kill every peer of one stage.
    KillStage { t: f64, stage: StageIndex },
}

impl ChaosAction {
    pub fn time(&self) -> f64 {
        match *self {
            ChaosAction::KillAllButOne { t } | ChaosAction::KillStage { t, .. } => t,
        }
    }
}

fn default_bucket() -> f64 {
    60.0
}

fn default_true() -> bool {
    true
}

fn default_one() -> usize {
    1
}

fn default_retry() -> f64 {
    1.0
}

/// Everything needed to run the simulator, as read from a JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub stages: usize,
    pub initial_peers: Vec<PeerGroup>,
    /// Device of peers joining mid-run; defaults to the first group's device.
    #[serde(default)]
    pub join_device: Option<DeviceProfile>,
    pub shape: ShapeRef,
    #[serde(default)]
    pub compression: CompressionSpec,
    #[serde(default = "default_true")]
    pub overlap: bool,
    #[serde(default)]
    pub modes: Vec<RebalanceMode>,
    #[serde(default)]
    pub trace: Option<PathBuf>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "default_bucket")]
    pub bucket_s: f64,
    /// Measured span after warm-up; defaults to the trace's last timestamp.
    #[serde(default)]
    pub duration_s: Option<f64>,
    /// Simulated time before measurement and trace replay start.
    #[serde(default)]
    pub warmup_s: f64,
    /// Number of trainers; defaults to the initial peer count.
    #[serde(default)]
    pub trainers: Option<usize>,
    #[serde(default = "default_one")]
    pub inflight_per_trainer: usize,
    #[serde(default)]
    pub wiring: WiringParams,
    #[serde(default)]
    pub registry: RegistryConfig,
    /// Bytes a migrating peer downloads; defaults to 16-bit parameters plus two optimizer statistics.
    #[serde(default)]
    pub state_transfer_bytes: Option<u64>,
    #[serde(default)]
    pub allreduce: AllReduceStall,
    /// Delay before a trainer retries a stage with no usable peer.
    #[serde(default = "default_retry")]
    pub retry_interval_s: f64,
    #[serde(default)]
    pub chaos: Vec<ChaosAction>,
    /// Time constant of the exponential average peers apply to their queue
    /// length before publishing it; 0 publishes the instantaneous length.
    #[serde(default)]
    pub load_smoothing_s: f64,
    /// How many trainers' routing tables to snapshot at the end of a run.
    #[serde(default = "default_one")]
    pub snapshot_trainers: usize,
}

impl SimConfig {
    /// `peers` identical devices spread over `stages` as evenly as possible (earlier stages get the remainder).
    pub fn uniform(stages: usize, peers: usize, device: DeviceProfile, shape: ShapeRef) -> Self {
        let initial_peers = (0..stages)
            .map(|s| PeerGroup {
                stage: s,
                count: peers / stages + usize::from(s < peers % stages),
                device,
            })
            .collect();
        Self {
            stages,
            initial_peers,
            join_device: None,
            shape,
            compression: CompressionSpec::None,
            overlap: true,
            modes: Vec::new(),
            trace: None,
            seeds: Vec::new(),
            bucket_s: default_bucket(),
            duration_s: None,
            warmup_s: 0.0,
            trainers: None,
            inflight_per_trainer: 1,
            wiring: WiringParams::default(),
            registry: RegistryConfig::default(),
            state_transfer_bytes: None,
            allreduce: AllReduceStall::default(),
            retry_interval_s: default_retry(),
            chaos: Vec::new(),
            load_smoothing_s: 0.0,
            snapshot_trainers: 1,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn initial_peer_count(&self) -> usize {
        self.initial_peers.iter().map(|g| g.count).sum()
    }

    pub fn trainer_count(&self) -> usize {
        self.trainers
            .unwrap_or_else(|| self.initial_peer_count())
            .max(1)
    }

    pub fn join_device(&self) -> DeviceProfile {
        self.join_device
            .or_else(|| self.initial_peers.first().map(|g| g.device))
            .unwrap_or_else(DeviceProfile::v100_500mbps)
    }

    /// Shape as transmitted, i.e. with compression applied to the activations.
    pub fn effective_shape(&self) -> Result<LayerShape, ConfigError> {
        self.compression.validate()?;
        Ok(self.compression.apply(&self.shape.resolve()?))
    }

    /// Seconds one device needs per microbatch on one stage (forward + backward).
    pub fn cycle_seconds(&self, device: &DeviceProfile) -> Result<f64, ConfigError> {
        device.validate()?;
        Ok(stage_cost(&self.effective_shape()?, device, self.overlap).cycle_seconds)
    }

    /// Per-peer microbatch rate of a joining device on each stage.
    pub fn reference_rates(&self) -> Result<Vec<f64>, ConfigError> {
        let rate = 1.0 / self.cycle_seconds(&self.join_device())?;
        Ok(vec![rate; self.stages])
    }

    pub fn transfer_bytes(&self) -> Result<u64, ConfigError> {
        match self.state_transfer_bytes {
            Some(b) => Ok(b),
            None => Ok(default_state_transfer_bytes(&self.shape.resolve()?)),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.stages == 0 {
            return Err(ConfigError::NoStages);
        }
        let mut per_stage = vec![0usize; self.stages];
        for g in &self.initial_peers {
            if g.stage >= self.stages {
                return Err(ConfigError::StageOutOfRange {
                    stage: g.stage,
                    stages: self.stages,
                });
            }
            g.device.validate()?;
            per_stage[g.stage] += g.count;
        }
        if let Some(s) = per_stage.iter().position(|&c| c == 0) {
            return Err(ConfigError::EmptyStage(s));
        }
        self.join_device().validate()?;
        self.effective_shape()?;
        let positive = |field: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ConfigError::Invalid {
                    field,
                    reason: format!("{v} is not a positive finite number"),
                })
            }
        };
        positive("bucket_s", self.bucket_s)?;
        positive("retry_interval_s", self.retry_interval_s)?;
        if let Some(d) = self.duration_s {
            positive("duration_s", d)?;
        }
        if !(self.warmup_s >= 0.0 && self.warmup_s.is_finite()) {
            return Err(ConfigError::Invalid {
                field: "warmup_s",
                reason: format!("{} is negative or non-finite", self.warmup_s),
            });
        }
        if self.inflight_per_trainer == 0 {
            return Err(ConfigError::Invalid {
                field: "inflight_per_trainer",
                reason: "must be at least 1".into(),
            });
        }
        if !(self.wiring.gamma > 0.0 && self.wiring.gamma <= 1.0) || !(self.wiring.epsilon > 0.0) {
            return Err(ConfigError::Invalid {
                field: "wiring",
                reason: format!(
                    "gamma={} epsilon={}",
                    self.wiring.gamma, self.wiring.epsilon
                ),
            });
        }
        positive("registry.ttl", self.registry.ttl)?;
        if !(self.registry.propagation_delay >= 0.0 && self.registry.straggler_timeout >= 0.0) {
            return Err(ConfigError::Invalid {
                field: "registry",
                reason: "delays must be nonnegative".into(),
            });
        }
        for m in &self.modes {
            if let Some(p) = m.period() {
                positive("modes", p)?;
            }
        }
        Ok(())
    }
}
