//! Analytic per-stage compute/communication model for Transformer pipeline stages.
//!
//! Compute grows with `d_model²` while the activations crossing a stage boundary
//! grow with `d_model`, so the compute/communication ratio improves linearly with
//! the hidden size. Everything here is a pure function of its inputs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CostModelError {
    #[error("layer shape field `{0}` must be strictly positive")]
    NonPositive(&'static str),
    #[error("n_heads ({n_heads}) must divide d_model ({d_model})")]
    HeadsDoNotDivide { d_model: u64, n_heads: u64 },
    #[error("device field `{0}` must be strictly positive")]
    BadDevice(&'static str),
    #[error("unknown preset `{0}` (expected one of base, xxlarge, gpt3, ours)")]
    UnknownPreset(String),
}

/// Architecture of the Transformer layers hosted by one pipeline stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerShape {
    pub d_model: u64,
    pub d_ffn: u64,
    pub n_heads: u64,
    pub seq_len: u64,
    pub batch: u64,
    pub layers_per_stage: u64,
    pub activation_bytes_per_element: f64,
}

pub const PRESET_NAMES: [&str; 4] = ["base", "xxlarge", "gpt3", "ours"];

impl LayerShape {
    /// Built-in architectures, all at batch 1 × 512 tokens with fp16 activations.
    pub fn preset(name: &str) -> Result<Self, CostModelError> {
        let (d_model, d_ffn, n_heads, layers) = match name {
            "base" => (768, 3072, 12, 1),
            "xxlarge" => (4096, 16384, 32, 1),
            "gpt3" => (12288, 49152, 96, 1),
            "ours" => (4096, 16384, 32, 3),
            other => return Err(CostModelError::UnknownPreset(other.to_string())),
        };
        Ok(Self {
            d_model,
            d_ffn,
            n_heads,
            seq_len: 512,
            batch: 1,
            layers_per_stage: layers,
            activation_bytes_per_element: 2.0,
        })
    }

    pub fn validate(&self) -> Result<(), CostModelError> {
        let ints = [
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("n_heads", self.n_heads),
            ("seq_len", self.seq_len),
            ("batch", self.batch),
            ("layers_per_stage", self.layers_per_stage),
        ];
        for (name, v) in ints {
            if v == 0 {
                return Err(CostModelError::NonPositive(name));
            }
        }
        if !(self.activation_bytes_per_element > 0.0
            && self.activation_bytes_per_element.is_finite())
        {
            return Err(CostModelError::NonPositive("activation_bytes_per_element"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(CostModelError::HeadsDoNotDivide {
                d_model: self.d_model,
                n_heads: self.n_heads,
            });
        }
        Ok(())
    }

    pub fn with_batch(mut self, batch: u64) -> Self {
        self.batch = batch;
        self
    }

    pub fn with_bytes_per_element(mut self, bytes: f64) -> Self {
        self.activation_bytes_per_element = bytes;
        self
    }

    /// Tokens processed per microbatch (`B·L`).
    pub fn tokens(&self) -> u64 {
        self.batch * self.seq_len
    }
}

/// Throughput and link characteristics of one worker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    /// Achievable FLOP/s; a calibration input rather than a datasheet value.
    pub effective_flops: f64,
    pub upload_bps: f64,
    pub download_bps: f64,
    #[serde(default)]
    pub rtt_seconds: f64,
}

impl DeviceProfile {
    /// V100-class worker on a 500 Mb/s symmetric link with no added latency.
    ///
    /// `effective_flops` is calibrated so the "base" layer spends roughly the
    /// same share of time computing as the measured setup did.
    pub fn v100_500mbps() -> Self {
        Self {
            effective_flops: 4.0e12,
            upload_bps: 500.0e6,
            download_bps: 500.0e6,
            rtt_seconds: 0.0,
        }
    }

    pub fn with_rtt(mut self, rtt_seconds: f64) -> Self {
        self.rtt_seconds = rtt_seconds;
        self
    }

    pub fn with_bandwidth(mut self, bps: f64) -> Self {
        self.upload_bps = bps;
        self.download_bps = bps;
        self
    }

    pub fn validate(&self) -> Result<(), CostModelError> {
        if !(self.effective_flops > 0.0) {
            return Err(CostModelError::BadDevice("effective_flops"));
        }
        if !(self.upload_bps > 0.0) {
            return Err(CostModelError::BadDevice("upload_bps"));
        }
        if !(self.download_bps > 0.0) {
            return Err(CostModelError::BadDevice("download_bps"));
        }
        if !(self.rtt_seconds >= 0.0) {
            return Err(CostModelError::BadDevice("rtt_seconds"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub compute_seconds: f64,
    pub comm_seconds: f64,
    pub idle_fraction: f64,
    pub utilization: f64,
    /// Wall time the stage spends per microbatch (forward + backward).
    pub cycle_seconds: f64,
}

/// Weights of the attention projections (`4·d²`) and the FFN (`2·d·d_ffn`), biases ignored.
pub fn params_per_layer(shape: &LayerShape) -> u64 {
    4 * shape.d_model * shape.d_model + 2 * shape.d_model * shape.d_ffn
}

/// `2·P·tokens` per layer for the forward pass; backward costs twice the forward.
pub fn flops_per_stage(shape: &LayerShape, include_backward: bool) -> f64 {
    let forward = 2.0
        * params_per_layer(shape) as f64
        * shape.tokens() as f64
        * shape.layers_per_stage as f64;
    if include_backward {
        3.0 * forward
    } else {
        forward
    }
}

/// Bits of activations one stage sends to the next per microbatch.
pub fn activation_payload_bits(shape: &LayerShape) -> f64 {
    shape.tokens() as f64 * shape.d_model as f64 * shape.activation_bytes_per_element * 8.0
}

pub fn stage_cost(shape: &LayerShape, device: &DeviceProfile, overlap: bool) -> CostBreakdown {
    let compute = flops_per_stage(shape, true) / device.effective_flops;
    let payload = activation_payload_bits(shape);
    let comm =
        payload / device.upload_bps + payload / device.download_bps + 2.0 * device.rtt_seconds;

    let cycle = if overlap {
        compute.max(comm)
    } else {
        compute + comm
    };
    let utilization = if cycle > 0.0 { compute / cycle } else { 1.0 };
    CostBreakdown {
        compute_seconds: compute,
        comm_seconds: comm,
        idle_fraction: 1.0 - utilization,
        utilization,
        cycle_seconds: cycle,
    }
}

/// Training FLOPs per transmitted activation bit.
pub fn square_cube_ratio(shape: &LayerShape) -> f64 {
    flops_per_stage(shape, true) / activation_payload_bits(shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> LayerShape {
        LayerShape {
            d_model: 1,
            d_ffn: 1,
            n_heads: 1,
            seq_len: 1,
            batch: 1,
            layers_per_stage: 1,
            activation_bytes_per_element: 1.0,
        }
    }

    #[test]
    fn params_match_published_counts() {
        assert_eq!(
            params_per_layer(&LayerShape::preset("base").unwrap()),
            7_077_888
        );
        assert_eq!(
            params_per_layer(&LayerShape::preset("xxlarge").unwrap()),
            201_326_592
        );
        assert_eq!(
            params_per_layer(&LayerShape::preset("gpt3").unwrap()),
            1_811_939_328
        );
    }

    #[test]
    fn unit_shape_flops() {
        assert_eq!(params_per_layer(&unit()), 6);
        assert_eq!(flops_per_stage(&unit(), false), 12.0);
        assert_eq!(flops_per_stage(&unit(), true), 36.0);
    }

    #[test]
    fn base_and_ours_flops() {
        let base = flops_per_stage(&LayerShape::preset("base").unwrap(), true);
        assert!((base - 2.17e10).abs() / 2.17e10 < 0.005, "{base}");
        let ours = flops_per_stage(&LayerShape::preset("ours").unwrap(), true);
        assert!((ours - 1.85e12).abs() / 1.85e12 < 0.005, "{ours}");
    }

    #[test]
    fn payload_examples() {
        let s = LayerShape::preset("xxlarge")
            .unwrap()
            .with_bytes_per_element(1.0);
        // 512 * 4096 * 8
        assert_eq!(activation_payload_bits(&s), 16_777_216.0);
        assert_eq!(activation_payload_bits(&unit()), 8.0);
        let b2 = s.with_batch(2);
        assert_eq!(
            activation_payload_bits(&b2),
            2.0 * activation_payload_bits(&s)
        );
    }

    #[test]
    fn free_network_means_full_utilization() {
        let dev = DeviceProfile::v100_500mbps().with_bandwidth(f64::INFINITY);
        for name in PRESET_NAMES {
            for overlap in [false, true] {
                let c = stage_cost(&LayerShape::preset(name).unwrap(), &dev, overlap);
                assert_eq!(c.comm_seconds, 0.0);
                assert_eq!(c.utilization, 1.0);
                assert_eq!(c.idle_fraction, 0.0);
            }
        }
    }

    #[test]
    fn overlap_uses_the_max_of_compute_and_comm() {
        let shape = LayerShape::preset("base").unwrap();
        let dev = DeviceProfile::v100_500mbps().with_rtt(0.01);
        let seq = stage_cost(&shape, &dev, false);
        let ovl = stage_cost(&shape, &dev, true);
        assert!((seq.cycle_seconds - (seq.compute_seconds + seq.comm_seconds)).abs() < 1e-15);
        assert_eq!(ovl.cycle_seconds, ovl.compute_seconds.max(ovl.comm_seconds));
        assert!(ovl.utilization >= seq.utilization);
        let expected_idle = (ovl.comm_seconds - ovl.compute_seconds).max(0.0)
            / ovl.compute_seconds.max(ovl.comm_seconds);
        assert!((ovl.idle_fraction - expected_idle).abs() < 1e-12);
    }

    #[test]
    fn ratio_doubles_with_d_model() {
        let k = 512u64;
        let mk = |d: u64| LayerShape {
            d_model: d,
            d_ffn: 4 * d,
            n_heads: 8,
            seq_len: 128,
            batch: 1,
            layers_per_stage: 1,
            activation_bytes_per_element: 2.0,
        };
        let r = square_cube_ratio(&mk(2 * k)) / square_cube_ratio(&mk(k));
        assert!((r - 2.0).abs() < 1e-9 * 2.0);
        let base = LayerShape::preset("base").unwrap();
        assert_eq!(
            square_cube_ratio(&base),
            square_cube_ratio(&base.with_batch(7))
        );
    }

    #[test]
    fn validation_rejects_bad_shapes() {
        let mut s = unit();
        s.batch = 0;
        assert_eq!(s.validate(), Err(CostModelError::NonPositive("batch")));
        let mut s = unit();
        s.d_model = 10;
        s.n_heads = 3;
        assert!(matches!(
            s.validate(),
            Err(CostModelError::HeadsDoNotDivide { .. })
        ));
        assert!(LayerShape::preset("huge").is_err());
        let mut d = DeviceProfile::v100_500mbps();
        d.upload_bps = 0.0;
        assert!(d.validate().is_err());
    }
}
