//! Activation compression at stage boundaries: blockwise absmax 8-bit codes,
//! maxout reduction and a layer-normalized linear bottleneck.
//!
//! Besides the numeric operators, [`payload_bits`] tells the cost model how
//! many bits cross a stage boundary for a given [`CompressionSpec`].

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

use crate::cost_model::{activation_payload_bits, LayerShape};

pub const DEFAULT_BLOCK_SIZE: usize = 2048;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum CompressionError {
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("block size must be positive")]
    ZeroBlockSize,
    #[error("maxout window {k} does not divide length {len}")]
    MaxoutIndivisible { k: usize, len: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid compression spec `{0}`")]
    BadSpec(String),
}

/// One block of signed 8-bit codes sharing a single absmax scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedBlock {
    pub codes: Vec<i8>,
    pub absmax: f64,
}

impl QuantizedBlock {
    /// Encoded size: one byte per code plus a 4-byte scale.
    pub fn payload_bytes(&self) -> usize {
        self.codes.len() + 4
    }
}

/// Quantizes `x` into blocks of `block_size` values, the last block possibly shorter.
pub fn quantize_blockwise(
    x: &[f64],
    block_size: usize,
) -> Result<Vec<QuantizedBlock>, CompressionError> {
    if block_size == 0 {
        return Err(CompressionError::ZeroBlockSize);
    }
    if let Some((index, &value)) = x.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(CompressionError::NonFinite { index, value });
    }
    Ok(x.chunks(block_size)
        .map(|chunk| {
            let absmax = chunk.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let codes = if absmax == 0.0 {
                vec![0; chunk.len()]
            } else {
                chunk
                    .iter()
                    .map(|v| (127.0 * v / absmax).round().clamp(-127.0, 127.0) as i8)
                    .collect()
            };
            QuantizedBlock { codes, absmax }
        })
        .collect())
}

pub fn dequantize_blockwise(blocks: &[QuantizedBlock]) -> Vec<f64> {
    blocks
        .iter()
        .flat_map(|b| {
            b.codes
                .iter()
                .map(move |&c| f64::from(c) * b.absmax / 127.0)
        })
        .collect()
}

pub fn quantized_payload_bytes(blocks: &[QuantizedBlock]) -> usize {
    blocks.iter().map(QuantizedBlock::payload_bytes).sum()
}

/// Maximum over each non-overlapping window of `k` features.
pub fn maxout_k(x: &[f64], k: usize) -> Result<Vec<f64>, CompressionError> {
    if k == 0 || !x.len().is_multiple_of(k) {
        return Err(CompressionError::MaxoutIndivisible { k, len: x.len() });
    }
    Ok(x.chunks(k)
        .map(|w| w.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
    pub eps: f64,
}

impl LayerNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            gain: Array1::ones(dim),
            bias: Array1::zeros(dim),
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn dim(&self) -> usize {
        self.gain.len()
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>, CompressionError> {
        if x.len() != self.dim() || self.bias.len() != self.dim() {
            return Err(CompressionError::ShapeMismatch(format!(
                "layer norm of width {} applied to {} values",
                self.dim(),
                x.len()
            )));
        }
        let n = x.len() as f64;
        let mean = x.sum() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + self.eps).sqrt();
        Ok(x.mapv(|v| (v - mean) * inv) * &self.gain + &self.bias)
    }
}

/// Sending half of a bottleneck: `LayerNorm(x) · w_c`, an `m → c` projection.
pub fn bottleneck_forward(
    x: ArrayView1<f64>,
    w_c: &Array2<f64>,
    norm: &LayerNorm,
) -> Result<Array1<f64>, CompressionError> {
    if w_c.nrows() != x.len() {
        return Err(CompressionError::ShapeMismatch(format!(
            "w_c has {} rows but input has {} features",
            w_c.nrows(),
            x.len()
        )));
    }
    Ok(norm.forward(x)?.dot(w_c))
}

/// Receiving half: `LayerNorm(y) · w_d`, a `c → m` projection.
pub fn bottleneck_decompress(
    y: ArrayView1<f64>,
    w_d: &Array2<f64>,
    norm: &LayerNorm,
) -> Result<Array1<f64>, CompressionError> {
    if w_d.nrows() != y.len() {
        return Err(CompressionError::ShapeMismatch(format!(
            "w_d has {} rows but payload has {} features",
            w_d.nrows(),
            y.len()
        )));
    }
    Ok(norm.forward(y)?.dot(w_d))
}

/// What happens to activations before they leave a stage.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CompressionSpec {
    #[default]
    None,
    Int8,
    /// Ratio `c/m` of bottleneck width to model width.
    Bottleneck {
        factor: f64,
    },
    Maxout {
        k: u32,
    },
}

impl CompressionSpec {
    pub fn validate(&self) -> Result<(), CompressionError> {
        match *self {
            CompressionSpec::Bottleneck { factor } if !(factor > 0.0 && factor <= 1.0) => Err(
                CompressionError::BadSpec(format!("bottleneck factor {factor} not in (0, 1]")),
            ),
            CompressionSpec::Maxout { k: 0 } => {
                Err(CompressionError::BadSpec("maxout k must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// The shape whose activation bytes reflect this compression.
    ///
    /// Int8 transmits one byte per element; per-block scales are not counted
    /// (4 bytes per 2048 elements by default).
    pub fn apply(&self, shape: &LayerShape) -> LayerShape {
        let bytes = shape.activation_bytes_per_element;
        let bytes = match *self {
            CompressionSpec::None => bytes,
            CompressionSpec::Int8 => 1.0,
            CompressionSpec::Bottleneck { factor } => bytes * factor,
            CompressionSpec::Maxout { k } => bytes / f64::from(k),
        };
        shape.with_bytes_per_element(bytes)
    }
}

impl fmt::Display for CompressionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CompressionSpec::None => f.write_str("none"),
            CompressionSpec::Int8 => f.write_str("int8"),
            CompressionSpec::Bottleneck { factor } => write!(f, "bottleneck:{factor}"),
            CompressionSpec::Maxout { k } => write!(f, "maxout:{k}"),
        }
    }
}

impl FromStr for CompressionSpec {
    type Err = CompressionError;

    /// Accepts `none`, `int8`, `bottleneck:<c/m>` and `maxout:<k>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CompressionError::BadSpec(s.to_string());
        let spec = match s.split_once(':') {
            None if s == "none" => CompressionSpec::None,
            None if s == "int8" => CompressionSpec::Int8,
            Some(("bottleneck", v)) => CompressionSpec::Bottleneck {
                factor: v.parse().map_err(|_| bad())?,
            },
            Some(("maxout", v)) => CompressionSpec::Maxout {
                k: v.parse().map_err(|_| bad())?,
            },
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Bits per microbatch crossing a stage boundary under `spec`.
pub fn payload_bits(shape: &LayerShape, spec: &CompressionSpec) -> f64 {
    activation_payload_bits(&spec.apply(shape))
}
