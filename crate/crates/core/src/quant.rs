//! Per-tensor affine quantization with a zero offset.
//!
//! Activations (post-ReLU, non-negative) use the unsigned scheme
//! `code = round(a / S)`, `S = a_max / (2^Q − 1)`, codes in `[0, 2^Q − 1]`.
//! Weights use the signed scheme with codes in `[−2^(Q−1), 2^(Q−1) − 1]`; the
//! scale covers the largest magnitude of the calibrated range,
//! `S = max(|w_min|, |w_max|) / (2^(Q−1) − 1)`, so no calibrated weight is
//! clipped. Rounding is half away from zero.
//!
//! Execution stays in FP32 ("fake-quant"): tensors are snapped to the grid
//! and carried as floats, while byte accounting uses the real bitwidth.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub q_bits: u8,
    pub scale: f32,
    /// Always 0; kept so the on-disk form names the offset explicitly.
    pub zero_point: i32,
    pub signed: bool,
}

impl QuantParams {
    /// Scale from a calibrated range. A degenerate range (nothing to
    /// represent) yields `scale = 1.0` with a warning, which maps every value
    /// in range to code 0.
    pub fn from_range(q_bits: u8, signed: bool, min: f32, max: f32) -> Result<Self> {
        if !(2..=8).contains(&q_bits) {
            return Err(Error::Config(format!(
                "quantization bitwidth {q_bits} outside 2..=8"
            )));
        }
        if !(min.is_finite() && max.is_finite()) || min > max {
            return Err(Error::Calibration(format!("invalid range [{min}, {max}]")));
        }
        let scale = if signed {
            min.abs().max(max.abs()) / ((1i32 << (q_bits - 1)) - 1) as f32
        } else {
            max.max(0.0) / ((1i32 << q_bits) - 1) as f32
        };
        let scale = if scale > 0.0 && scale.is_finite() {
            scale
        } else {
            warn!("degenerate quantization range [{min}, {max}], forcing scale 1.0");
            1.0
        };
        Ok(Self {
            q_bits,
            scale,
            zero_point: 0,
            signed,
        })
    }

    pub fn code_range(&self) -> (i32, i32) {
        if self.signed {
            (-(1 << (self.q_bits - 1)), (1 << (self.q_bits - 1)) - 1)
        } else {
            (0, (1 << self.q_bits) - 1)
        }
    }

    /// Real-valued interval the codes can represent.
    pub fn representable(&self) -> (f32, f32) {
        let (lo, hi) = self.code_range();
        (lo as f32 * self.scale, hi as f32 * self.scale)
    }

    pub fn quantize_value(&self, x: f32) -> i32 {
        let (lo, hi) = self.code_range();
        let q = (x / self.scale).round();
        if q.is_nan() {
            return 0;
        }
        (q.clamp(lo as f32, hi as f32)) as i32
    }

    pub fn dequantize_value(&self, code: i32) -> f32 {
        self.scale * code as f32
    }

    /// Snaps a value onto the grid (quantize then dequantize).
    pub fn fake_quant(&self, x: f32) -> f32 {
        self.dequantize_value(self.quantize_value(x))
    }
}

/// Bytes occupied by `n` codes of `q_bits` each when bit-packed.
pub fn packed_len(n: usize, q_bits: u8) -> usize {
    (n * q_bits as usize).div_ceil(8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    /// One byte per code; signed codes stored as two's complement `i8`.
    codes: Vec<u8>,
    params: QuantParams,
}

impl QuantizedTensor {
    pub fn from_codes(shape: Vec<usize>, codes: &[i32], params: QuantParams) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != codes.len() {
            return Err(Error::Dimension(format!(
                "{} codes for shape {shape:?}",
                codes.len()
            )));
        }
        let (lo, hi) = params.code_range();
        let mut bytes = Vec::with_capacity(n);
        for &c in codes {
            if c < lo || c > hi {
                return Err(Error::Format(format!("code {c} outside [{lo}, {hi}]")));
            }
            bytes.push(if params.signed {
                c as i8 as u8
            } else {
                c as u8
            });
        }
        Ok(Self {
            shape,
            codes: bytes,
            params,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn params(&self) -> &QuantParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn code(&self, i: usize) -> i32 {
        if self.params.signed {
            self.codes[i] as i8 as i32
        } else {
            self.codes[i] as i32
        }
    }

    pub fn codes(&self) -> Vec<i32> {
        (0..self.codes.len()).map(|i| self.code(i)).collect()
    }

    /// Packed payload plus the FP32 scale.
    pub fn memory_bytes(&self) -> usize {
        packed_len(self.codes.len(), self.params.q_bits) + 4
    }

    pub fn pack(&self) -> Vec<u8> {
        pack_codes(&self.codes(), self.params.q_bits)
    }
}

/// Packs codes LSB-first into a continuous bitstream of `q_bits` per code.
/// Signed codes are written as their low `q_bits` two's-complement bits.
pub fn pack_codes(codes: &[i32], q_bits: u8) -> Vec<u8> {
    let q = q_bits as u32;
    let mask = (1u64 << q) - 1;
    let mut out = Vec::with_capacity(packed_len(codes.len(), q_bits));
    let mut acc = 0u64;
    let mut filled = 0u32;
    for &c in codes {
        acc |= ((c as i64 as u64) & mask) << filled;
        filled += q;
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
    out
}

pub fn unpack_codes(bytes: &[u8], q_bits: u8, n: usize, signed: bool) -> Result<Vec<i32>> {
    if bytes.len() != packed_len(n, q_bits) {
        return Err(Error::Format(format!(
            "{} payload bytes for {n} codes of {q_bits} bits",
            bytes.len()
        )));
    }
    let q = q_bits as u32;
    let mask = (1u64 << q) - 1;
    let mut out = Vec::with_capacity(n);
    let mut acc = 0u64;
    let mut filled = 0u32;
    let mut it = bytes.iter();
    for _ in 0..n {
        while filled < q {
            acc |= (*it.next().expect("length checked") as u64) << filled;
            filled += 8;
        }
        let raw = (acc & mask) as i32;
        acc >>= q;
        filled -= q;
        let v = if signed && raw >= 1 << (q - 1) {
            raw - (1 << q)
        } else {
            raw
        };
        out.push(v);
    }
    Ok(out)
}

pub fn quantize_with(x: &Tensor, params: QuantParams) -> QuantizedTensor {
    let codes: Vec<i32> = x.data().iter().map(|&v| params.quantize_value(v)).collect();
    QuantizedTensor::from_codes(x.shape().to_vec(), &codes, params).expect("codes clamped to range")
}

/// Quantizes `x` with a scale derived from its calibrated range.
pub fn quantize(
    x: &Tensor,
    q_bits: u8,
    signed: bool,
    range: (f32, f32),
) -> Result<QuantizedTensor> {
    let params = QuantParams::from_range(q_bits, signed, range.0, range.1)?;
    Ok(quantize_with(x, params))
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let data = (0..q.len())
        .map(|i| q.params.dequantize_value(q.code(i)))
        .collect();
    Tensor::new(q.shape.clone(), data).expect("shape matches codes")
}

/// Observed ranges over a calibration set, keyed by layer index.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    /// `(min, max)` of each frozen parameterized layer's weight tensor.
    pub weights: BTreeMap<usize, (f32, f32)>,
    /// `(min, max)` of each frozen layer's output; `min` is clamped to 0.
    pub activations: BTreeMap<usize, (f32, f32)>,
    pub samples: usize,
}

impl CalibrationStats {
    /// Elementwise union of two calibrations of the same model.
    pub fn merge(&self, other: &CalibrationStats) -> CalibrationStats {
        let mut out = self.clone();
        for (k, &(lo, hi)) in &other.activations {
            let e = out.activations.entry(*k).or_insert((lo, hi));
            *e = (e.0.min(lo), e.1.max(hi));
        }
        out.samples += other.samples;
        out
    }
}

/// Bitwidth of the latent replays fed to the adaptive stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum LatentPrecision {
    Float32,
    Bits(u8),
}

impl LatentPrecision {
    pub fn bits(self) -> u8 {
        match self {
            LatentPrecision::Float32 => 32,
            LatentPrecision::Bits(q) => q,
        }
    }

    pub fn label(self) -> String {
        match self {
            LatentPrecision::Float32 => "FP32".into(),
            LatentPrecision::Bits(q) => format!("UINT-{q}"),
        }
    }
}

impl TryFrom<u8> for LatentPrecision {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            32 => Ok(LatentPrecision::Float32),
            2..=8 => Ok(LatentPrecision::Bits(v)),
            _ => Err(format!("latent bitwidth {v} not in 2..=8 or 32")),
        }
    }
}

impl From<LatentPrecision> for u8 {
    fn from(p: LatentPrecision) -> u8 {
        p.bits()
    }
}
