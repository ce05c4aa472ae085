//! Stochastic uniform quantization of parameter deltas.
//!
//! A tensor is encoded against a per-tensor grid `lo + code * step`, where
//! `step` is a fixed fraction (the quantization *weight*) of the tensor's
//! value range. Values round stochastically: up with probability equal to
//! their fractional grid position, down otherwise, so the decoded value is
//! an unbiased estimate of the original. Constant tensors encode with
//! `step = 0` and all-zero codes, and decode exactly.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{Block, BlockId, ParameterTensor};

/// Codes are never wider than this, whatever the weight.
pub const MAX_CODE_BITS: u8 = 16;

/// Number of bits needed to address `1/weight + 1` grid levels, capped at
/// [`MAX_CODE_BITS`]. Weight 0.01 gives 101 levels, hence 7 bits.
pub fn code_bits_for_weight(weight: f64) -> u8 {
    let levels = 1.0 / weight + 1.0;
    (levels.log2().ceil() as u32).clamp(1, MAX_CODE_BITS as u32) as u8
}

/// One tensor's quantized form.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub lo: f32,
    pub step: f32,
    pub code_bits: u8,
    pub codes: Vec<u16>,
}

/// Quantize `values` with grid spacing `weight * (max - min)`.
///
/// `weight` must lie in (0, 1]. A constant tensor (or one whose range is too
/// small for the step to be representable) encodes with `step = 0`.
pub fn quantize(
    name: impl Into<String>,
    shape: Vec<usize>,
    values: &[f32],
    weight: f64,
    rng: &mut impl Rng,
) -> Result<QuantizedTensor> {
    if !(weight > 0.0 && weight <= 1.0) {
        return Err(Error::invalid(format!(
            "quantization weight must lie in (0, 1], got {weight}"
        )));
    }
    let name = name.into();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!(
            "quantize {name:?}: non-finite value at index {i}"
        )));
    }

    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let (lo, step) = if values.is_empty() {
        (0.0f32, 0.0f32)
    } else {
        ((lo), (weight * (hi as f64 - lo as f64)) as f32)
    };
    let code_bits = code_bits_for_weight(weight);

    let codes = if step == 0.0 {
        vec![0u16; values.len()]
    } else {
        let max_code = (1u32 << code_bits) - 1;
        values
            .iter()
            .map(|&v| {
                let x = (v as f64 - lo as f64) / step as f64;
                let k = x.floor();
                let frac = (x - k).clamp(0.0, 1.0);
                let mut code = k as u32;
                if rng.random_bool(frac) {
                    code += 1;
                }
                code.min(max_code) as u16
            })
            .collect()
    };

    Ok(QuantizedTensor { name, shape, lo, step, code_bits, codes })
}

/// Decode back to values: `lo + code * step` per element.
pub fn dequantize(q: &QuantizedTensor) -> Vec<f32> {
    q.codes
        .iter()
        .map(|&c| (q.lo as f64 + c as f64 * q.step as f64) as f32)
        .collect()
}

/// The quantized difference `cur - prev` for every tensor of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBlockDelta {
    pub block_id: BlockId,
    pub tensors: Vec<QuantizedTensor>,
}

/// Encode the per-tensor difference of `cur` against `prev`.
pub fn encode_delta(
    prev: &Block,
    cur: &Block,
    weight: f64,
    rng: &mut impl Rng,
) -> Result<QuantizedBlockDelta> {
    if !prev.structure_eq(cur) {
        return Err(Error::incompatible(format!(
            "encode_delta: blocks {} and {} differ in structure",
            prev.id(),
            cur.id()
        )));
    }
    let tensors = prev
        .tensors()
        .iter()
        .zip(cur.tensors())
        .map(|(p, c)| {
            let diff: Vec<f32> = p
                .values()
                .iter()
                .zip(c.values())
                .map(|(&a, &b)| b - a)
                .collect();
            quantize(c.name(), c.shape().to_vec(), &diff, weight, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedBlockDelta { block_id: cur.id().clone(), tensors })
}

/// Apply a decoded delta to the receiver's copy of the block.
pub fn decode_delta(prev: &Block, delta: &QuantizedBlockDelta) -> Result<Block> {
    if prev.id() != &delta.block_id {
        return Err(Error::incompatible(format!(
            "decode_delta: delta for {} applied to block {}",
            delta.block_id,
            prev.id()
        )));
    }
    if prev.tensors().len() != delta.tensors.len() {
        return Err(Error::incompatible(format!(
            "decode_delta: block {} has {} tensors, delta has {}",
            prev.id(),
            prev.tensors().len(),
            delta.tensors.len()
        )));
    }
    let tensors = prev
        .tensors()
        .iter()
        .zip(&delta.tensors)
        .map(|(p, q)| {
            if p.name() != q.name || p.shape() != q.shape {
                return Err(Error::incompatible(format!(
                    "decode_delta: block {}, tensor {:?}: delta names {:?} with shape {:?}",
                    prev.id(),
                    p.name(),
                    q.name,
                    q.shape
                )));
            }
            let decoded = dequantize(q);
            let values: Vec<f32> = p
                .values()
                .iter()
                .zip(&decoded)
                .map(|(&base, &d)| base + d)
                .collect();
            ParameterTensor::new(p.name(), p.shape().to_vec(), values)
        })
        .collect::<Result<Vec<_>>>()?;
    Block::new(prev.id().clone(), prev.layer_kinds().to_vec(), tensors)
}

/// Pack codes at `code_bits` per element, little-endian bit order (the first
/// code occupies the lowest bits of the first byte), zero-padded to a byte
/// boundary.
pub fn pack_codes(codes: &[u16], code_bits: u8) -> Vec<u8> {
    debug_assert!((1..=MAX_CODE_BITS).contains(&code_bits));
    let total_bits = codes.len() * code_bits as usize;
    let mut out = vec![0u8; total_bits.div_ceil(8)];
    let mut bit = 0usize;
    for &code in codes {
        for j in 0..code_bits as usize {
            if code >> j & 1 == 1 {
                out[bit >> 3] |= 1 << (bit & 7);
            }
            bit += 1;
        }
    }
    out
}

/// Inverse of [`pack_codes`]. `bytes` must be exactly the packed length and
/// any padding bits must be zero.
pub fn unpack_codes(bytes: &[u8], code_bits: u8, count: usize) -> Result<Vec<u16>> {
    if !(1..=MAX_CODE_BITS).contains(&code_bits) {
        return Err(Error::invalid(format!("code_bits {code_bits} out of range")));
    }
    let total_bits = count * code_bits as usize;
    let expected = total_bits.div_ceil(8);
    if bytes.len() != expected {
        return Err(Error::invalid(format!(
            "packed stream has {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let mut codes = Vec::with_capacity(count);
    let mut bit = 0usize;
    for _ in 0..count {
        let mut code = 0u16;
        for j in 0..code_bits as usize {
            if bytes[bit >> 3] >> (bit & 7) & 1 == 1 {
                code |= 1 << j;
            }
            bit += 1;
        }
        codes.push(code);
    }
    // Trailing pad bits must be zero so every byte stream has one meaning.
    for pad in total_bits..bytes.len() * 8 {
        if bytes[pad >> 3] >> (pad & 7) & 1 == 1 {
            return Err(Error::invalid("nonzero padding bits in packed codes"));
        }
    }
    Ok(codes)
}
