//! Lossy update codecs: per-segment 4-bit affine quantization and top-k
//! sparsification against the last global model.

use crate::error::{Error, Result};
use crate::nca::SegmentLayout;

pub const QUANT_LEVELS: u8 = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantSegment {
    pub len: usize,
    /// Step between adjacent levels; 0 for a constant segment. Kept in f64 so
    /// that decoded levels round to the nearest f32.
    pub scale: f64,
    /// Value of level 0 (the segment minimum).
    pub zero_point: f32,
}

/// 4-bit codes packed two per byte across the whole vector: element `i`
/// lives in byte `i / 2`, low nibble when `i` is even.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedPayload {
    pub len: usize,
    pub segments: Vec<QuantSegment>,
    pub codes: Vec<u8>,
}

#[inline]
fn level(seg: &QuantSegment, code: u8) -> f32 {
    (seg.zero_point as f64 + code as f64 * seg.scale) as f32
}

fn nearest_code(seg: &QuantSegment, v: f32) -> u8 {
    if seg.scale == 0.0 {
        return 0;
    }
    let guess = ((v as f64 - seg.zero_point as f64) / seg.scale).round().clamp(0.0, 15.0) as u8;
    // Levels are rounded to f32, so a neighbour can be marginally closer.
    let dist = |c: u8| (level(seg, c) as f64 - v as f64).abs();
    let mut best = guess;
    for c in [guess.saturating_sub(1), (guess + 1).min(QUANT_LEVELS - 1)] {
        if dist(c) < dist(best) {
            best = c;
        }
    }
    best
}

/// One segment per entry of `layout` (e.g. one per weight tensor).
pub fn quantize_4bit(vec: &[f32], layout: &SegmentLayout) -> Result<QuantizedPayload> {
    if layout.total() != vec.len() {
        return Err(Error::precondition(format!(
            "segment layout covers {} values, vector has {}",
            layout.total(),
            vec.len()
        )));
    }
    if let Some(v) = vec.iter().find(|v| !v.is_finite()) {
        return Err(Error::precondition(format!("cannot quantize non-finite value {v}")));
    }
    let mut codes = vec![0u8; vec.len().div_ceil(2)];
    let mut segments = Vec::with_capacity(layout.lengths().len());
    let mut at = 0;
    for &len in layout.lengths() {
        let part = &vec[at..at + len];
        let (lo, hi) = part
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let seg = if len == 0 || lo == hi {
            QuantSegment { len, scale: 0.0, zero_point: if len == 0 { 0.0 } else { lo } }
        } else {
            let scale = (hi as f64 - lo as f64) / (QUANT_LEVELS - 1) as f64;
            QuantSegment { len, scale, zero_point: lo }
        };
        for (i, &v) in part.iter().enumerate() {
            let idx = at + i;
            codes[idx / 2] |= nearest_code(&seg, v) << (4 * (idx % 2));
        }
        segments.push(seg);
        at += len;
    }
    Ok(QuantizedPayload { len: vec.len(), segments, codes })
}

pub fn dequantize(payload: &QuantizedPayload) -> Vec<f32> {
    let mut out = Vec::with_capacity(payload.len);
    for seg in &payload.segments {
        for _ in 0..seg.len {
            let idx = out.len();
            let code = (payload.codes[idx / 2] >> (4 * (idx % 2))) & 0x0F;
            out.push(level(seg, code));
        }
    }
    out
}

/// Coordinates that changed most since `reference_round`'s global model.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePayload {
    pub len: usize,
    pub reference_round: u32,
    /// Strictly increasing.
    pub indices: Vec<u32>,
    pub values: Vec<f32>,
}

/// `ceil(k_percent/100 · len)`, robust to the float error in products such
/// as `30% · 10`.
pub fn topk_count(len: usize, k_percent: f64) -> usize {
    let exact = k_percent * len as f64 / 100.0;
    let m = (exact * (1.0 - 1e-12)).ceil() as usize;
    m.min(len)
}

pub fn topk_sparsify(
    current: &[f32],
    last_global: &[f32],
    k_percent: f64,
    reference_round: u32,
) -> Result<SparsePayload> {
    if current.len() != last_global.len() {
        return Err(Error::precondition(format!(
            "top-k operands differ in length: {} vs {}",
            current.len(),
            last_global.len()
        )));
    }
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::precondition(format!("k_percent must be in (0, 100], got {k_percent}")));
    }
    if current.len() > u32::MAX as usize {
        return Err(Error::precondition("vector too long for u32 indices"));
    }
    let m = topk_count(current.len(), k_percent);
    let magnitude = |i: u32| (current[i as usize] as f64 - last_global[i as usize] as f64).abs();
    let mut order: Vec<u32> = (0..current.len() as u32).collect();
    // Largest |delta| first, lower index wins ties.
    let rank = |a: &u32, b: &u32| magnitude(*b).total_cmp(&magnitude(*a)).then(a.cmp(b));
    if m < order.len() {
        if m > 0 {
            order.select_nth_unstable_by(m - 1, rank);
        }
        order.truncate(m);
    }
    order.sort_unstable();
    let values = order.iter().map(|&i| current[i as usize]).collect();
    Ok(SparsePayload { len: current.len(), reference_round, indices: order, values })
}

/// `base` with the listed coordinates overwritten.
pub fn apply_sparse_update(base: &[f32], payload: &SparsePayload) -> Result<Vec<f32>> {
    if payload.len != base.len() {
        return Err(Error::precondition(format!(
            "sparse payload is for length {}, base has {}",
            payload.len,
            base.len()
        )));
    }
    if payload.indices.len() != payload.values.len() {
        return Err(Error::precondition("sparse payload has mismatched index/value counts"));
    }
    let mut out = base.to_vec();
    for (&i, &v) in payload.indices.iter().zip(&payload.values) {
        let slot = out
            .get_mut(i as usize)
            .ok_or_else(|| Error::precondition(format!("sparse index {i} out of range {}", base.len())))?;
        *slot = v;
    }
    Ok(out)
}
