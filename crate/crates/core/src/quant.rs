//! Asymmetric uniform quantization of cached K/V tensors laid out as
//! `[H_kv, T, d_head]`.
//!
//! Keys are quantized per channel: one `(scale, zero_point)` per `(head, dim)`
//! coordinate across every token. Values use groups of `group_size` contiguous
//! tokens inside each channel; the last group of a channel may be short.
//! 16 bits is a pass-through that stores the input verbatim.

use serde::{Deserialize, Serialize};

use crate::config::BitWidth;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_V_GROUP_SIZE: usize = 32;

/// Levels are spaced slightly tighter than `range / (2^bits - 1)` so that the
/// dequantized `f32` stays inside the exact-arithmetic error bound after
/// output rounding. The top of the range is still reached within a quarter step.
const SCALE_SHRINK: f64 = 1.0 - 1.0 / 1024.0;

/// How elements are grouped into quantization units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuantUnit {
    /// One unit per `(head, dim)` channel spanning all tokens.
    PerChannel,
    /// Units of `group_size` consecutive tokens within each channel.
    PerGroup { group_size: usize },
}

#[derive(Debug, Clone, PartialEq)]
enum Payload {
    Codes(Vec<u8>),
    Verbatim(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBlock {
    heads: usize,
    tokens: usize,
    head_dim: usize,
    bits: BitWidth,
    unit: QuantUnit,
    scales: Vec<f32>,
    zero_points: Vec<f32>,
    payload: Payload,
}

fn kv_dims(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, n, d] => Ok((h, n, d)),
        ref s => Err(Error::Shape(format!("expected [H_kv, T, d_head], got {s:?}"))),
    }
}

impl QuantUnit {
    fn groups_per_channel(self, tokens: usize) -> usize {
        match self {
            QuantUnit::PerChannel => 1,
            QuantUnit::PerGroup { group_size } => tokens.div_ceil(group_size).max(1),
        }
    }

    fn group_of(self, token: usize) -> usize {
        match self {
            QuantUnit::PerChannel => 0,
            QuantUnit::PerGroup { group_size } => token / group_size,
        }
    }
}

/// Quantizes `x` (shape `[H, T, D]`) with the given unit layout.
fn quantize(x: &Tensor, bits: BitWidth, unit: QuantUnit) -> Result<QuantizedBlock> {
    let (heads, tokens, head_dim) = kv_dims(x)?;
    if x.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("cannot quantize non-finite values".into()));
    }
    if bits.is_passthrough() {
        return Ok(QuantizedBlock {
            heads,
            tokens,
            head_dim,
            bits,
            unit,
            scales: Vec::new(),
            zero_points: Vec::new(),
            payload: Payload::Verbatim(x.data().to_vec()),
        });
    }

    let data = x.data();
    let groups = unit.groups_per_channel(tokens);
    let n_units = heads * head_dim * groups;
    let mut lo = vec![f32::INFINITY; n_units];
    let mut hi = vec![f32::NEG_INFINITY; n_units];
    let unit_index = |h: usize, t: usize, d: usize| (h * head_dim + d) * groups + unit.group_of(t);

    for h in 0..heads {
        for t in 0..tokens {
            for d in 0..head_dim {
                let u = unit_index(h, t, d);
                let v = data[(h * tokens + t) * head_dim + d];
                lo[u] = lo[u].min(v);
                hi[u] = hi[u].max(v);
            }
        }
    }

    let levels = bits.max_code() as f64;
    let mut scales = vec![1.0f32; n_units];
    let mut zero_points = vec![0.0f32; n_units];
    for u in 0..n_units {
        if lo[u] > hi[u] {
            // empty unit (zero tokens)
            continue;
        }
        zero_points[u] = lo[u];
        let range = hi[u] as f64 - lo[u] as f64;
        if range > 0.0 {
            let s = (range / levels * SCALE_SHRINK) as f32;
            if s > 0.0 {
                scales[u] = s;
            }
        }
    }

    let mut codes = vec![0u8; data.len()];
    for h in 0..heads {
        for t in 0..tokens {
            for d in 0..head_dim {
                let u = unit_index(h, t, d);
                let i = (h * tokens + t) * head_dim + d;
                if hi[u] == lo[u] {
                    continue;
                }
                let q = ((data[i] as f64 - zero_points[u] as f64) / scales[u] as f64).round_ties_even();
                codes[i] = q.clamp(0.0, levels) as u8;
            }
        }
    }

    Ok(QuantizedBlock {
        heads,
        tokens,
        head_dim,
        bits,
        unit,
        scales,
        zero_points,
        payload: Payload::Codes(codes),
    })
}

/// Per-channel quantization of keys.
pub fn quantize_k(k: &Tensor, bits: BitWidth) -> Result<QuantizedBlock> {
    quantize(k, bits, QuantUnit::PerChannel)
}

/// Token-group quantization of values.
pub fn quantize_v(v: &Tensor, bits: BitWidth, group_size: usize) -> Result<QuantizedBlock> {
    if group_size == 0 {
        return Err(Error::Config("V quantization group_size must be positive".into()));
    }
    quantize(v, bits, QuantUnit::PerGroup { group_size })
}

/// Reconstructs `code * scale + zero_point` per element.
pub fn dequantize(block: &QuantizedBlock) -> Result<Tensor> {
    block.validate()?;
    let shape = vec![block.heads, block.tokens, block.head_dim];
    let codes = match &block.payload {
        Payload::Verbatim(v) => return Tensor::new(shape, v.clone()),
        Payload::Codes(c) => c,
    };
    let groups = block.unit.groups_per_channel(block.tokens);
    let mut out = vec![0f32; codes.len()];
    for h in 0..block.heads {
        for t in 0..block.tokens {
            let g = block.unit.group_of(t);
            for d in 0..block.head_dim {
                let u = (h * block.head_dim + d) * groups + g;
                let i = (h * block.tokens + t) * block.head_dim + d;
                out[i] = (codes[i] as f64 * block.scales[u] as f64 + block.zero_points[u] as f64) as f32;
            }
        }
    }
    Tensor::new(shape, out)
}

/// Code-payload bytes: `tokens * H_kv * d_head * bits / 8`. Scale and zero-point
/// metadata are excluded; see [`QuantizedBlock::metadata_bytes`].
pub fn stored_bytes(block: &QuantizedBlock) -> f64 {
    payload_bytes(block.tokens, block.heads, block.head_dim, block.bits)
}

/// Payload bytes for a hypothetical block of the given shape.
pub fn payload_bytes(tokens: usize, heads: usize, head_dim: usize, bits: BitWidth) -> f64 {
    (tokens * heads * head_dim) as f64 * bits.bits() as f64 / 8.0
}

impl QuantizedBlock {
    /// Builds a block from raw parts; intended for tests and deserialization.
    /// Use [`dequantize`] to surface metadata inconsistencies.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        shape: [usize; 3],
        bits: BitWidth,
        unit: QuantUnit,
        scales: Vec<f32>,
        zero_points: Vec<f32>,
        codes: Vec<u8>,
    ) -> Self {
        Self {
            heads: shape[0],
            tokens: shape[1],
            head_dim: shape[2],
            bits,
            unit,
            scales,
            zero_points,
            payload: Payload::Codes(codes),
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.heads * self.tokens * self.head_dim;
        match &self.payload {
            Payload::Verbatim(v) => {
                if v.len() != n {
                    return Err(Error::Format(format!(
                        "verbatim payload has {} values, expected {n}",
                        v.len()
                    )));
                }
            }
            Payload::Codes(c) => {
                if self.bits.is_passthrough() {
                    return Err(Error::Format("16-bit block carries integer codes".into()));
                }
                if let QuantUnit::PerGroup { group_size: 0 } = self.unit {
                    return Err(Error::Format("group_size 0 in block metadata".into()));
                }
                if c.len() != n {
                    return Err(Error::Format(format!(
                        "code payload has {} values, expected {n}",
                        c.len()
                    )));
                }
                let units = self.heads * self.head_dim * self.unit.groups_per_channel(self.tokens);
                if self.scales.len() != units || self.zero_points.len() != units {
                    return Err(Error::Format(format!(
                        "expected {units} scale/zero-point pairs, got {}/{}",
                        self.scales.len(),
                        self.zero_points.len()
                    )));
                }
                if self.scales.iter().chain(&self.zero_points).any(|v| !v.is_finite()) {
                    return Err(Error::Format("non-finite scale or zero point".into()));
                }
                let max = self.bits.max_code();
                if c.iter().any(|&q| q as u32 > max) {
                    return Err(Error::Format(format!("code exceeds {max} for {}-bit block", self.bits)));
                }
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.heads, self.tokens, self.head_dim]
    }

    pub fn bits(&self) -> BitWidth {
        self.bits
    }

    pub fn unit(&self) -> QuantUnit {
        self.unit
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn zero_points(&self) -> &[f32] {
        &self.zero_points
    }

    /// Raw integer codes; `None` for the 16-bit pass-through.
    pub fn codes(&self) -> Option<&[u8]> {
        match &self.payload {
            Payload::Codes(c) => Some(c),
            Payload::Verbatim(_) => None,
        }
    }

    /// Bytes of `f32` scale and zero-point metadata (zero for pass-through blocks).
    pub fn metadata_bytes(&self) -> usize {
        (self.scales.len() + self.zero_points.len()) * std::mem::size_of::<f32>()
    }

    /// Keeps only the listed token indices (ascending), carrying over their codes
    /// and the metadata of the units they were quantized in. Only valid when every
    /// unit spans the whole token axis, so dropping tokens never splits a unit.
    pub fn select_tokens(&self, keep: &[usize]) -> Result<QuantizedBlock> {
        if self.unit.groups_per_channel(self.tokens) != 1 {
            return Err(Error::State(
                "token selection needs units spanning the whole token axis".into(),
            ));
        }
        if keep.windows(2).any(|w| w[0] >= w[1]) || keep.last().is_some_and(|&t| t >= self.tokens) {
            return Err(Error::Input(
                "token selection must be strictly increasing and in range".into(),
            ));
        }
        let pick = || -> Vec<usize> {
            let mut idx = Vec::with_capacity(self.heads * keep.len() * self.head_dim);
            for h in 0..self.heads {
                for &t in keep {
                    let base = (h * self.tokens + t) * self.head_dim;
                    idx.extend(base..base + self.head_dim);
                }
            }
            idx
        };
        let payload = match &self.payload {
            Payload::Codes(c) => Payload::Codes(pick().into_iter().map(|i| c[i]).collect()),
            Payload::Verbatim(v) => Payload::Verbatim(pick().into_iter().map(|i| v[i]).collect()),
        };
        Ok(QuantizedBlock {
            tokens: keep.len(),
            payload,
            ..self.clone()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seeded(seed: u64, shape: [usize; 3]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-3.0f32..3.0)).collect()).unwrap()
    }

    /// Brute-force check of the per-unit bound, computed from the raw input
    /// without looking at the block's own metadata.
    fn max_violation(x: &Tensor, y: &Tensor, bits: BitWidth, group: Option<usize>) -> f64 {
        let [h, t, d] = [x.shape()[0], x.shape()[1], x.shape()[2]];
        let g = group.unwrap_or(t);
        let mut worst = f64::NEG_INFINITY;
        for hh in 0..h {
            for dd in 0..d {
                for start in (0..t).step_by(g) {
                    let idx: Vec<usize> = (start..(start + g).min(t)).map(|tt| (hh * t + tt) * d + dd).collect();
                    let lo = idx.iter().map(|&i| x.data()[i] as f64).fold(f64::INFINITY, f64::min);
                    let hi = idx
                        .iter()
                        .map(|&i| x.data()[i] as f64)
                        .fold(f64::NEG_INFINITY, f64::max);
                    let bound = (hi - lo) / (2.0 * bits.max_code() as f64);
                    for &i in &idx {
                        let err = (x.data()[i] as f64 - y.data()[i] as f64).abs();
                        worst = worst.max(err - bound);
                    }
                }
            }
        }
        worst
    }

    #[test]
    fn constant_tensor_round_trips_exactly() {
        let x = Tensor::new(vec![2, 5, 4], vec![1.375; 40]).unwrap();
        for bits in [BitWidth::B4, BitWidth::B8] {
            assert_eq!(dequantize(&quantize_k(&x, bits).unwrap()).unwrap(), x);
            assert_eq!(dequantize(&quantize_v(&x, bits, 2).unwrap()).unwrap(), x);
        }
    }

    #[test]
    fn sixteen_bits_is_bit_exact() {
        let x = seeded(3, [2, 9, 8]);
        assert_eq!(dequantize(&quantize_k(&x, BitWidth::B16).unwrap()).unwrap(), x);
        assert_eq!(dequantize(&quantize_v(&x, BitWidth::B16, 4).unwrap()).unwrap(), x);
    }

    #[test]
    fn k8_bound_over_seeds() {
        for seed in 0..50 {
            let x = seeded(seed, [2, 17, 8]);
            let y = dequantize(&quantize_k(&x, BitWidth::B8).unwrap()).unwrap();
            assert!(max_violation(&x, &y, BitWidth::B8, None) <= 0.0, "seed {seed}");
        }
    }

    #[test]
    fn v4_group_bound() {
        for seed in 0..50 {
            let x = seeded(100 + seed, [2, 70, 8]);
            let y = dequantize(&quantize_v(&x, BitWidth::B4, 32).unwrap()).unwrap();
            assert!(max_violation(&x, &y, BitWidth::B4, Some(32)) <= 0.0, "seed {seed}");
        }
    }

    #[test]
    fn oversized_group_matches_single_group() {
        let x = seeded(9, [2, 13, 4]);
        let a = dequantize(&quantize_v(&x, BitWidth::B4, 13).unwrap()).unwrap();
        let b = dequantize(&quantize_v(&x, BitWidth::B4, 1000).unwrap()).unwrap();
        let c = dequantize(&quantize_k(&x, BitWidth::B4).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn zero_group_size_is_config_error() {
        let x = seeded(1, [1, 2, 2]);
        assert!(matches!(quantize_v(&x, BitWidth::B4, 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_codes_dequantize_to_zero_point() {
        let block = QuantizedBlock::from_parts(
            [1, 3, 2],
            BitWidth::B4,
            QuantUnit::PerChannel,
            vec![0.5, 0.25],
            vec![-2.0, -2.0],
            vec![0; 6],
        );
        let y = dequantize(&block).unwrap();
        assert!(y.data().iter().all(|&v| v == -2.0));
    }

    #[test]
    fn corrupted_metadata_is_format_error() {
        let block = QuantizedBlock::from_parts(
            [1, 3, 2],
            BitWidth::B4,
            QuantUnit::PerChannel,
            vec![0.5],
            vec![0.0],
            vec![0; 6],
        );
        assert!(matches!(dequantize(&block), Err(Error::Format(_))));
        let block = QuantizedBlock::from_parts(
            [1, 1, 2],
            BitWidth::B4,
            QuantUnit::PerChannel,
            vec![0.5, 0.5],
            vec![0.0, 0.0],
            vec![3, 16],
        );
        assert!(matches!(dequantize(&block), Err(Error::Format(_))));
    }

    #[test]
    fn stored_bytes_counts_payload_only() {
        let x = Tensor::zeros(vec![8, 512, 128]);
        assert_eq!(stored_bytes(&quantize_k(&x, BitWidth::B16).unwrap()), 1_048_576.0);
        assert_eq!(stored_bytes(&quantize_k(&x, BitWidth::B4).unwrap()), 262_144.0);
        assert_eq!(payload_bytes(512, 8, 128, BitWidth::B16) * 2.0 * 28.0, 58_720_256.0);
    }

    #[test]
    fn precision_is_monotone_in_bits() {
        for seed in 0..20 {
            let x = seeded(500 + seed, [2, 16, 8]);
            let err = |bits| {
                let y = dequantize(&quantize_k(&x, bits).unwrap()).unwrap();
                x.max_abs_diff(&y).unwrap()
            };
            let (e4, e8, e16) = (err(BitWidth::B4), err(BitWidth::B8), err(BitWidth::B16));
            assert!(e4 >= e8 && e8 >= e16 && e16 == 0.0);
        }
    }

    #[test]
    fn select_tokens_keeps_codes() {
        let x = seeded(4, [2, 6, 4]);
        let block = quantize_k(&x, BitWidth::B8).unwrap();
        let full = dequantize(&block).unwrap();
        let sub = dequantize(&block.select_tokens(&[1, 4]).unwrap()).unwrap();
        for h in 0..2 {
            for (j, t) in [1usize, 4].into_iter().enumerate() {
                for d in 0..4 {
                    assert_eq!(sub.data()[(h * 2 + j) * 4 + d], full.data()[(h * 6 + t) * 4 + d]);
                }
            }
        }
        let grouped = quantize_v(&x, BitWidth::B8, 2).unwrap();
        assert!(grouped.select_tokens(&[0]).is_err());
    }
}
