//! Heterogeneous KV cache: every layer keeps its own token count `T_l`, its own
//! bit-widths, and the original absolute positions `p_l` of the tokens it retained.
//!
//! Keys are stored already rotated at their original positions, so attention
//! after eviction needs no re-rotation: the retained keys carry exactly the
//! rotation they would have had in the dense cache. Eviction fires on a
//! step-count trigger every `beta` global steps.
//!
//! Storage is streamed in chunks of `chunk_tokens` tokens. A full chunk is
//! sealed as a quantized block (per-channel within the chunk for K, one token
//! group per channel for V) and never re-quantized; the open chunk is
//! re-quantized from its raw values on every append. Eviction drops tokens out
//! of sealed chunks without touching the surviving codes.

use serde::{Deserialize, Serialize};

use crate::config::{BitWidth, LayerCompressionConfig};
use crate::error::{Error, Result};
use crate::eviction::{select_retained, ImportanceScores, RetainedSet};
use crate::model::forward::attend_head;
use crate::model::rope::rotate_in_place;
use crate::model::ModelSpec;
use crate::quant::{dequantize, payload_bytes, quantize_k, quantize_v, QuantizedBlock, DEFAULT_V_GROUP_SIZE};
use crate::tensor::Tensor;

pub const DEFAULT_EVICTION_PERIOD: usize = 128;

/// Shape parameters shared by every layer of a cache.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CacheGeometry {
    pub num_layers: usize,
    pub num_q_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub rope_base: f64,
    /// Tokens per sealed chunk; also the V quantization group size.
    pub chunk_tokens: usize,
    /// Eviction period `beta` in global steps.
    pub eviction_period: usize,
}

impl CacheGeometry {
    pub fn for_model(spec: &ModelSpec) -> Self {
        Self {
            num_layers: spec.num_layers,
            num_q_heads: spec.num_q_heads,
            num_kv_heads: spec.num_kv_heads,
            head_dim: spec.head_dim,
            rope_base: spec.rope_base,
            chunk_tokens: DEFAULT_V_GROUP_SIZE,
            eviction_period: DEFAULT_EVICTION_PERIOD,
        }
    }

    pub fn with_eviction_period(mut self, beta: usize) -> Self {
        self.eviction_period = beta;
        self
    }
}

/// One of a layer's two tensor stores (keys or values).
#[derive(Debug, Clone)]
struct TokenStore {
    bits: BitWidth,
    is_key: bool,
    heads: usize,
    head_dim: usize,
    chunk_tokens: usize,
    sealed: Vec<QuantizedBlock>,
    /// Raw rows `[heads * head_dim]` of the open chunk.
    open_raw: Vec<Vec<f32>>,
    open_block: Option<QuantizedBlock>,
    /// Dequantized rows per head: sealed chunks first, then the open chunk.
    view: Vec<Vec<f32>>,
    sealed_tokens: usize,
}

impl TokenStore {
    fn new(bits: BitWidth, is_key: bool, heads: usize, head_dim: usize, chunk_tokens: usize) -> Self {
        Self {
            bits,
            is_key,
            heads,
            head_dim,
            chunk_tokens,
            sealed: Vec::new(),
            open_raw: Vec::new(),
            open_block: None,
            view: vec![Vec::new(); heads],
            sealed_tokens: 0,
        }
    }

    fn len(&self) -> usize {
        self.sealed_tokens + self.open_raw.len()
    }

    fn quantize_rows(&self, rows: &[Vec<f32>]) -> Result<QuantizedBlock> {
        let (h, d, n) = (self.heads, self.head_dim, rows.len());
        let mut data = vec![0f32; h * n * d];
        for (t, row) in rows.iter().enumerate() {
            for hh in 0..h {
                data[(hh * n + t) * d..(hh * n + t + 1) * d].copy_from_slice(&row[hh * d..(hh + 1) * d]);
            }
        }
        let x = Tensor::new(vec![h, n, d], data)?;
        if self.is_key {
            quantize_k(&x, self.bits)
        } else {
            quantize_v(&x, self.bits, self.chunk_tokens)
        }
    }

    fn append_view(view: &mut [Vec<f32>], block: &QuantizedBlock) -> Result<()> {
        let x = dequantize(block)?;
        let [h, n, d] = block.shape();
        for (hh, v) in view.iter_mut().enumerate().take(h) {
            v.extend_from_slice(&x.data()[hh * n * d..(hh + 1) * n * d]);
        }
        Ok(())
    }

    /// Rebuilds the open chunk's quantized form and the view's tail.
    fn refresh_open(&mut self) -> Result<()> {
        let d = self.head_dim;
        for v in &mut self.view {
            v.truncate(self.sealed_tokens * d);
        }
        if self.open_raw.is_empty() {
            self.open_block = None;
            return Ok(());
        }
        let block = self.quantize_rows(&self.open_raw)?;
        Self::append_view(&mut self.view, &block)?;
        self.open_block = Some(block);
        Ok(())
    }

    fn push(&mut self, row: Vec<f32>) -> Result<()> {
        self.open_raw.push(row);
        self.refresh_open()?;
        if self.open_raw.len() == self.chunk_tokens {
            let block = self.open_block.take().expect("open chunk was just quantized");
            self.sealed_tokens += block.tokens();
            self.sealed.push(block);
            self.open_raw.clear();
        }
        Ok(())
    }

    /// Keeps the tokens at `keep` (ascending indices into the store).
    fn retain(&mut self, keep: &[usize]) -> Result<()> {
        let mut sealed = Vec::with_capacity(self.sealed.len());
        let mut offset = 0;
        let mut cursor = 0;
        for block in &self.sealed {
            let n = block.tokens();
            let start = cursor;
            while cursor < keep.len() && keep[cursor] < offset + n {
                cursor += 1;
            }
            let local: Vec<usize> = keep[start..cursor].iter().map(|&i| i - offset).collect();
            if !local.is_empty() {
                sealed.push(if local.len() == n {
                    block.clone()
                } else {
                    block.select_tokens(&local)?
                });
            }
            offset += n;
        }
        let open: Vec<Vec<f32>> = keep[cursor..]
            .iter()
            .map(|&i| self.open_raw[i - offset].clone())
            .collect();

        self.sealed = sealed;
        self.sealed_tokens = self.sealed.iter().map(|b| b.tokens()).sum();
        self.open_raw = open;
        self.view = vec![Vec::new(); self.heads];
        for block in &self.sealed {
            Self::append_view(&mut self.view, block)?;
        }
        self.refresh_open()
    }

    fn metadata_bytes(&self) -> usize {
        self.sealed
            .iter()
            .chain(self.open_block.as_ref())
            .map(|b| b.metadata_bytes())
            .sum()
    }

    /// Dequantized `[heads, T, d]` contents.
    fn dequantized(&self) -> Tensor {
        let n = self.len();
        let data = self.view.concat();
        Tensor::new(vec![self.heads, n, self.head_dim], data).expect("view matches store length")
    }
}

/// One layer's cached keys and values plus retained original positions.
#[derive(Debug, Clone)]
pub struct LayerCacheState {
    pub layer: usize,
    config: LayerCompressionConfig,
    keys: TokenStore,
    values: TokenStore,
    positions: Vec<usize>,
    last_eviction_step: Option<usize>,
}

impl LayerCacheState {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn config(&self) -> LayerCompressionConfig {
        self.config
    }

    /// Dequantized `[H_kv, T_l, d_head]` keys (rotated at their original positions).
    pub fn keys(&self) -> Tensor {
        self.keys.dequantized()
    }

    pub fn values(&self) -> Tensor {
        self.values.dequantized()
    }

    /// `stored_bytes(K) + stored_bytes(V)` at the current integer token count.
    pub fn payload_bytes(&self) -> f64 {
        let (t, h, d) = (self.len(), self.keys.heads, self.keys.head_dim);
        payload_bytes(t, h, d, self.config.k_bits) + payload_bytes(t, h, d, self.config.v_bits)
    }

    pub fn metadata_bytes(&self) -> usize {
        self.keys.metadata_bytes() + self.values.metadata_bytes()
    }
}

/// Per-layer caches with independent lengths, driven by one global step counter.
///
/// One instance serves one sequence.
#[derive(Debug, Clone)]
pub struct HeteroKVCache {
    geometry: CacheGeometry,
    layers: Vec<LayerCacheState>,
    step: usize,
}

impl HeteroKVCache {
    pub fn new(geometry: CacheGeometry, configs: &[LayerCompressionConfig]) -> Result<Self> {
        if configs.len() != geometry.num_layers {
            return Err(Error::Config(format!(
                "{} layer configs for a {}-layer cache",
                configs.len(),
                geometry.num_layers
            )));
        }
        if geometry.eviction_period == 0 || geometry.chunk_tokens == 0 {
            return Err(Error::Config("eviction period and chunk size must be positive".into()));
        }
        if geometry.num_kv_heads == 0 || !geometry.num_q_heads.is_multiple_of(geometry.num_kv_heads) {
            return Err(Error::Config("query heads must be a multiple of KV heads".into()));
        }
        let (h, d, c) = (geometry.num_kv_heads, geometry.head_dim, geometry.chunk_tokens);
        let layers = configs
            .iter()
            .enumerate()
            .map(|(layer, &config)| LayerCacheState {
                layer,
                config,
                keys: TokenStore::new(config.k_bits, true, h, d, c),
                values: TokenStore::new(config.v_bits, false, h, d, c),
                positions: Vec::new(),
                last_eviction_step: None,
            })
            .collect();
        Ok(Self {
            geometry,
            layers,
            step: 0,
        })
    }

    pub fn geometry(&self) -> &CacheGeometry {
        &self.geometry
    }

    /// Global step counter: the position the next appended token occupies.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn layer(&self, layer: usize) -> &LayerCacheState {
        &self.layers[layer]
    }

    pub fn layers(&self) -> &[LayerCacheState] {
        &self.layers
    }

    fn layer_mut(&mut self, layer: usize) -> Result<&mut LayerCacheState> {
        let n = self.layers.len();
        self.layers
            .get_mut(layer)
            .ok_or_else(|| Error::Input(format!("layer {layer} out of range for {n} layers")))
    }

    fn check_row(&self, t: &Tensor, what: &str) -> Result<()> {
        let expected = [self.geometry.num_kv_heads, self.geometry.head_dim];
        if t.shape() != expected {
            return Err(Error::Shape(format!(
                "{what} must be {expected:?}, got {:?}",
                t.shape()
            )));
        }
        Ok(())
    }

    /// Appends one token (keys already rotated at `position`) to `layer`.
    pub fn append(&mut self, layer: usize, k_new: &Tensor, v_new: &Tensor, position: usize) -> Result<()> {
        self.check_row(k_new, "k_new")?;
        self.check_row(v_new, "v_new")?;
        let step = self.step;
        let state = self.layer_mut(layer)?;
        if position != step {
            return Err(Error::Protocol(format!(
                "layer {layer}: append at position {position} but the global step is {step}"
            )));
        }
        if state.positions.last().is_some_and(|&p| p >= position) {
            return Err(Error::Protocol(format!(
                "layer {layer}: position {position} already cached"
            )));
        }
        state.keys.push(k_new.data().to_vec())?;
        state.values.push(v_new.data().to_vec())?;
        state.positions.push(position);
        Ok(())
    }

    /// Finishes the current global step once every layer has appended it.
    pub fn advance(&mut self) -> Result<()> {
        if let Some(l) = self.layers.iter().find(|l| l.positions.last() != Some(&self.step)) {
            return Err(Error::Protocol(format!(
                "layer {} has not appended position {} yet",
                l.layer, self.step
            )));
        }
        self.step += 1;
        Ok(())
    }

    /// Whether the step counter sits on an eviction boundary.
    pub fn eviction_due(&self) -> bool {
        self.step > 0 && self.step.is_multiple_of(self.geometry.eviction_period)
    }

    /// Evicts `layer` down to its keep ratio when the step counter is a multiple
    /// of `beta`; otherwise a no-op. Fires at most once per layer per step.
    /// Returns the retained set when an eviction ran.
    pub fn maybe_evict(&mut self, layer: usize, scores: &ImportanceScores) -> Result<Option<RetainedSet>> {
        let due = self.eviction_due();
        let step = self.step;
        let state = self.layer_mut(layer)?;
        let t = state.len();
        if scores.len() != t {
            return Err(Error::Input(format!(
                "layer {layer}: {} scores for {t} cached tokens",
                scores.len()
            )));
        }
        if !due || state.last_eviction_step == Some(step) {
            return Ok(None);
        }
        state.last_eviction_step = Some(step);
        if state.config.keep.retention_count(t) == t {
            return Ok(None);
        }
        let retained = select_retained(scores, state.config.keep, t)?;
        state.keys.retain(&retained.indices)?;
        state.values.retain(&retained.indices)?;
        state.positions = retained.positions(&state.positions);
        Ok(Some(retained))
    }

    /// Attention of `query` (`[num_q_heads, d_head]`, not yet rotated) at
    /// `query_position` over `layer`'s cache.
    pub fn attend(&self, layer: usize, query: &Tensor, query_position: usize) -> Result<Tensor> {
        Ok(self.attend_with_weights(layer, query, query_position)?.0)
    }

    /// Like [`attend`](Self::attend), also returning the attention weight each
    /// cached token received, summed over query heads.
    pub fn attend_with_weights(
        &self,
        layer: usize,
        query: &Tensor,
        query_position: usize,
    ) -> Result<(Tensor, Vec<f32>)> {
        let g = &self.geometry;
        let (nq, d) = (g.num_q_heads, g.head_dim);
        if query.shape() != [nq, d] {
            return Err(Error::Shape(format!(
                "query must be [{nq}, {d}], got {:?}",
                query.shape()
            )));
        }
        let state = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::Input(format!("layer {layer} out of range")))?;
        if state.is_empty() {
            return Err(Error::State(format!("layer {layer} cache is empty")));
        }
        if state.positions.last().is_some_and(|&p| p > query_position) {
            return Err(Error::State(format!(
                "layer {layer} holds positions beyond query position {query_position}"
            )));
        }
        let mut q = query.data().to_vec();
        for h in q.chunks_exact_mut(d) {
            rotate_in_place(h, query_position, g.rope_base, 1.0);
        }
        let group = nq / g.num_kv_heads;
        let mut out = vec![0f32; nq * d];
        let mut mass = vec![0f32; state.len()];
        let mut weights = Vec::with_capacity(state.len());
        for h in 0..nq {
            let kv = h / group;
            attend_head(
                &q[h * d..(h + 1) * d],
                &state.keys.view[kv],
                &state.values.view[kv],
                &mut out[h * d..(h + 1) * d],
                &mut weights,
            );
            for (m, w) in mass.iter_mut().zip(&weights) {
                *m += w;
            }
        }
        Ok((Tensor::new(vec![nq, d], out)?, mass))
    }

    pub fn total_payload_bytes(&self) -> f64 {
        self.layers.iter().map(|l| l.payload_bytes()).sum()
    }

    pub fn snapshot(&self) -> CacheSnapshot {
        CacheSnapshot {
            step: self.step,
            eviction_period: self.geometry.eviction_period,
            total_payload_bytes: self.total_payload_bytes(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerSnapshot {
                    layer: l.layer,
                    config: l.config,
                    tokens: l.len(),
                    positions: l.positions.clone(),
                    payload_bytes: l.payload_bytes(),
                    metadata_bytes: l.metadata_bytes(),
                })
                .collect(),
        }
    }
}

/// JSON diagnostic view of a cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheSnapshot {
    pub step: usize,
    pub eviction_period: usize,
    pub total_payload_bytes: f64,
    pub layers: Vec<LayerSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSnapshot {
    pub layer: usize,
    #[serde(flatten)]
    pub config: LayerCompressionConfig,
    pub tokens: usize,
    pub positions: Vec<usize>,
    pub payload_bytes: f64,
    pub metadata_bytes: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::KeepRatio;
    use crate::eviction::{score_random_permutation, ScorerKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geometry(beta: usize) -> CacheGeometry {
        CacheGeometry {
            num_layers: 2,
            num_q_heads: 4,
            num_kv_heads: 2,
            head_dim: 4,
            rope_base: 10000.0,
            chunk_tokens: 4,
            eviction_period: beta,
        }
    }

    fn cfg(pct: u8, k: BitWidth, v: BitWidth) -> LayerCompressionConfig {
        LayerCompressionConfig::new(KeepRatio::from_percent(pct).unwrap(), k, v)
    }

    fn row(rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(vec![2, 4], (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    /// Appends `n` random tokens to every layer; returns the raw rows per layer.
    fn fill(cache: &mut HeteroKVCache, n: usize, seed: u64) -> Vec<Vec<(Tensor, Tensor)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = cache.layers().len();
        let mut raw = vec![Vec::new(); layers];
        for _ in 0..n {
            let p = cache.step();
            for (l, r) in raw.iter_mut().enumerate() {
                let (k, v) = (row(&mut rng), row(&mut rng));
                cache.append(l, &k, &v, p).unwrap();
                r.push((k, v));
            }
            cache.advance().unwrap();
        }
        raw
    }

    /// `[H, T, d]` element for token `t` of head `h` from raw `[H, d]` rows.
    fn raw_at(rows: &[(Tensor, Tensor)], key: bool, h: usize, t: usize, d: usize) -> f32 {
        let r = if key { &rows[t].0 } else { &rows[t].1 };
        r.data()[h * 4 + d]
    }

    #[test]
    fn append_to_empty_layer() {
        let mut cache = HeteroKVCache::new(geometry(128), &[LayerCompressionConfig::IDENTITY; 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        cache.append(0, &row(&mut rng), &row(&mut rng), 0).unwrap();
        assert_eq!(cache.layer(0).len(), 1);
        assert_eq!(cache.layer(0).positions(), &[0]);
        assert_eq!(cache.layer(1).len(), 0);
    }

    #[test]
    fn out_of_order_append_is_protocol_error() {
        let mut cache = HeteroKVCache::new(geometry(128), &[LayerCompressionConfig::IDENTITY; 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (k, v) = (row(&mut rng), row(&mut rng));
        assert!(matches!(cache.append(0, &k, &v, 3), Err(Error::Protocol(_))));
        cache.append(0, &k, &v, 0).unwrap();
        assert!(matches!(cache.append(0, &k, &v, 0), Err(Error::Protocol(_))));
        // layer 1 has not appended step 0
        assert!(matches!(cache.advance(), Err(Error::Protocol(_))));
    }

    #[test]
    fn identity_store_is_bit_exact() {
        let mut cache = HeteroKVCache::new(geometry(128), &[LayerCompressionConfig::IDENTITY; 2]).unwrap();
        let raw = fill(&mut cache, 11, 1);
        let keys = cache.layer(1).keys();
        let values = cache.layer(1).values();
        for h in 0..2 {
            for t in 0..11 {
                for d in 0..4 {
                    let i = (h * 11 + t) * 4 + d;
                    assert_eq!(keys.data()[i], raw_at(&raw[1], true, h, t, d));
                    assert_eq!(values.data()[i], raw_at(&raw[1], false, h, t, d));
                }
            }
        }
        assert_eq!(cache.layer(1).metadata_bytes(), 0);
    }

    #[test]
    fn four_bit_store_respects_chunk_bound() {
        let c = cfg(100, BitWidth::B4, BitWidth::B4);
        let mut cache = HeteroKVCache::new(geometry(128), &[c, c]).unwrap();
        let n = 10; // two sealed chunks of 4, one open chunk of 2
        let raw = fill(&mut cache, n, 2);
        for (key, stored) in [(true, cache.layer(0).keys()), (false, cache.layer(0).values())] {
            for h in 0..2 {
                for d in 0..4 {
                    for start in (0..n).step_by(4) {
                        let ts: Vec<usize> = (start..(start + 4).min(n)).collect();
                        let vals: Vec<f64> = ts.iter().map(|&t| raw_at(&raw[0], key, h, t, d) as f64).collect();
                        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let bound = (hi - lo) / 30.0;
                        for (&t, &x) in ts.iter().zip(&vals) {
                            let y = stored.data()[(h * n + t) * 4 + d] as f64;
                            assert!((x - y).abs() <= bound, "key={key} h={h} d={d} t={t}");
                        }
                    }
                }
            }
        }
        assert!(cache.layer(0).metadata_bytes() > 0);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn memory_law_and_trigger_law() {
        let configs = [
            cfg(50, BitWidth::B8, BitWidth::B4),
            cfg(100, BitWidth::B16, BitWidth::B16),
        ];
        let mut cache = HeteroKVCache::new(geometry(8), &configs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut prev = [0usize; 2];
        for _ in 0..40 {
            let p = cache.step();
            for l in 0..2 {
                cache.append(l, &row(&mut rng), &row(&mut rng), p).unwrap();
            }
            cache.advance().unwrap();
            for l in 0..2 {
                let t = cache.layer(l).len();
                let due = cache.eviction_due();
                let scores = score_random_permutation(t, p as u64);
                cache.maybe_evict(l, &scores).unwrap();
                let after = cache.layer(l).len();
                if !due {
                    assert_eq!(after, prev[l] + 1, "layer {l} grows by one between triggers");
                }
                prev[l] = after;
                let layer = cache.layer(l);
                let expected =
                    (after * 2 * 4) as f64 * (layer.config().k_bits.bits() + layer.config().v_bits.bits()) as f64 / 8.0;
                assert_eq!(layer.payload_bytes(), expected);
                assert!(layer.positions().windows(2).all(|w| w[0] < w[1]));
                assert!(layer.positions().iter().all(|&q| q < cache.step()));
            }
        }
        // keep=1.0 never shrinks
        assert_eq!(cache.layer(1).len(), 40);
        assert!(cache.layer(0).len() < 40);
    }

    #[test]
    fn eviction_is_noop_off_trigger() {
        let c = cfg(50, BitWidth::B16, BitWidth::B16);
        let mut cache = HeteroKVCache::new(geometry(8), &[c, c]).unwrap();
        fill(&mut cache, 7, 3);
        let s = score_random_permutation(7, 0);
        assert!(cache.maybe_evict(0, &s).unwrap().is_none());
        assert_eq!(cache.layer(0).len(), 7);
        let bad = score_random_permutation(6, 0);
        assert!(matches!(cache.maybe_evict(0, &bad), Err(Error::Input(_))));
    }

    #[test]
    fn keep_one_is_noop_at_trigger() {
        let mut cache = HeteroKVCache::new(geometry(8), &[LayerCompressionConfig::IDENTITY; 2]).unwrap();
        fill(&mut cache, 8, 3);
        assert!(cache.eviction_due());
        let s = score_random_permutation(8, 0);
        assert!(cache.maybe_evict(0, &s).unwrap().is_none());
        assert_eq!(cache.layer(0).len(), 8);
    }

    #[test]
    fn half_keep_at_trigger_matches_retained_set_oracle() {
        let c = cfg(50, BitWidth::B16, BitWidth::B16);
        let mut cache = HeteroKVCache::new(geometry(8), &[c, c]).unwrap();
        let raw = fill(&mut cache, 8, 4);
        let s = score_random_permutation(8, 11);
        // oracle: four largest scores, ascending index order
        let mut order: Vec<usize> = (0..8).collect();
        order.sort_by(|&a, &b| s.scores[b].total_cmp(&s.scores[a]));
        let mut expected: Vec<usize> = order[..4].to_vec();
        expected.sort_unstable();

        let r = cache.maybe_evict(0, &s).unwrap().unwrap();
        assert_eq!(r.indices, expected);
        assert_eq!(cache.layer(0).len(), 4);
        assert_eq!(cache.layer(0).positions(), expected.as_slice());
        // surviving values are the original rows of the retained tokens
        let keys = cache.layer(0).keys();
        for h in 0..2 {
            for (j, &t) in expected.iter().enumerate() {
                for d in 0..4 {
                    assert_eq!(keys.data()[(h * 4 + j) * 4 + d], raw_at(&raw[0], true, h, t, d));
                }
            }
        }
        // second call at the same step does nothing
        let s4 = score_random_permutation(4, 1);
        assert!(cache.maybe_evict(0, &s4).unwrap().is_none());
    }

    #[test]
    fn eviction_inside_sealed_chunks_keeps_codes() {
        let c = cfg(50, BitWidth::B4, BitWidth::B8);
        let mut cache = HeteroKVCache::new(geometry(10), &[c, c]).unwrap();
        fill(&mut cache, 10, 6);
        let before_k = cache.layer(0).keys();
        let before_v = cache.layer(0).values();
        let s = score_random_permutation(10, 2);
        let r = cache.maybe_evict(0, &s).unwrap().unwrap();
        let after_k = cache.layer(0).keys();
        let after_v = cache.layer(0).values();
        let m = r.len();
        for h in 0..2 {
            for (j, &t) in r.indices.iter().enumerate() {
                // tokens 0..8 sit in sealed chunks and must keep their exact dequantized values
                if t < 8 {
                    for d in 0..4 {
                        assert_eq!(
                            after_k.data()[(h * m + j) * 4 + d],
                            before_k.data()[(h * 10 + t) * 4 + d]
                        );
                        assert_eq!(
                            after_v.data()[(h * m + j) * 4 + d],
                            before_v.data()[(h * 10 + t) * 4 + d]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn singleton_attention_returns_value() {
        let mut cache = HeteroKVCache::new(geometry(128), &[LayerCompressionConfig::IDENTITY; 2]).unwrap();
        let raw = fill(&mut cache, 1, 9);
        let q = Tensor::new(vec![4, 4], vec![0.3; 16]).unwrap();
        let out = cache.attend(0, &q, 0).unwrap();
        for h in 0..4 {
            let kv = h / 2;
            for d in 0..4 {
                assert!((out.data()[h * 4 + d] - raw_at(&raw[0], false, kv, 0, d)).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn attend_on_empty_layer_is_state_error() {
        let cache = HeteroKVCache::new(geometry(128), &[LayerCompressionConfig::IDENTITY; 2]).unwrap();
        let q = Tensor::zeros(vec![4, 4]);
        assert!(matches!(cache.attend(0, &q, 0), Err(Error::State(_))));
    }

    #[test]
    fn evicting_a_negligible_token_barely_moves_attention() {
        // six tokens; token 2's key points away from the query so its dense weight is ~1e-9
        let g = CacheGeometry {
            num_layers: 1,
            num_q_heads: 1,
            num_kv_heads: 1,
            head_dim: 2,
            rope_base: 10000.0,
            chunk_tokens: 32,
            eviction_period: 6,
        };
        let c = cfg(90, BitWidth::B16, BitWidth::B16);
        let mut cache = HeteroKVCache::new(g, &[c]).unwrap();
        let q_pre = [4.0f32, 0.0];
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for t in 0..6 {
            // store keys rotated at their own position, as the model would; choose
            // pre-rotation keys so every rotated key is parallel (or anti-parallel)
            // to the query rotated at position 5
            let sign = if t == 2 { -7.0 } else { 0.5 };
            let mut k = vec![sign, 0.0];
            crate::model::rope::rotate_in_place(&mut k, 5, 10000.0, 1.0);
            let v = vec![t as f32 - 2.5, 1.0 + t as f32 * 0.25];
            cache
                .append(
                    0,
                    &Tensor::new(vec![1, 2], k.clone()).unwrap(),
                    &Tensor::new(vec![1, 2], v.clone()).unwrap(),
                    t,
                )
                .unwrap();
            cache.advance().unwrap();
            keys.push(k);
            values.push(v);
        }
        let q = Tensor::new(vec![1, 2], q_pre.to_vec()).unwrap();
        let (dense, weights) = cache.attend_with_weights(0, &q, 5).unwrap();
        assert!(weights[2] < 1e-7, "constructed weight {}", weights[2]);

        let mut scores = vec![1.0; 6];
        scores[2] = 0.0;
        let s = ImportanceScores::new(scores, ScorerKind::AttnAccum).unwrap();
        let r = cache.maybe_evict(0, &s).unwrap().unwrap();
        assert_eq!(r.indices, vec![0, 1, 3, 4, 5]);
        let evicted = cache.attend(0, &q, 5).unwrap();
        // 16-bit storage adds no quantization error; renormalizing the removed mass
        // moves the output by at most 2 * w * max|v|
        let vmax = values.iter().flatten().fold(0f32, |m, v| m.max(v.abs()));
        let bound = 2.0 * weights[2] * vmax + 1e-6;
        assert!(dense.max_abs_diff(&evicted).unwrap() <= bound);
    }

    #[test]
    fn snapshot_serializes() {
        let c = cfg(25, BitWidth::B8, BitWidth::B4);
        let mut cache = HeteroKVCache::new(geometry(128), &[c, LayerCompressionConfig::IDENTITY]).unwrap();
        fill(&mut cache, 3, 1);
        let snap = cache.snapshot();
        let json = serde_json::to_string(&snap).unwrap();
        assert!(json.contains("\"positions\":[0,1,2]"));
        let back: CacheSnapshot = serde_json::from_str(&json).unwrap();
        assert_eq!(back, snap);
        assert_eq!(
            snap.total_payload_bytes,
            3.0 * 8.0 * 12.0 / 8.0 + 3.0 * 8.0 * 32.0 / 8.0
        );
    }
}
