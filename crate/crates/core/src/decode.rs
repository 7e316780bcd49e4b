//! Greedy autoregressive decoding through a [`HeteroKVCache`] that executes a
//! routing plan, measured against a dense reference decode.
//!
//! The compressed run is teacher-forced on the dense token stream: at every
//! step both runs see the same prefix, so the per-step KL divergence and logit
//! deviation measure the cache alone. The compressed run's own argmax is
//! recorded to find the first step where greedy decoding would diverge.

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cache::{CacheGeometry, HeteroKVCache, DEFAULT_EVICTION_PERIOD};
use crate::calibration::kl_from_logits;
use crate::config::LayerCompressionConfig;
use crate::error::{Error, Result};
use crate::eviction::{score_random_permutation, score_trigonometric, ImportanceScores, RetainedSet, ScorerKind};
use crate::model::forward::{attend_head, TRIG_QUERY_WINDOW};
use crate::model::ToyModel;
use crate::seed::derive_seed;
use crate::solver::{Policy, RoutingPlan};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeOptions {
    pub steps: usize,
    pub scorer: ScorerKind,
    pub eviction_period: usize,
    /// Base seed for the random-permutation scorer.
    pub seed: u64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            steps: 128,
            scorer: ScorerKind::AttnAccum,
            eviction_period: DEFAULT_EVICTION_PERIOD,
            seed: 0,
        }
    }
}

/// Seeded synthetic prompt of `len` tokens.
pub fn synthetic_prompt(len: usize, vocab_size: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x70726f6d7074));
    (0..len).map(|_| rng.gen_range(0..vocab_size as u32)).collect()
}

fn argmax(x: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best as u32
}

/// Dense greedy decode: the generated tokens and the logits that chose them.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseReference {
    pub tokens: Vec<u32>,
    pub logits: Vec<Vec<f32>>,
}

/// Plain incremental decode with uncompressed f32 keys and values.
pub fn dense_decode(model: &ToyModel, prompt: &[u32], steps: usize) -> Result<DenseReference> {
    model.check_tokens(prompt)?;
    let spec = model.spec();
    let (nq, nkv, d) = (spec.num_q_heads, spec.num_kv_heads, spec.head_dim);
    let group = spec.group_size();
    let mut keys = vec![vec![Vec::<f32>::new(); nkv]; spec.num_layers];
    let mut values = keys.clone();
    let mut weights = Vec::new();

    let mut feed = |token: u32, position: usize| -> Result<Vec<f32>> {
        let mut x = model.embed_token(token)?;
        for layer in 0..spec.num_layers {
            let qkv = model.step_qkv(layer, &x, position);
            for h in 0..nkv {
                keys[layer][h].extend_from_slice(&qkv.k[h * d..(h + 1) * d]);
                values[layer][h].extend_from_slice(&qkv.v[h * d..(h + 1) * d]);
            }
            let mut ctx = vec![0f32; nq * d];
            for h in 0..nq {
                attend_head(
                    &qkv.q[h * d..(h + 1) * d],
                    &keys[layer][h / group],
                    &values[layer][h / group],
                    &mut ctx[h * d..(h + 1) * d],
                    &mut weights,
                );
            }
            model.step_finish(layer, &mut x, &ctx);
        }
        Ok(model.step_logits(&x))
    };

    let mut last = Vec::new();
    for (p, &t) in prompt.iter().enumerate() {
        last = feed(t, p)?;
    }
    let mut out = DenseReference {
        tokens: Vec::with_capacity(steps),
        logits: Vec::with_capacity(steps),
    };
    for s in 0..steps {
        let token = argmax(&last);
        out.tokens.push(token);
        out.logits.push(std::mem::take(&mut last));
        if s + 1 < steps {
            last = feed(token, prompt.len() + s)?;
        }
    }
    Ok(out)
}

/// Memo of dense reference decodes keyed by the content hash of
/// `(model spec, prompt, steps)`; safe to share across threads.
#[derive(Debug, Default)]
pub struct ReferenceCache {
    entries: Mutex<HashMap<String, Arc<DenseReference>>>,
}

impl ReferenceCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(model: &ToyModel, prompt: &[u32], steps: usize) -> String {
        let mut h = Sha256::new();
        h.update(model.spec().hash().as_bytes());
        h.update((steps as u64).to_le_bytes());
        for t in prompt {
            h.update(t.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn get(&self, model: &ToyModel, prompt: &[u32], steps: usize) -> Result<Arc<DenseReference>> {
        let key = Self::key(model, prompt, steps);
        if let Some(r) = self.entries.lock().expect("reference cache lock").get(&key) {
            return Ok(Arc::clone(r));
        }
        let r = Arc::new(dense_decode(model, prompt, steps)?);
        self.entries
            .lock()
            .expect("reference cache lock")
            .entry(key)
            .or_insert_with(|| Arc::clone(&r));
        Ok(r)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("reference cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeStep {
    pub step: usize,
    /// Argmax of the compressed run's logits.
    pub token: u32,
    pub dense_token: u32,
    pub kl: f64,
    pub max_logit_deviation: f32,
    /// Cached tokens per layer after this step's token was appended and any
    /// eviction ran.
    pub layer_tokens: Vec<usize>,
    pub payload_bytes: f64,
    /// Layers that evicted during this step.
    pub evictions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub policy: Policy,
    pub prompt_len: usize,
    pub steps: Vec<DecodeStep>,
    pub mean_kl: f64,
    pub max_logit_deviation: f32,
    /// Number of leading steps whose compressed argmax matches the dense token;
    /// equals the step count when the runs never diverge.
    pub first_divergence: usize,
    /// Payload after the last step.
    pub final_payload_bytes: f64,
    pub peak_payload_bytes: f64,
}

impl DecodeTrace {
    pub fn tokens(&self) -> Vec<u32> {
        self.steps.iter().map(|s| s.token).collect()
    }

    pub fn dense_tokens(&self) -> Vec<u32> {
        self.steps.iter().map(|s| s.dense_token).collect()
    }
}

/// Per-layer scorer inputs that live alongside the cache and are filtered on
/// every eviction.
struct ScorerState {
    kind: ScorerKind,
    seed: u64,
    /// Attention mass per cached token, per layer.
    mass: Vec<Vec<f64>>,
    /// Pre-rotation keys per layer as `[kv_head][token * d..]`.
    k_pre: Vec<Vec<Vec<f32>>>,
    /// Recent pre-rotation queries per layer, newest last.
    q_recent: Vec<Vec<Vec<f32>>>,
}

impl ScorerState {
    fn new(kind: ScorerKind, seed: u64, layers: usize, kv_heads: usize) -> Self {
        Self {
            kind,
            seed,
            mass: vec![Vec::new(); layers],
            k_pre: vec![vec![Vec::new(); kv_heads]; layers],
            q_recent: vec![Vec::new(); layers],
        }
    }

    fn record(&mut self, layer: usize, k_pre: &[f32], q_pre: &[f32], weights: &[f32], d: usize) {
        if self.kind == ScorerKind::AttnAccum {
            let m = &mut self.mass[layer];
            m.push(0.0);
            for (a, &w) in m.iter_mut().zip(weights) {
                *a += w as f64;
            }
        }
        if self.kind == ScorerKind::Trig {
            for (h, store) in self.k_pre[layer].iter_mut().enumerate() {
                store.extend_from_slice(&k_pre[h * d..(h + 1) * d]);
            }
            let recent = &mut self.q_recent[layer];
            recent.push(q_pre.to_vec());
            if recent.len() > TRIG_QUERY_WINDOW {
                recent.remove(0);
            }
        }
    }

    fn scores(&self, layer: usize, len: usize, step: usize, d: usize) -> Result<ImportanceScores> {
        match self.kind {
            ScorerKind::AttnAccum => ImportanceScores::new(self.mass[layer].clone(), ScorerKind::AttnAccum),
            ScorerKind::RandomPerm => Ok(score_random_permutation(
                len,
                derive_seed(self.seed, ((layer as u64) << 32) | step as u64),
            )),
            ScorerKind::Trig => {
                let heads = self.k_pre[layer].len();
                let keys = Tensor::new(vec![heads, len, d], self.k_pre[layer].concat())?;
                let mut dir = vec![0f32; d];
                let recent = &self.q_recent[layer];
                let count = recent.iter().map(|q| q.len() / d).sum::<usize>() as f32;
                for q in recent {
                    for head in q.chunks_exact(d) {
                        for (o, &v) in dir.iter_mut().zip(head) {
                            *o += v;
                        }
                    }
                }
                dir.iter_mut().for_each(|v| *v /= count);
                score_trigonometric(&keys, &dir)
            }
        }
    }

    fn retain(&mut self, layer: usize, retained: &RetainedSet, d: usize) {
        if self.kind == ScorerKind::AttnAccum {
            let m = &self.mass[layer];
            self.mass[layer] = retained.indices.iter().map(|&i| m[i]).collect();
        }
        if self.kind == ScorerKind::Trig {
            for store in &mut self.k_pre[layer] {
                *store = retained
                    .indices
                    .iter()
                    .flat_map(|&i| store[i * d..(i + 1) * d].to_vec())
                    .collect();
            }
        }
    }
}

/// Decodes `options.steps` tokens after `prompt` with `plan`'s per-layer
/// configs and compares every step with the dense reference.
///
/// The prompt is prefilled one token at a time without eviction; eviction
/// triggers are checked after every generated token is appended. The token
/// chosen at the last step is appended too, so the cache ends holding
/// `prompt.len() + steps` positions (before eviction).
pub fn decode(
    model: &ToyModel,
    prompt: &[u32],
    plan: &RoutingPlan,
    options: &DecodeOptions,
    references: &ReferenceCache,
) -> Result<DecodeTrace> {
    let spec = model.spec();
    if plan.layers.len() != spec.num_layers {
        return Err(Error::Config(format!(
            "plan has {} layers, model has {}",
            plan.layers.len(),
            spec.num_layers
        )));
    }
    model.check_tokens(prompt)?;
    let configs: Vec<LayerCompressionConfig> = plan.configs();
    let geometry = CacheGeometry::for_model(spec).with_eviction_period(options.eviction_period);
    let mut cache = HeteroKVCache::new(geometry, &configs)?;
    let (nq, nkv, d) = (spec.num_q_heads, spec.num_kv_heads, spec.head_dim);
    let mut scorer = ScorerState::new(options.scorer, options.seed, spec.num_layers, nkv);

    let feed = |cache: &mut HeteroKVCache, scorer: &mut ScorerState, token: u32| -> Result<Vec<f32>> {
        let position = cache.step();
        let mut x = model.embed_token(token)?;
        for layer in 0..spec.num_layers {
            let qkv = model.step_qkv(layer, &x, position);
            let k = Tensor::new(vec![nkv, d], qkv.k)?;
            let v = Tensor::new(vec![nkv, d], qkv.v)?;
            cache.append(layer, &k, &v, position)?;
            let q = Tensor::new(vec![nq, d], qkv.q_pre.clone())?;
            let (ctx, weights) = cache.attend_with_weights(layer, &q, position)?;
            scorer.record(layer, &qkv.k_pre, &qkv.q_pre, &weights, d);
            model.step_finish(layer, &mut x, ctx.data());
        }
        cache.advance()?;
        Ok(model.step_logits(&x))
    };

    let mut logits = Vec::new();
    for &t in prompt {
        logits = feed(&mut cache, &mut scorer, t)?;
    }
    let reference = references.get(model, prompt, options.steps)?;
    let mut steps = Vec::with_capacity(options.steps);
    let mut peak = cache.total_payload_bytes();
    for s in 0..options.steps {
        let dense_logits = &reference.logits[s];
        let dense_token = reference.tokens[s];
        let kl = kl_from_logits(dense_logits, &logits);
        let dev = dense_logits
            .iter()
            .zip(&logits)
            .map(|(a, b)| (a - b).abs())
            .fold(0f32, f32::max);
        let token = argmax(&logits);

        logits = feed(&mut cache, &mut scorer, dense_token)?;
        peak = peak.max(cache.total_payload_bytes());
        let mut evictions = Vec::new();
        if cache.eviction_due() {
            for layer in 0..spec.num_layers {
                let len = cache.layer(layer).len();
                let scores = scorer.scores(layer, len, cache.step(), d)?;
                if let Some(r) = cache.maybe_evict(layer, &scores)? {
                    scorer.retain(layer, &r, d);
                    evictions.push(layer);
                }
            }
        }
        steps.push(DecodeStep {
            step: s,
            token,
            dense_token,
            kl,
            max_logit_deviation: dev,
            layer_tokens: cache.layers().iter().map(|l| l.len()).collect(),
            payload_bytes: cache.total_payload_bytes(),
            evictions,
        });
    }
    let n = steps.len();
    Ok(DecodeTrace {
        policy: plan.policy,
        prompt_len: prompt.len(),
        mean_kl: if n == 0 {
            0.0
        } else {
            steps.iter().map(|s| s.kl).sum::<f64>() / n as f64
        },
        max_logit_deviation: steps.iter().map(|s| s.max_logit_deviation).fold(0.0, f32::max),
        first_divergence: steps.iter().position(|s| s.token != s.dense_token).unwrap_or(n),
        final_payload_bytes: cache.total_payload_bytes(),
        peak_payload_bytes: peak,
        steps,
    })
}

/// One row of the policy / budget comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRow {
    pub policy: Policy,
    pub b: Option<u64>,
    #[serde(rename = "M_bytes")]
    pub m_bytes: u64,
    /// Payload at the end of decoding.
    pub realized_bytes: f64,
    pub mean_kl: f64,
    pub first_divergence: usize,
    pub steps: usize,
    pub prompt_len: usize,
    pub predicted_bytes: f64,
    pub peak_bytes: f64,
    pub predicted_sensitivity: f64,
}

pub fn memory_report(runs: &[(&RoutingPlan, &DecodeTrace)]) -> Vec<MemoryRow> {
    runs.iter()
        .map(|(plan, trace)| MemoryRow {
            policy: plan.policy,
            b: plan.budget.b,
            m_bytes: plan.budget.bytes,
            realized_bytes: trace.final_payload_bytes,
            mean_kl: trace.mean_kl,
            first_divergence: trace.first_divergence,
            steps: trace.steps.len(),
            prompt_len: trace.prompt_len,
            predicted_bytes: plan.totals.m_bytes,
            peak_bytes: trace.peak_payload_bytes,
            predicted_sensitivity: plan.totals.s_pred,
        })
        .collect()
}

/// CSV with columns `policy, b, M_bytes, realized_bytes, mean_kl,
/// first_divergence, steps, prompt_len, predicted_bytes, peak_bytes,
/// predicted_sensitivity`.
pub fn write_memory_csv<W: Write>(rows: &[MemoryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::Format(format!("csv: {e}")))
}
