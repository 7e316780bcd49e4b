//! Forward passes: dense reference, single-layer perturbation, and the
//! per-token step functions the decode path is built from.

use super::rope::rotate_in_place;
use super::{rms_norm, silu, ToyModel};
use crate::config::LayerCompressionConfig;
use crate::error::{Error, Result};
use crate::eviction::{score_random_permutation, score_trigonometric, select_retained, ImportanceScores, ScorerKind};
use crate::quant::{dequantize, quantize_k, quantize_v, DEFAULT_V_GROUP_SIZE};
use crate::seed::derive_seed;
use crate::tensor::{dot, Tensor};

/// Number of trailing queries averaged into the trigonometric scorer's direction.
pub const TRIG_QUERY_WINDOW: usize = 8;

/// Recorded per-layer attention outputs (after the output projection) and final logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivations {
    /// One `[T, hidden_dim]` tensor per layer.
    pub attn_outputs: Vec<Tensor>,
    /// `[T, vocab_size]`.
    pub logits: Tensor,
}

/// A dense forward pass plus the residual stream entering every layer, so
/// perturbed passes can resume from the perturbed layer.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    tokens: usize,
    residuals: Vec<Vec<f32>>,
    pub activations: LayerActivations,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.tokens
    }

    pub fn is_empty(&self) -> bool {
        self.tokens == 0
    }
}

/// Compression applied to a single layer's KV tensors during a full-sequence pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation {
    pub layer: usize,
    pub config: LayerCompressionConfig,
    pub scorer: ScorerKind,
    /// Base seed for the random-permutation scorer; the layer index is mixed in.
    pub seed: u64,
    pub v_group_size: usize,
}

impl Perturbation {
    pub fn new(layer: usize, config: LayerCompressionConfig, scorer: ScorerKind, seed: u64) -> Self {
        Self {
            layer,
            config,
            scorer,
            seed,
            v_group_size: DEFAULT_V_GROUP_SIZE,
        }
    }
}

/// One token's projections at one layer.
#[derive(Debug, Clone)]
pub struct StepQkv {
    /// Rotated queries, `[num_q_heads * head_dim]`.
    pub q: Vec<f32>,
    /// Rotated keys, `[num_kv_heads * head_dim]`.
    pub k: Vec<f32>,
    pub v: Vec<f32>,
    pub q_pre: Vec<f32>,
    pub k_pre: Vec<f32>,
}

/// Softmax attention of one query over `keys`/`values` (row-major `[n, d]`).
/// Writes the weighted value sum into `out`; with no keys the output is zero.
pub(crate) fn attend_head(q: &[f32], keys: &[f32], values: &[f32], out: &mut [f32], weights: &mut Vec<f32>) {
    let d = q.len();
    let n = keys.len() / d;
    let scale = 1.0 / (d as f32).sqrt();
    weights.clear();
    out.iter_mut().for_each(|o| *o = 0.0);
    if n == 0 {
        return;
    }
    let mut max = f32::NEG_INFINITY;
    for j in 0..n {
        let s = dot(q, &keys[j * d..(j + 1) * d]) * scale;
        max = max.max(s);
        weights.push(s);
    }
    let mut sum = 0f32;
    for w in weights.iter_mut() {
        *w = (*w - max).exp();
        sum += *w;
    }
    for w in weights.iter_mut() {
        *w /= sum;
    }
    for (j, &w) in weights.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(&values[j * d..(j + 1) * d]) {
            *o += w * v;
        }
    }
}

/// Per-head `[heads, n, d]` layout from token-major `[n, heads * d]`.
fn to_head_major(x: &[f32], n: usize, heads: usize, d: usize) -> Vec<f32> {
    let mut out = vec![0f32; x.len()];
    for t in 0..n {
        for h in 0..heads {
            out[(h * n + t) * d..(h * n + t + 1) * d].copy_from_slice(&x[(t * heads + h) * d..(t * heads + h + 1) * d]);
        }
    }
    out
}

fn gather_tokens(x: &[f32], heads: usize, n: usize, d: usize, keep: &[usize]) -> Vec<f32> {
    let mut out = Vec::with_capacity(heads * keep.len() * d);
    for h in 0..heads {
        for &t in keep {
            out.extend_from_slice(&x[(h * n + t) * d..(h * n + t + 1) * d]);
        }
    }
    out
}

impl ToyModel {
    /// Dense causal forward pass recording every layer's attention output.
    pub fn forward_full(&self, tokens: &[u32]) -> Result<LayerActivations> {
        Ok(self.trace(tokens)?.activations)
    }

    /// Like [`forward_full`](Self::forward_full) but also keeps the residual stream
    /// entering each layer.
    pub fn trace(&self, tokens: &[u32]) -> Result<ForwardTrace> {
        self.check_tokens(tokens)?;
        let n = tokens.len();
        let mut x = self.embed_tokens(tokens);
        let mut residuals = Vec::with_capacity(self.spec.num_layers);
        let mut attn_outputs = Vec::with_capacity(self.spec.num_layers);
        for layer in 0..self.spec.num_layers {
            residuals.push(x.clone());
            attn_outputs.push(self.run_block(layer, &mut x, n, None)?);
        }
        let logits = self.logits_tensor(&x, n)?;
        Ok(ForwardTrace {
            tokens: n,
            residuals,
            activations: LayerActivations { attn_outputs, logits },
        })
    }

    /// Dense pass except that `perturbation.layer`'s keys and values go through
    /// eviction and quantization before attention.
    pub fn forward_with_layer_perturbation(
        &self,
        tokens: &[u32],
        perturbation: &Perturbation,
    ) -> Result<LayerActivations> {
        self.check_perturbation(perturbation)?;
        let trace = self.trace(tokens)?;
        self.resume_perturbed(&trace, perturbation)
    }

    /// Re-runs layers `perturbation.layer..L` on top of a dense trace.
    pub fn resume_perturbed(&self, trace: &ForwardTrace, perturbation: &Perturbation) -> Result<LayerActivations> {
        self.check_perturbation(perturbation)?;
        let n = trace.tokens;
        let start = perturbation.layer;
        let mut x = trace.residuals[start].clone();
        let mut attn_outputs = trace.activations.attn_outputs[..start].to_vec();
        for layer in start..self.spec.num_layers {
            let p = (layer == start).then_some(perturbation);
            attn_outputs.push(self.run_block(layer, &mut x, n, p)?);
        }
        let logits = self.logits_tensor(&x, n)?;
        Ok(LayerActivations { attn_outputs, logits })
    }

    /// Only the perturbed layer's own attention output; skips downstream layers.
    pub fn perturbed_attention_output(&self, trace: &ForwardTrace, perturbation: &Perturbation) -> Result<Tensor> {
        self.check_perturbation(perturbation)?;
        let mut x = trace.residuals[perturbation.layer].clone();
        self.run_block(perturbation.layer, &mut x, trace.tokens, Some(perturbation))
    }

    fn check_perturbation(&self, p: &Perturbation) -> Result<()> {
        if p.layer >= self.spec.num_layers {
            return Err(Error::Input(format!(
                "layer {} out of range for a {}-layer model",
                p.layer, self.spec.num_layers
            )));
        }
        if p.v_group_size == 0 {
            return Err(Error::Config("V quantization group_size must be positive".into()));
        }
        Ok(())
    }

    fn logits_tensor(&self, x: &[f32], n: usize) -> Result<Tensor> {
        Tensor::new(vec![n, self.spec.vocab_size], self.logits_from_residual(x, n))
    }

    /// Query, key, and value projections for `n` rows of normalized input, with
    /// rotation applied at positions `0..n`. Returns `(q, k, v, q_pre, k_pre)`.
    fn project(&self, layer: usize, normed: &[f32], n: usize, positions: impl Fn(usize) -> usize) -> StepQkvBatch {
        let spec = &self.spec;
        let d = spec.head_dim;
        let block = &self.blocks[layer];
        let q_pre = block.wq.apply(normed, n);
        let k_pre = block.wk.apply(normed, n);
        let v = block.wv.apply(normed, n);
        let mut q = q_pre.clone();
        let mut k = k_pre.clone();
        for t in 0..n {
            let p = positions(t);
            for h in q[t * spec.num_q_heads * d..(t + 1) * spec.num_q_heads * d].chunks_exact_mut(d) {
                rotate_in_place(h, p, spec.rope_base, 1.0);
            }
            for h in k[t * spec.num_kv_heads * d..(t + 1) * spec.num_kv_heads * d].chunks_exact_mut(d) {
                rotate_in_place(h, p, spec.rope_base, 1.0);
            }
        }
        StepQkvBatch { q, k, v, q_pre, k_pre }
    }

    /// Output projection, residual add, and MLP. Returns the attention output.
    fn finish_block(&self, layer: usize, x: &mut [f32], ctx: &[f32], n: usize) -> Vec<f32> {
        let hidden = self.spec.hidden_dim();
        let block = &self.blocks[layer];
        let attn_out = block.wo.apply(ctx, n);
        for (xi, a) in x.iter_mut().zip(&attn_out) {
            *xi += a;
        }
        let h = rms_norm(x, hidden);
        let mut up = block.w_up.apply(&h, n);
        up.iter_mut().for_each(|u| *u = silu(*u));
        let down = block.w_down.apply(&up, n);
        for (xi, m) in x.iter_mut().zip(&down) {
            *xi += m;
        }
        attn_out
    }

    fn run_block(&self, layer: usize, x: &mut [f32], n: usize, perturbation: Option<&Perturbation>) -> Result<Tensor> {
        let spec = &self.spec;
        let (d, nq, nkv) = (spec.head_dim, spec.num_q_heads, spec.num_kv_heads);
        let normed = rms_norm(x, spec.hidden_dim());
        let proj = self.project(layer, &normed, n, |t| t);
        let keys = to_head_major(&proj.k, n, nkv, d);
        let values = to_head_major(&proj.v, n, nkv, d);

        let (positions, keys, values) = match perturbation {
            Some(p) if !p.config.is_identity() => self.compress_kv(p, &proj, keys, values, n)?,
            _ => ((0..n).collect::<Vec<_>>(), keys, values),
        };
        let m = positions.len();

        let mut ctx = vec![0f32; n * nq * d];
        let mut weights = Vec::with_capacity(m);
        for t in 0..n {
            let visible = positions.partition_point(|&p| p <= t);
            for h in 0..nq {
                let g = h / spec.group_size();
                let kv = g * m * d..(g * m + visible) * d;
                attend_head(
                    &proj.q[(t * nq + h) * d..(t * nq + h + 1) * d],
                    &keys[kv.clone()],
                    &values[kv],
                    &mut ctx[(t * nq + h) * d..(t * nq + h + 1) * d],
                    &mut weights,
                );
            }
        }
        let attn_out = self.finish_block(layer, x, &ctx, n);
        Tensor::new(vec![n, spec.hidden_dim()], attn_out)
    }

    /// Eviction then quantization of one layer's `[H_kv, n, d]` keys and values.
    /// Returns retained positions and dequantized tensors.
    fn compress_kv(
        &self,
        p: &Perturbation,
        proj: &StepQkvBatch,
        keys: Vec<f32>,
        values: Vec<f32>,
        n: usize,
    ) -> Result<(Vec<usize>, Vec<f32>, Vec<f32>)> {
        let spec = &self.spec;
        let (d, nkv) = (spec.head_dim, spec.num_kv_heads);
        let retained: Vec<usize> = if p.config.keep.retention_count(n) == n {
            (0..n).collect()
        } else {
            let scores = match p.scorer {
                ScorerKind::RandomPerm => score_random_permutation(n, derive_seed(p.seed, p.layer as u64)),
                ScorerKind::AttnAccum => self.dense_attention_mass(&proj.q, &keys, n)?,
                ScorerKind::Trig => {
                    let k_pre = Tensor::new(vec![nkv, n, d], to_head_major(&proj.k_pre, n, nkv, d))?;
                    score_trigonometric(&k_pre, &self.recent_query_direction(&proj.q_pre, n))?
                }
            };
            select_retained(&scores, p.config.keep, n)?.indices
        };
        let m = retained.len();
        let k_sel = Tensor::new(vec![nkv, m, d], gather_tokens(&keys, nkv, n, d, &retained))?;
        let v_sel = Tensor::new(vec![nkv, m, d], gather_tokens(&values, nkv, n, d, &retained))?;
        let k_deq = dequantize(&quantize_k(&k_sel, p.config.k_bits)?)?;
        let v_deq = dequantize(&quantize_v(&v_sel, p.config.v_bits, p.v_group_size)?)?;
        Ok((retained, k_deq.into_data(), v_deq.into_data()))
    }

    /// Attention mass each token receives in the dense causal pass, summed over
    /// query positions and heads.
    fn dense_attention_mass(&self, q: &[f32], keys: &[f32], n: usize) -> Result<ImportanceScores> {
        let spec = &self.spec;
        let (d, nq) = (spec.head_dim, spec.num_q_heads);
        let mut mass = vec![0f64; n];
        let mut out = vec![0f32; d];
        let mut weights = Vec::with_capacity(n);
        for t in 0..n {
            for h in 0..nq {
                let g = h / spec.group_size();
                let range = g * n * d..(g * n + t + 1) * d;
                // values are irrelevant here; reuse keys as a same-shaped stand-in
                attend_head(
                    &q[(t * nq + h) * d..(t * nq + h + 1) * d],
                    &keys[range.clone()],
                    &keys[range],
                    &mut out,
                    &mut weights,
                );
                for (m, &w) in mass.iter_mut().zip(&weights) {
                    *m += w as f64;
                }
            }
        }
        ImportanceScores::new(mass, ScorerKind::AttnAccum)
    }

    /// Mean pre-rotation query over the last few positions and all query heads.
    pub(crate) fn recent_query_direction(&self, q_pre: &[f32], n: usize) -> Vec<f32> {
        let d = self.spec.head_dim;
        let nq = self.spec.num_q_heads;
        let start = n.saturating_sub(TRIG_QUERY_WINDOW);
        let mut dir = vec![0f32; d];
        for t in start..n {
            for h in 0..nq {
                for (o, &v) in dir.iter_mut().zip(&q_pre[(t * nq + h) * d..(t * nq + h + 1) * d]) {
                    *o += v;
                }
            }
        }
        let count = ((n - start) * nq) as f32;
        dir.iter_mut().for_each(|v| *v /= count);
        dir
    }

    /// Embedding row for a single token.
    pub fn embed_token(&self, token: u32) -> Result<Vec<f32>> {
        self.check_tokens(&[token])?;
        Ok(self.embed_tokens(&[token]))
    }

    /// Projections for one token entering `layer` at absolute `position`.
    pub fn step_qkv(&self, layer: usize, x: &[f32], position: usize) -> StepQkv {
        let normed = rms_norm(x, self.spec.hidden_dim());
        let b = self.project(layer, &normed, 1, |_| position);
        StepQkv {
            q: b.q,
            k: b.k,
            v: b.v,
            q_pre: b.q_pre,
            k_pre: b.k_pre,
        }
    }

    /// Applies the output projection and MLP for one token given its attention
    /// context `[num_q_heads * head_dim]`; updates `x` in place and returns the
    /// attention output.
    pub fn step_finish(&self, layer: usize, x: &mut [f32], ctx: &[f32]) -> Vec<f32> {
        self.finish_block(layer, x, ctx, 1)
    }

    /// Next-token logits from a final residual row.
    pub fn step_logits(&self, x: &[f32]) -> Vec<f32> {
        self.logits_from_residual(x, 1)
    }
}

struct StepQkvBatch {
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    q_pre: Vec<f32>,
    k_pre: Vec<f32>,
}
