//! Deterministic toy grouped-query-attention transformer.
//!
//! Architecture: token embedding, `num_layers` pre-norm blocks (RMSNorm without
//! gain, attention with rotary embeddings, RMSNorm, SiLU MLP of width
//! `4 * hidden_dim`), a final RMSNorm, and an untied unembedding.
//!
//! Weights come from `ChaCha8Rng::seed_from_u64(spec.seed)`. Each weight is
//! `(2u - 1) * a` with `u = (next_u32 >> 8) / 2^24` and `a = 1/sqrt(fan_in)`
//! (`a = 1` for the embedding table). Draw order: embedding `[vocab, hidden]`;
//! then per layer `wq [hidden, q_heads*d]`, `wk [hidden, kv_heads*d]`,
//! `wv [hidden, kv_heads*d]`, `wo [q_heads*d, hidden]`, `w_up [hidden, 4*hidden]`,
//! `w_down [4*hidden, hidden]`; finally `unembed [hidden, vocab]`. All matrices
//! are row-major `[in, out]`.

pub(crate) mod forward;
pub mod rope;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use forward::{ForwardTrace, LayerActivations, Perturbation, StepQkv};
pub use rope::{rope_inverse, rope_rotate};

pub const DEFAULT_ROPE_BASE: f64 = 10000.0;
const RMS_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub num_layers: usize,
    pub num_q_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    pub seed: u64,
}

fn default_rope_base() -> f64 {
    DEFAULT_ROPE_BASE
}

impl ModelSpec {
    /// The default desk-scale model: 8 layers, 4 query heads sharing 2 KV heads,
    /// head dim 16, vocabulary 256.
    pub fn desk(seed: u64) -> Self {
        Self {
            num_layers: 8,
            num_q_heads: 4,
            num_kv_heads: 2,
            head_dim: 16,
            vocab_size: 256,
            rope_base: DEFAULT_ROPE_BASE,
            seed,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.num_q_heads * self.head_dim
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.hidden_dim()
    }

    /// Query heads per KV head.
    pub fn group_size(&self) -> usize {
        self.num_q_heads / self.num_kv_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("num_q_heads", self.num_q_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("head_dim", self.head_dim),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.num_q_heads.is_multiple_of(self.num_kv_heads) {
            return Err(Error::Config(format!(
                "num_q_heads {} is not a multiple of num_kv_heads {}",
                self.num_q_heads, self.num_kv_heads
            )));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "head_dim {} must be even for rotary embeddings",
                self.head_dim
            )));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return Err(Error::Config(format!("rope_base {} must be positive", self.rope_base)));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded. Tables and plans
    /// carry this to detect use against a different model.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("model spec serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model spec serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(s).map_err(|e| Error::Format(format!("model spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Dense `[rows, cols]` weight applied as `y = x W`.
#[derive(Debug, Clone)]
pub(crate) struct Linear {
    rows: usize,
    cols: usize,
    w: Vec<f32>,
}

impl Linear {
    fn seeded(rng: &mut ChaCha8Rng, rows: usize, cols: usize, amplitude: f32) -> Self {
        let w = (0..rows * cols).map(|_| uniform(rng, amplitude)).collect();
        Self { rows, cols, w }
    }

    /// `x` holds `n` rows of length `self.rows`.
    pub(crate) fn apply(&self, x: &[f32], n: usize) -> Vec<f32> {
        debug_assert_eq!(x.len(), n * self.rows);
        let mut out = vec![0f32; n * self.cols];
        for r in 0..n {
            let xr = &x[r * self.rows..(r + 1) * self.rows];
            let yr = &mut out[r * self.cols..(r + 1) * self.cols];
            for (k, &a) in xr.iter().enumerate() {
                let wk = &self.w[k * self.cols..(k + 1) * self.cols];
                for (y, &w) in yr.iter_mut().zip(wk) {
                    *y += a * w;
                }
            }
        }
        out
    }
}

fn uniform(rng: &mut ChaCha8Rng, amplitude: f32) -> f32 {
    let u = (rng.next_u32() >> 8) as f32 / (1u32 << 24) as f32;
    (2.0 * u - 1.0) * amplitude
}

#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub(crate) wq: Linear,
    pub(crate) wk: Linear,
    pub(crate) wv: Linear,
    pub(crate) wo: Linear,
    pub(crate) w_up: Linear,
    pub(crate) w_down: Linear,
}

/// Immutable model; safe to share across threads for concurrent forward passes.
#[derive(Debug, Clone)]
pub struct ToyModel {
    spec: ModelSpec,
    embed: Vec<f32>,
    pub(crate) blocks: Vec<Block>,
    unembed: Linear,
}

impl ToyModel {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// First embedding weight; handy for determinism checks.
    pub fn first_weight(&self) -> f32 {
        self.embed[0]
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("token sequence is empty".into()));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.spec.vocab_size) {
            return Err(Error::Input(format!(
                "token {t} out of range for vocabulary of {}",
                self.spec.vocab_size
            )));
        }
        Ok(())
    }

    pub(crate) fn embed_tokens(&self, tokens: &[u32]) -> Vec<f32> {
        let h = self.spec.hidden_dim();
        let mut x = Vec::with_capacity(tokens.len() * h);
        for &t in tokens {
            let t = t as usize;
            x.extend_from_slice(&self.embed[t * h..(t + 1) * h]);
        }
        x
    }

    pub(crate) fn logits_from_residual(&self, x: &[f32], n: usize) -> Vec<f32> {
        let normed = rms_norm(x, self.spec.hidden_dim());
        self.unembed.apply(&normed, n)
    }
}

/// Builds the model described by `spec`.
pub fn build_model(spec: &ModelSpec) -> Result<ToyModel> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let hidden = spec.hidden_dim();
    let qd = spec.num_q_heads * spec.head_dim;
    let kvd = spec.num_kv_heads * spec.head_dim;
    let mlp = spec.mlp_dim();
    let amp = |fan_in: usize| 1.0 / (fan_in as f32).sqrt();

    let embed = (0..spec.vocab_size * hidden).map(|_| uniform(&mut rng, 1.0)).collect();
    let blocks = (0..spec.num_layers)
        .map(|_| Block {
            wq: Linear::seeded(&mut rng, hidden, qd, amp(hidden)),
            wk: Linear::seeded(&mut rng, hidden, kvd, amp(hidden)),
            wv: Linear::seeded(&mut rng, hidden, kvd, amp(hidden)),
            wo: Linear::seeded(&mut rng, qd, hidden, amp(qd)),
            w_up: Linear::seeded(&mut rng, hidden, mlp, amp(hidden)),
            w_down: Linear::seeded(&mut rng, mlp, hidden, amp(mlp)),
        })
        .collect();
    let unembed = Linear::seeded(&mut rng, hidden, spec.vocab_size, amp(hidden));
    Ok(ToyModel {
        spec: spec.clone(),
        embed,
        blocks,
        unembed,
    })
}

/// Row-wise RMSNorm without a learned gain.
pub(crate) fn rms_norm(x: &[f32], width: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(width) {
        let ms = row.iter().map(|v| v * v).sum::<f32>() / width as f32;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        out.extend(row.iter().map(|v| v * inv));
    }
    out
}

pub(crate) fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_specs_build_identical_models() {
        let a = build_model(&ModelSpec::desk(7)).unwrap();
        let b = build_model(&ModelSpec::desk(7)).unwrap();
        assert_eq!(a.first_weight(), b.first_weight());
        assert_eq!(a.embed, b.embed);
        assert_eq!(a.unembed.w, b.unembed.w);
        let c = build_model(&ModelSpec::desk(8)).unwrap();
        assert_ne!(a.first_weight(), c.first_weight());
    }

    #[test]
    fn non_divisible_heads_rejected() {
        let spec = ModelSpec {
            num_q_heads: 4,
            num_kv_heads: 3,
            ..ModelSpec::desk(1)
        };
        assert!(matches!(build_model(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn odd_head_dim_rejected() {
        let spec = ModelSpec {
            head_dim: 15,
            ..ModelSpec::desk(1)
        };
        assert!(matches!(build_model(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn desk_hidden_dim() {
        let spec = ModelSpec {
            num_layers: 8,
            num_q_heads: 4,
            num_kv_heads: 2,
            head_dim: 16,
            vocab_size: 256,
            rope_base: DEFAULT_ROPE_BASE,
            seed: 42,
        };
        let model = build_model(&spec).unwrap();
        assert_eq!(model.spec().hidden_dim(), 64);
        assert_eq!(model.blocks.len(), 8);
    }

    #[test]
    fn weights_within_fan_in_bound() {
        let model = build_model(&ModelSpec::desk(3)).unwrap();
        let bound = 1.0 / (64f32).sqrt();
        assert!(model.blocks[0].wq.w.iter().all(|w| w.abs() <= bound));
        assert!(model.embed.iter().all(|w| w.abs() <= 1.0));
    }

    #[test]
    fn spec_json_round_trip_and_hash() {
        let spec = ModelSpec::desk(42);
        let back = ModelSpec::from_json(&spec.to_json()).unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.hash(), spec.hash());
        assert_ne!(ModelSpec::desk(43).hash(), spec.hash());
        let bad = r#"{"num_layers":2,"num_q_heads":4,"num_kv_heads":3,"head_dim":8,"vocab_size":10,"seed":1}"#;
        assert!(matches!(ModelSpec::from_json(bad), Err(Error::Config(_))));
        assert!(matches!(ModelSpec::from_json("{"), Err(Error::Format(_))));
    }
}
