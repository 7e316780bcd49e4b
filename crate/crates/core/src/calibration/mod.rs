//! Per-layer sensitivity calibration.
//!
//! Every cell `(layer, config)` of the table is measured by compressing only
//! that layer's KV tensors and comparing against the dense pass. Two metrics
//! are supported: the relative L2 error of the layer's own attention output
//! (the cheap proxy) and the KL divergence of the next-token distribution.

mod correlate;
mod table;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::str::FromStr;

use crate::config::{BitWidth, ConfigSpace, KeepRatio, LayerCompressionConfig};
use crate::error::{Error, Result};
use crate::eviction::ScorerKind;
use crate::model::{ForwardTrace, Perturbation, ToyModel};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

pub use correlate::{correlate, heterogeneity_stats, pearson, spearman, CorrelationReport, OpStats};
pub use table::{load_table, save_table, SensitivityTable, TABLE_FORMAT_VERSION};

/// Pinned 27-token calibration prompt for the desk model (vocabulary 256).
pub const CALIBRATION_PROMPT: [u32; 27] = [
    83, 111, 108, 118, 101, 32, 116, 104, 101, 32, 101, 113, 117, 97, 116, 105, 111, 110, 32, 120, 94, 50, 45, 53, 120,
    43, 54,
];

pub const DEFAULT_HELDOUT_SEQUENCES: usize = 8;
pub const DEFAULT_HELDOUT_LENGTH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    L2Proxy,
    Kl,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::L2Proxy => "l2_proxy",
            MetricKind::Kl => "kl",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" | "l2_proxy" => Ok(MetricKind::L2Proxy),
            "kl" => Ok(MetricKind::Kl),
            _ => Err(Error::Config(format!("unknown metric '{s}' (l2|kl)"))),
        }
    }
}

/// How tuple sensitivities are obtained.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    /// Every tuple is measured directly.
    #[default]
    Direct,
    /// `S(keep, k, v) = S(keep, 16, 16) + S(1, k, 16) + S(1, 16, v)`, built from
    /// single-axis measurements.
    Additive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CalibrationOptions {
    pub scorer: ScorerKind,
    pub seed: u64,
    pub parallel: bool,
    pub composition: Composition,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            scorer: ScorerKind::RandomPerm,
            seed: 0,
            parallel: true,
            composition: Composition::Direct,
        }
    }
}

/// Stable identifier for a set of token sequences.
pub fn prompt_id(sequences: &[&[u32]]) -> String {
    let mut h = Sha256::new();
    for s in sequences {
        h.update((s.len() as u64).to_le_bytes());
        for t in *s {
            h.update(t.to_le_bytes());
        }
    }
    format!("sha256:{}", &hex::encode(h.finalize())[..16])
}

/// Seeded uniform token sequences standing in for held-out text.
pub fn heldout_sequences(count: usize, length: usize, vocab_size: usize, seed: u64) -> Vec<Vec<u32>> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            (0..length).map(|_| rng.gen_range(0..vocab_size as u32)).collect()
        })
        .collect()
}

/// `KL(P || Q)` for probability vectors; terms with `p = 0` contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}

fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let lse = max + logits.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&v| v as f64 - lse).collect()
}

/// `KL(softmax(p) || softmax(q))` computed in log space.
pub fn kl_from_logits(p_logits: &[f32], q_logits: &[f32]) -> f64 {
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    let kl: f64 = lp.iter().zip(&lq).map(|(&a, &b)| a.exp() * (a - b)).sum();
    kl.max(0.0)
}

/// Mean over positions of `||a_t - b_t|| / ||a_t||` for `[T, hidden]` tensors.
pub fn relative_l2_error(reference: &Tensor, perturbed: &Tensor) -> Result<f64> {
    if reference.shape() != perturbed.shape() || reference.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "relative error needs equal [T, hidden] shapes, got {:?} and {:?}",
            reference.shape(),
            perturbed.shape()
        )));
    }
    let n = reference.shape()[0];
    let mut total = 0f64;
    for t in 0..n {
        let (a, b) = (reference.row(t), perturbed.row(t));
        let ref_norm = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let diff = a
            .iter()
            .zip(b)
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        total += if ref_norm == 0.0 {
            if diff == 0.0 {
                0.0
            } else {
                return Err(Error::Calibration(format!(
                    "zero-norm reference output at position {t}"
                )));
            }
        } else {
            diff / ref_norm
        };
    }
    Ok(total / n as f64)
}

/// Relative L2 sensitivity of every layer's attention output on `prompt`.
pub fn calibrate_l2(
    model: &ToyModel,
    prompt: &[u32],
    space: &ConfigSpace,
    options: &CalibrationOptions,
) -> Result<SensitivityTable> {
    if prompt.len() < 2 {
        return Err(Error::Input("calibration prompt needs at least 2 tokens".into()));
    }
    let trace = model.trace(prompt)?;
    let cell = |layer: usize, config: LayerCompressionConfig| -> Result<f64> {
        let p = Perturbation::new(layer, config, options.scorer, options.seed);
        let out = model.perturbed_attention_output(&trace, &p)?;
        relative_l2_error(&trace.activations.attn_outputs[layer], &out)
    };
    let scores = sweep(model, space, options, cell)?;
    SensitivityTable::new(
        model.spec().hash(),
        prompt_id(&[prompt]),
        options.scorer,
        MetricKind::L2Proxy,
        options.seed,
        options.composition,
        space.clone(),
        model.spec().num_layers,
        scores,
    )
}

/// Next-token KL sensitivity averaged over every position of every sequence.
pub fn calibrate_kl(
    model: &ToyModel,
    heldout: &[Vec<u32>],
    space: &ConfigSpace,
    options: &CalibrationOptions,
) -> Result<SensitivityTable> {
    if heldout.is_empty() {
        return Err(Error::Input("KL calibration needs at least one sequence".into()));
    }
    if let Some(s) = heldout.iter().find(|s| s.len() < 2) {
        return Err(Error::Input(format!(
            "held-out sequence of length {} is shorter than 2",
            s.len()
        )));
    }
    let traces: Vec<ForwardTrace> = heldout.iter().map(|s| model.trace(s)).collect::<Result<_>>()?;
    let cell = |layer: usize, config: LayerCompressionConfig| -> Result<f64> {
        let p = Perturbation::new(layer, config, options.scorer, options.seed);
        let mut total = 0f64;
        for trace in &traces {
            let out = model.resume_perturbed(trace, &p)?;
            let (dense, pert) = (&trace.activations.logits, &out.logits);
            let n = trace.len();
            let sum: f64 = (0..n).map(|t| kl_from_logits(dense.row(t), pert.row(t))).sum();
            total += sum / n as f64;
        }
        Ok(total / traces.len() as f64)
    };
    let scores = sweep(model, space, options, cell)?;
    let refs: Vec<&[u32]> = heldout.iter().map(|s| s.as_slice()).collect();
    SensitivityTable::new(
        model.spec().hash(),
        prompt_id(&refs),
        options.scorer,
        MetricKind::Kl,
        options.seed,
        options.composition,
        space.clone(),
        model.spec().num_layers,
        scores,
    )
}

/// Evaluates `cell` over the table, serially or in parallel, and assembles the
/// row-major score vector in `(layer, config)` order.
fn sweep<F>(model: &ToyModel, space: &ConfigSpace, options: &CalibrationOptions, cell: F) -> Result<Vec<f64>>
where
    F: Fn(usize, LayerCompressionConfig) -> Result<f64> + Sync,
{
    let layers = model.spec().num_layers;
    let measured: Vec<LayerCompressionConfig> = match options.composition {
        Composition::Direct => space.configs().to_vec(),
        Composition::Additive => single_axis_parts(space),
    };
    let cells: Vec<(usize, LayerCompressionConfig)> = (0..layers)
        .flat_map(|l| measured.iter().map(move |&c| (l, c)))
        .collect();
    let eval = |&(l, c): &(usize, LayerCompressionConfig)| if c.is_identity() { Ok(0.0) } else { cell(l, c) };
    let values: Vec<f64> = if options.parallel {
        cells.par_iter().map(eval).collect::<Result<_>>()?
    } else {
        cells.iter().map(eval).collect::<Result<_>>()?
    };
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        let (l, c) = cells[i];
        return Err(Error::Calibration(format!("non-finite score at layer {l}, config {c}")));
    }
    match options.composition {
        Composition::Direct => Ok(values),
        Composition::Additive => {
            let lookup = |l: usize, c: LayerCompressionConfig| {
                values[l * measured.len() + measured.iter().position(|&m| m == c).unwrap()]
            };
            let mut out = Vec::with_capacity(layers * space.len());
            for l in 0..layers {
                for c in space.configs() {
                    let (evict, kq, vq) = axes(c);
                    out.push(lookup(l, evict) + lookup(l, kq) + lookup(l, vq));
                }
            }
            Ok(out)
        }
    }
}

/// The three single-axis configs whose scores sum to a tuple's additive score.
fn axes(c: &LayerCompressionConfig) -> (LayerCompressionConfig, LayerCompressionConfig, LayerCompressionConfig) {
    (
        LayerCompressionConfig::new(c.keep, BitWidth::B16, BitWidth::B16),
        LayerCompressionConfig::new(KeepRatio::FULL, c.k_bits, BitWidth::B16),
        LayerCompressionConfig::new(KeepRatio::FULL, BitWidth::B16, c.v_bits),
    )
}

fn single_axis_parts(space: &ConfigSpace) -> Vec<LayerCompressionConfig> {
    let mut parts: Vec<LayerCompressionConfig> = space
        .configs()
        .iter()
        .flat_map(|c| {
            let (a, b, d) = axes(c);
            [a, b, d]
        })
        .collect();
    parts.sort_by_key(|c| c.id());
    parts.dedup();
    parts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SpaceKind;
    use crate::model::{build_model, ModelSpec};

    fn small_model() -> ToyModel {
        build_model(&ModelSpec {
            num_layers: 3,
            num_q_heads: 4,
            num_kv_heads: 2,
            head_dim: 8,
            vocab_size: 64,
            rope_base: 10000.0,
            seed: 5,
        })
        .unwrap()
    }

    fn prompt() -> Vec<u32> {
        CALIBRATION_PROMPT.iter().map(|t| t % 64).collect()
    }

    #[test]
    fn kl_kernel_closed_form() {
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]) - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        // softmax([x, -inf]) = (1, 0); softmax([0, 0]) = (0.5, 0.5)
        let kl = kl_from_logits(&[0.0, -1e4], &[0.0, 0.0]);
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-9);
        assert_eq!(kl_from_logits(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 0.0);
    }

    #[test]
    fn relative_error_zero_norm_rules() {
        let z = Tensor::zeros(vec![2, 3]);
        assert_eq!(relative_l2_error(&z, &z).unwrap(), 0.0);
        let mut other = z.clone();
        other.data_mut()[4] = 1.0;
        assert!(matches!(relative_l2_error(&z, &other), Err(Error::Calibration(_))));
        let a = Tensor::new(vec![2, 2], vec![3.0, 4.0, 1.0, 0.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        // position 0: 0 / 5, position 1: 1 / 1
        assert!((relative_l2_error(&a, &b).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn l2_table_invariants() {
        let model = small_model();
        let space = ConfigSpace::full();
        let t = calibrate_l2(&model, &prompt(), &space, &CalibrationOptions::default()).unwrap();
        assert_eq!(t.num_layers(), 3);
        assert_eq!(t.space().len(), 54);
        let id = space.identity_index();
        for l in 0..3 {
            assert_eq!(t.score(l, id), 0.0);
            assert!(t.row(l).iter().all(|s| s.is_finite() && *s >= 0.0));
            // the cheapest tuple damages more than a single 8-bit quantization
            assert!(
                t.score(l, 0)
                    > t.score(
                        l,
                        space.index_of(&LayerCompressionConfig::from_id(52).unwrap()).unwrap()
                    )
            );
        }
    }

    #[test]
    fn l2_cell_matches_independent_recomputation() {
        let model = small_model();
        let p = prompt();
        let space = ConfigSpace::full();
        let t = calibrate_l2(&model, &p, &space, &CalibrationOptions::default()).unwrap();
        let cfg = LayerCompressionConfig::new(KeepRatio::from_percent(50).unwrap(), BitWidth::B16, BitWidth::B16);
        // full re-run through the public perturbation API, norms computed here
        let dense = model.forward_full(&p).unwrap();
        let pert = model
            .forward_with_layer_perturbation(&p, &Perturbation::new(0, cfg, ScorerKind::RandomPerm, 0))
            .unwrap();
        let (a, b) = (&dense.attn_outputs[0], &pert.attn_outputs[0]);
        let hidden = a.shape()[1];
        let mut sum = 0.0;
        for t in 0..p.len() {
            let mut num = 0.0;
            let mut den = 0.0;
            for j in 0..hidden {
                let x = a.data()[t * hidden + j] as f64;
                let y = b.data()[t * hidden + j] as f64;
                num += (x - y) * (x - y);
                den += x * x;
            }
            sum += num.sqrt() / den.sqrt();
        }
        let expected = sum / p.len() as f64;
        assert!((t.score(0, space.index_of(&cfg).unwrap()) - expected).abs() < 1e-12);
    }

    #[test]
    fn serial_and_parallel_tables_identical() {
        let model = small_model();
        let space = ConfigSpace::named(SpaceKind::Calib11);
        let par = CalibrationOptions::default();
        let ser = CalibrationOptions { parallel: false, ..par };
        let a = calibrate_l2(&model, &prompt(), &space, &par).unwrap();
        let b = calibrate_l2(&model, &prompt(), &space, &ser).unwrap();
        assert_eq!(a, b);
        let seqs = heldout_sequences(2, 12, 64, 1);
        let a = calibrate_kl(&model, &seqs, &space, &par).unwrap();
        let b = calibrate_kl(&model, &seqs, &space, &ser).unwrap();
        assert_eq!(a, b);
        let bits_a: Vec<u64> = a.scores().iter().map(|s| s.to_bits()).collect();
        let bits_b: Vec<u64> = b.scores().iter().map(|s| s.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn kl_table_identity_zero_and_finite() {
        let model = small_model();
        let space = ConfigSpace::named(SpaceKind::Table2);
        let seqs = heldout_sequences(2, 10, 64, 3);
        let t = calibrate_kl(&model, &seqs, &space, &CalibrationOptions::default()).unwrap();
        let id = space.identity_index();
        for l in 0..3 {
            assert!(t.score(l, id) <= 1e-7);
            assert!(t.row(l).iter().all(|s| s.is_finite() && *s >= 0.0));
        }
        assert_eq!(t.metric(), MetricKind::Kl);
    }

    #[test]
    fn additive_mode_sums_single_axis_scores() {
        let model = small_model();
        let space = ConfigSpace::full();
        let direct = calibrate_l2(&model, &prompt(), &space, &CalibrationOptions::default()).unwrap();
        let opts = CalibrationOptions {
            composition: Composition::Additive,
            ..Default::default()
        };
        let add = calibrate_l2(&model, &prompt(), &space, &opts).unwrap();
        for l in 0..3 {
            for (i, c) in space.configs().iter().enumerate() {
                let (e, k, v) = axes(c);
                let s = |x: LayerCompressionConfig| direct.score(l, space.index_of(&x).unwrap());
                assert_eq!(add.score(l, i), s(e) + s(k) + s(v));
            }
        }
    }

    #[test]
    fn short_inputs_rejected() {
        let model = small_model();
        let space = ConfigSpace::named(SpaceKind::Table2);
        let o = CalibrationOptions::default();
        assert!(matches!(calibrate_l2(&model, &[1], &space, &o), Err(Error::Input(_))));
        assert!(matches!(
            calibrate_kl(&model, &[vec![1]], &space, &o),
            Err(Error::Input(_))
        ));
        assert!(matches!(calibrate_kl(&model, &[], &space, &o), Err(Error::Input(_))));
    }

    #[test]
    fn heldout_is_seeded() {
        let a = heldout_sequences(3, 16, 256, 9);
        assert_eq!(a, heldout_sequences(3, 16, 256, 9));
        assert_ne!(a, heldout_sequences(3, 16, 256, 10));
        assert_ne!(a[0], a[1]);
        assert!(a.iter().flatten().all(|&t| t < 256));
    }

    #[test]
    fn metric_names() {
        assert_eq!("l2".parse::<MetricKind>().unwrap(), MetricKind::L2Proxy);
        assert_eq!("kl".parse::<MetricKind>().unwrap(), MetricKind::Kl);
        assert!(matches!("mse".parse::<MetricKind>(), Err(Error::Config(_))));
        assert_eq!(serde_json::to_string(&MetricKind::L2Proxy).unwrap(), "\"l2_proxy\"");
    }
}
