//! Token-importance scoring and retained-set selection.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::KeepRatio;
use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

/// Which importance signal drives eviction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    /// Accumulated attention weight received by each token (H2O-style). Default.
    AttnAccum,
    /// |cos| between each pre-rotation key and the recent query direction.
    ///
    /// This is a stand-in reconstruction of a trigonometric importance
    /// signal; the exact published formula is not available to us.
    Trig,
    /// A seeded random permutation; used to mirror random-eviction calibration.
    RandomPerm,
}

impl ScorerKind {
    pub fn name(self) -> &'static str {
        match self {
            ScorerKind::AttnAccum => "attn_accum",
            ScorerKind::Trig => "trig",
            ScorerKind::RandomPerm => "random_perm",
        }
    }
}

impl FromStr for ScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attn_accum" => Ok(ScorerKind::AttnAccum),
            "trig" => Ok(ScorerKind::Trig),
            "random_perm" => Ok(ScorerKind::RandomPerm),
            _ => Err(Error::Config(format!(
                "unknown scorer '{s}' (attn_accum|trig|random_perm)"
            ))),
        }
    }
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One importance score per cached token.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    pub scores: Vec<f64>,
    pub kind: ScorerKind,
}

impl ImportanceScores {
    pub fn new(scores: Vec<f64>, kind: ScorerKind) -> Result<Self> {
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Input("importance scores must be finite".into()));
        }
        Ok(Self { scores, kind })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Sum of attention weight each token received across the recorded query steps.
/// Every row of `history` is one query step's attention distribution over the
/// current cache.
pub fn score_attention_accumulation(history: &[Vec<f32>]) -> Result<ImportanceScores> {
    let first = history
        .first()
        .ok_or_else(|| Error::Input("attention history is empty".into()))?;
    let n = first.len();
    let mut scores = vec![0f64; n];
    for (step, row) in history.iter().enumerate() {
        if row.len() != n {
            return Err(Error::Input(format!(
                "attention row {step} covers {} tokens, expected {n}",
                row.len()
            )));
        }
        for (s, &w) in scores.iter_mut().zip(row) {
            *s += w as f64;
        }
    }
    ImportanceScores::new(scores, ScorerKind::AttnAccum)
}

/// `|cos(mean_h key[h, j], query_direction)|` per token, keys taken before rotation.
/// Zero-norm keys (or a zero query) score 0.
pub fn score_trigonometric(pre_rope_keys: &Tensor, query_direction: &[f32]) -> Result<ImportanceScores> {
    let (heads, tokens, d) = match *pre_rope_keys.shape() {
        [h, t, d] => (h, t, d),
        ref s => return Err(Error::Shape(format!("expected [H_kv, T, d_head] keys, got {s:?}"))),
    };
    if query_direction.len() != d {
        return Err(Error::Shape(format!(
            "query direction has {} dims, keys have {d}",
            query_direction.len()
        )));
    }
    let qn = dot(query_direction, query_direction).sqrt();
    let data = pre_rope_keys.data();
    let mut mean = vec![0f32; d];
    let scores = (0..tokens)
        .map(|t| {
            mean.iter_mut().for_each(|m| *m = 0.0);
            for h in 0..heads {
                let row = &data[(h * tokens + t) * d..(h * tokens + t + 1) * d];
                for (m, &k) in mean.iter_mut().zip(row) {
                    *m += k / heads as f32;
                }
            }
            let kn = dot(&mean, &mean).sqrt();
            if kn == 0.0 || qn == 0.0 {
                0.0
            } else {
                ((dot(&mean, query_direction) / (kn * qn)) as f64).abs().min(1.0)
            }
        })
        .collect();
    ImportanceScores::new(scores, ScorerKind::Trig)
}

/// Scores are a random permutation of `0..cache_len` drawn from `ChaCha8Rng(seed)`.
pub fn score_random_permutation(cache_len: usize, seed: u64) -> ImportanceScores {
    let mut perm: Vec<usize> = (0..cache_len).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ImportanceScores {
        scores: perm.into_iter().map(|p| p as f64).collect(),
        kind: ScorerKind::RandomPerm,
    }
}

/// Retained cache indices, strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetainedSet {
    pub indices: Vec<usize>,
}

impl RetainedSet {
    /// Original positions of the retained tokens, given the pre-eviction position array.
    pub fn positions(&self, pre_eviction: &[usize]) -> Vec<usize> {
        self.indices.iter().map(|&i| pre_eviction[i]).collect()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Keeps the `keep.retention_count(cache_len)` highest-scoring tokens. Equal
/// scores favour the earlier token. The result is in ascending index order.
pub fn select_retained(scores: &ImportanceScores, keep: KeepRatio, cache_len: usize) -> Result<RetainedSet> {
    if scores.len() != cache_len {
        return Err(Error::Input(format!(
            "{} scores for a cache of {cache_len} tokens",
            scores.len()
        )));
    }
    let n = keep.retention_count(cache_len);
    if n == cache_len {
        return Ok(RetainedSet {
            indices: (0..cache_len).collect(),
        });
    }
    let mut order: Vec<usize> = (0..cache_len).collect();
    order.sort_by(|&a, &b| scores.scores[b].total_cmp(&scores.scores[a]).then(a.cmp(&b)));
    order.truncate(n);
    order.sort_unstable();
    Ok(RetainedSet { indices: order })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn keep(pct: u8) -> KeepRatio {
        KeepRatio::from_percent(pct).unwrap()
    }

    #[test]
    fn accumulation_of_single_step_is_that_row() {
        let row = vec![0.1, 0.7, 0.2];
        let s = score_attention_accumulation(std::slice::from_ref(&row)).unwrap();
        for (a, b) in s.scores.iter().zip(&row) {
            assert_eq!(*a, *b as f64);
        }
    }

    #[test]
    fn accumulation_matches_independent_sum() {
        let history = vec![
            vec![1.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.5, 0.5, 0.0, 0.0, 0.0],
            vec![0.2, 0.3, 0.5, 0.0, 0.0],
            vec![0.1, 0.1, 0.4, 0.4, 0.0],
            vec![0.25, 0.25, 0.2, 0.2, 0.1],
        ];
        // column sums by hand
        let expected = [2.05, 1.15, 1.1, 0.6, 0.1];
        let s = score_attention_accumulation(&history).unwrap();
        for (a, b) in s.scores.iter().zip(expected) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert!(s.scores[4] > 0.0);
        let s = score_attention_accumulation(&history[..3]).unwrap();
        assert_eq!(s.scores[4], 0.0);
    }

    #[test]
    fn accumulation_rejects_empty_or_ragged_history() {
        assert!(matches!(score_attention_accumulation(&[]), Err(Error::Input(_))));
        assert!(score_attention_accumulation(&[vec![1.0], vec![0.5, 0.5]]).is_err());
    }

    #[test]
    fn trig_aligned_and_orthogonal() {
        let keys = Tensor::new(vec![1, 3, 2], vec![2.0, 0.0, 0.0, 5.0, 0.0, 0.0]).unwrap();
        let s = score_trigonometric(&keys, &[1.0, 0.0]).unwrap();
        assert!((s.scores[0] - 1.0).abs() < 1e-7);
        assert_eq!(s.scores[1], 0.0);
        assert_eq!(s.scores[2], 0.0);
    }

    #[test]
    fn trig_matches_direct_cosine() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (h, t, d) = (2, 8, 4);
        let data: Vec<f32> = (0..h * t * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let keys = Tensor::new(vec![h, t, d], data.clone()).unwrap();
        let s = score_trigonometric(&keys, &q).unwrap();
        for tok in 0..t {
            let mean: Vec<f64> = (0..d)
                .map(|j| (0..h).map(|hh| data[(hh * t + tok) * d + j] as f64).sum::<f64>() / h as f64)
                .collect();
            let num: f64 = mean.iter().zip(&q).map(|(a, b)| a * *b as f64).sum();
            let den = mean.iter().map(|a| a * a).sum::<f64>().sqrt()
                * q.iter().map(|b| (*b as f64).powi(2)).sum::<f64>().sqrt();
            assert!((s.scores[tok] - (num / den).abs()).abs() < 1e-5);
        }
    }

    #[test]
    fn random_perm_is_seeded() {
        assert_eq!(score_random_permutation(32, 5), score_random_permutation(32, 5));
        assert_ne!(
            score_random_permutation(32, 1).scores,
            score_random_permutation(32, 2).scores
        );
        assert_eq!(score_random_permutation(1, 9).scores, vec![0.0]);
        let mut s = score_random_permutation(40, 3).scores;
        s.sort_by(f64::total_cmp);
        assert_eq!(s, (0..40).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn keep_all_is_identity() {
        let s = score_random_permutation(7, 0);
        assert_eq!(
            select_retained(&s, keep(100), 7).unwrap().indices,
            (0..7).collect::<Vec<_>>()
        );
    }

    #[test]
    fn ties_favour_earlier_tokens() {
        let s = ImportanceScores::new(vec![1.0; 4], ScorerKind::AttnAccum).unwrap();
        assert_eq!(select_retained(&s, keep(50), 4).unwrap().indices, vec![0, 1]);
    }

    #[test]
    fn length_mismatch_is_input_error() {
        let s = ImportanceScores::new(vec![1.0; 4], ScorerKind::AttnAccum).unwrap();
        assert!(matches!(select_retained(&s, keep(50), 5), Err(Error::Input(_))));
    }

    /// Brute force: enumerate every subset of the right size and keep the one with the
    /// greatest score sum, breaking ties by lexicographically smallest index list.
    fn brute_force_top(scores: &[f64], n: usize) -> Vec<usize> {
        let t = scores.len();
        let mut best: Option<(Vec<usize>, Vec<f64>)> = None;
        for mask in 0u32..(1 << t) {
            if mask.count_ones() as usize != n {
                continue;
            }
            let idx: Vec<usize> = (0..t).filter(|i| mask & (1 << i) != 0).collect();
            let mut vals: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            vals.sort_by(|a, b| b.total_cmp(a));
            let better = match &best {
                None => true,
                Some((bi, bv)) => vals > *bv || (vals == *bv && idx < *bi),
            };
            if better {
                best = Some((idx, vals));
            }
        }
        best.unwrap().0
    }

    #[test]
    fn seeded_top_quarter_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            // few distinct values so ties actually occur
            let scores: Vec<f64> = (0..16).map(|_| rng.gen_range(0..6) as f64).collect();
            let s = ImportanceScores::new(scores.clone(), ScorerKind::AttnAccum).unwrap();
            let got = select_retained(&s, keep(25), 16).unwrap().indices;
            assert_eq!(got, brute_force_top(&scores, 4));
        }
    }

    proptest! {
        #[test]
        fn permutation_equivariant_without_ties(seed in 0u64..1000, len in 2usize..40, pct_idx in 0usize..6) {
            let k = KeepRatio::ALL[pct_idx];
            let base = score_random_permutation(len, seed);
            let perm = score_random_permutation(len, seed.wrapping_add(1));
            let perm: Vec<usize> = perm.scores.iter().map(|&p| p as usize).collect();
            // permuted[perm[i]] = base[i]
            let mut permuted = vec![0.0; len];
            for i in 0..len {
                permuted[perm[i]] = base.scores[i];
            }
            let a = select_retained(&base, k, len).unwrap().indices;
            let b = select_retained(&ImportanceScores::new(permuted, ScorerKind::RandomPerm).unwrap(), k, len).unwrap().indices;
            let mut mapped: Vec<usize> = a.iter().map(|&i| perm[i]).collect();
            mapped.sort_unstable();
            prop_assert_eq!(mapped, b);
        }

        #[test]
        fn retained_is_sorted_subsequence(seed in 0u64..1000, len in 1usize..60, pct_idx in 0usize..6) {
            let k = KeepRatio::ALL[pct_idx];
            let s = score_random_permutation(len, seed);
            let r = select_retained(&s, k, len).unwrap();
            prop_assert_eq!(r.len(), k.retention_count(len));
            prop_assert!(r.indices.windows(2).all(|w| w[0] < w[1]));
            let positions: Vec<usize> = (0..len).map(|i| 3 * i + 1).collect();
            let kept = r.positions(&positions);
            prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
