//! Agreement between two sensitivity tables, and per-op spread across layers.

use serde::{Deserialize, Serialize};

use super::SensitivityTable;
use crate::config::LayerCompressionConfig;
use crate::error::{Error, Result};

/// `None` marks an undefined coefficient (a constant input vector).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub layer_pearson: Vec<Option<f64>>,
    pub layer_spearman: Vec<Option<f64>>,
    /// Config ids of the columns in `config_pearson` (identity excluded).
    pub config_ids: Vec<usize>,
    pub config_pearson: Vec<Option<f64>>,
    pub mean_layer_pearson: Option<f64>,
    pub mean_layer_spearman: Option<f64>,
    pub mean_config_pearson: Option<f64>,
}

/// Pearson correlation; `None` if either input is constant or the inputs are shorter than 2.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Average ranks (1-based) with ties sharing their mean rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() {
        return None;
    }
    pearson(&ranks(x), &ranks(y))
}

fn mean_defined(v: &[Option<f64>]) -> Option<f64> {
    let d: Vec<f64> = v.iter().flatten().copied().collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

pub fn correlate(a: &SensitivityTable, b: &SensitivityTable) -> Result<CorrelationReport> {
    if a.num_layers() != b.num_layers() || a.space() != b.space() {
        return Err(Error::Input(format!(
            "tables differ in shape: {} x {} vs {} x {}",
            a.num_layers(),
            a.space().len(),
            b.num_layers(),
            b.space().len()
        )));
    }
    let id = a.space().identity_index();
    let cols: Vec<usize> = (0..a.space().len()).filter(|&c| c != id).collect();
    let strip = |t: &SensitivityTable, l: usize| -> Vec<f64> { cols.iter().map(|&c| t.score(l, c)).collect() };

    let mut layer_pearson = Vec::with_capacity(a.num_layers());
    let mut layer_spearman = Vec::with_capacity(a.num_layers());
    for l in 0..a.num_layers() {
        let (x, y) = (strip(a, l), strip(b, l));
        layer_pearson.push(pearson(&x, &y));
        layer_spearman.push(spearman(&x, &y));
    }
    let config_pearson: Vec<Option<f64>> = cols
        .iter()
        .map(|&c| {
            let x: Vec<f64> = (0..a.num_layers()).map(|l| a.score(l, c)).collect();
            let y: Vec<f64> = (0..b.num_layers()).map(|l| b.score(l, c)).collect();
            pearson(&x, &y)
        })
        .collect();
    Ok(CorrelationReport {
        mean_layer_pearson: mean_defined(&layer_pearson),
        mean_layer_spearman: mean_defined(&layer_spearman),
        mean_config_pearson: mean_defined(&config_pearson),
        config_ids: cols.iter().map(|&c| a.space().configs()[c].id()).collect(),
        layer_pearson,
        layer_spearman,
        config_pearson,
    })
}

/// Spread of one op's sensitivity across layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpStats {
    pub op: String,
    pub config_id: usize,
    pub min: f64,
    pub max: f64,
    /// `max / min`; `None` when the minimum is zero (unbounded ratio).
    pub ratio: Option<f64>,
}

/// Per-op `(min, max, max/min)` over layers for each config in `ops`.
pub fn heterogeneity_stats(table: &SensitivityTable, ops: &[LayerCompressionConfig]) -> Result<Vec<OpStats>> {
    ops.iter()
        .map(|op| {
            let col = table
                .space()
                .index_of(op)
                .ok_or_else(|| Error::Input(format!("op {op} is not a column of the table")))?;
            let vals: Vec<f64> = (0..table.num_layers()).map(|l| table.score(l, col)).collect();
            let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Ok(OpStats {
                op: op.label(),
                config_id: op.id(),
                min,
                max,
                ratio: (min > 1e-12).then(|| max / min),
            })
        })
        .collect()
}
