//! Budgeted routing of layers to compression configs.
//!
//! Memory is tracked in integer *units*: a config costs
//! `keep_percent * (k_bits + v_bits)` units per layer, and one unit is
//! `T_cache * H_kv * d_head / 800` bytes. A byte budget `M` therefore holds
//! `floor(800 * M / (T_cache * H_kv * d_head))` units, and every feasibility
//! test is exact.

mod plan;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibration::SensitivityTable;
use crate::config::{BitWidth, KeepRatio, LayerCompressionConfig};
use crate::error::{Error, Result};
use crate::model::ModelSpec;

pub use plan::{
    ablation_deltas, load_plan, save_plan, AblationDeltas, PlanLayer, PlanTotals, RoutingPlan, PLAN_FORMAT_VERSION,
};

pub const DEFAULT_ORACLE_MAX_LAYERS: usize = 4;
const ORACLE_MAX_ASSIGNMENTS: f64 = 1e8;

/// Shape quantities that turn units into bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryDims {
    pub num_layers: usize,
    pub t_cache: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
}

impl MemoryDims {
    /// 28 layers, 8 KV heads of dimension 128.
    pub fn paper_scale(t_cache: usize) -> Self {
        Self {
            num_layers: 28,
            t_cache,
            num_kv_heads: 8,
            head_dim: 128,
        }
    }

    pub fn for_model(spec: &ModelSpec, t_cache: usize) -> Self {
        Self {
            num_layers: spec.num_layers,
            t_cache,
            num_kv_heads: spec.num_kv_heads,
            head_dim: spec.head_dim,
        }
    }

    fn tokens_volume(&self) -> u128 {
        self.t_cache as u128 * self.num_kv_heads as u128 * self.head_dim as u128
    }

    /// Exact bytes for `units` (may be fractional).
    pub fn units_to_bytes(&self, units: u64) -> f64 {
        (units as u128 * self.tokens_volume()) as f64 / 800.0
    }

    /// Largest unit count whose bytes fit in `bytes`.
    pub fn capacity_units(&self, bytes: u64) -> u64 {
        let v = self.tokens_volume();
        if v == 0 {
            return u64::MAX;
        }
        u64::try_from(bytes as u128 * 800 / v).unwrap_or(u64::MAX)
    }

    fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.t_cache == 0 || self.num_kv_heads == 0 || self.head_dim == 0 {
            return Err(Error::Config(format!("memory dims must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// `keep * T_cache * H_kv * d_head * (k_bits + v_bits) / 8` bytes.
pub fn memory_cost(config: &LayerCompressionConfig, t_cache: usize, num_kv_heads: usize, head_dim: usize) -> f64 {
    let dims = MemoryDims {
        num_layers: 1,
        t_cache,
        num_kv_heads,
        head_dim,
    };
    dims.units_to_bytes(config.cost_units())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Policy {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "1d")]
    OneD,
    #[serde(rename = "2d_uniform")]
    TwoDUniform,
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "2d_hetero")]
    TwoDHetero,
}

impl Policy {
    pub const ALL: [Policy; 5] = [
        Policy::Full,
        Policy::OneD,
        Policy::TwoDUniform,
        Policy::TwoD,
        Policy::TwoDHetero,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Full => "full",
            Policy::OneD => "1d",
            Policy::TwoDUniform => "2d_uniform",
            Policy::TwoD => "2d",
            Policy::TwoDHetero => "2d_hetero",
        }
    }

    /// Token-to-byte budget scale: 4/1.5 for the routed-quantization policies.
    pub fn budget_scale(self) -> f64 {
        match self {
            Policy::TwoD | Policy::TwoDHetero => 8.0 / 3.0,
            _ => 1.0,
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown policy '{s}' (full|1d|2d_uniform|2d|2d_hetero)")))
    }
}

/// A byte budget and where it came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryBudget {
    /// Nominal token budget `b`, if the budget was derived from one.
    pub b: Option<u64>,
    pub scale: f64,
    #[serde(rename = "M_bytes")]
    pub bytes: u64,
}

impl MemoryBudget {
    pub fn from_bytes(bytes: u64) -> Self {
        Self {
            b: None,
            scale: 1.0,
            bytes,
        }
    }
}

/// `M = L * b * H_kv * d_head * 4` bytes, with `b` scaled by 8/3 for `2d` and
/// `2d_hetero` (rounded down to whole bytes).
pub fn budget_from_tokens(b: u64, policy: Policy, dims: &MemoryDims) -> Result<MemoryBudget> {
    if b == 0 {
        return Err(Error::Config("token budget must be at least 1".into()));
    }
    let base = dims.num_layers as u128 * b as u128 * dims.num_kv_heads as u128 * dims.head_dim as u128 * 4;
    let bytes = match policy {
        Policy::TwoD | Policy::TwoDHetero => base * 8 / 3,
        _ => base,
    };
    Ok(MemoryBudget {
        b: Some(b),
        scale: policy.budget_scale(),
        bytes: u64::try_from(bytes).map_err(|_| Error::Config(format!("budget for b={b} overflows")))?,
    })
}

/// A candidate config for one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrontierPoint {
    /// Column in the sensitivity table.
    pub column: usize,
    pub config_id: usize,
    pub units: u64,
    pub score: f64,
}

/// Non-dominated points by ascending memory with strictly decreasing
/// sensitivity; among equal points the lower config id survives.
pub fn pareto_prune(points: &[FrontierPoint]) -> Vec<FrontierPoint> {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| {
        a.units
            .cmp(&b.units)
            .then(a.score.total_cmp(&b.score))
            .then(a.config_id.cmp(&b.config_id))
    });
    let mut frontier: Vec<FrontierPoint> = Vec::new();
    for p in sorted {
        if frontier.last().is_none_or(|last| p.score < last.score) {
            frontier.push(p);
        }
    }
    frontier
}

/// Candidate columns each policy may route a layer to.
fn candidates(
    table: &SensitivityTable,
    policy: Policy,
    budget: &MemoryBudget,
    dims: &MemoryDims,
) -> Result<Vec<usize>> {
    let space = table.space();
    match policy {
        Policy::Full => Ok(vec![space.identity_index()]),
        Policy::OneD | Policy::TwoDUniform => {
            let keep = uniform_keep(table, policy, budget, dims)?;
            Ok(vec![space
                .index_of(&uniform_config(policy, keep))
                .expect("uniform_keep checks columns")])
        }
        Policy::TwoD => {
            let keep = uniform_keep(table, Policy::TwoDUniform, budget, dims)?;
            let cols: Vec<usize> = (0..space.len()).filter(|&i| space.configs()[i].keep == keep).collect();
            Ok(cols)
        }
        Policy::TwoDHetero => Ok((0..space.len()).collect()),
    }
}

fn uniform_config(policy: Policy, keep: KeepRatio) -> LayerCompressionConfig {
    match policy {
        Policy::OneD => LayerCompressionConfig::new(keep, BitWidth::B16, BitWidth::B16),
        _ => LayerCompressionConfig::new(keep, BitWidth::B8, BitWidth::B4),
    }
}

/// Largest keep ratio whose uniform config fits on every layer.
fn uniform_keep(
    table: &SensitivityTable,
    policy: Policy,
    budget: &MemoryBudget,
    dims: &MemoryDims,
) -> Result<KeepRatio> {
    let available: Vec<KeepRatio> = KeepRatio::ALL
        .into_iter()
        .filter(|&k| table.space().index_of(&uniform_config(policy, k)).is_some())
        .collect();
    let Some(&smallest) = available.first() else {
        return Err(Error::Config(format!(
            "table space has no {} configs required by policy {policy}",
            uniform_config(policy, KeepRatio::FULL).label()
        )));
    };
    let cap = dims.capacity_units(budget.bytes);
    let layers = dims.num_layers as u64;
    if let Some(k) = available
        .iter()
        .rev()
        .find(|&&k| uniform_config(policy, k).cost_units() * layers <= cap)
    {
        return Ok(*k);
    }
    let required = dims.units_to_bytes(uniform_config(policy, smallest).cost_units() * layers);
    Err(infeasible(required, budget.bytes))
}

fn infeasible(required: f64, available: u64) -> Error {
    Error::Infeasible {
        required,
        available: available as f64,
        deficit: required - available as f64,
    }
}

fn check_shape(table: &SensitivityTable, dims: &MemoryDims) -> Result<()> {
    dims.validate()?;
    if table.num_layers() != dims.num_layers {
        return Err(Error::Config(format!(
            "table has {} layers, memory dims {}",
            table.num_layers(),
            dims.num_layers
        )));
    }
    Ok(())
}

fn layer_points(table: &SensitivityTable, layer: usize, cols: &[usize]) -> Vec<FrontierPoint> {
    cols.iter()
        .map(|&c| {
            let config = table.space().configs()[c];
            FrontierPoint {
                column: c,
                config_id: config.id(),
                units: config.cost_units(),
                score: table.score(layer, c),
            }
        })
        .collect()
}

/// Routes every layer under `budget` following `policy`; `2d` and `2d_hetero`
/// use the greedy marginal-ratio allocation.
///
/// The `full` policy returns identity everywhere without consulting the budget.
pub fn solve_greedy(
    table: &SensitivityTable,
    budget: &MemoryBudget,
    policy: Policy,
    dims: &MemoryDims,
) -> Result<RoutingPlan> {
    check_shape(table, dims)?;
    let cols = candidates(table, policy, budget, dims)?;
    let choice: Vec<usize> = match policy {
        Policy::Full | Policy::OneD | Policy::TwoDUniform => vec![cols[0]; dims.num_layers],
        Policy::TwoD | Policy::TwoDHetero => {
            let frontiers: Vec<Vec<FrontierPoint>> = (0..dims.num_layers)
                .map(|l| pareto_prune(&layer_points(table, l, &cols)))
                .collect();
            greedy(&frontiers, budget, dims)?
        }
    };
    Ok(RoutingPlan::build(table, policy, *budget, dims, &choice))
}

/// Start at each frontier's cheapest point, then repeatedly take the single
/// next-point upgrade with the best sensitivity drop per unit that still fits.
fn greedy(frontiers: &[Vec<FrontierPoint>], budget: &MemoryBudget, dims: &MemoryDims) -> Result<Vec<usize>> {
    let cap = dims.capacity_units(budget.bytes);
    let mut at = vec![0usize; frontiers.len()];
    let mut used: u64 = frontiers.iter().map(|f| f[0].units).sum();
    if used > cap {
        return Err(infeasible(dims.units_to_bytes(used), budget.bytes));
    }
    loop {
        let mut best: Option<(f64, usize)> = None;
        for (l, f) in frontiers.iter().enumerate() {
            let Some(next) = f.get(at[l] + 1) else { continue };
            let cur = f[at[l]];
            let dm = next.units - cur.units;
            if used + dm > cap {
                continue;
            }
            let ratio = (cur.score - next.score) / dm as f64;
            if best.is_none_or(|(r, _)| ratio > r) {
                best = Some((ratio, l));
            }
        }
        let Some((_, l)) = best else { break };
        let f = &frontiers[l];
        used += f[at[l] + 1].units - f[at[l]].units;
        at[l] += 1;
    }
    Ok(at.iter().zip(frontiers).map(|(&i, f)| f[i].column).collect())
}

/// Exhaustive minimum of total sensitivity under the budget for small instances.
/// Ties go to the lexicographically smallest config-id vector. The uniform
/// policies have no freedom beyond their keep rule and return that plan.
pub fn solve_oracle(
    table: &SensitivityTable,
    budget: &MemoryBudget,
    policy: Policy,
    dims: &MemoryDims,
    max_layers: usize,
) -> Result<RoutingPlan> {
    check_shape(table, dims)?;
    if dims.num_layers > max_layers {
        return Err(Error::Size(format!(
            "{} layers exceeds oracle limit {max_layers}",
            dims.num_layers
        )));
    }
    let cols = candidates(table, policy, budget, dims)?;
    if (cols.len() as f64).powi(dims.num_layers as i32) > ORACLE_MAX_ASSIGNMENTS {
        return Err(Error::Size(format!(
            "{}^{} assignments exceeds {ORACLE_MAX_ASSIGNMENTS:e}",
            cols.len(),
            dims.num_layers
        )));
    }
    if matches!(policy, Policy::Full | Policy::OneD | Policy::TwoDUniform) {
        return solve_greedy(table, budget, policy, dims);
    }
    let cap = dims.capacity_units(budget.bytes);
    // columns are in ascending config-id order, so DFS visits id vectors lexicographically
    let points: Vec<Vec<FrontierPoint>> = (0..dims.num_layers).map(|l| layer_points(table, l, &cols)).collect();
    let min_units: Vec<u64> = points
        .iter()
        .map(|p| p.iter().map(|q| q.units).min().unwrap())
        .collect();
    let mut suffix_min = vec![0u64; dims.num_layers + 1];
    for l in (0..dims.num_layers).rev() {
        suffix_min[l] = suffix_min[l + 1] + min_units[l];
    }
    if suffix_min[0] > cap {
        return Err(infeasible(dims.units_to_bytes(suffix_min[0]), budget.bytes));
    }

    struct Search<'a> {
        points: &'a [Vec<FrontierPoint>],
        suffix_min: &'a [u64],
        cap: u64,
        current: Vec<usize>,
        best: Option<(f64, Vec<usize>)>,
    }
    impl Search<'_> {
        fn visit(&mut self, layer: usize, units: u64, score: f64) {
            if let Some((b, _)) = &self.best {
                if score >= *b {
                    return;
                }
            }
            if layer == self.points.len() {
                self.best = Some((score, self.current.clone()));
                return;
            }
            for i in 0..self.points[layer].len() {
                let p = self.points[layer][i];
                let u = units + p.units;
                if u + self.suffix_min[layer + 1] > self.cap {
                    continue;
                }
                self.current.push(p.column);
                self.visit(layer + 1, u, score + p.score);
                self.current.pop();
            }
        }
    }
    let mut search = Search {
        points: &points,
        suffix_min: &suffix_min,
        cap,
        current: Vec::with_capacity(dims.num_layers),
        best: None,
    };
    search.visit(0, 0, 0.0);
    let (_, choice) = search.best.expect("cheapest assignment fits");
    Ok(RoutingPlan::build(table, policy, *budget, dims, &choice))
}
