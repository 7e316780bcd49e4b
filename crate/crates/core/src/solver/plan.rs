use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MemoryBudget, MemoryDims, Policy};
use crate::calibration::SensitivityTable;
use crate::config::LayerCompressionConfig;
use crate::error::{Error, Result};

pub const PLAN_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanLayer {
    pub layer: usize,
    #[serde(flatten)]
    pub config: LayerCompressionConfig,
    pub m_bytes: f64,
    pub s_pred: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanTotals {
    pub m_bytes: f64,
    pub s_pred: f64,
}

/// Per-layer config assignment plus its predicted memory and sensitivity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingPlan {
    pub format_version: u32,
    pub policy: Policy,
    pub model_spec_hash: String,
    pub budget: MemoryBudget,
    pub dims: MemoryDims,
    pub layers: Vec<PlanLayer>,
    pub totals: PlanTotals,
}

impl RoutingPlan {
    pub(super) fn build(
        table: &SensitivityTable,
        policy: Policy,
        budget: MemoryBudget,
        dims: &MemoryDims,
        columns: &[usize],
    ) -> Self {
        let configs: Vec<LayerCompressionConfig> = columns.iter().map(|&c| table.space().configs()[c]).collect();
        let scores: Vec<f64> = columns.iter().enumerate().map(|(l, &c)| table.score(l, c)).collect();
        Self::from_configs(
            table.model_spec_hash().to_string(),
            policy,
            budget,
            dims,
            &configs,
            &scores,
        )
    }

    /// Plan from explicit configs and their predicted scores.
    pub fn from_configs(
        model_spec_hash: String,
        policy: Policy,
        budget: MemoryBudget,
        dims: &MemoryDims,
        configs: &[LayerCompressionConfig],
        scores: &[f64],
    ) -> Self {
        let layers: Vec<PlanLayer> = configs
            .iter()
            .zip(scores)
            .enumerate()
            .map(|(layer, (&config, &s_pred))| PlanLayer {
                layer,
                config,
                m_bytes: dims.units_to_bytes(config.cost_units()),
                s_pred,
            })
            .collect();
        let units: u64 = configs.iter().map(|c| c.cost_units()).sum();
        let s_pred = layers.iter().fold(0.0, |acc, l| acc + l.s_pred);
        Self {
            format_version: PLAN_FORMAT_VERSION,
            policy,
            model_spec_hash,
            budget,
            dims: *dims,
            layers,
            totals: PlanTotals {
                m_bytes: dims.units_to_bytes(units),
                s_pred,
            },
        }
    }

    pub fn configs(&self) -> Vec<LayerCompressionConfig> {
        self.layers.iter().map(|l| l.config).collect()
    }

    pub fn total_units(&self) -> u64 {
        self.layers.iter().map(|l| l.config.cost_units()).sum()
    }

    /// Exact check of total memory against the budget.
    pub fn fits_budget(&self) -> bool {
        self.total_units() <= self.dims.capacity_units(self.budget.bytes)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let plan: RoutingPlan = serde_json::from_str(s).map_err(|e| Error::Format(format!("routing plan: {e}")))?;
        if plan.format_version != PLAN_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported plan format_version {} (expected {PLAN_FORMAT_VERSION})",
                plan.format_version
            )));
        }
        if plan.layers.len() != plan.dims.num_layers || plan.layers.iter().enumerate().any(|(i, l)| l.layer != i) {
            return Err(Error::Format("plan layers must be listed as 0..L".into()));
        }
        Ok(plan)
    }
}

pub fn save_plan(plan: &RoutingPlan, path: &Path) -> Result<()> {
    std::fs::write(path, plan.to_json()).map_err(|e| Error::io(path, e))
}

pub fn load_plan(path: &Path) -> Result<RoutingPlan> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RoutingPlan::from_json(&s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationDeltas {
    /// `2d - 2d_uniform`: effect of per-layer quantization routing.
    pub delta_quant: f64,
    /// `2d_hetero - 2d`: effect of per-layer eviction routing.
    pub delta_evict: f64,
}

/// Differences of one metric across the three routed policies.
pub fn ablation_deltas(values: &[(Policy, f64)]) -> Result<AblationDeltas> {
    let get = |p: Policy| {
        values
            .iter()
            .find(|(q, _)| *q == p)
            .map(|&(_, v)| v)
            .ok_or_else(|| Error::Input(format!("no result for policy {p}")))
    };
    let (uniform, two_d, hetero) = (get(Policy::TwoDUniform)?, get(Policy::TwoD)?, get(Policy::TwoDHetero)?);
    Ok(AblationDeltas {
        delta_quant: two_d - uniform,
        delta_evict: hetero - two_d,
    })
}
