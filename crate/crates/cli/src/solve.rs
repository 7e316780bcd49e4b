use std::path::PathBuf;

use anyhow::Result;
use kvroute_core::calibration::load_table;
use kvroute_core::solver::{
    ablation_deltas, budget_from_tokens, save_plan, solve_greedy, solve_oracle, MemoryDims, Policy,
    DEFAULT_ORACLE_MAX_LAYERS,
};
use kvroute_core::Error;
use serde::{Deserialize, Serialize};

use crate::calibrate::table_file_name;
use crate::config::Settings;
use crate::io::{create_dir, json_files, write_json, write_text};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Infeasible,
}

/// One `(policy, b)` outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveRow {
    pub policy: Policy,
    pub b: u64,
    #[serde(rename = "M_bytes")]
    pub m_bytes: u64,
    pub status: Status,
    pub predicted_bytes: Option<f64>,
    pub predicted_sensitivity: Option<f64>,
    pub deficit_bytes: Option<f64>,
    /// Exhaustive optimum at the same budget (routed policies, `--oracle-check` only).
    pub oracle_sensitivity: Option<f64>,
    pub plan: Option<String>,
}

/// Oracle optima of the three nested policies at one shared byte budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub b: u64,
    #[serde(rename = "M_bytes")]
    pub m_bytes: u64,
    pub uniform: Option<f64>,
    pub two_d: Option<f64>,
    pub hetero: Option<f64>,
    /// `hetero <= 2d <= 2d_uniform`; `None` when any of the three is infeasible.
    pub ordered: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub b: u64,
    pub delta_quant: f64,
    pub delta_evict: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub model_spec_hash: String,
    pub table: PathBuf,
    pub dims: MemoryDims,
    pub rows: Vec<SolveRow>,
    /// Predicted-sensitivity ablation per budget, where all three routed policies are feasible.
    pub ablation: Vec<AblationRow>,
    pub ordering: Option<Vec<OrderingCheck>>,
}

pub fn run(s: &Settings) -> Result<()> {
    let table_path = s
        .table
        .clone()
        .unwrap_or_else(|| s.calibration_dir().join(table_file_name(s.metric)));
    let dims = MemoryDims::for_model(&s.spec, s.t_cache);
    if s.oracle_check && dims.num_layers > DEFAULT_ORACLE_MAX_LAYERS {
        return Err(Error::Size(format!(
            "--oracle-check needs at most {DEFAULT_ORACLE_MAX_LAYERS} layers, model has {}",
            dims.num_layers
        ))
        .into());
    }
    let table = load_table(&table_path, Some(&s.spec.hash()))?;

    let mut rows = Vec::new();
    let mut plans = Vec::new();
    let mut first_infeasible = None;
    for &b in &s.budgets {
        for &policy in &s.policies {
            let budget = budget_from_tokens(b, policy, &dims)?;
            let mut row = SolveRow {
                policy,
                b,
                m_bytes: budget.bytes,
                status: Status::Ok,
                predicted_bytes: None,
                predicted_sensitivity: None,
                deficit_bytes: None,
                oracle_sensitivity: None,
                plan: None,
            };
            match solve_greedy(&table, &budget, policy, &dims) {
                Ok(plan) => {
                    if s.oracle_check && matches!(policy, Policy::TwoD | Policy::TwoDHetero) {
                        let oracle = solve_oracle(&table, &budget, policy, &dims, DEFAULT_ORACLE_MAX_LAYERS)?;
                        row.oracle_sensitivity = Some(oracle.totals.s_pred);
                    }
                    let name = format!("{policy}_b{b}.json");
                    row.predicted_bytes = Some(plan.totals.m_bytes);
                    row.predicted_sensitivity = Some(plan.totals.s_pred);
                    row.plan = Some(name.clone());
                    plans.push((name, plan));
                }
                Err(e @ Error::Infeasible { deficit, .. }) => {
                    row.status = Status::Infeasible;
                    row.deficit_bytes = Some(deficit);
                    eprintln!("{policy} b={b}: {e}");
                    first_infeasible.get_or_insert(e);
                }
                Err(e) => return Err(e.into()),
            }
            rows.push(row);
        }
    }
    if plans.is_empty() {
        if let Some(e) = first_infeasible {
            return Err(e.into());
        }
    }

    let ablation = s
        .budgets
        .iter()
        .filter_map(|&b| {
            let values: Vec<(Policy, f64)> = rows
                .iter()
                .filter(|r| r.b == b)
                .filter_map(|r| Some((r.policy, r.predicted_sensitivity?)))
                .collect();
            let d = ablation_deltas(&values).ok()?;
            Some(AblationRow {
                b,
                delta_quant: d.delta_quant,
                delta_evict: d.delta_evict,
            })
        })
        .collect();
    let ordering = if s.oracle_check {
        let mut checks = Vec::new();
        for &b in &s.budgets {
            let budget = budget_from_tokens(b, Policy::TwoDUniform, &dims)?;
            let oracle = |p| match solve_oracle(&table, &budget, p, &dims, DEFAULT_ORACLE_MAX_LAYERS) {
                Ok(plan) => Ok(Some(plan.totals.s_pred)),
                Err(Error::Infeasible { .. }) => Ok(None),
                Err(e) => Err(e),
            };
            let (uniform, two_d, hetero) = (
                oracle(Policy::TwoDUniform)?,
                oracle(Policy::TwoD)?,
                oracle(Policy::TwoDHetero)?,
            );
            let ordered = match (uniform, two_d, hetero) {
                (Some(u), Some(t), Some(h)) => Some(h <= t && t <= u),
                _ => None,
            };
            if ordered == Some(false) {
                eprintln!("warning: oracle ordering hetero <= 2d <= 2d_uniform violated at b={b}");
            }
            checks.push(OrderingCheck {
                b,
                m_bytes: budget.bytes,
                uniform,
                two_d,
                hetero,
                ordered,
            });
        }
        Some(checks)
    } else {
        None
    };

    let plans_dir = s.plans_dir();
    create_dir(&plans_dir)?;
    // plans from an earlier sweep would otherwise be picked up by `simulate`
    for stale in json_files(&plans_dir)? {
        std::fs::remove_file(&stale).map_err(|source| Error::Io {
            path: stale.clone(),
            source,
        })?;
    }
    for (name, plan) in &plans {
        save_plan(plan, &plans_dir.join(name))?;
    }
    let mut csv = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        csv.serialize(r)?;
    }
    write_text(&s.out.join("solve.csv"), &String::from_utf8(csv.into_inner()?)?)?;
    let summary = SolveSummary {
        model_spec_hash: s.spec.hash(),
        table: table_path,
        dims,
        rows,
        ablation,
        ordering,
    };
    write_json(&s.out.join("solve.json"), &summary)?;
    eprintln!(
        "wrote {} plans to {} ({} infeasible rows)",
        plans.len(),
        plans_dir.display(),
        summary.rows.iter().filter(|r| r.status == Status::Infeasible).count()
    );
    Ok(())
}
