use std::path::Path;

use anyhow::Result;
use kvroute_core::decode::{
    decode, memory_report, synthetic_prompt, write_memory_csv, DecodeOptions, MemoryRow, ReferenceCache,
};
use kvroute_core::solver::{ablation_deltas, load_plan, AblationDeltas, Policy};
use kvroute_core::{build_model, Error, ScorerKind};
use serde::{Deserialize, Serialize};

use crate::config::Settings;
use crate::io::{create_dir, json_files, write_json, write_text};

/// Ablation deltas of one `(b, prompt)` cell, on each reported metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub b: u64,
    pub prompt_len: usize,
    pub mean_kl: AblationDeltas,
    pub first_divergence: AblationDeltas,
    pub predicted_sensitivity: AblationDeltas,
}

fn policy_rank(p: Policy) -> usize {
    Policy::ALL.iter().position(|&q| q == p).unwrap()
}

fn ablation(rows: &[MemoryRow]) -> Vec<AblationCell> {
    let mut keys: Vec<(u64, usize)> = rows.iter().filter_map(|r| Some((r.b?, r.prompt_len))).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.into_iter()
        .filter_map(|(b, prompt_len)| {
            let cell: Vec<&MemoryRow> = rows
                .iter()
                .filter(|r| r.b == Some(b) && r.prompt_len == prompt_len)
                .collect();
            let deltas = |f: fn(&MemoryRow) -> f64| {
                let values: Vec<(Policy, f64)> = cell.iter().map(|r| (r.policy, f(r))).collect();
                ablation_deltas(&values).ok()
            };
            Some(AblationCell {
                b,
                prompt_len,
                mean_kl: deltas(|r| r.mean_kl)?,
                first_divergence: deltas(|r| r.first_divergence as f64)?,
                predicted_sensitivity: deltas(|r| r.predicted_sensitivity)?,
            })
        })
        .collect()
}

pub fn run(s: &Settings) -> Result<()> {
    let plan_paths = match &s.plans {
        Some(p) => p.clone(),
        None => {
            let dir = s.plans_dir();
            if !dir.is_dir() {
                return Err(Error::Input(format!("no plans directory at {}; run `solve` first", dir.display())).into());
            }
            json_files(&dir)?
        }
    };
    if plan_paths.is_empty() {
        return Err(Error::Input("no plan files to simulate".into()).into());
    }
    let model = build_model(&s.spec)?;
    let hash = s.spec.hash();
    let mut plans = Vec::new();
    for path in &plan_paths {
        let plan = load_plan(path)?;
        if plan.model_spec_hash != hash {
            return Err(Error::Config(format!(
                "{} was solved for model {}, not {hash}",
                path.display(),
                plan.model_spec_hash
            ))
            .into());
        }
        let stem = path.file_stem().and_then(|x| x.to_str()).unwrap_or("plan").to_string();
        plans.push((stem, plan));
    }

    let options = DecodeOptions {
        steps: s.steps,
        scorer: s.scorer.unwrap_or(ScorerKind::AttnAccum),
        eviction_period: s.eviction_period,
        seed: s.seed,
    };
    let references = ReferenceCache::new();
    let mut traces = Vec::new();
    for &len in &s.prompt_lens {
        let prompt = synthetic_prompt(len, s.spec.vocab_size, s.seed);
        for (stem, plan) in &plans {
            let trace = decode(&model, &prompt, plan, &options, &references)?;
            traces.push((format!("{stem}_p{len}.json"), plan, trace));
        }
    }
    let pairs: Vec<_> = traces.iter().map(|(_, p, t)| (*p, t)).collect();
    let mut rows = memory_report(&pairs);
    rows.sort_by_key(|r| (r.prompt_len, policy_rank(r.policy), r.b));
    let cells = ablation(&rows);

    let dir = s.simulate_dir();
    let trace_dir = dir.join("traces");
    create_dir(&trace_dir)?;
    for (name, _, trace) in &traces {
        write_json(&trace_dir.join(name), trace)?;
    }
    write_csv(&dir.join("memory.csv"), &rows)?;
    write_json(&dir.join("memory.json"), &rows)?;
    write_json(&dir.join("ablation.json"), &cells)?;
    eprintln!("simulated {} decodes; wrote {}", traces.len(), dir.display());
    Ok(())
}

fn write_csv(path: &Path, rows: &[MemoryRow]) -> Result<()> {
    let mut buf = Vec::new();
    write_memory_csv(rows, &mut buf)?;
    write_text(path, &String::from_utf8(buf)?)?;
    Ok(())
}
