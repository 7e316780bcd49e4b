use std::fmt::Write as _;
use std::path::Path;

use anyhow::Result;
use kvroute_core::calibration::{heterogeneity_stats, load_table, CorrelationReport, SensitivityTable};
use kvroute_core::decode::MemoryRow;
use kvroute_core::{ConfigSpace, Error, LayerCompressionConfig, SpaceKind};

use crate::io::{read_json, write_text};
use crate::simulate::AblationCell;
use crate::solve::{SolveSummary, Status};

fn num(x: f64) -> String {
    if x == 0.0 {
        "0".into()
    } else {
        format!("{x:.4e}")
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or("-".into(), num)
}

fn bytes(x: f64) -> String {
    format!("{x:.0}")
}

fn load_optional<T>(path: &Path, load: impl FnOnce(&Path) -> Result<T, Error>) -> Result<Option<T>, Error> {
    if path.is_file() {
        load(path).map(Some)
    } else {
        Ok(None)
    }
}

fn spread_section(md: &mut String, csv: &mut csv::Writer<Vec<u8>>, tables: &[SensitivityTable]) -> Result<()> {
    let ops: Vec<LayerCompressionConfig> = ConfigSpace::named(SpaceKind::Table2)
        .configs()
        .iter()
        .copied()
        .filter(|c| !c.is_identity())
        .collect();
    writeln!(md, "## Per-layer sensitivity spread\n")?;
    for table in tables {
        writeln!(
            md,
            "### {} table ({} layers, {} configs, scorer {}, seed {})\n",
            table.metric(),
            table.num_layers(),
            table.space().len(),
            table.scorer(),
            table.seed()
        )?;
        let present: Vec<LayerCompressionConfig> = ops
            .iter()
            .copied()
            .filter(|op| table.space().index_of(op).is_some())
            .collect();
        writeln!(md, "| op | min | max | max/min |\n|---|---|---|---|")?;
        for s in heterogeneity_stats(table, &present)? {
            let ratio = s.ratio.map_or("unbounded".into(), |r| format!("{r:.1}x"));
            writeln!(md, "| {} | {} | {} | {ratio} |", s.op, num(s.min), num(s.max))?;
            csv.write_record([
                table.metric().name(),
                &s.op,
                &s.config_id.to_string(),
                &num(s.min),
                &num(s.max),
                &s.ratio.map_or(String::new(), |r| format!("{r:.6}")),
            ])?;
        }
        writeln!(md)?;
    }
    Ok(())
}

fn memory_section(md: &mut String, rows: Option<&[MemoryRow]>, solve: Option<&SolveSummary>) -> Result<()> {
    writeln!(md, "## Memory\n")?;
    if let Some(rows) = rows {
        writeln!(
            md,
            "| policy | b | prompt | M bytes | predicted bytes | realized bytes | peak bytes | predicted S | mean KL | first divergence |"
        )?;
        writeln!(md, "|---|---|---|---|---|---|---|---|---|---|")?;
        for r in rows {
            writeln!(
                md,
                "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {}/{} |",
                r.policy,
                r.b.map_or("-".into(), |b| b.to_string()),
                r.prompt_len,
                r.m_bytes,
                bytes(r.predicted_bytes),
                bytes(r.realized_bytes),
                bytes(r.peak_bytes),
                num(r.predicted_sensitivity),
                num(r.mean_kl),
                r.first_divergence,
                r.steps
            )?;
        }
    } else if let Some(solve) = solve {
        writeln!(
            md,
            "| policy | b | M bytes | status | predicted bytes | predicted S | oracle S |"
        )?;
        writeln!(md, "|---|---|---|---|---|---|---|")?;
        for r in &solve.rows {
            let status = match r.status {
                Status::Ok => "ok",
                Status::Infeasible => "infeasible",
            };
            writeln!(
                md,
                "| {} | {} | {} | {status} | {} | {} | {} |",
                r.policy,
                r.b,
                r.m_bytes,
                r.predicted_bytes.map_or("-".into(), bytes),
                opt(r.predicted_sensitivity),
                opt(r.oracle_sensitivity)
            )?;
        }
    }
    writeln!(md)?;
    Ok(())
}

fn ablation_section(md: &mut String, cells: Option<&[AblationCell]>, solve: Option<&SolveSummary>) -> Result<()> {
    writeln!(md, "## Ablation deltas\n")?;
    writeln!(md, "delta_quant = 2d - 2d_uniform; delta_evict = 2d_hetero - 2d.\n")?;
    if let Some(cells) = cells {
        writeln!(
            md,
            "| b | prompt | delta_quant KL | delta_evict KL | delta_quant first div | delta_evict first div | delta_quant S | delta_evict S |"
        )?;
        writeln!(md, "|---|---|---|---|---|---|---|---|")?;
        for c in cells {
            writeln!(
                md,
                "| {} | {} | {} | {} | {} | {} | {} | {} |",
                c.b,
                c.prompt_len,
                num(c.mean_kl.delta_quant),
                num(c.mean_kl.delta_evict),
                c.first_divergence.delta_quant,
                c.first_divergence.delta_evict,
                num(c.predicted_sensitivity.delta_quant),
                num(c.predicted_sensitivity.delta_evict)
            )?;
        }
    } else if let Some(solve) = solve {
        writeln!(md, "| b | delta_quant S | delta_evict S |\n|---|---|---|")?;
        for a in &solve.ablation {
            writeln!(md, "| {} | {} | {} |", a.b, num(a.delta_quant), num(a.delta_evict))?;
        }
    }
    writeln!(md)?;
    Ok(())
}

fn correlation_section(md: &mut String, report: &CorrelationReport) -> Result<()> {
    let fmt = |x: Option<f64>| x.map_or("undefined".into(), |r| format!("{r:.4}"));
    writeln!(md, "## Proxy correlation (L2 vs KL)\n")?;
    writeln!(
        md,
        "Mean per-layer Pearson {}, Spearman {}; mean per-config Pearson {}.\n",
        fmt(report.mean_layer_pearson),
        fmt(report.mean_layer_spearman),
        fmt(report.mean_config_pearson)
    )?;
    writeln!(md, "| layer | Pearson | Spearman |\n|---|---|---|")?;
    for (l, (p, s)) in report.layer_pearson.iter().zip(&report.layer_spearman).enumerate() {
        writeln!(md, "| {l} | {} | {} |", fmt(*p), fmt(*s))?;
    }
    writeln!(md, "\n| config | Pearson across layers |\n|---|---|")?;
    for (id, p) in report.config_ids.iter().zip(&report.config_pearson) {
        let label = LayerCompressionConfig::from_id(*id)?.label();
        writeln!(md, "| {label} | {} |", fmt(*p))?;
    }
    writeln!(md)?;
    Ok(())
}

/// Consolidates whatever artifacts `dir` holds into `report.md` and `heterogeneity.csv`.
pub fn run(dir: &Path) -> Result<()> {
    if !dir.is_dir() {
        return Err(Error::Input(format!("{} is not a run directory", dir.display())).into());
    }
    let cal = dir.join("calibration");
    let mut tables = Vec::new();
    for name in ["table_l2.json", "table_kl.json"] {
        if let Some(t) = load_optional(&cal.join(name), |p| load_table(p, None))? {
            tables.push(t);
        }
    }
    let correlation: Option<CorrelationReport> = load_optional(&cal.join("correlation.json"), read_json)?;
    let solve: Option<SolveSummary> = load_optional(&dir.join("solve.json"), read_json)?;
    let memory: Option<Vec<MemoryRow>> = load_optional(&dir.join("simulate/memory.json"), read_json)?;
    let cells: Option<Vec<AblationCell>> = load_optional(&dir.join("simulate/ablation.json"), read_json)?;
    if tables.is_empty() && correlation.is_none() && solve.is_none() && memory.is_none() {
        return Err(Error::Input(format!("no kvroute artifacts found in {}", dir.display())).into());
    }

    let mut md = String::from("# kvroute report\n\n");
    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record(["metric", "op", "config_id", "min", "max", "max_over_min"])?;
    if !tables.is_empty() {
        spread_section(&mut md, &mut csv, &tables)?;
    }
    if memory.is_some() || solve.is_some() {
        memory_section(&mut md, memory.as_deref(), solve.as_ref())?;
        ablation_section(&mut md, cells.as_deref(), solve.as_ref())?;
    }
    if let Some(c) = &correlation {
        correlation_section(&mut md, c)?;
    }
    write_text(&dir.join("report.md"), &format!("{}\n", md.trim_end()))?;
    if !tables.is_empty() {
        write_text(&dir.join("heterogeneity.csv"), &String::from_utf8(csv.into_inner()?)?)?;
    }
    eprintln!("wrote {}", dir.join("report.md").display());
    Ok(())
}
