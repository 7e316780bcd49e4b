use std::path::{Path, PathBuf};

use anyhow::Result;
use kvroute_core::calibration::{
    calibrate_kl, calibrate_l2, correlate, heldout_sequences, save_table, CalibrationOptions, MetricKind,
    SensitivityTable, CALIBRATION_PROMPT,
};
use kvroute_core::{build_model, ConfigSpace, ScorerKind, SpaceKind};

use crate::config::Settings;
use crate::io::{create_dir, write_json, write_text};

pub fn table_file_name(metric: MetricKind) -> &'static str {
    match metric {
        MetricKind::L2Proxy => "table_l2.json",
        MetricKind::Kl => "table_kl.json",
    }
}

fn csv_text(table: &SensitivityTable) -> Result<String> {
    let mut buf = Vec::new();
    table.write_csv(&mut buf)?;
    Ok(String::from_utf8(buf)?)
}

/// Writes the table as JSON plus a CSV next to it; returns the JSON path.
fn persist(dir: &Path, table: &SensitivityTable) -> Result<PathBuf> {
    let path = dir.join(table_file_name(table.metric()));
    save_table(table, &path)?;
    write_text(&path.with_extension("csv"), &csv_text(table)?)?;
    Ok(path)
}

pub fn run(s: &Settings) -> Result<()> {
    let model = build_model(&s.spec)?;
    let options = CalibrationOptions {
        scorer: s.scorer.unwrap_or(ScorerKind::RandomPerm),
        seed: s.seed,
        parallel: true,
        composition: s.composition,
    };
    let space = ConfigSpace::named(s.space);
    let heldout = || heldout_sequences(s.heldout_sequences, s.heldout_length, s.spec.vocab_size, s.seed);

    let primary = match s.metric {
        MetricKind::L2Proxy => calibrate_l2(&model, &CALIBRATION_PROMPT, &space, &options)?,
        MetricKind::Kl => calibrate_kl(&model, &heldout(), &space, &options)?,
    };
    let validation = if s.validate_kl {
        // KL over 54 tuples is the expensive sweep; the full space is validated on its calib11 columns
        let kl_space = match s.space {
            SpaceKind::Full => ConfigSpace::named(SpaceKind::Calib11),
            _ => space.clone(),
        };
        let l2 = match s.metric {
            MetricKind::L2Proxy => primary.clone(),
            MetricKind::Kl => calibrate_l2(&model, &CALIBRATION_PROMPT, &space, &options)?,
        };
        let kl = match s.metric {
            MetricKind::Kl => primary.select(&kl_space)?,
            MetricKind::L2Proxy => calibrate_kl(&model, &heldout(), &kl_space, &options)?,
        };
        let report = correlate(&l2.select(&kl_space)?, &kl)?;
        Some((l2, kl, report))
    } else {
        None
    };

    let dir = s.calibration_dir();
    create_dir(&dir)?;
    write_text(&s.out.join("model_spec.json"), &s.spec.to_json())?;
    let path = persist(&dir, &primary)?;
    eprintln!("wrote {}", path.display());
    if let Some((l2, kl, report)) = validation {
        // the table that is not the primary one
        match primary.metric() {
            MetricKind::L2Proxy => persist(&dir, &kl)?,
            MetricKind::Kl => persist(&dir, &l2)?,
        };
        let p = dir.join("correlation.json");
        write_json(&p, &report)?;
        eprintln!(
            "wrote {} (mean per-layer Pearson {})",
            p.display(),
            report
                .mean_layer_pearson
                .map_or("undefined".into(), |r| format!("{r:.3}"))
        );
    }
    Ok(())
}
