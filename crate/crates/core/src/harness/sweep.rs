//! Sparsity × seed sweeps and their seed-aggregated summary.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Context, Error, Result};

use super::config::ExperimentConfig;
use super::run::{load_dataset, run_with_dataset, write_run, RunRecord};

/// Outcome of one (sparsity, seed) cell.
#[derive(Clone, Debug)]
pub struct SweepCell {
    pub sparsity: f64,
    pub seed: u64,
    pub outcome: std::result::Result<RunRecord, String>,
}

/// Seed statistics of the mean return at one eval step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub sparsity: f64,
    pub step: u64,
    pub seeds: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Aggregates successful records into one row per (sparsity, step), in
/// ascending order of both. Depends only on the records.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    // Sparsities are non-negative, so their bit patterns sort numerically.
    let mut groups: BTreeMap<(u64, u64), Vec<f64>> = BTreeMap::new();
    for r in records {
        for e in &r.evals {
            groups.entry((r.config.sparsity.to_bits(), e.step)).or_default().push(e.mean);
        }
    }
    groups
        .into_iter()
        .map(|((bits, step), vals)| SummaryRow {
            sparsity: f64::from_bits(bits),
            step,
            seeds: vals.len(),
            mean: vals.iter().sum::<f64>() / vals.len() as f64,
            min: vals.iter().copied().fold(f64::INFINITY, f64::min),
            max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
        .collect()
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sparsity", "step", "seeds", "return_mean", "return_min", "return_max"])?;
    for r in rows {
        w.write_record([
            r.sparsity.to_string(),
            r.step.to_string(),
            r.seeds.to_string(),
            r.mean.to_string(),
            r.min.to_string(),
            r.max.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every (sparsity, seed) cell of `base`. A failing cell is recorded
/// and the sweep continues. With `out` set, each cell is written to
/// `out/<cell>/seed<k>/` and the summary to `out/summary.csv`.
pub fn run_sweep(base: &ExperimentConfig, sparsities: &[f64], seeds: &[u64], out: Option<&Path>) -> Result<(Vec<SweepCell>, Vec<SummaryRow>)> {
    if sparsities.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one sparsity and one seed".into()));
    }
    let ds = load_dataset(base).phase("load-data")?;
    let mut cells = Vec::new();
    for &sparsity in sparsities {
        let mut cfg = base.clone();
        cfg.sparsity = sparsity;
        cfg.seeds = seeds.to_vec();
        for &seed in seeds {
            let outcome = run_with_dataset(&cfg, seed, &ds).and_then(|(record, bundle, timing)| {
                if let Some(root) = out {
                    let dir = root.join(cfg.cell_name()).join(format!("seed{seed}"));
                    write_run(&dir, &record, &bundle, &timing).phase("write")?;
                }
                Ok(record)
            });
            cells.push(SweepCell {
                sparsity,
                seed,
                outcome: outcome.map_err(|e| e.to_string()),
            });
        }
    }
    let records: Vec<RunRecord> = cells.iter().filter_map(|c| c.outcome.as_ref().ok().cloned()).collect();
    let summary = summarize(&records);
    if let Some(root) = out {
        std::fs::create_dir_all(root)?;
        write_summary(&root.join("summary.csv"), &summary)?;
        let mut w = csv::Writer::from_path(root.join("cells.csv"))?;
        w.write_record(["sparsity", "seed", "status"])?;
        for c in &cells {
            let status = match &c.outcome {
                Ok(_) => "ok".to_string(),
                Err(e) => format!("failed: {e}"),
            };
            w.write_record([c.sparsity.to_string(), c.seed.to_string(), status])?;
        }
        w.flush()?;
    }
    Ok((cells, summary))
}
