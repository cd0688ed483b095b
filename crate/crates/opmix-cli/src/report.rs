//! Comparative reporting over a finished run directory.
//!
//! Every number here is recomputed from the persisted stage records; the
//! summary CSV the runner wrote is never consulted. Aggregation across
//! orderings and seeds is an unweighted mean with a population standard
//! deviation, and missing cells are counted and noted, never fatal.

use std::fmt::Write as _;
use std::path::Path;

use opmix::pipeline::StageRecord;
use opmix::{Error, Result};

use crate::runner::{load_cell, load_snapshot};

/// One (stage, strategy) aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub stage: usize,
    pub strategy: String,
    pub mean_avg_loss: f64,
    pub std_avg_loss: f64,
    /// Cells that contributed a record for this stage.
    pub cells: usize,
    /// Expected-but-absent records for this stage.
    pub missing: usize,
    /// Lowest mean among strategies at this stage.
    pub best: bool,
    pub mean_train_steps: f64,
    pub mean_probe_steps: f64,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub config_sha256: String,
    /// Human-readable notes about gaps in the record set.
    pub notes: Vec<String>,
}

/// Unweighted mean of a record's per-domain held-out losses.
pub fn avg_loss(record: &StageRecord) -> f64 {
    record.final_losses.iter().sum::<f64>() / record.final_losses.len() as f64
}

fn mean_and_pop_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Aggregates a run directory into per-stage per-strategy rows.
pub fn report(run_dir: &Path) -> Result<Report> {
    let (cfg, _, hash) = load_snapshot(run_dir)?;
    let orderings = cfg.orderings();
    let max_stages = orderings.iter().map(Vec::len).max().unwrap_or(0);
    let mut notes = Vec::new();

    // cells[strategy][ordering x seed] -> per-stage Option<record>
    let mut per_strategy: Vec<(String, Vec<Vec<Option<StageRecord>>>)> = Vec::new();
    for name in &cfg.run.strategies {
        let mut cells = Vec::new();
        for (oi, ordering) in orderings.iter().enumerate() {
            for &seed in &cfg.run.seeds {
                let records = load_cell(run_dir, name, oi, seed, ordering.len());
                for (t, slot) in records.iter().enumerate() {
                    if slot.is_none() {
                        notes.push(format!(
                            "missing record: {name}/ord{oi}/seed{seed} stage {}",
                            t + 1
                        ));
                    }
                }
                cells.push(records);
            }
        }
        per_strategy.push((name.clone(), cells));
    }
    if per_strategy.iter().all(|(_, cells)| {
        cells
            .iter()
            .all(|records| records.iter().all(Option::is_none))
    }) {
        return Err(Error::invalid(format!(
            "no stage records under {}",
            run_dir.display()
        )));
    }

    let mut rows = Vec::new();
    for stage in 1..=max_stages {
        let mut stage_rows = Vec::new();
        for (name, cells) in &per_strategy {
            let mut avgs = Vec::new();
            let mut train_steps = Vec::new();
            let mut probe_steps = Vec::new();
            let mut missing = 0usize;
            for records in cells {
                match records.get(stage - 1) {
                    Some(Some(r)) => {
                        avgs.push(avg_loss(r));
                        train_steps.push(r.train_steps as f64);
                        probe_steps.push(r.probe_steps as f64);
                    }
                    Some(None) => missing += 1,
                    // Ordering shorter than max_stages: nothing expected.
                    None => {}
                }
            }
            if avgs.is_empty() && missing == 0 {
                continue;
            }
            let (mean, std) = if avgs.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                mean_and_pop_std(&avgs)
            };
            let mean_of = |xs: &[f64]| {
                if xs.is_empty() {
                    f64::NAN
                } else {
                    xs.iter().sum::<f64>() / xs.len() as f64
                }
            };
            stage_rows.push(ReportRow {
                stage,
                strategy: name.clone(),
                mean_avg_loss: mean,
                std_avg_loss: std,
                cells: avgs.len(),
                missing,
                best: false,
                mean_train_steps: mean_of(&train_steps),
                mean_probe_steps: mean_of(&probe_steps),
            });
        }
        let best = stage_rows
            .iter()
            .filter(|r| r.cells > 0)
            .map(|r| r.mean_avg_loss)
            .fold(f64::INFINITY, f64::min);
        for row in &mut stage_rows {
            row.best = row.cells > 0 && row.mean_avg_loss == best;
        }
        rows.extend(stage_rows);
    }

    Ok(Report {
        rows,
        config_sha256: hash,
        notes,
    })
}

/// Renders the report as CSV; the config hash rides on every row so a saved
/// report stays traceable to its exact config.
pub fn to_csv(report: &Report) -> String {
    let mut out = String::from(
        "stage,strategy,mean_avg_loss,std_avg_loss,cells,missing,best,\
         mean_train_steps,mean_probe_steps,config_sha256\n",
    );
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.stage,
            r.strategy,
            r.mean_avg_loss,
            r.std_avg_loss,
            r.cells,
            r.missing,
            r.best,
            r.mean_train_steps,
            r.mean_probe_steps,
            report.config_sha256,
        );
    }
    out
}

/// Fixed-width comparison table for terminal output.
pub fn to_table(report: &Report) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>5}  {:<12} {:>12} {:>12} {:>6} {:>8} {:>12} {:>12}  {}",
        "stage", "strategy", "mean", "std", "cells", "missing", "train_steps", "probe_steps", "best"
    );
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{:>5}  {:<12} {:>12.6} {:>12.6} {:>6} {:>8} {:>12.1} {:>12.1}  {}",
            r.stage,
            r.strategy,
            r.mean_avg_loss,
            r.std_avg_loss,
            r.cells,
            r.missing,
            r.mean_train_steps,
            r.mean_probe_steps,
            if r.best { "*" } else { "" }
        );
    }
    for note in &report.notes {
        let _ = writeln!(out, "note: {note}");
    }
    out
}
