//! Post-hoc theory checks over a finished run: per-stage gap-bound audits
//! and grid regret sweeps.
//!
//! Both commands rebuild the audited cell from the config snapshot (same
//! corpora, same base model, same derived seeds), so their numbers line up
//! with the persisted records exactly; nothing is read back from the
//! original training run except its configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use opmix::audit::{audit_stage, regret, true_surface, AuditConfig};
use opmix::mixture::{grid_old_new, ReducedWeights};
use opmix::pipeline::{run_continual_traced, ContinualRun};
use opmix::{Error, Result};

use crate::config::ExperimentConfig;
use crate::runner::load_snapshot;

/// Which cell to inspect and how finely.
#[derive(Debug, Clone)]
pub struct InspectArgs {
    /// 1-based stages; `None` means every stage from 2 on.
    pub stages: Option<Vec<usize>>,
    /// Index into the run's ordering list.
    pub ordering: usize,
    /// Index into the run's seed list.
    pub seed_index: usize,
    pub grid_points: usize,
}

impl Default for InspectArgs {
    fn default() -> Self {
        InspectArgs {
            stages: None,
            ordering: 0,
            seed_index: 0,
            grid_points: 11,
        }
    }
}

struct RebuiltCell {
    cfg: ExperimentConfig,
    ordering: Vec<String>,
    run: ContinualRun,
    corpora: Vec<opmix::corpus::DomainCorpus>,
    ccfg: opmix::pipeline::ContinualConfig,
    seed: u64,
}

fn rebuild(run_dir: &Path, args: &InspectArgs) -> Result<RebuiltCell> {
    let (cfg, _, _) = load_snapshot(run_dir)?;
    let orderings = cfg.orderings();
    let ordering = orderings
        .get(args.ordering)
        .ok_or_else(|| {
            Error::invalid(format!(
                "ordering index {} out of range (run has {})",
                args.ordering,
                orderings.len()
            ))
        })?
        .clone();
    let seed = *cfg.run.seeds.get(args.seed_index).ok_or_else(|| {
        Error::invalid(format!(
            "seed index {} out of range (run has {})",
            args.seed_index,
            cfg.run.seeds.len()
        ))
    })?;
    let corpora = cfg.build_corpora()?;
    let base = cfg.base_model()?;
    let ccfg = cfg.continual_config(seed)?;
    let run = run_continual_traced(&base, &ordering, &ccfg, &corpora)?;
    Ok(RebuiltCell {
        cfg,
        ordering,
        run,
        corpora,
        ccfg,
        seed,
    })
}

fn selected_stages(args: &InspectArgs, total: usize) -> Result<Vec<usize>> {
    let stages = match &args.stages {
        Some(list) => list.clone(),
        None => (2..=total).collect(),
    };
    if stages.is_empty() {
        return Err(Error::invalid("no stages selected"));
    }
    for &t in &stages {
        if t < 2 || t > total {
            return Err(Error::invalid(format!(
                "stage {t} out of range (audits cover stages 2..={total})"
            )));
        }
    }
    Ok(stages)
}

/// Runs the full three-surface audit on the selected stages and writes the
/// reports (text, JSON, and surface CSV) under `<run_dir>/audit/`.
pub fn audit_run(run_dir: &Path, args: &InspectArgs) -> Result<Vec<PathBuf>> {
    let cell = rebuild(run_dir, args)?;
    let stages = selected_stages(args, cell.ordering.len())?;
    let dir = run_dir.join("audit");
    fs::create_dir_all(&dir)?;

    let mut written = Vec::new();
    for &t in &stages {
        let record = &cell.run.records[t - 1];
        let stage_cfg = cell
            .ccfg
            .stage_config(t, record.new_domains.clone());
        let acfg = AuditConfig {
            stage: stage_cfg,
            grid_points: args.grid_points,
            slope_points: 4,
        };
        let base_t = &cell.run.stage_models[t - 2];
        let prev = &record.prev_mixture;
        let report = audit_stage(base_t, prev, &acfg, &cell.corpora)?;

        let stem = format!("stage{t}_ord{}_seed{}", args.ordering, cell.seed);
        let txt = dir.join(format!("{stem}.txt"));
        fs::write(&txt, report.to_text())?;
        let json = dir.join(format!("{stem}.json"));
        let body = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::invalid(format!("audit serialization failed: {e}")))?;
        fs::write(&json, body)?;
        let csv = dir.join(format!("{stem}_surfaces.csv"));
        fs::write(&csv, report.surfaces_csv())?;
        written.extend([txt, json, csv]);
    }
    Ok(written)
}

/// Regret of each stage's realized mixture against a fresh grid sweep of the
/// true trained surface, written to `<run_dir>/sweep.csv`.
///
/// Every grid point, the realized optimum, and (when the run configures
/// replay) the fixed-replay point train under one shared seed, so the
/// comparison isolates mixture quality from seed luck. Regret is relative to
/// the best grid value and non-negative by construction.
pub fn sweep_run(run_dir: &Path, args: &InspectArgs) -> Result<PathBuf> {
    let cell = rebuild(run_dir, args)?;
    let stages = selected_stages(args, cell.ordering.len())?;
    let grid = grid_old_new(args.grid_points)?;

    let mut out = String::from("stage,kind,alpha_old,alpha_new,f_true,regret_pct\n");
    for &t in &stages {
        let record = &cell.run.records[t - 1];
        let solve = record.solve.as_ref().ok_or_else(|| {
            Error::invalid(format!("stage {t} has no solved mixture to score"))
        })?;
        let stage_cfg = cell.ccfg.stage_config(t, record.new_domains.clone());
        let base_t = &cell.run.stage_models[t - 2];
        let prev = &record.prev_mixture;
        let new_domain = &record.new_domains[0];

        let mut points = grid.clone();
        points.push(solve.alpha_star.clone());
        let mut replay_at = None;
        if let Some(share) = cell.cfg.run.replay_share {
            replay_at = Some(points.len());
            points.push(ReducedWeights::new(share, vec![1.0 - share])?);
        }
        let surface = true_surface(base_t, prev, new_domain, &points, &stage_cfg, &cell.corpora)?;
        let grid_values = &surface.values[..grid.len()];

        for (alpha, value) in grid.iter().zip(grid_values) {
            let _ = writeln!(
                out,
                "{t},grid,{},{},{},",
                alpha.old_weight(),
                alpha.new_weights()[0],
                value
            );
        }
        let chosen = surface.values[grid.len()];
        let _ = writeln!(
            out,
            "{t},op_mix,{},{},{},{}",
            solve.alpha_star.old_weight(),
            solve.alpha_star.new_weights()[0],
            chosen,
            100.0 * regret(chosen, grid_values)
        );
        if let Some(idx) = replay_at {
            let share = cell.cfg.run.replay_share.expect("checked above");
            let value = surface.values[idx];
            let _ = writeln!(
                out,
                "{t},replay,{share},{},{},{}",
                1.0 - share,
                value,
                100.0 * regret(value, grid_values)
            );
        }
    }
    let path = run_dir.join("sweep.csv");
    fs::write(&path, out)?;
    Ok(path)
}
