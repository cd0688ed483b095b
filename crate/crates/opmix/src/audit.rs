//! Measures how far the probe-merge shortcut sits from the ground truth it
//! stands in for. Three loss surfaces over the same mixing-weight grid:
//!
//! * `F`: train to completion at each grid point (the surface the shortcut
//!   is supposed to predict);
//! * `F^M`: merge full-parameter probe deltas instead of training;
//! * `F_hat`: merge low-rank adapter probes (what the pipeline actually does).
//!
//! The two structural errors `eps_merge = max|F - F^M|` and
//! `eps_lora = max|F^M - F_hat|` bound the suboptimality of picking the
//! grid argmin from the cheap surface instead of the true one:
//! `J(alpha_hat) - J(alpha_star) <= 2 (eps_merge + eps_lora)`. With both
//! argmins taken over the same finite grid this is a theorem, so a violated
//! bound means an implementation bug, never noise. Suprema are grid maxima;
//! the grid size is recorded in the report so every bound reads as
//! lattice-relative.
//!
//! `J` here is the measured `F` plus the analytic KL anchor: the regression
//! step is deliberately bypassed to isolate the two structural errors.

use serde::{Deserialize, Serialize};

use crate::corpus::{eval_domain_losses, DomainCorpus};
use crate::error::{Error, Result};
use crate::mixture::{expand, grid_old_new, kl_divergence, Mixture, ReducedWeights};
use crate::model::{ModelParams, ParamDelta};
use crate::pipeline::{corpora_for, train_stage_probes, ProbeKind, Probes, StageConfig};
use crate::seeds;
use crate::solver::ExpandRule;
use crate::trainer::train;

/// Everything one audited instance measured, plus the bound verdict.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditReport {
    pub grid: Vec<ReducedWeights>,
    /// Weighted held-out loss after full training at each grid point.
    pub f_true: Vec<f64>,
    /// Same loss for the merged full-parameter probe deltas.
    pub f_merged: Vec<f64>,
    /// Same loss for the merged adapter probes.
    pub f_adapter: Vec<f64>,
    pub epsilon_merge: f64,
    pub epsilon_lora: f64,
    /// Largest parameter distance between trained and merged models over the
    /// grid; only present when the audit had the parameter sets in hand.
    pub delta_lmc: Option<f64>,
    pub lambda: f64,
    /// Grid argmin of the true objective.
    pub alpha_star: ReducedWeights,
    /// Grid argmin of the adapter-surface objective.
    pub alpha_hat: ReducedWeights,
    /// True objective at `alpha_star`.
    pub j_star: f64,
    /// True objective at `alpha_hat`.
    pub j_hat: f64,
    /// `j_hat - j_star`; non-negative by construction.
    pub gap: f64,
    /// `2 (epsilon_merge + epsilon_lora)`.
    pub bound: f64,
    pub satisfied: bool,
    pub lipschitz: Option<LipschitzReport>,
}

/// Slope-based sanity check of the two approximation bounds. The measured
/// slope only lower-bounds the true smoothness constant, so a `false` flag
/// here is diagnostic, not a refutation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LipschitzReport {
    /// Steepest measured loss slope per unit parameter distance.
    pub l_hat: f64,
    /// Largest distance between a full-parameter probe delta and its
    /// adapter counterpart.
    pub max_probe_gap: f64,
    pub delta_lmc: f64,
    /// `l_hat * delta_lmc`, the merging-error bound's right-hand side.
    pub rhs_merge: f64,
    /// `l_hat * max_probe_gap`, the adapter-error bound's right-hand side.
    pub rhs_lora: f64,
    pub merge_eps_below: bool,
    pub lora_eps_below: bool,
}

impl AuditReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("grid points: {}\n", self.grid.len()));
        out.push_str(&format!("lambda: {:.6}\n", self.lambda));
        out.push_str(&format!("epsilon_merge: {:.12e}\n", self.epsilon_merge));
        out.push_str(&format!("epsilon_lora: {:.12e}\n", self.epsilon_lora));
        match self.delta_lmc {
            Some(d) => out.push_str(&format!("delta_lmc: {d:.12e}\n")),
            None => out.push_str("delta_lmc: not measured\n"),
        }
        let star: Vec<String> = self.alpha_star.full().iter().map(|v| format!("{v:.6}")).collect();
        let hat: Vec<String> = self.alpha_hat.full().iter().map(|v| format!("{v:.6}")).collect();
        out.push_str(&format!("alpha_star: {}\n", star.join(",")));
        out.push_str(&format!("alpha_hat: {}\n", hat.join(",")));
        out.push_str(&format!("j_star: {:.12e}\n", self.j_star));
        out.push_str(&format!("j_hat: {:.12e}\n", self.j_hat));
        out.push_str(&format!(
            "gap: {:.12e} bound: {:.12e} satisfied: {}\n",
            self.gap, self.bound, self.satisfied
        ));
        if let Some(l) = &self.lipschitz {
            out.push_str("DIAGNOSTIC slope check (measured slope lower-bounds the true constant):\n");
            out.push_str(&format!("  l_hat: {:.12e}\n", l.l_hat));
            out.push_str(&format!("  max_probe_gap: {:.12e}\n", l.max_probe_gap));
            out.push_str(&format!(
                "  eps_merge {:.12e} <= {:.12e}: {}\n",
                self.epsilon_merge, l.rhs_merge, l.merge_eps_below
            ));
            out.push_str(&format!(
                "  eps_lora {:.12e} <= {:.12e}: {}\n",
                self.epsilon_lora, l.rhs_lora, l.lora_eps_below
            ));
        }
        out
    }

    /// The three surfaces, one grid point per row.
    pub fn surfaces_csv(&self) -> String {
        let mut out = String::from("alpha_old,alpha_new,f_true,f_merged,f_adapter\n");
        for (i, alpha) in self.grid.iter().enumerate() {
            let coords = alpha.full();
            let news: Vec<String> = coords[1..].iter().map(|v| format!("{v:.12e}")).collect();
            out.push_str(&format!(
                "{:.12e},{},{:.12e},{:.12e},{:.12e}\n",
                coords[0], news.join(";"), self.f_true[i], self.f_merged[i], self.f_adapter[i]
            ));
        }
        out
    }
}

/// Max absolute gap between the trained surface and the full-merge surface.
pub fn epsilon_merge(f_true: &[f64], f_merged: &[f64]) -> f64 {
    max_abs_gap(f_true, f_merged)
}

/// Max absolute gap between the full-merge surface and the adapter surface.
pub fn epsilon_lora(f_merged: &[f64], f_adapter: &[f64]) -> f64 {
    max_abs_gap(f_merged, f_adapter)
}

fn max_abs_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Full training at each grid point: the values and the parameter movement.
pub struct TrueSurface {
    pub values: Vec<f64>,
    pub deltas: Vec<ParamDelta>,
}

fn weighted_mean(losses: &[f64], weights: Option<&[f64]>) -> f64 {
    match weights {
        Some(w) => losses.iter().zip(w).map(|(l, wi)| l * wi).sum(),
        None => losses.iter().sum::<f64>() / losses.len() as f64,
    }
}

/// Trains `base` to completion on `expand(alpha, prev)` at every grid point
/// with the stage's main budget and one shared seed, recording the weighted
/// mean held-out loss over all seen domains.
pub fn true_surface(
    base: &ModelParams,
    prev: &Mixture,
    new_domain: &str,
    grid: &[ReducedWeights],
    cfg: &StageConfig,
    corpora: &[DomainCorpus],
) -> Result<TrueSurface> {
    if grid.is_empty() {
        return Err(Error::invalid("empty audit grid"));
    }
    let new_domains = vec![new_domain.to_string()];
    let mut eval_domains = prev.domains().to_vec();
    eval_domains.push(new_domain.to_string());
    let eval_corpora = corpora_for(corpora, &eval_domains)?;
    let weights = cfg.solve.weights.clone();

    let mut tcfg = cfg.final_train.clone();
    tcfg.seed = seeds::derive(cfg.seed, "true_surface");
    let mut values = Vec::with_capacity(grid.len());
    let mut deltas = Vec::with_capacity(grid.len());
    for alpha in grid {
        if alpha.num_new() != 1 {
            return Err(Error::invalid("the audit grid is one new coordinate wide"));
        }
        let mixture = expand(alpha, prev, &new_domains)?;
        let (out, _) = train(base, None, &mixture, &eval_corpora, &tcfg).map_err(|e| {
            Error::invalid(format!(
                "full training failed at alpha = ({:.4}, {:.4}): {e}",
                alpha.old_weight(),
                alpha.new_weights()[0]
            ))
        })?;
        let trained = out.into_params();
        let losses = eval_domain_losses(&trained, &eval_corpora)?;
        values.push(weighted_mean(&losses, weights.as_deref()));
        deltas.push(ParamDelta::between(base, &trained)?);
    }
    Ok(TrueSurface { values, deltas })
}

/// Builds the report from three measured surfaces on one grid. Both argmins
/// are exact grid minimizers (first minimum wins, and the grid runs from
/// old-heavy to new-heavy, so ties break toward the larger old share).
#[allow(clippy::too_many_arguments)]
pub fn check_gap(
    grid: &[ReducedWeights],
    f_true: &[f64],
    f_merged: &[f64],
    f_adapter: &[f64],
    lambda: f64,
    prior: &Mixture,
    prev: &Mixture,
    new_domains: &[String],
) -> Result<AuditReport> {
    let n = grid.len();
    if n == 0 {
        return Err(Error::invalid("empty audit grid"));
    }
    if f_true.len() != n || f_merged.len() != n || f_adapter.len() != n {
        return Err(Error::invalid("surfaces and grid disagree on length"));
    }
    for (name, surf) in [("true", f_true), ("merged", f_merged), ("adapter", f_adapter)] {
        if surf.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite value in the {name} surface")));
        }
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::invalid("lambda must be finite and non-negative"));
    }

    // Analytic KL anchor per grid point; zero lambda skips the expansion so
    // purely synthetic surfaces need no mixture context.
    let mut kl = vec![0.0; n];
    if lambda > 0.0 {
        for (i, alpha) in grid.iter().enumerate() {
            let p = expand(alpha, prev, new_domains)?;
            kl[i] = kl_divergence(&p, prior)?;
        }
    }
    let j_true: Vec<f64> = f_true.iter().zip(&kl).map(|(f, k)| f + lambda * k).collect();
    let j_adapter: Vec<f64> = f_adapter.iter().zip(&kl).map(|(f, k)| f + lambda * k).collect();

    let star = argmin(&j_true);
    let hat = argmin(&j_adapter);
    let gap = j_true[hat] - j_true[star];
    let epsilon_merge = max_abs_gap(f_true, f_merged);
    let epsilon_lora = max_abs_gap(f_merged, f_adapter);
    let bound = 2.0 * (epsilon_merge + epsilon_lora);

    Ok(AuditReport {
        grid: grid.to_vec(),
        f_true: f_true.to_vec(),
        f_merged: f_merged.to_vec(),
        f_adapter: f_adapter.to_vec(),
        epsilon_merge,
        epsilon_lora,
        delta_lmc: None,
        lambda,
        alpha_star: grid[star].clone(),
        alpha_hat: grid[hat].clone(),
        j_star: j_true[star],
        j_hat: j_true[hat],
        gap,
        bound,
        satisfied: gap <= bound,
        lipschitz: None,
    })
}

fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

/// Relative regret of a realized loss against a grid of alternatives. The
/// realized value joins the candidate set, so the result is non-negative by
/// definition even when measurement noise puts the realized point below
/// every grid value.
pub fn regret(chosen: f64, grid_values: &[f64]) -> f64 {
    let best = grid_values.iter().copied().fold(chosen, f64::min);
    (chosen - best) / best
}

/// Per-stage regret for a strategy's realized mixtures against per-stage
/// true surfaces; entry `t` pairs `chosen[t]` with `grids[t]`.
pub fn regret_sweep(chosen: &[f64], grids: &[Vec<f64>]) -> Result<Vec<f64>> {
    if chosen.len() != grids.len() {
        return Err(Error::invalid("one grid of values per realized loss"));
    }
    Ok(chosen.iter().zip(grids).map(|(c, g)| regret(*c, g)).collect())
}

/// Knobs for one audited instance. The stage config supplies probe and
/// full-training budgets, the solver settings, and the stage root seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub stage: StageConfig,
    pub grid_points: usize,
    /// Interior interpolation points per slope path.
    pub slope_points: usize,
}

impl AuditConfig {
    pub fn desk_default(stage: StageConfig) -> AuditConfig {
        AuditConfig {
            stage,
            grid_points: 11,
            slope_points: 4,
        }
    }
}

/// Runs one full audited instance: trains both probe families from `base`,
/// measures all three surfaces over an interior grid, and assembles the
/// report with the parameter-distance diagnostics.
pub fn audit_stage(
    base: &ModelParams,
    prev: &Mixture,
    cfg: &AuditConfig,
    corpora: &[DomainCorpus],
) -> Result<AuditReport> {
    cfg.stage.validate()?;
    if cfg.stage.new_domains.len() != 1 {
        return Err(Error::invalid("the audit runs on exactly one new domain"));
    }
    if cfg.grid_points == 0 {
        return Err(Error::invalid("need at least one grid point"));
    }
    let new_domain = cfg.stage.new_domains[0].clone();
    let mut eval_domains = prev.domains().to_vec();
    eval_domains.push(new_domain.clone());
    let eval_corpora = corpora_for(corpora, &eval_domains)?;
    let solve_cfg = cfg.stage.solve.to_config(
        prev,
        &eval_domains,
        ExpandRule::Append {
            new_domains: cfg.stage.new_domains.clone(),
        },
    )?;
    let weights = solve_cfg.weights.clone();

    // Both probe families share seeds, budgets, and data order, so their gap
    // isolates the parameterization.
    let mut acfg = cfg.stage.clone();
    acfg.probe_kind = ProbeKind::Adapter;
    let adapter_probes = train_stage_probes(base, prev, &acfg, &eval_corpora)?;
    let mut fcfg = cfg.stage.clone();
    fcfg.probe_kind = ProbeKind::FullParam;
    let full_probes = train_stage_probes(base, prev, &fcfg, &eval_corpora)?;

    let grid = grid_old_new(cfg.grid_points)?;
    let spec = base.spec();
    let mut f_merged = Vec::with_capacity(grid.len());
    let mut f_adapter = Vec::with_capacity(grid.len());
    let mut merged_deltas = Vec::with_capacity(grid.len());
    let mut adapter_deltas = Vec::with_capacity(grid.len());
    for alpha in &grid {
        let dm = full_probes.merged(spec, alpha)?;
        let da = adapter_probes.merged(spec, alpha)?;
        let pm = base.plus(&dm, 1.0)?;
        let pa = base.plus(&da, 1.0)?;
        f_merged.push(weighted_mean(
            &eval_domain_losses(&pm, &eval_corpora)?,
            weights.as_deref(),
        ));
        f_adapter.push(weighted_mean(
            &eval_domain_losses(&pa, &eval_corpora)?,
            weights.as_deref(),
        ));
        merged_deltas.push(dm);
        adapter_deltas.push(da);
    }

    let truth = true_surface(base, prev, &new_domain, &grid, &cfg.stage, corpora)?;

    let mut delta_lmc = 0.0f64;
    for (dt, dm) in truth.deltas.iter().zip(&merged_deltas) {
        delta_lmc = delta_lmc.max(delta_distance(dt, dm)?);
    }

    let mut report = check_gap(
        &grid,
        &truth.values,
        &f_merged,
        &f_adapter,
        solve_cfg.lambda,
        solve_cfg.prior.as_mixture(),
        prev,
        &cfg.stage.new_domains,
    )?;
    report.delta_lmc = Some(delta_lmc);

    // Steepest observed slope along straight parameter paths from each merged
    // model to its trained and adapter-merged counterparts.
    let mut l_hat = 0.0f64;
    for i in 0..grid.len() {
        for other in [&truth.deltas[i], &adapter_deltas[i]] {
            let slope = max_path_slope(
                base,
                &merged_deltas[i],
                other,
                cfg.slope_points,
                &eval_corpora,
                weights.as_deref(),
            )?;
            l_hat = l_hat.max(slope);
        }
    }
    let max_probe_gap = probe_family_gap(&full_probes, &adapter_probes, spec)?;
    let rhs_merge = l_hat * delta_lmc;
    let rhs_lora = l_hat * max_probe_gap;
    report.lipschitz = Some(LipschitzReport {
        l_hat,
        max_probe_gap,
        delta_lmc,
        rhs_merge,
        rhs_lora,
        merge_eps_below: report.epsilon_merge <= rhs_merge,
        lora_eps_below: report.epsilon_lora <= rhs_lora,
    });
    Ok(report)
}

/// Frobenius distance between two parameter deltas.
fn delta_distance(a: &ParamDelta, b: &ParamDelta) -> Result<f64> {
    let mut diff = a.clone();
    diff.add_scaled(b, -1.0)?;
    Ok(diff.frobenius_norm())
}

/// Largest per-probe distance between the two probe parameterizations.
fn probe_family_gap(
    full: &Probes,
    adapter: &Probes,
    spec: &crate::model::ArchSpec,
) -> Result<f64> {
    let (Probes::Full(deltas), Probes::Adapters(sets)) = (full, adapter) else {
        return Err(Error::invalid("expected one full and one adapter probe family"));
    };
    if deltas.len() != sets.len() {
        return Err(Error::invalid("probe families differ in size"));
    }
    let mut gap = 0.0f64;
    for (d, s) in deltas.iter().zip(sets) {
        gap = gap.max(delta_distance(d, &s.delta(spec)?)?);
    }
    Ok(gap)
}

/// Max finite-difference slope of the weighted loss along the straight path
/// from `base + from` to `base + to`, per unit parameter distance.
fn max_path_slope(
    base: &ModelParams,
    from: &ParamDelta,
    to: &ParamDelta,
    interior_points: usize,
    eval_corpora: &[&DomainCorpus],
    weights: Option<&[f64]>,
) -> Result<f64> {
    let mut step = to.clone();
    step.add_scaled(from, -1.0)?;
    let dist = step.frobenius_norm();
    if dist == 0.0 {
        return Ok(0.0);
    }
    let segments = interior_points + 1;
    let mut prev_loss = None;
    let mut max_slope = 0.0f64;
    for i in 0..=segments {
        let s = i as f64 / segments as f64;
        let mut params = base.plus(from, 1.0)?;
        params.add_in_place(&step, s)?;
        let loss = weighted_mean(&eval_domain_losses(&params, eval_corpora)?, weights);
        if let Some(p) = prev_loss {
            let ds = dist / segments as f64;
            max_slope = max_slope.max(((loss - p) as f64).abs() / ds);
        }
        prev_loss = Some(loss);
    }
    Ok(max_slope)
}
