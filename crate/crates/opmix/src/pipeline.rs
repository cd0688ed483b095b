//! One continual stage, end to end: probe adapters on the previous mixture
//! and on each incoming domain, merge them at proxy weights, fit the loss
//! surfaces, solve for the reduced weights, expand to a full mixture, then
//! train on it. [`run_continual`] chains stages over a domain ordering;
//! [`run_pretraining`] runs the same machinery once over a fixed domain set
//! with an overlay reweighting instead of an expansion.
//!
//! Everything a stage decides or measures lands in a [`StageRecord`] so runs
//! can be audited and re-aggregated without retraining.

use serde::{Deserialize, Serialize};

use crate::corpus::{eval_domain_losses, DomainCorpus};
use crate::error::{Error, Result};
use crate::law::{LawFit, ProxyPoint};
use crate::mixture::{
    expand, overlay, sample_dirichlet_with, grid_old_new, Mixture, MixturePrior, ReducedWeights,
};
use crate::model::{
    merge_adapters, merge_full, AdapterHyper, AdapterSet, ArchSpec, ModelParams, ParamDelta,
};
use crate::seeds;
use crate::solver::{self, ExpandRule, SolveConfig, SolveResult};
use crate::trainer::{
    probe_mixture, train, train_full_reference, LossTrace, ProbeRole, TrainConfig, Trainable,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// How proxy mixing weights are laid out over the reduced simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyScheme {
    /// Interior grid over (old, new); only defined for a single new domain.
    Grid { points: usize },
    /// I.i.d. symmetric Dirichlet draws over all reduced coordinates.
    Dirichlet { points: usize, concentration: f64 },
}

impl ProxyScheme {
    pub fn points(&self) -> usize {
        match *self {
            ProxyScheme::Grid { points } => points,
            ProxyScheme::Dirichlet { points, .. } => points,
        }
    }

    /// `num_new` is the number of coordinates beyond the old block.
    fn validate(&self, num_new: usize) -> Result<()> {
        match *self {
            ProxyScheme::Grid { points } => {
                if num_new != 1 {
                    return Err(Error::invalid(format!(
                        "grid proxies need exactly one new coordinate, got {num_new}"
                    )));
                }
                if points == 0 {
                    return Err(Error::invalid("grid proxies need at least one point"));
                }
            }
            ProxyScheme::Dirichlet { points, concentration } => {
                // One offset plus a (num_new + 1)-coordinate chart with one
                // coordinate dropped: the fit needs num_new + 1 unknowns per
                // domain, so demand one point of slack beyond that.
                let min_points = num_new + 2;
                if points < min_points {
                    return Err(Error::invalid(format!(
                        "dirichlet proxies need at least {min_points} points for {num_new} new \
                         coordinates, got {points}"
                    )));
                }
                if !(concentration.is_finite() && concentration > 0.0) {
                    return Err(Error::invalid(format!(
                        "dirichlet concentration must be positive and finite, got {concentration}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn alphas(&self, num_new: usize, seed: u64) -> Result<Vec<ReducedWeights>> {
        match *self {
            ProxyScheme::Grid { points } => grid_old_new(points),
            ProxyScheme::Dirichlet { points, concentration } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut out = Vec::with_capacity(points);
                for _ in 0..points {
                    let coords = sample_dirichlet_with(num_new + 1, concentration, &mut rng)?;
                    out.push(ReducedWeights::from_full(&coords)?);
                }
                Ok(out)
            }
        }
    }
}

/// Whether probes train low-rank adapters or move the full parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Adapter,
    FullParam,
}

/// What happens after the mixture is solved: train on it, or just keep the
/// probes merged at the solved weights without any further training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalAction {
    Train,
    MergeOnly,
}

/// Solver knobs that do not depend on the stage's domain layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveSettings {
    pub lambda: f64,
    /// Prior over the stage's full domain list; `None` means uniform.
    pub prior: Option<Mixture>,
    /// Per-eval-domain objective weights; `None` means uniform.
    pub weights: Option<Vec<f64>>,
    pub max_iters: usize,
    pub tol: f64,
}

impl SolveSettings {
    pub fn desk_default() -> Self {
        SolveSettings {
            lambda: 0.05,
            prior: None,
            weights: None,
            max_iters: solver::MAX_ITERS,
            tol: solver::ITERATE_TOL,
        }
    }

    pub(crate) fn to_config(
        &self,
        prev: &Mixture,
        expanded: &[String],
        rule: ExpandRule,
    ) -> Result<SolveConfig> {
        let prior = match &self.prior {
            Some(m) => {
                if m.domains() != expanded {
                    return Err(Error::invalid(format!(
                        "solver prior domains {:?} do not match the stage's domain list {:?}",
                        m.domains(),
                        expanded
                    )));
                }
                MixturePrior::new(m.clone())?
            }
            None => MixturePrior::uniform(expanded.to_vec())?,
        };
        let mut cfg = SolveConfig::new(self.lambda, prior, prev.clone(), rule);
        cfg.weights = self.weights.clone();
        cfg.max_iters = self.max_iters;
        cfg.tol = self.tol;
        Ok(cfg)
    }
}

/// Full recipe for one stage. `seed` is the stage root: probe initialization,
/// proxy draws, and both training phases derive their streams from it, so the
/// `seed` fields inside the embedded [`TrainConfig`]s are overridden. The
/// probe config's `trainable` is likewise forced to match `probe_kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub new_domains: Vec<String>,
    pub proxy: ProxyScheme,
    pub probe_kind: ProbeKind,
    /// Budget and schedule for each individual probe.
    pub probe: TrainConfig,
    pub adapter: AdapterHyper,
    /// Minority share in each probe's training blend.
    pub probe_blend: f64,
    pub final_action: FinalAction,
    /// Budget and schedule for the stage's main training run.
    pub final_train: TrainConfig,
    pub solve: SolveSettings,
    pub seed: u64,
}

impl StageConfig {
    /// Desk-scale defaults for one incoming domain: a nine-point proxy grid,
    /// adapter probes at an eighth of the stage budget each (a quarter in
    /// total) with doubled learning rate and no warmup, and a decay tail on
    /// the main run. `stage_steps` is the main run's budget.
    pub fn desk(new_domains: Vec<String>, stage_steps: usize, seed: u64) -> Result<StageConfig> {
        if stage_steps < 10 {
            return Err(Error::invalid("desk stage needs at least 10 steps"));
        }
        let k = new_domains.len();
        let proxy = if k == 1 {
            ProxyScheme::Grid { points: 9 }
        } else {
            ProxyScheme::Dirichlet {
                points: (5 * (k + 1)).max(20),
                concentration: 1.0,
            }
        };
        // Quarter probe budget split over (k + 1) probes.
        let probe_steps = (stage_steps / (4 * (k + 1))).max(1);
        let cfg = StageConfig {
            new_domains,
            proxy,
            probe_kind: ProbeKind::Adapter,
            probe: TrainConfig {
                steps: probe_steps,
                batch_seqs: 16,
                peak_lr: 0.02,
                warmup_steps: 0,
                decay_steps: probe_steps / 10,
                optimizer: crate::trainer::OptimizerKind::adamw_default(),
                weight_decay: 0.01,
                trainable: Trainable::Adapters { update_down: true },
                seed: 0,
                eval_every: 0,
            },
            adapter: AdapterHyper::desk_default(),
            probe_blend: 0.1,
            final_action: FinalAction::Train,
            final_train: TrainConfig {
                steps: stage_steps,
                batch_seqs: 16,
                peak_lr: 0.01,
                warmup_steps: 0,
                decay_steps: stage_steps / 10,
                optimizer: crate::trainer::OptimizerKind::adamw_default(),
                weight_decay: 0.01,
                trainable: Trainable::Full,
                seed: 0,
                eval_every: 0,
            },
            solve: SolveSettings::desk_default(),
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.new_domains.is_empty() {
            return Err(Error::invalid("stage needs at least one new domain"));
        }
        for (i, a) in self.new_domains.iter().enumerate() {
            if self.new_domains[..i].contains(a) {
                return Err(Error::invalid(format!("duplicate new domain {a:?}")));
            }
        }
        self.proxy.validate(self.new_domains.len())?;
        if !(0.0..=0.5).contains(&self.probe_blend) {
            return Err(Error::invalid(format!(
                "probe blend must lie in [0, 0.5], got {}",
                self.probe_blend
            )));
        }
        self.probe.validate()?;
        self.final_train.validate()?;
        if self.final_train.trainable != Trainable::Full {
            return Err(Error::invalid("the stage's main run must train all parameters"));
        }
        if !(self.solve.lambda.is_finite() && self.solve.lambda >= 0.0) {
            return Err(Error::invalid("solver lambda must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Everything one stage decided and measured. Serializable as is; `to_text`
/// renders the human-readable stage document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub prev_mixture: Mixture,
    pub new_domains: Vec<String>,
    /// All domains seen through this stage; loss vectors use this order.
    pub eval_domains: Vec<String>,
    pub proxy_points: Vec<ProxyPoint>,
    pub law: Option<LawFit>,
    pub solve: Option<SolveResult>,
    /// The mixture the stage actually trained on.
    pub mixture: Mixture,
    /// Held-out loss per eval domain after the stage.
    pub final_losses: Vec<f64>,
    /// Trace of the stage's main training run (empty for merge-only stages).
    pub trace: LossTrace,
    /// Probe optimizer steps spent this stage, over all probes.
    pub probe_steps: usize,
    /// Main-run optimizer steps spent this stage.
    pub train_steps: usize,
}

impl StageRecord {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("stage {}\n", self.stage));
        out.push_str(&format!("new domains: {}\n", self.new_domains.join(", ")));
        out.push_str(&format!(
            "steps: train {} probe {}\n",
            self.train_steps, self.probe_steps
        ));
        out.push_str("previous mixture:\n");
        out.push_str(&self.prev_mixture.to_text());
        out.push_str("trained mixture:\n");
        out.push_str(&self.mixture.to_text());
        match &self.solve {
            Some(s) => {
                let coords: Vec<String> =
                    s.alpha_star.full().iter().map(|v| format!("{v:.12e}")).collect();
                out.push_str(&format!(
                    "solver: objective {:.12e} iterations {} converged {} alpha {}\n",
                    s.objective,
                    s.iterations,
                    s.converged,
                    coords.join(",")
                ));
            }
            None => out.push_str("solver: not run\n"),
        }
        match &self.law {
            Some(fit) => {
                out.push_str("fitted laws:\n");
                out.push_str(&fit.to_text());
            }
            None => out.push_str("fitted laws: none\n"),
        }
        out.push_str(&format!("proxy points: {}\n", self.proxy_points.len()));
        out.push_str("final held-out losses:\n");
        for (name, loss) in self.eval_domains.iter().zip(&self.final_losses) {
            out.push_str(&format!("  {name}\t{loss:.12e}\n"));
        }
        out
    }
}

/// Looks up one corpus per name, in order.
pub fn corpora_for<'a>(
    all: &'a [DomainCorpus],
    names: &[String],
) -> Result<Vec<&'a DomainCorpus>> {
    names
        .iter()
        .map(|name| {
            all.iter()
                .find(|c| &c.name == name)
                .ok_or_else(|| Error::invalid(format!("no corpus for domain {name:?}")))
        })
        .collect()
}

/// Probe outputs in either parameterization, old probe first.
pub(crate) enum Probes {
    Adapters(Vec<AdapterSet>),
    Full(Vec<ParamDelta>),
}

impl Probes {
    pub(crate) fn merged(&self, spec: &ArchSpec, alpha: &ReducedWeights) -> Result<ParamDelta> {
        match self {
            Probes::Adapters(sets) => merge_adapters(spec, sets, alpha),
            Probes::Full(deltas) => merge_full(spec, deltas, alpha),
        }
    }
}

/// Trains the old probe plus one probe per new domain, all from `base`.
pub(crate) fn train_stage_probes(
    base: &ModelParams,
    prev: &Mixture,
    cfg: &StageConfig,
    probe_corpora: &[&DomainCorpus],
) -> Result<Probes> {
    let k = cfg.new_domains.len();
    let roles = std::iter::once(ProbeRole::Old).chain((0..k).map(ProbeRole::New));
    match cfg.probe_kind {
        ProbeKind::Adapter => {
            let mut sets = Vec::with_capacity(k + 1);
            for (i, role) in roles.enumerate() {
                let mut pcfg = cfg.probe.clone();
                pcfg.trainable = Trainable::Adapters { update_down: true };
                pcfg.seed = seeds::derive_indexed(cfg.seed, "probe", i);
                let (set, _) = crate::trainer::train_probe(
                    base,
                    prev,
                    &cfg.new_domains,
                    role,
                    cfg.probe_blend,
                    cfg.adapter,
                    probe_corpora,
                    &pcfg,
                )?;
                sets.push(set);
            }
            Ok(Probes::Adapters(sets))
        }
        ProbeKind::FullParam => {
            let mut deltas = Vec::with_capacity(k + 1);
            for (i, role) in roles.enumerate() {
                let mut pcfg = cfg.probe.clone();
                pcfg.trainable = Trainable::Full;
                pcfg.seed = seeds::derive_indexed(cfg.seed, "probe", i);
                let mixture = probe_mixture(prev, &cfg.new_domains, role, cfg.probe_blend)?;
                let (delta, _) = train_full_reference(base, &mixture, probe_corpora, &pcfg)?;
                deltas.push(delta);
            }
            Ok(Probes::Full(deltas))
        }
    }
}

/// Evaluates the merged model at every proxy weight.
fn measure_proxies(
    base: &ModelParams,
    probes: &Probes,
    alphas: &[ReducedWeights],
    eval_corpora: &[&DomainCorpus],
) -> Result<Vec<ProxyPoint>> {
    let mut points = Vec::with_capacity(alphas.len());
    for alpha in alphas {
        let delta = probes.merged(base.spec(), alpha)?;
        let merged = base.plus(&delta, 1.0)?;
        let losses = eval_domain_losses(&merged, eval_corpora)?;
        points.push(ProxyPoint::new(alpha.clone(), losses)?);
    }
    Ok(points)
}

/// Runs one full stage from `base`, which was trained on `prev`.
///
/// Probes are trained from the current `base` (not from any earlier
/// checkpoint), so the old-mixture probe measures what rehearsing the
/// previous mixture does to the model as it stands now.
pub fn run_stage(
    base: &ModelParams,
    prev: &Mixture,
    stage: usize,
    cfg: &StageConfig,
    corpora: &[DomainCorpus],
) -> Result<(ModelParams, StageRecord)> {
    run_stage_inner(base, prev, stage, cfg, corpora).map_err(|e| e.at_stage(stage))
}

fn run_stage_inner(
    base: &ModelParams,
    prev: &Mixture,
    stage: usize,
    cfg: &StageConfig,
    corpora: &[DomainCorpus],
) -> Result<(ModelParams, StageRecord)> {
    cfg.validate()?;
    for d in cfg.new_domains.iter() {
        if prev.index_of(d).is_some() {
            return Err(Error::invalid(format!(
                "new domain {d:?} already present in the previous mixture"
            )));
        }
    }
    let k = cfg.new_domains.len();
    let mut eval_domains = prev.domains().to_vec();
    eval_domains.extend(cfg.new_domains.iter().cloned());
    let eval_corpora = corpora_for(corpora, &eval_domains)?;

    let probes = train_stage_probes(base, prev, cfg, &eval_corpora)?;
    let alphas = cfg
        .proxy
        .alphas(k, seeds::derive(cfg.seed, "proxy_alphas"))?;
    let proxy_points = measure_proxies(base, &probes, &alphas, &eval_corpora)?;

    let fit = LawFit::fit(&proxy_points)?;
    let solve_cfg = cfg.solve.to_config(
        prev,
        &eval_domains,
        ExpandRule::Append {
            new_domains: cfg.new_domains.clone(),
        },
    )?;
    let solved = solver::solve(&fit, &solve_cfg)?;
    let mixture = expand(&solved.alpha_star, prev, &cfg.new_domains)?;

    let (model, trace, train_steps) = match cfg.final_action {
        FinalAction::Train => {
            let mut fcfg = cfg.final_train.clone();
            fcfg.seed = seeds::derive(cfg.seed, "final_train");
            let (out, trace) = train(base, None, &mixture, &eval_corpora, &fcfg)?;
            (out.into_params(), trace, fcfg.steps)
        }
        FinalAction::MergeOnly => {
            let delta = probes.merged(base.spec(), &solved.alpha_star)?;
            let model = base.plus(&delta, 1.0)?;
            let trace = LossTrace {
                lr: Vec::new(),
                train_loss: Vec::new(),
                eval_domains: eval_domains.clone(),
                eval_rows: Vec::new(),
            };
            (model, trace, 0)
        }
    };
    let final_losses = eval_domain_losses(&model, &eval_corpora)?;

    let record = StageRecord {
        stage,
        prev_mixture: prev.clone(),
        new_domains: cfg.new_domains.clone(),
        eval_domains,
        proxy_points,
        law: Some(fit),
        solve: Some(solved),
        mixture,
        final_losses,
        trace,
        probe_steps: (k + 1) * cfg.probe.steps,
        train_steps,
    };
    Ok((model.clone(), record))
}

/// Multi-stage recipe: a plain finetune on the first domain, then the full
/// stage machinery for every later domain in the ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinualConfig {
    /// Config for the first stage's plain run (must train all parameters).
    pub stage1: TrainConfig,
    /// Template for stages two onward; `new_domains` and `seed` are set per
    /// stage from the ordering and the root seed.
    pub template: StageConfig,
    pub seed: u64,
}

impl ContinualConfig {
    /// Desk-scale defaults: warmup only on the first stage, decay tails on
    /// every stage.
    pub fn desk(stage_steps: usize, seed: u64) -> Result<ContinualConfig> {
        let template = StageConfig::desk(vec!["placeholder".to_string()], stage_steps, seed)?;
        let mut stage1 = template.final_train.clone();
        stage1.warmup_steps = stage_steps / 10;
        Ok(ContinualConfig {
            stage1,
            template,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.stage1.validate()?;
        if self.stage1.trainable != Trainable::Full {
            return Err(Error::invalid("the first stage must train all parameters"));
        }
        self.template.validate()
    }

    /// The exact per-stage config [`run_continual`] uses for 1-based stages
    /// past the first, exposed so audits can rebuild any stage verbatim.
    pub fn stage_config(&self, stage: usize, new_domains: Vec<String>) -> StageConfig {
        let mut cfg = self.template.clone();
        cfg.new_domains = new_domains;
        cfg.seed = seeds::derive_indexed(self.seed, "stage", stage);
        cfg
    }
}

/// Seed for the main training run of a 1-based stage, composed exactly the
/// way [`run_continual`] and [`run_stage`] derive it; baseline strategies use
/// the same derivation so equal mixtures give bit-identical runs.
pub(crate) fn stage_train_seed(root: u64, stage: usize) -> u64 {
    seeds::derive(seeds::derive_indexed(root, "stage", stage), "final_train")
}

/// Plain full-parameter finetune on the ordering's first domain. Every
/// continual strategy starts from this same stage (same derived seed), so
/// strategies only diverge from the second stage on.
pub(crate) fn first_stage(
    base: &ModelParams,
    domain: &str,
    stage1: &TrainConfig,
    root_seed: u64,
    corpora: &[DomainCorpus],
) -> Result<(ModelParams, StageRecord)> {
    let first = Mixture::one_hot(vec![domain.to_string()], 0)?;
    let first_corpora = corpora_for(corpora, first.domains())?;
    let mut scfg = stage1.clone();
    scfg.seed = seeds::derive_indexed(root_seed, "stage_final", 1);
    let (out, trace) =
        train(base, None, &first, &first_corpora, &scfg).map_err(|e| e.at_stage(1))?;
    let model = out.into_params();
    let final_losses = eval_domain_losses(&model, &first_corpora).map_err(|e| e.at_stage(1))?;
    let record = StageRecord {
        stage: 1,
        prev_mixture: first.clone(),
        new_domains: vec![domain.to_string()],
        eval_domains: vec![domain.to_string()],
        proxy_points: Vec::new(),
        law: None,
        solve: None,
        mixture: first,
        final_losses,
        trace,
        probe_steps: 0,
        train_steps: scfg.steps,
    };
    Ok((model, record))
}

/// A finished multi-stage run with the model kept after every stage, so
/// audits can rebuild any stage's starting point without retraining.
#[derive(Debug, Clone)]
pub struct ContinualRun {
    pub records: Vec<StageRecord>,
    /// `stage_models[t]` is the model after 1-based stage `t + 1`.
    pub stage_models: Vec<ModelParams>,
}

impl ContinualRun {
    pub fn final_model(&self) -> &ModelParams {
        self.stage_models.last().expect("at least one stage")
    }
}

/// Runs the whole ordering, returning the final model and one record per
/// stage. Stage indices are 1-based.
pub fn run_continual(
    base: &ModelParams,
    ordering: &[String],
    cfg: &ContinualConfig,
    corpora: &[DomainCorpus],
) -> Result<(ModelParams, Vec<StageRecord>)> {
    let run = run_continual_traced(base, ordering, cfg, corpora)?;
    let ContinualRun {
        records,
        mut stage_models,
    } = run;
    Ok((stage_models.pop().expect("at least one stage"), records))
}

/// [`run_continual`], keeping the model after every stage.
pub fn run_continual_traced(
    base: &ModelParams,
    ordering: &[String],
    cfg: &ContinualConfig,
    corpora: &[DomainCorpus],
) -> Result<ContinualRun> {
    cfg.validate()?;
    if ordering.is_empty() {
        return Err(Error::invalid("ordering must name at least one domain"));
    }
    for (i, d) in ordering.iter().enumerate() {
        if ordering[..i].contains(d) {
            return Err(Error::invalid(format!("domain {d:?} repeats in the ordering")));
        }
    }

    let mut records = Vec::with_capacity(ordering.len());
    let mut models = Vec::with_capacity(ordering.len());
    let (model, first_record) = first_stage(base, &ordering[0], &cfg.stage1, cfg.seed, corpora)?;
    records.push(first_record);
    models.push(model);

    for (t, domain) in ordering.iter().enumerate().skip(1) {
        let stage = t + 1;
        let stage_cfg = cfg.stage_config(stage, vec![domain.clone()]);
        let prev = records.last().expect("at least one record").mixture.clone();
        let base_model = models.last().expect("at least one model");
        let (next, record) = run_stage(base_model, &prev, stage, &stage_cfg, corpora)?;
        models.push(next);
        records.push(record);
    }
    Ok(ContinualRun {
        records,
        stage_models: models,
    })
}

/// One-shot recipe over a fixed domain set: warm up on the uniform mixture,
/// probe every domain from the warmed model, solve an overlay reweighting,
/// and spend the rest of the budget on the solved mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    /// Number of Dirichlet proxy draws.
    pub proxy_points: usize,
    pub concentration: f64,
    /// Budget and schedule for each individual probe.
    pub probe: TrainConfig,
    pub adapter: AdapterHyper,
    /// Share of the uniform mixture blended into each domain probe.
    pub probe_blend: f64,
    /// Schedule template for both full-training phases; `steps`,
    /// `warmup_steps`, and `decay_steps` are recomputed from the budget
    /// split, and `seed` is derived from the root seed.
    pub train: TrainConfig,
    pub solve: SolveSettings,
    pub seed: u64,
}

impl PretrainConfig {
    /// Desk-scale defaults. `num_domains` fixes the proxy count, `probe_steps`
    /// the per-probe budget.
    pub fn desk(num_domains: usize, probe_steps: usize, seed: u64) -> Result<PretrainConfig> {
        if num_domains < 2 {
            return Err(Error::invalid("pretraining needs at least two domains"));
        }
        if probe_steps == 0 {
            return Err(Error::invalid("probes need at least one step"));
        }
        Ok(PretrainConfig {
            proxy_points: (5 * (num_domains + 1)).max(20),
            concentration: 1.0,
            probe: TrainConfig {
                steps: probe_steps,
                batch_seqs: 16,
                peak_lr: 0.02,
                warmup_steps: 0,
                decay_steps: probe_steps / 10,
                optimizer: crate::trainer::OptimizerKind::adamw_default(),
                weight_decay: 0.01,
                trainable: Trainable::Adapters { update_down: true },
                seed: 0,
                eval_every: 0,
            },
            adapter: AdapterHyper::desk_default(),
            probe_blend: 0.1,
            train: TrainConfig {
                steps: 0,
                batch_seqs: 16,
                peak_lr: 0.01,
                warmup_steps: 0,
                decay_steps: 0,
                optimizer: crate::trainer::OptimizerKind::adamw_default(),
                weight_decay: 0.01,
                trainable: Trainable::Full,
                seed: 0,
                eval_every: 0,
            },
            solve: SolveSettings::desk_default(),
            seed,
        })
    }
}

/// Appends `tail` to `head` with step indices shifted by `offset`.
fn splice_traces(head: &mut LossTrace, tail: LossTrace, offset: usize) {
    head.lr.extend(tail.lr);
    head.train_loss.extend(tail.train_loss);
    if head.eval_domains.is_empty() {
        head.eval_domains = tail.eval_domains;
    }
    head.eval_rows
        .extend(tail.eval_rows.into_iter().map(|(s, row)| (s + offset, row)));
}

/// Runs the pretraining recipe. `total_steps` covers the two full-training
/// phases; probe steps come on top and are ledgered separately in the record.
pub fn run_pretraining(
    base: &ModelParams,
    domains: &[String],
    total_steps: usize,
    warmup_fraction: f64,
    cfg: &PretrainConfig,
    corpora: &[DomainCorpus],
) -> Result<(ModelParams, StageRecord)> {
    if domains.len() < 2 {
        return Err(Error::invalid("pretraining needs at least two domains"));
    }
    for (i, d) in domains.iter().enumerate() {
        if domains[..i].contains(d) {
            return Err(Error::invalid(format!("duplicate domain {d:?}")));
        }
    }
    if !(warmup_fraction > 0.0 && warmup_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "warmup fraction must lie strictly inside (0, 1), got {warmup_fraction}"
        )));
    }
    if total_steps < 2 {
        return Err(Error::invalid("pretraining needs at least two steps"));
    }
    let k = domains.len();
    if cfg.proxy_points < k + 2 {
        return Err(Error::invalid(format!(
            "need at least {} proxy points for {k} domains, got {}",
            k + 2,
            cfg.proxy_points
        )));
    }
    if !(0.0..=0.5).contains(&cfg.probe_blend) {
        return Err(Error::invalid(format!(
            "probe blend must lie in [0, 0.5], got {}",
            cfg.probe_blend
        )));
    }
    let warmup_steps = ((total_steps as f64 * warmup_fraction).round() as usize)
        .clamp(1, total_steps - 1);
    let refs = corpora_for(corpora, domains)?;
    let uniform = Mixture::uniform(domains.to_vec())?;

    // Phase one: uniform warmup.
    let mut wcfg = cfg.train.clone();
    wcfg.steps = warmup_steps;
    wcfg.warmup_steps = cfg.train.warmup_steps.min(warmup_steps);
    wcfg.decay_steps = 0;
    wcfg.trainable = Trainable::Full;
    wcfg.seed = seeds::derive(cfg.seed, "warmup");
    let (out, mut trace) = train(base, None, &uniform, &refs, &wcfg)?;
    let warmed = out.into_params();

    // Probes from the warmed model: index 0 rehearses the uniform mixture
    // itself, probe i > 0 concentrates on domain i - 1 with a small uniform
    // blend.
    let mut sets = Vec::with_capacity(k + 1);
    for i in 0..=k {
        let mixture = if i == 0 {
            uniform.clone()
        } else {
            let mut w = vec![cfg.probe_blend / k as f64; k];
            w[i - 1] += 1.0 - cfg.probe_blend;
            Mixture::from_unnormalized(domains.to_vec(), w)?
        };
        let mut pcfg = cfg.probe.clone();
        pcfg.trainable = Trainable::Adapters { update_down: true };
        pcfg.seed = seeds::derive_indexed(cfg.seed, "probe", i);
        let adapters = AdapterSet::seeded(
            warmed.spec(),
            cfg.adapter,
            seeds::derive(pcfg.seed, "adapter_init"),
        )?;
        let (out, _) = train(&warmed, Some(adapters), &mixture, &refs, &pcfg)?;
        sets.push(out.into_adapters());
    }
    let probes = Probes::Adapters(sets);

    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, "proxy_alphas"));
    let mut alphas = Vec::with_capacity(cfg.proxy_points);
    for _ in 0..cfg.proxy_points {
        let coords = sample_dirichlet_with(k + 1, cfg.concentration, &mut rng)?;
        alphas.push(ReducedWeights::from_full(&coords)?);
    }
    let proxy_points = measure_proxies(&warmed, &probes, &alphas, &refs)?;

    let fit = LawFit::fit(&proxy_points)?;
    let solve_cfg = cfg
        .solve
        .to_config(&uniform, domains, ExpandRule::Overlay)?;
    let solved = solver::solve(&fit, &solve_cfg)?;
    let mixture = overlay(&solved.alpha_star, &uniform)?;

    // Phase two: the rest of the budget on the solved mixture, fresh
    // optimizer state.
    let rest = total_steps - warmup_steps;
    let mut fcfg = cfg.train.clone();
    fcfg.steps = rest;
    fcfg.warmup_steps = 0;
    fcfg.decay_steps = cfg.train.decay_steps.min(rest);
    fcfg.trainable = Trainable::Full;
    fcfg.seed = seeds::derive(cfg.seed, "final_train");
    let (out, tail) = train(&warmed, None, &mixture, &refs, &fcfg)?;
    let model = out.into_params();
    splice_traces(&mut trace, tail, warmup_steps);

    let final_losses = eval_domain_losses(&model, &refs)?;
    let record = StageRecord {
        stage: 1,
        prev_mixture: uniform,
        new_domains: domains.to_vec(),
        eval_domains: domains.to_vec(),
        proxy_points,
        law: Some(fit),
        solve: Some(solved),
        mixture,
        final_losses,
        trace,
        probe_steps: (k + 1) * cfg.probe.steps,
        train_steps: total_steps,
    };
    Ok((model, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_domain, make_domain_family};
    use crate::model::ArchSpec;
    use crate::solver::brute_force;

    fn arch() -> ArchSpec {
        ArchSpec {
            vocab: 16,
            embed_dim: 8,
            hidden_dim: 12,
            context: 8,
        }
    }

    fn family(count: usize, similarity: f64, tokens: usize) -> Vec<DomainCorpus> {
        let specs = make_domain_family(count, 16, similarity, tokens, tokens / 4, 99).unwrap();
        specs.iter().map(|s| generate_domain(s).unwrap()).collect()
    }

    fn base_model() -> ModelParams {
        ModelParams::init(arch(), 7).unwrap()
    }

    fn names(corpora: &[DomainCorpus]) -> Vec<String> {
        corpora.iter().map(|c| c.name.clone()).collect()
    }

    fn quick_stage(new_domains: Vec<String>, seed: u64) -> StageConfig {
        let mut cfg = StageConfig::desk(new_domains, 60, seed).unwrap();
        cfg.probe.steps = 12;
        cfg.probe.decay_steps = 0;
        cfg
    }

    #[test]
    fn stage_grid_evaluates_every_point_and_ledgers_probes() {
        let corpora = family(2, 0.5, 2000);
        let all = names(&corpora);
        let base = base_model();
        let prev = Mixture::one_hot(vec![all[0].clone()], 0).unwrap();
        let cfg = quick_stage(vec![all[1].clone()], 11);
        let (_, record) = run_stage(&base, &prev, 2, &cfg, &corpora).unwrap();

        assert_eq!(record.proxy_points.len(), 9);
        let grid = grid_old_new(9).unwrap();
        for (p, g) in record.proxy_points.iter().zip(&grid) {
            assert_eq!(p.alpha, *g);
            assert_eq!(p.losses.len(), 2);
        }
        assert_eq!(record.probe_steps, 2 * cfg.probe.steps);
        assert_eq!(record.train_steps, cfg.final_train.steps);
        assert_eq!(record.eval_domains, all);
        assert_eq!(record.trace.train_loss.len(), cfg.final_train.steps);
        assert!(record.law.is_some());
    }

    #[test]
    fn stage_preserves_old_mixture_ratios() {
        let corpora = family(3, 0.5, 2000);
        let all = names(&corpora);
        let base = base_model();
        let prev =
            Mixture::new(vec![all[0].clone(), all[1].clone()], vec![0.3, 0.7]).unwrap();
        let cfg = quick_stage(vec![all[2].clone()], 5);
        let (_, record) = run_stage(&base, &prev, 2, &cfg, &corpora).unwrap();

        let p = record.mixture.weights();
        assert_eq!(record.mixture.domains()[..2], prev.domains()[..]);
        let ratio = p[0] / p[1];
        assert!(
            (ratio - 0.3 / 0.7).abs() < 1e-9,
            "old-block ratio drifted: {ratio}"
        );
        let alpha = record.solve.as_ref().unwrap().alpha_star.clone();
        assert!((p[0] + p[1] - alpha.old_weight()).abs() < 1e-12);
    }

    #[test]
    fn heavy_prior_pull_keeps_new_mass_negligible() {
        let corpora = family(2, 0.5, 2000);
        let all = names(&corpora);
        let base = base_model();
        let prev = Mixture::one_hot(vec![all[0].clone()], 0).unwrap();
        let mut cfg = quick_stage(vec![all[1].clone()], 13);
        // Prior glued to the previous mixture with a trace of new mass; a huge
        // lambda should hand the solution to it.
        cfg.solve.lambda = 1e6;
        cfg.solve.prior = Some(
            Mixture::new(vec![all[0].clone(), all[1].clone()], vec![1.0 - 1e-6, 1e-6]).unwrap(),
        );
        let (_, record) = run_stage(&base, &prev, 2, &cfg, &corpora).unwrap();
        let new_mass = *record.mixture.weights().last().unwrap();
        assert!(new_mass < 1e-3, "prior pull ignored: new mass {new_mass}");
    }

    #[test]
    fn near_identical_domain_lands_near_brute_force() {
        // The second domain is statistically close to the first, so the fitted
        // surfaces are nearly flat and the solve should sit close to the
        // brute-force argmin of its own fit.
        let corpora = family(2, 0.95, 2000);
        let all = names(&corpora);
        let base = base_model();
        let prev = Mixture::one_hot(vec![all[0].clone()], 0).unwrap();
        let cfg = quick_stage(vec![all[1].clone()], 17);
        let (_, record) = run_stage(&base, &prev, 2, &cfg, &corpora).unwrap();

        let fit = record.law.as_ref().unwrap();
        let solve_cfg = cfg
            .solve
            .to_config(
                &prev,
                &record.eval_domains,
                ExpandRule::Append {
                    new_domains: cfg.new_domains.clone(),
                },
            )
            .unwrap();
        let brute = brute_force(fit, &solve_cfg, 0.001).unwrap();
        let ours = expand(
            &record.solve.as_ref().unwrap().alpha_star,
            &prev,
            &cfg.new_domains,
        )
        .unwrap();
        let best = expand(&brute.alpha_star, &prev, &cfg.new_domains).unwrap();
        let tv: f64 = ours
            .weights()
            .iter()
            .zip(best.weights())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv <= 0.15, "total variation {tv} from brute-force argmin");
    }

    #[test]
    fn continual_run_chains_stages() {
        let corpora = family(3, 0.5, 2000);
        let all = names(&corpora);
        let base = base_model();
        let mut cfg = ContinualConfig::desk(60, 23).unwrap();
        cfg.stage1.steps = 40;
        cfg.stage1.warmup_steps = 4;
        cfg.stage1.decay_steps = 4;
        cfg.template.probe.steps = 10;
        cfg.template.probe.decay_steps = 0;
        let (_, records) = run_continual(&base, &all, &cfg, &corpora).unwrap();

        assert_eq!(records.len(), 3);
        assert_eq!(records[0].stage, 1);
        assert!(records[0].law.is_none() && records[0].solve.is_none());
        assert_eq!(records[0].mixture.len(), 1);
        for (i, r) in records.iter().enumerate().skip(1) {
            assert_eq!(r.stage, i + 1);
            assert!(r.law.is_some() && r.solve.is_some());
            assert_eq!(r.mixture.len(), i + 1);
            assert_eq!(r.eval_domains.len(), i + 1);
            assert_eq!(r.prev_mixture.len(), i);
            assert_eq!(r.final_losses.len(), i + 1);
        }
        // Two solver-backed stages for a three-domain ordering.
        assert_eq!(records.iter().filter(|r| r.solve.is_some()).count(), 2);
    }

    #[test]
    fn single_domain_ordering_never_solves() {
        let corpora = family(1, 0.5, 2000);
        let all = names(&corpora);
        let base = base_model();
        let mut cfg = ContinualConfig::desk(40, 29).unwrap();
        cfg.stage1.warmup_steps = 4;
        cfg.stage1.decay_steps = 4;
        let (_, records) = run_continual(&base, &all, &cfg, &corpora).unwrap();
        assert_eq!(records.len(), 1);
        assert!(records[0].solve.is_none());
        assert!(records[0].proxy_points.is_empty());
    }

    #[test]
    fn reruns_are_bit_identical() {
        let corpora = family(2, 0.5, 2000);
        let all = names(&corpora);
        let base = base_model();
        let prev = Mixture::one_hot(vec![all[0].clone()], 0).unwrap();
        let cfg = quick_stage(vec![all[1].clone()], 31);
        let (m1, r1) = run_stage(&base, &prev, 2, &cfg, &corpora).unwrap();
        let (m2, r2) = run_stage(&base, &prev, 2, &cfg, &corpora).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(r1.mixture.weights(), r2.mixture.weights());
        assert_eq!(r1.final_losses, r2.final_losses);
        assert_eq!(
            serde_json::to_string(&r1).unwrap(),
            serde_json::to_string(&r2).unwrap()
        );
    }

    #[test]
    fn merge_only_stage_skips_training() {
        let corpora = family(2, 0.5, 2000);
        let all = names(&corpora);
        let base = base_model();
        let prev = Mixture::one_hot(vec![all[0].clone()], 0).unwrap();
        let mut cfg = quick_stage(vec![all[1].clone()], 37);
        cfg.final_action = FinalAction::MergeOnly;
        let (model, record) = run_stage(&base, &prev, 2, &cfg, &corpora).unwrap();

        assert_eq!(record.train_steps, 0);
        assert!(record.trace.train_loss.is_empty());
        // The returned model is exactly base plus the merged probe delta.
        let alpha = &record.solve.as_ref().unwrap().alpha_star;
        assert!(alpha.old_weight() > 0.0);
        assert_ne!(model, base);
    }

    #[test]
    fn full_param_probes_run() {
        let corpora = family(2, 0.5, 2000);
        let all = names(&corpora);
        let base = base_model();
        let prev = Mixture::one_hot(vec![all[0].clone()], 0).unwrap();
        let mut cfg = quick_stage(vec![all[1].clone()], 41);
        cfg.probe_kind = ProbeKind::FullParam;
        let (_, record) = run_stage(&base, &prev, 2, &cfg, &corpora).unwrap();
        assert_eq!(record.proxy_points.len(), 9);
        assert!(record.law.is_some());
    }

    #[test]
    fn stage_rejects_known_domain_and_bad_configs() {
        let corpora = family(2, 0.5, 2000);
        let all = names(&corpora);
        let base = base_model();
        let prev = Mixture::one_hot(vec![all[0].clone()], 0).unwrap();

        let cfg = quick_stage(vec![all[0].clone()], 43);
        assert!(run_stage(&base, &prev, 2, &cfg, &corpora).is_err());

        let mut bad = quick_stage(vec![all[1].clone()], 43);
        bad.proxy = ProxyScheme::Dirichlet {
            points: 2,
            concentration: 1.0,
        };
        assert!(bad.validate().is_err());

        let mut bad = quick_stage(vec![all[1].clone()], 43);
        bad.probe_blend = 0.9;
        assert!(bad.validate().is_err());

        let mut bad = quick_stage(vec![all[1].clone()], 43);
        bad.final_train.trainable = Trainable::Adapters { update_down: true };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn pretraining_splits_budget_and_reweights() {
        let corpora = family(3, 0.4, 2000);
        let all = names(&corpora);
        let base = base_model();
        let mut cfg = PretrainConfig::desk(3, 10, 47).unwrap();
        cfg.proxy_points = 20;
        cfg.probe.decay_steps = 0;
        let (_, record) = run_pretraining(&base, &all, 100, 0.2, &cfg, &corpora).unwrap();

        assert_eq!(record.train_steps, 100);
        assert_eq!(record.trace.train_loss.len(), 100);
        assert_eq!(record.probe_steps, 4 * cfg.probe.steps);
        assert_eq!(record.proxy_points.len(), 20);
        assert_eq!(record.mixture.domains(), &all[..]);
        assert_eq!(record.prev_mixture.weights(), &[1.0 / 3.0; 3]);
        let total: f64 = record.mixture.weights().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        // Overlay keeps every domain in play.
        assert!(record.mixture.weights().iter().all(|&w| w >= 0.0));
        for p in &record.proxy_points {
            assert_eq!(p.alpha.num_new(), 3);
            assert_eq!(p.losses.len(), 3);
        }
    }

    #[test]
    fn pretraining_rejects_bad_fractions() {
        let corpora = family(2, 0.5, 2000);
        let all = names(&corpora);
        let base = base_model();
        let cfg = PretrainConfig::desk(2, 5, 53).unwrap();
        assert!(run_pretraining(&base, &all, 50, 0.0, &cfg, &corpora).is_err());
        assert!(run_pretraining(&base, &all, 50, 1.0, &cfg, &corpora).is_err());
        assert!(run_pretraining(&base, &all[..1], 50, 0.2, &cfg, &corpora).is_err());
    }
}
