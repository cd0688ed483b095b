//! Reference strategies the mixing pipeline is measured against: naive
//! sequential finetuning, fixed-ratio replay, full retraining from the
//! origin model, and the probe-merge ablations. All of them emit the same
//! [`StageRecord`] stream as the pipeline so reports and ledgers line up,
//! and all share the pipeline's first stage bit for bit.

use serde::{Deserialize, Serialize};

use crate::corpus::{eval_domain_losses, DomainCorpus};
use crate::error::{Error, Result};
use crate::mixture::{expand, Mixture, ReducedWeights};
use crate::model::ModelParams;
use crate::pipeline::{
    corpora_for, first_stage, run_continual, run_pretraining, stage_train_seed, ContinualConfig,
    FinalAction, PretrainConfig, ProbeKind, StageRecord,
};
use crate::seeds;
use crate::trainer::{train, Trainable};

/// A continual-learning strategy sharing the pipeline's budget and ledger.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Strategy {
    /// Probe, fit, solve, train on the solved mixture.
    OpMix,
    /// Train each stage on the incoming domain alone.
    Sft,
    /// Keep a fixed share of the previous stage's own mixture.
    Replay { alpha_old: f64 },
    /// Retrain from the origin model on everything seen, spending the full
    /// per-stage budget once per seen domain.
    Retrain,
    /// The pipeline with the final training replaced by the merged probes.
    MergeOnly,
    /// The pipeline with full-parameter probes instead of adapters.
    FullProbes,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::OpMix => "op_mix",
            Strategy::Sft => "sft",
            Strategy::Replay { .. } => "replay",
            Strategy::Retrain => "retrain",
            Strategy::MergeOnly => "merge_only",
            Strategy::FullProbes => "full_probes",
        }
    }
}

/// Runs one strategy over the ordering under the shared config.
pub fn run_strategy(
    strategy: Strategy,
    base: &ModelParams,
    ordering: &[String],
    cfg: &ContinualConfig,
    corpora: &[DomainCorpus],
) -> Result<(ModelParams, Vec<StageRecord>)> {
    match strategy {
        Strategy::OpMix => run_continual(base, ordering, cfg, corpora),
        Strategy::Sft => continual_sft(base, ordering, cfg, corpora),
        Strategy::Replay { alpha_old } => replay_fixed(base, ordering, alpha_old, cfg, corpora),
        Strategy::Retrain => retrain(base, ordering, cfg, corpora),
        Strategy::MergeOnly => {
            let mut cfg = cfg.clone();
            cfg.template.final_action = FinalAction::MergeOnly;
            run_continual(base, ordering, &cfg, corpora)
        }
        Strategy::FullProbes => {
            let mut cfg = cfg.clone();
            cfg.template.probe_kind = ProbeKind::FullParam;
            run_continual(base, ordering, &cfg, corpora)
        }
    }
}

fn check_ordering(ordering: &[String]) -> Result<()> {
    if ordering.is_empty() {
        return Err(Error::invalid("ordering must name at least one domain"));
    }
    for (i, d) in ordering.iter().enumerate() {
        if ordering[..i].contains(d) {
            return Err(Error::invalid(format!("domain {d:?} repeats in the ordering")));
        }
    }
    Ok(())
}

/// One plain stage: train on `mixture` over the seen domains with the same
/// budget, schedule, and derived seed the pipeline would use.
fn plain_stage(
    model: &ModelParams,
    prev: &Mixture,
    mixture: Mixture,
    stage: usize,
    new_domain: &str,
    cfg: &ContinualConfig,
    corpora: &[DomainCorpus],
) -> Result<(ModelParams, StageRecord)> {
    let eval_corpora = corpora_for(corpora, mixture.domains()).map_err(|e| e.at_stage(stage))?;
    let mut tcfg = cfg.template.final_train.clone();
    tcfg.seed = stage_train_seed(cfg.seed, stage);
    let (out, trace) =
        train(model, None, &mixture, &eval_corpora, &tcfg).map_err(|e| e.at_stage(stage))?;
    let next = out.into_params();
    let final_losses =
        eval_domain_losses(&next, &eval_corpora).map_err(|e| e.at_stage(stage))?;
    let record = StageRecord {
        stage,
        prev_mixture: prev.clone(),
        new_domains: vec![new_domain.to_string()],
        eval_domains: mixture.domains().to_vec(),
        proxy_points: Vec::new(),
        law: None,
        solve: None,
        mixture,
        final_losses,
        trace,
        probe_steps: 0,
        train_steps: tcfg.steps,
    };
    Ok((next, record))
}

/// Sequential finetuning: every stage trains on the incoming domain alone.
pub fn continual_sft(
    base: &ModelParams,
    ordering: &[String],
    cfg: &ContinualConfig,
    corpora: &[DomainCorpus],
) -> Result<(ModelParams, Vec<StageRecord>)> {
    cfg.validate()?;
    check_ordering(ordering)?;
    let (mut model, first) = first_stage(base, &ordering[0], &cfg.stage1, cfg.seed, corpora)?;
    let mut records = vec![first];
    for (t, domain) in ordering.iter().enumerate().skip(1) {
        let stage = t + 1;
        let seen: Vec<String> = ordering[..=t].to_vec();
        let prev = records.last().expect("nonempty").mixture.clone();
        let mixture = Mixture::one_hot(seen, t)?;
        let (next, record) =
            plain_stage(&model, &prev, mixture, stage, domain, cfg, corpora)?;
        model = next;
        records.push(record);
    }
    Ok((model, records))
}

/// Fixed-ratio replay: each stage keeps `alpha_old` of its own previous
/// mixture and gives the rest to the incoming domain. `alpha_old = 0`
/// reduces to sequential finetuning.
pub fn replay_fixed(
    base: &ModelParams,
    ordering: &[String],
    alpha_old: f64,
    cfg: &ContinualConfig,
    corpora: &[DomainCorpus],
) -> Result<(ModelParams, Vec<StageRecord>)> {
    cfg.validate()?;
    check_ordering(ordering)?;
    if !(0.0..1.0).contains(&alpha_old) {
        return Err(Error::invalid(format!(
            "replay share must lie in [0, 1), got {alpha_old}"
        )));
    }
    let (mut model, first) = first_stage(base, &ordering[0], &cfg.stage1, cfg.seed, corpora)?;
    let mut records = vec![first];
    for (t, domain) in ordering.iter().enumerate().skip(1) {
        let stage = t + 1;
        let prev = records.last().expect("nonempty").mixture.clone();
        let alpha = ReducedWeights::new(alpha_old, vec![1.0 - alpha_old])?;
        let mixture = expand(&alpha, &prev, std::slice::from_ref(domain))?;
        let (next, record) =
            plain_stage(&model, &prev, mixture, stage, domain, cfg, corpora)?;
        model = next;
        records.push(record);
    }
    Ok((model, records))
}

/// Retraining upper baseline: stage `k` starts over from the origin model
/// and trains `k` stage-budgets on the uniform mixture over the `k` seen
/// domains. The decay tail scales with the budget; warmup does not.
pub fn retrain(
    origin: &ModelParams,
    ordering: &[String],
    cfg: &ContinualConfig,
    corpora: &[DomainCorpus],
) -> Result<(ModelParams, Vec<StageRecord>)> {
    cfg.validate()?;
    check_ordering(ordering)?;
    let per_stage = cfg.template.final_train.steps;
    let mut model = origin.clone();
    let mut records = Vec::with_capacity(ordering.len());
    for (t, domain) in ordering.iter().enumerate() {
        let stage = t + 1;
        let seen: Vec<String> = ordering[..=t].to_vec();
        let prev = if t == 0 {
            Mixture::one_hot(seen.clone(), 0)?
        } else {
            Mixture::uniform(ordering[..t].to_vec())?
        };
        let mixture = Mixture::uniform(seen.clone())?;
        let eval_corpora = corpora_for(corpora, &seen).map_err(|e| e.at_stage(stage))?;
        let mut tcfg = cfg.template.final_train.clone();
        tcfg.steps = stage * per_stage;
        tcfg.warmup_steps = cfg.stage1.warmup_steps.min(tcfg.steps / 2);
        tcfg.decay_steps = (stage * cfg.template.final_train.decay_steps)
            .min(tcfg.steps - tcfg.warmup_steps);
        tcfg.seed = seeds::derive_indexed(cfg.seed, "retrain", stage);
        let (out, trace) =
            train(origin, None, &mixture, &eval_corpora, &tcfg).map_err(|e| e.at_stage(stage))?;
        model = out.into_params();
        let final_losses =
            eval_domain_losses(&model, &eval_corpora).map_err(|e| e.at_stage(stage))?;
        records.push(StageRecord {
            stage,
            prev_mixture: prev,
            new_domains: vec![domain.clone()],
            eval_domains: seen,
            proxy_points: Vec::new(),
            law: None,
            solve: None,
            mixture,
            final_losses,
            trace,
            probe_steps: 0,
            train_steps: tcfg.steps,
        });
    }
    Ok((model, records))
}

/// Size-proportional mixture: weight of domain `i` is its token share.
pub fn erm_mixture(domains: &[String], sizes: &[usize]) -> Result<Mixture> {
    if domains.len() != sizes.len() {
        return Err(Error::invalid(format!(
            "{} domains but {} sizes",
            domains.len(),
            sizes.len()
        )));
    }
    let weights: Vec<f64> = sizes.iter().map(|&n| n as f64).collect();
    Mixture::from_unnormalized(domains.to_vec(), weights)
}

/// Pretraining comparator: the whole budget on the size-proportional
/// mixture, no probes, same schedule template as [`run_pretraining`].
pub fn run_erm_pretraining(
    base: &ModelParams,
    domains: &[String],
    sizes: &[usize],
    total_steps: usize,
    cfg: &PretrainConfig,
    corpora: &[DomainCorpus],
) -> Result<(ModelParams, StageRecord)> {
    if total_steps == 0 {
        return Err(Error::invalid("need at least one step"));
    }
    let mixture = erm_mixture(domains, sizes)?;
    let refs = corpora_for(corpora, domains)?;
    let mut tcfg = cfg.train.clone();
    tcfg.steps = total_steps;
    tcfg.warmup_steps = cfg.train.warmup_steps.min(total_steps / 2);
    tcfg.decay_steps = cfg.train.decay_steps.min(total_steps - tcfg.warmup_steps);
    tcfg.trainable = Trainable::Full;
    tcfg.seed = seeds::derive(cfg.seed, "erm");
    let (out, trace) = train(base, None, &mixture, &refs, &tcfg)?;
    let model = out.into_params();
    let final_losses = eval_domain_losses(&model, &refs)?;
    let record = StageRecord {
        stage: 1,
        prev_mixture: mixture.clone(),
        new_domains: domains.to_vec(),
        eval_domains: domains.to_vec(),
        proxy_points: Vec::new(),
        law: None,
        solve: None,
        mixture,
        final_losses,
        trace,
        probe_steps: 0,
        train_steps: total_steps,
    };
    Ok((model, record))
}

/// Reweighted pretraining next to its comparator, sharing the step budget.
pub fn pretraining_pair(
    base: &ModelParams,
    domains: &[String],
    sizes: &[usize],
    total_steps: usize,
    warmup_fraction: f64,
    cfg: &PretrainConfig,
    corpora: &[DomainCorpus],
) -> Result<(StageRecord, StageRecord)> {
    let (_, mixed) = run_pretraining(base, domains, total_steps, warmup_fraction, cfg, corpora)?;
    let (_, erm) = run_erm_pretraining(base, domains, sizes, total_steps, cfg, corpora)?;
    Ok((mixed, erm))
}

/// Sums the (probe, train) step ledgers over a strategy's records.
pub fn total_steps(records: &[StageRecord]) -> (usize, usize) {
    records
        .iter()
        .fold((0, 0), |(p, t), r| (p + r.probe_steps, t + r.train_steps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_domain, make_domain_family};
    use crate::model::ArchSpec;

    fn arch() -> ArchSpec {
        ArchSpec {
            vocab: 16,
            embed_dim: 8,
            hidden_dim: 12,
            context: 8,
        }
    }

    fn family(count: usize, similarity: f64) -> Vec<DomainCorpus> {
        let specs = make_domain_family(count, 16, similarity, 2000, 500, 99).unwrap();
        specs.iter().map(|s| generate_domain(s).unwrap()).collect()
    }

    fn names(corpora: &[DomainCorpus]) -> Vec<String> {
        corpora.iter().map(|c| c.name.clone()).collect()
    }

    fn quick_cfg(seed: u64) -> ContinualConfig {
        let mut cfg = ContinualConfig::desk(40, seed).unwrap();
        cfg.stage1.warmup_steps = 4;
        cfg.stage1.decay_steps = 4;
        cfg.template.probe.steps = 8;
        cfg.template.probe.decay_steps = 0;
        cfg
    }

    #[test]
    fn erm_mixture_is_size_proportional() {
        let domains = vec!["a".to_string(), "b".to_string()];
        let m = erm_mixture(&domains, &[100, 300]).unwrap();
        assert_eq!(m.weights(), &[0.25, 0.75]);
        assert!(erm_mixture(&domains, &[1]).is_err());
        assert!(erm_mixture(&domains, &[0, 0]).is_err());
    }

    #[test]
    fn replay_keeps_fixed_old_share() {
        let corpora = family(3, 0.5);
        let all = names(&corpora);
        let base = ModelParams::init(arch(), 7).unwrap();
        let (_, records) = replay_fixed(&base, &all, 0.1, &quick_cfg(3), &corpora).unwrap();

        let m2 = records[1].mixture.weights();
        assert!((m2[0] - 0.1).abs() < 1e-12 && (m2[1] - 0.9).abs() < 1e-12);
        let m3 = records[2].mixture.weights();
        assert!((m3[0] - 0.01).abs() < 1e-12);
        assert!((m3[1] - 0.09).abs() < 1e-12);
        assert!((m3[2] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn replay_with_zero_share_is_sft_bit_for_bit() {
        let corpora = family(2, 0.5);
        let all = names(&corpora);
        let base = ModelParams::init(arch(), 7).unwrap();
        let cfg = quick_cfg(5);
        let (m_sft, r_sft) = continual_sft(&base, &all, &cfg, &corpora).unwrap();
        let (m_rep, r_rep) = replay_fixed(&base, &all, 0.0, &cfg, &corpora).unwrap();
        assert_eq!(m_sft, m_rep);
        assert_eq!(r_sft[1].final_losses, r_rep[1].final_losses);
    }

    #[test]
    fn sft_forgets_the_first_domain() {
        // Dissimilar domains: after stage 2 trains only on the second domain,
        // held-out loss on the first moves up from its stage-1 value.
        let corpora = family(2, 0.1);
        let all = names(&corpora);
        let base = ModelParams::init(arch(), 7).unwrap();
        let mut cfg = quick_cfg(7);
        cfg.stage1.steps = 80;
        cfg.template.final_train.steps = 80;
        let (_, records) = continual_sft(&base, &all, &cfg, &corpora).unwrap();
        let after_stage1 = records[0].final_losses[0];
        let after_stage2 = records[1].final_losses[0];
        assert!(
            after_stage2 > after_stage1,
            "no forgetting: {after_stage1} -> {after_stage2}"
        );
    }

    #[test]
    fn retrain_spends_k_budgets_per_stage() {
        let corpora = family(3, 0.5);
        let all = names(&corpora);
        let base = ModelParams::init(arch(), 7).unwrap();
        let cfg = quick_cfg(9);
        let (_, records) = retrain(&base, &all, &cfg, &corpora).unwrap();
        let per_stage = cfg.template.final_train.steps;
        for (i, r) in records.iter().enumerate() {
            assert_eq!(r.train_steps, (i + 1) * per_stage);
            assert_eq!(r.probe_steps, 0);
            assert_eq!(r.eval_domains.len(), i + 1);
            let w = r.mixture.weights();
            assert!(w.iter().all(|&x| (x - 1.0 / (i + 1) as f64).abs() < 1e-12));
        }
        let (probe, train) = total_steps(&records);
        assert_eq!(probe, 0);
        assert_eq!(train, per_stage * (1 + 2 + 3));
    }

    #[test]
    fn strategies_share_the_first_stage() {
        let corpora = family(2, 0.5);
        let all = names(&corpora);
        let base = ModelParams::init(arch(), 7).unwrap();
        let cfg = quick_cfg(11);
        let (_, sft) = continual_sft(&base, &all, &cfg, &corpora).unwrap();
        let (_, mix) = run_strategy(Strategy::OpMix, &base, &all, &cfg, &corpora).unwrap();
        let (_, rep) = run_strategy(Strategy::Replay { alpha_old: 0.1 }, &base, &all, &cfg, &corpora)
            .unwrap();
        assert_eq!(sft[0].final_losses, mix[0].final_losses);
        assert_eq!(sft[0].final_losses, rep[0].final_losses);
    }

    #[test]
    fn merge_only_strategy_skips_final_training() {
        let corpora = family(2, 0.5);
        let all = names(&corpora);
        let base = ModelParams::init(arch(), 7).unwrap();
        let cfg = quick_cfg(13);
        let (_, records) =
            run_strategy(Strategy::MergeOnly, &base, &all, &cfg, &corpora).unwrap();
        assert_eq!(records[1].train_steps, 0);
        assert!(records[1].trace.train_loss.is_empty());
        assert!(records[1].probe_steps > 0);
    }

    #[test]
    fn erm_pretraining_ledgers_the_full_budget() {
        let corpora = family(3, 0.4);
        let all = names(&corpora);
        let base = ModelParams::init(arch(), 7).unwrap();
        let cfg = PretrainConfig::desk(3, 5, 17).unwrap();
        let sizes = [1000usize, 1000, 4000];
        let (_, record) =
            run_erm_pretraining(&base, &all, &sizes, 60, &cfg, &corpora).unwrap();
        assert_eq!(record.train_steps, 60);
        assert_eq!(record.probe_steps, 0);
        let w = record.mixture.weights();
        assert!((w[2] - 4000.0 / 6000.0).abs() < 1e-12);
    }
}
