//! Training loops: warmup/stable/decay schedule, plain SGD and adaptive-moment
//! updates with decoupled weight decay, full-parameter and adapters-only modes.
//!
//! Runs are deterministic functions of (base params, mixture, corpora, config):
//! batches come from a seeded sampler, updates walk tensors in a fixed order,
//! and no wall-clock or thread state leaks in.

use serde::{Deserialize, Serialize};

use crate::corpus::{eval_domain_losses, DomainCorpus, MixtureSampler};
use crate::error::{Error, Result};
use crate::mixture::{expand, Mixture, ReducedWeights};
use crate::model::{
    loss_and_grad, AdapterHyper, AdapterSet, ModelParams, ParamDelta, Scratch, Tensor2, TensorSet,
};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    AdamW { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adamw_default() -> Self {
        OptimizerKind::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Which parameters move during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    /// Every model tensor.
    Full,
    /// Dense updates restricted to the adapter-eligible weight matrices, trained
    /// as a delta over the frozen base. Exists to cross-check adapters at
    /// saturated rank against dense training.
    DenseAdaptedLayers,
    /// Only adapter factors; the base stays untouched.
    Adapters { update_down: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_seqs: usize,
    pub peak_lr: f64,
    /// Linear ramp 0 -> peak over this many leading steps.
    pub warmup_steps: usize,
    /// Linear ramp peak -> 0 over this many trailing steps; the last step runs
    /// at `peak / decay_steps`.
    pub decay_steps: usize,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub trainable: Trainable,
    pub seed: u64,
    /// Record held-out losses every this many steps (0 = only implicit finals).
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_seqs == 0 {
            return Err(Error::invalid("steps and batch_seqs must be >= 1"));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::invalid(format!(
                "peak learning rate must be positive, got {}",
                self.peak_lr
            )));
        }
        if self.warmup_steps + self.decay_steps > self.steps {
            return Err(Error::invalid(format!(
                "warmup {} + decay {} exceed {} steps",
                self.warmup_steps, self.decay_steps, self.steps
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight decay must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Learning rate at a step: warmup, stable plateau, linear decay.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    cfg.validate()?;
    if step >= cfg.steps {
        return Err(Error::invalid(format!(
            "step {step} out of range for a {}-step run",
            cfg.steps
        )));
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.peak_lr * step as f64 / cfg.warmup_steps as f64);
    }
    let decay_start = cfg.steps - cfg.decay_steps;
    if step >= decay_start {
        let remaining = cfg.steps - step; // last step -> 1
        return Ok(cfg.peak_lr * remaining as f64 / cfg.decay_steps as f64);
    }
    Ok(cfg.peak_lr)
}

/// Per-step record of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub lr: Vec<f64>,
    pub train_loss: Vec<f64>,
    pub eval_domains: Vec<String>,
    /// Sparse held-out rows: (step index the eval ran after, loss per domain).
    pub eval_rows: Vec<(usize, Vec<f64>)>,
}

impl LossTrace {
    fn new(eval_domains: Vec<String>) -> Self {
        LossTrace {
            lr: Vec::new(),
            train_loss: Vec::new(),
            eval_domains,
            eval_rows: Vec::new(),
        }
    }

    /// Mean training loss over the leading fraction of steps.
    pub fn head_mean(&self, fraction: f64) -> f64 {
        let n = ((self.train_loss.len() as f64 * fraction).ceil() as usize).max(1);
        self.train_loss[..n.min(self.train_loss.len())].iter().sum::<f64>() / n as f64
    }

    /// Mean training loss over the trailing fraction of steps.
    pub fn tail_mean(&self, fraction: f64) -> f64 {
        let n = ((self.train_loss.len() as f64 * fraction).ceil() as usize).max(1);
        let start = self.train_loss.len().saturating_sub(n);
        let slice = &self.train_loss[start..];
        slice.iter().sum::<f64>() / slice.len() as f64
    }

    pub fn final_evals(&self) -> Option<&[f64]> {
        self.eval_rows.last().map(|(_, v)| v.as_slice())
    }

    /// CSV: `step, lr, train_loss`, then one column per eval domain. Eval cells
    /// are filled on the step their measurement followed, empty elsewhere.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,train_loss");
        for d in &self.eval_domains {
            out.push_str(",eval_");
            out.push_str(d);
        }
        out.push('\n');
        let mut next_eval = 0usize;
        for step in 0..self.train_loss.len() {
            out.push_str(&format!("{},{},{}", step, self.lr[step], self.train_loss[step]));
            if next_eval < self.eval_rows.len() && self.eval_rows[next_eval].0 == step {
                for v in &self.eval_rows[next_eval].1 {
                    out.push_str(&format!(",{v}"));
                }
                next_eval += 1;
            } else {
                for _ in &self.eval_domains {
                    out.push(',');
                }
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone)]
pub enum TrainedOutput {
    Params(ModelParams),
    Adapters(AdapterSet),
}

impl TrainedOutput {
    pub fn into_params(self) -> ModelParams {
        match self {
            TrainedOutput::Params(p) => p,
            TrainedOutput::Adapters(_) => panic!("expected full parameters, got adapters"),
        }
    }

    pub fn into_adapters(self) -> AdapterSet {
        match self {
            TrainedOutput::Adapters(a) => a,
            TrainedOutput::Params(_) => panic!("expected adapters, got full parameters"),
        }
    }
}

/// First/second moment state for one tensor.
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

struct Optimizer {
    kind: OptimizerKind,
    weight_decay: f64,
    t: usize,
    slots: Vec<Option<Moments>>,
}

impl Optimizer {
    fn new(kind: OptimizerKind, weight_decay: f64, n_slots: usize) -> Self {
        Optimizer {
            kind,
            weight_decay,
            t: 0,
            slots: (0..n_slots).map(|_| None).collect(),
        }
    }

    fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Updates one tensor in place. `decay` selects decoupled weight decay.
    fn update(&mut self, slot: usize, params: &mut [f64], grads: &[f64], lr: f64, decay: bool) {
        debug_assert_eq!(params.len(), grads.len());
        let wd = if decay { self.weight_decay } else { 0.0 };
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, &g) in params.iter_mut().zip(grads) {
                    *p -= lr * (g + wd * *p);
                }
            }
            OptimizerKind::AdamW { beta1, beta2, eps } => {
                let state = self.slots[slot].get_or_insert_with(|| Moments {
                    m: vec![0.0; params.len()],
                    v: vec![0.0; params.len()],
                });
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for i in 0..params.len() {
                    let g = grads[i];
                    state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
                    state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
                    let mhat = state.m[i] / bc1;
                    let vhat = state.v[i] / bc2;
                    params[i] -= lr * (mhat / (vhat.sqrt() + eps) + wd * params[i]);
                }
            }
        }
    }
}

struct StepContext<'a> {
    sampler: MixtureSampler<'a>,
    grads: TensorSet,
    scratch: Scratch,
    trace: LossTrace,
}

impl<'a> StepContext<'a> {
    fn new(
        base: &ModelParams,
        mixture: &Mixture,
        corpora: &[&'a DomainCorpus],
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let sampler = MixtureSampler::new(
            mixture,
            corpora,
            cfg.batch_seqs,
            base.spec().context,
            seeds::derive(cfg.seed, "batches"),
        )?;
        Ok(StepContext {
            sampler,
            grads: TensorSet::zeros(base.spec()),
            scratch: Scratch::new(base.spec()),
            trace: LossTrace::new(corpora.iter().map(|c| c.name.clone()).collect()),
        })
    }

    /// One forward/backward on the next batch; returns the loss or the
    /// divergence error.
    fn grad_step(&mut self, params: &ModelParams, step: usize, lr: f64) -> Result<f64> {
        let (batch, _) = self.sampler.next_batch();
        let loss = loss_and_grad(params, &batch, &mut self.grads, &mut self.scratch)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step, loss });
        }
        self.trace.lr.push(lr);
        self.trace.train_loss.push(loss);
        Ok(loss)
    }

    fn maybe_eval(
        &mut self,
        params: &ModelParams,
        corpora: &[&DomainCorpus],
        cfg: &TrainConfig,
        step: usize,
    ) -> Result<()> {
        if cfg.eval_every == 0 {
            return Ok(());
        }
        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps {
            let losses = eval_domain_losses(params, corpora)?;
            self.trace.eval_rows.push((step, losses));
        }
        Ok(())
    }
}

/// Trains from `base` on the mixture. `Full` and `DenseAdaptedLayers` return
/// trained parameters; `Adapters` requires `init_adapters`, never touches the
/// base, and returns the trained adapter set.
pub fn train(
    base: &ModelParams,
    init_adapters: Option<AdapterSet>,
    mixture: &Mixture,
    corpora: &[&DomainCorpus],
    cfg: &TrainConfig,
) -> Result<(TrainedOutput, LossTrace)> {
    cfg.validate()?;
    match (cfg.trainable, init_adapters) {
        (Trainable::Adapters { update_down }, Some(adapters)) => {
            train_adapters(base, adapters, update_down, mixture, corpora, cfg)
        }
        (Trainable::Adapters { .. }, None) => Err(Error::invalid(
            "adapters-only training needs an initial adapter set",
        )),
        (_, Some(_)) => Err(Error::invalid(
            "initial adapters given but the trainable set is dense",
        )),
        (Trainable::Full, None) => train_dense(base, false, mixture, corpora, cfg),
        (Trainable::DenseAdaptedLayers, None) => train_dense(base, true, mixture, corpora, cfg),
    }
}

fn train_dense(
    base: &ModelParams,
    adapted_only: bool,
    mixture: &Mixture,
    corpora: &[&DomainCorpus],
    cfg: &TrainConfig,
) -> Result<(TrainedOutput, LossTrace)> {
    let mut ctx = StepContext::new(base, mixture, corpora, cfg)?;
    let mut params = base.clone();
    // deltas over the frozen base for the restricted mode
    let mut delta_hidden = Tensor2::zeros(params.tensors().hidden_w.rows(), params.tensors().hidden_w.cols());
    let mut delta_output = Tensor2::zeros(params.tensors().output_w.rows(), params.tensors().output_w.cols());
    let mut opt = Optimizer::new(cfg.optimizer, cfg.weight_decay, 5);

    for step in 0..cfg.steps {
        let lr = lr_at(step, cfg)?;
        ctx.grad_step(&params, step, lr)?;
        opt.begin_step();
        if adapted_only {
            opt.update(1, delta_hidden.data_mut(), ctx.grads.hidden_w.data(), lr, true);
            opt.update(3, delta_output.data_mut(), ctx.grads.output_w.data(), lr, true);
            rebuild_sum(&mut params.tensors_mut().hidden_w, &base.tensors().hidden_w, &delta_hidden);
            rebuild_sum(&mut params.tensors_mut().output_w, &base.tensors().output_w, &delta_output);
        } else {
            let t = params.tensors_mut();
            opt.update(0, t.embedding.data_mut(), ctx.grads.embedding.data(), lr, true);
            opt.update(1, t.hidden_w.data_mut(), ctx.grads.hidden_w.data(), lr, true);
            opt.update(2, t.hidden_b.data_mut(), ctx.grads.hidden_b.data(), lr, false);
            opt.update(3, t.output_w.data_mut(), ctx.grads.output_w.data(), lr, true);
            opt.update(4, t.output_b.data_mut(), ctx.grads.output_b.data(), lr, false);
        }
        ctx.maybe_eval(&params, corpora, cfg, step)?;
    }
    Ok((TrainedOutput::Params(params), ctx.trace))
}

/// `dst = base + delta`, elementwise in a fixed order.
fn rebuild_sum(dst: &mut Tensor2, base: &Tensor2, delta: &Tensor2) {
    let (d, b, s) = (dst.data_mut(), base.data(), delta.data());
    for i in 0..d.len() {
        d[i] = b[i] + s[i];
    }
}

fn train_adapters(
    base: &ModelParams,
    mut adapters: AdapterSet,
    update_down: bool,
    mixture: &Mixture,
    corpora: &[&DomainCorpus],
    cfg: &TrainConfig,
) -> Result<(TrainedOutput, LossTrace)> {
    let spec = *base.spec();
    let mut ctx = StepContext::new(base, mixture, corpora, cfg)?;
    // effective = base + adapter deltas, rebuilt exactly after every update
    let mut effective = base.plus(&adapters.delta(&spec)?, 1.0)?;
    let n = adapters.adapters().len();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.weight_decay, 2 * n);

    for step in 0..cfg.steps {
        let lr = lr_at(step, cfg)?;
        ctx.grad_step(&effective, step, lr)?;
        opt.begin_step();
        for (i, ad) in adapters.adapters_mut().iter_mut().enumerate() {
            let dw = ctx
                .grads
                .get(ad.layer.tensor_name())
                .expect("adapter layer maps to a tensor");
            let up_grad = up_factor_grad(dw, &ad.down, ad.scale);
            if update_down {
                let down_grad = down_factor_grad(&ad.up, dw, ad.scale);
                opt.update(2 * i + 1, ad.down.data_mut(), down_grad.data(), lr, true);
            }
            opt.update(2 * i, ad.up.data_mut(), up_grad.data(), lr, true);
        }
        for ad in adapters.adapters() {
            let dense = ad.delta();
            let name = ad.layer.tensor_name();
            rebuild_sum(
                effective.tensors_mut().get_mut(name).unwrap(),
                base.tensors().get(name).unwrap(),
                &dense,
            );
        }
        ctx.maybe_eval(&effective, corpora, cfg, step)?;
    }
    Ok((TrainedOutput::Adapters(adapters), ctx.trace))
}

/// d loss / d up = scale * dW * down^T.
fn up_factor_grad(dw: &Tensor2, down: &Tensor2, scale: f64) -> Tensor2 {
    let mut out = Tensor2::zeros(dw.rows(), down.rows());
    for i in 0..dw.rows() {
        let dwr = dw.row(i);
        let row = out.row_mut(i);
        for (k, slot) in row.iter_mut().enumerate() {
            *slot = scale * crate::model::dot(dwr, down.row(k));
        }
    }
    out
}

/// d loss / d down = scale * up^T * dW.
fn down_factor_grad(up: &Tensor2, dw: &Tensor2, scale: f64) -> Tensor2 {
    let mut out = Tensor2::zeros(up.cols(), dw.cols());
    for i in 0..up.rows() {
        let upr = up.row(i);
        let dwr = dw.row(i);
        for (k, &u) in upr.iter().enumerate() {
            if u == 0.0 {
                continue;
            }
            let row = out.row_mut(k);
            for (o, &d) in row.iter_mut().zip(dwr) {
                *o += u * d;
            }
        }
    }
    if scale != 1.0 {
        out.scale(scale);
    }
    out
}

/// Which side of the old/new blend a probe trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeRole {
    /// Mostly the previous mixture, a `blend` share spread over the new domains.
    Old,
    /// Mostly the indexed new domain, a `blend` share on the previous mixture.
    New(usize),
}

/// The mixture a probe trains on. `blend` is the minority share (0.1 by default
/// elsewhere); `blend = 0` gives the pure mixture for the role.
pub fn probe_mixture(
    prev: &Mixture,
    new_domains: &[String],
    role: ProbeRole,
    blend: f64,
) -> Result<Mixture> {
    if !(0.0..=0.5).contains(&blend) {
        return Err(Error::invalid(format!(
            "probe blend must lie in [0, 0.5], got {blend}"
        )));
    }
    let k = new_domains.len();
    if k == 0 {
        return Err(Error::invalid("probe mixture needs at least one new domain"));
    }
    let alpha = match role {
        ProbeRole::Old => ReducedWeights::new(1.0 - blend, vec![blend / k as f64; k])?,
        ProbeRole::New(idx) => {
            if idx >= k {
                return Err(Error::invalid(format!(
                    "probe role indexes new domain {idx}, only {k} given"
                )));
            }
            let mut new = vec![0.0; k];
            new[idx] = 1.0 - blend;
            ReducedWeights::new(blend, new)?
        }
    };
    expand(&alpha, prev, new_domains)
}

/// Trains a fresh low-rank probe on the role's blend and returns the adapters.
#[allow(clippy::too_many_arguments)]
pub fn train_probe(
    base: &ModelParams,
    prev: &Mixture,
    new_domains: &[String],
    role: ProbeRole,
    blend: f64,
    hyper: AdapterHyper,
    corpora: &[&DomainCorpus],
    cfg: &TrainConfig,
) -> Result<(AdapterSet, LossTrace)> {
    if !matches!(cfg.trainable, Trainable::Adapters { .. }) {
        return Err(Error::invalid("probe config must train adapters only"));
    }
    let mixture = probe_mixture(prev, new_domains, role, blend)?;
    let adapters = AdapterSet::seeded(base.spec(), hyper, seeds::derive(cfg.seed, "adapter_init"))?;
    let (out, trace) = train(base, Some(adapters), &mixture, corpora, cfg)?;
    Ok((out.into_adapters(), trace))
}

/// Full-parameter reference run; returns the parameter movement from base.
pub fn train_full_reference(
    base: &ModelParams,
    mixture: &Mixture,
    corpora: &[&DomainCorpus],
    cfg: &TrainConfig,
) -> Result<(ParamDelta, LossTrace)> {
    if cfg.trainable != Trainable::Full {
        return Err(Error::invalid("reference run must train the full parameter set"));
    }
    let (out, trace) = train(base, None, mixture, corpora, cfg)?;
    Ok((ParamDelta::between(base, &out.into_params())?, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_domain, make_domain_family};
    use crate::model::{apply_adapters, ArchSpec};

    fn small_arch() -> ArchSpec {
        ArchSpec {
            vocab: 12,
            embed_dim: 8,
            hidden_dim: 12,
            context: 8,
        }
    }

    fn cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_seqs: 8,
            peak_lr: 0.01,
            warmup_steps: steps / 10,
            decay_steps: steps / 10,
            optimizer: OptimizerKind::adamw_default(),
            weight_decay: 0.01,
            trainable: Trainable::Full,
            seed: 7,
            eval_every: 0,
        }
    }

    fn corpus_pair() -> Vec<crate::corpus::DomainCorpus> {
        make_domain_family(2, 12, 0.2, 6000, 1000, 13)
            .unwrap()
            .iter()
            .map(|s| generate_domain(s).unwrap())
            .collect()
    }

    #[test]
    fn schedule_has_warmup_plateau_and_decay() {
        let c = TrainConfig {
            steps: 10,
            warmup_steps: 3,
            decay_steps: 4,
            ..cfg(10)
        };
        let lrs: Vec<f64> = (0..10).map(|s| lr_at(s, &c).unwrap()).collect();
        assert_eq!(lrs[0], 0.0);
        assert!((lrs[1] - 0.01 / 3.0).abs() < 1e-18);
        assert_eq!(lrs[3], 0.01);
        assert_eq!(lrs[5], 0.01);
        assert_eq!(lrs[6], 0.01); // first decay step is still at peak
        assert!((lrs[9] - 0.01 / 4.0).abs() < 1e-18, "last step at peak/decay_steps");
        assert!(lr_at(10, &c).is_err());
        let bad = TrainConfig {
            warmup_steps: 8,
            decay_steps: 8,
            ..c
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let base = ModelParams::init(small_arch(), 3).unwrap();
        let corpora = corpus_pair();
        let refs: Vec<&_> = corpora.iter().collect();
        let mix = Mixture::one_hot(vec!["dom0".into(), "dom1".into()], 0).unwrap();
        let c = cfg(300);
        let (out_a, trace) = train(&base, None, &mix, &refs, &c).unwrap();
        let (out_b, _) = train(&base, None, &mix, &refs, &c).unwrap();
        match (&out_a, &out_b) {
            (TrainedOutput::Params(a), TrainedOutput::Params(b)) => assert_eq!(a, b),
            _ => panic!("full training returns params"),
        }
        assert!(
            trace.tail_mean(0.1) < trace.head_mean(0.1),
            "loss should fall: head {} tail {}",
            trace.head_mean(0.1),
            trace.tail_mean(0.1)
        );
    }

    #[test]
    fn absurd_learning_rate_reports_divergence() {
        let base = ModelParams::init(small_arch(), 3).unwrap();
        let corpora = corpus_pair();
        let refs: Vec<&_> = corpora.iter().collect();
        let mix = Mixture::uniform(vec!["dom0".into(), "dom1".into()]).unwrap();
        let c = TrainConfig {
            peak_lr: 1e150,
            warmup_steps: 0,
            decay_steps: 0,
            optimizer: OptimizerKind::Sgd,
            ..cfg(50)
        };
        match train(&base, None, &mix, &refs, &c) {
            Err(Error::TrainingDiverged { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn adapter_training_moves_only_adapted_tensors() {
        let base = ModelParams::init(small_arch(), 3).unwrap();
        let corpora = corpus_pair();
        let refs: Vec<&_> = corpora.iter().collect();
        let mix = Mixture::one_hot(vec!["dom0".into(), "dom1".into()], 1).unwrap();
        let c = TrainConfig {
            trainable: Trainable::Adapters { update_down: true },
            ..cfg(100)
        };
        let adapters = AdapterSet::seeded(
            base.spec(),
            AdapterHyper::desk_default(),
            1,
        )
        .unwrap();
        let (out, _) = train(&base, Some(adapters), &mix, &refs, &c).unwrap();
        let trained = out.into_adapters();
        assert!(trained.adapters().iter().all(|a| a.up.data().iter().any(|&v| v != 0.0)));
        let eff = apply_adapters(&base, &trained).unwrap();
        assert_eq!(eff.tensors().embedding, base.tensors().embedding);
        assert_eq!(eff.tensors().hidden_b, base.tensors().hidden_b);
        assert_eq!(eff.tensors().output_b, base.tensors().output_b);
        assert_ne!(eff.tensors().hidden_w, base.tensors().hidden_w);
        assert_ne!(eff.tensors().output_w, base.tensors().output_w);
    }

    #[test]
    fn saturated_adapters_match_dense_training_bitwise() {
        // identity down factor, unit scale, up-only updates, plain SGD, no decay:
        // the up factor receives exactly the dense gradient, so both paths build
        // base + sum(updates) with identical arithmetic.
        let base = ModelParams::init(small_arch(), 3).unwrap();
        let corpora = corpus_pair();
        let refs: Vec<&_> = corpora.iter().collect();
        let mix = Mixture::uniform(vec!["dom0".into(), "dom1".into()]).unwrap();
        let mut c = cfg(40);
        c.optimizer = OptimizerKind::Sgd;
        c.weight_decay = 0.0;
        c.warmup_steps = 0;
        c.decay_steps = 0;

        let dense_cfg = TrainConfig {
            trainable: Trainable::DenseAdaptedLayers,
            ..c.clone()
        };
        let (dense_out, _) = train(&base, None, &mix, &refs, &dense_cfg).unwrap();
        let dense = dense_out.into_params();

        let adapter_cfg = TrainConfig {
            trainable: Trainable::Adapters { update_down: false },
            ..c
        };
        let (ad_out, _) = train(
            &base,
            Some(AdapterSet::identity(base.spec())),
            &mix,
            &refs,
            &adapter_cfg,
        )
        .unwrap();
        let merged = apply_adapters(&base, &ad_out.into_adapters()).unwrap();
        assert_eq!(merged, dense, "saturated-rank adapters must equal dense training");
    }

    #[test]
    fn probe_mixture_blends_roles() {
        let prev = Mixture::new(
            vec!["a".into(), "b".into()],
            vec![0.25, 0.75],
        )
        .unwrap();
        let new = vec!["c".into()];
        let old = probe_mixture(&prev, &new, ProbeRole::Old, 0.1).unwrap();
        let got: Vec<f64> = old.weights().to_vec();
        for (g, w) in got.iter().zip([0.225, 0.675, 0.1]) {
            assert!((g - w).abs() < 1e-12);
        }
        let newm = probe_mixture(&prev, &new, ProbeRole::New(0), 0.1).unwrap();
        for (g, w) in newm.weights().iter().zip([0.025, 0.075, 0.9]) {
            assert!((g - w).abs() < 1e-12);
        }
        // blend 0 degenerates to the pure mixtures
        let pure_old = probe_mixture(&prev, &new, ProbeRole::Old, 0.0).unwrap();
        assert_eq!(pure_old.weights()[2], 0.0);
        let pure_new = probe_mixture(&prev, &new, ProbeRole::New(0), 0.0).unwrap();
        assert_eq!(pure_new.weights()[2], 1.0);
    }

    #[test]
    fn trace_csv_has_eval_columns() {
        let base = ModelParams::init(small_arch(), 3).unwrap();
        let corpora = corpus_pair();
        let refs: Vec<&_> = corpora.iter().collect();
        let mix = Mixture::uniform(vec!["dom0".into(), "dom1".into()]).unwrap();
        let c = TrainConfig {
            eval_every: 20,
            ..cfg(40)
        };
        let (_, trace) = train(&base, None, &mix, &refs, &c).unwrap();
        assert_eq!(trace.eval_rows.len(), 2);
        let csv = trace.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "step,lr,train_loss,eval_dom0,eval_dom1");
        assert_eq!(csv.lines().count(), 41);
        let eval_line = csv.lines().nth(20).unwrap();
        assert_eq!(eval_line.split(',').count(), 5);
        assert!(!eval_line.ends_with(','));
    }
}
