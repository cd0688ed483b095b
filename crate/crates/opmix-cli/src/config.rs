//! Experiment configuration: explicit keys, strict parsing, and validation
//! that reports every violated field at once.
//!
//! The config is plain TOML. Unknown keys are rejected by the parser (typos
//! in scientific configs should fail loudly, not silently default), and
//! seeds are always explicit: nothing in a run draws from ambient
//! randomness.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use opmix::baselines::Strategy;
use opmix::corpus::{generate_domain, make_domain_family, DomainCorpus};
use opmix::model::{ArchSpec, ModelParams};
use opmix::pipeline::{ContinualConfig, ProxyScheme};
use opmix::{Error, Result};

/// Strategy names accepted in `run.strategies`.
pub const KNOWN_STRATEGIES: [&str; 6] = [
    "op_mix",
    "sft",
    "replay",
    "retrain",
    "merge_only",
    "full_probes",
];

/// One experiment: a synthetic corpus family, a model architecture, a
/// strategy matrix, and per-stage budgets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run directory; a command-line flag may override it.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub corpus: CorpusSection,
    #[serde(default)]
    pub arch: ArchSection,
    pub run: RunSection,
    pub stage: StageSection,
}

/// Synthetic Markov domain family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub count: usize,
    pub vocab: usize,
    pub similarity: f64,
    pub train_tokens: usize,
    pub heldout_tokens: usize,
    pub seed: u64,
}

/// Model shape; the vocabulary size always comes from the corpus section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSection {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub context: usize,
}

impl Default for ArchSection {
    fn default() -> Self {
        let d = ArchSpec::desk_default();
        ArchSection {
            embed_dim: d.embed_dim,
            hidden_dim: d.hidden_dim,
            context: d.context,
        }
    }
}

/// Strategy matrix: which strategies run, over which orderings, with which
/// seeds. Every cell shares the same base model and corpora.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub strategies: Vec<String>,
    /// Old-data share for the fixed-replay strategy; required iff "replay"
    /// is listed.
    #[serde(default)]
    pub replay_share: Option<f64>,
    /// Either the string "cyclic" or explicit orderings of domain names.
    #[serde(default = "cyclic")]
    pub orderings: Orderings,
    /// How many cyclic rotations to run (cyclic mode only; default: all).
    #[serde(default)]
    pub num_orderings: Option<usize>,
    pub seeds: Vec<u64>,
    /// Seed of the shared initial model.
    pub model_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Orderings {
    /// Rotations of the domain list: ordering `i` starts at domain `i`.
    Named(String),
    Explicit(Vec<Vec<String>>),
}

fn cyclic() -> Orderings {
    Orderings::Named("cyclic".to_string())
}

/// Per-stage budgets and pipeline knobs. Everything optional falls back to
/// the library's desk defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    /// Main training steps per stage.
    pub steps: usize,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub probe_blend: Option<f64>,
    /// Proxy grid size for single-new-domain stages.
    #[serde(default)]
    pub grid_points: Option<usize>,
    /// Per-probe budget override.
    #[serde(default)]
    pub probe_steps: Option<usize>,
    #[serde(default)]
    pub batch_seqs: Option<usize>,
    #[serde(default)]
    pub peak_lr: Option<f64>,
    #[serde(default)]
    pub probe_lr: Option<f64>,
}

impl ExperimentConfig {
    /// Parses and validates; the error lists every violated field.
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| Error::invalid(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads from disk, returning the verbatim text for snapshotting.
    pub fn load(path: &Path) -> Result<(ExperimentConfig, String)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.display())))?;
        let cfg = ExperimentConfig::from_toml(&text)?;
        Ok((cfg, text))
    }

    /// Checks every field and reports all violations in one error.
    pub fn validate(&self) -> Result<()> {
        let mut bad: Vec<String> = Vec::new();
        let c = &self.corpus;
        if c.count == 0 {
            bad.push("corpus.count: need at least one domain".to_string());
        }
        if c.vocab < 2 {
            bad.push("corpus.vocab: need at least two symbols".to_string());
        }
        if !(0.0..=1.0).contains(&c.similarity) {
            bad.push(format!("corpus.similarity: {} outside [0, 1]", c.similarity));
        }
        let min_tokens = self.arch.context + 1;
        if c.train_tokens < min_tokens {
            bad.push(format!(
                "corpus.train_tokens: {} < context + 1 = {min_tokens}",
                c.train_tokens
            ));
        }
        if c.heldout_tokens < min_tokens {
            bad.push(format!(
                "corpus.heldout_tokens: {} < context + 1 = {min_tokens}",
                c.heldout_tokens
            ));
        }
        if let Err(e) = self.arch_spec().validate() {
            bad.push(format!("arch: {e}"));
        }

        let r = &self.run;
        if r.strategies.is_empty() {
            bad.push("run.strategies: need at least one strategy".to_string());
        }
        let mut seen = BTreeSet::new();
        for s in &r.strategies {
            if !KNOWN_STRATEGIES.contains(&s.as_str()) {
                bad.push(format!(
                    "run.strategies: unknown strategy {s:?} (known: {})",
                    KNOWN_STRATEGIES.join(", ")
                ));
            }
            if !seen.insert(s.as_str()) {
                bad.push(format!("run.strategies: {s:?} listed twice"));
            }
        }
        match r.replay_share {
            Some(a) if !(0.0..1.0).contains(&a) => {
                bad.push(format!("run.replay_share: {a} outside [0, 1)"));
            }
            None if r.strategies.iter().any(|s| s == "replay") => {
                bad.push("run.replay_share: required when \"replay\" is listed".to_string());
            }
            _ => {}
        }
        if r.seeds.is_empty() {
            bad.push("run.seeds: need at least one seed".to_string());
        }
        let mut seed_set = BTreeSet::new();
        for s in &r.seeds {
            if !seed_set.insert(*s) {
                bad.push(format!("run.seeds: {s} listed twice"));
            }
        }
        let names = self.domain_names();
        match &r.orderings {
            Orderings::Named(n) if n == "cyclic" => {
                if let Some(k) = r.num_orderings {
                    if k == 0 || k > self.corpus.count {
                        bad.push(format!(
                            "run.num_orderings: {k} outside 1..={}",
                            self.corpus.count
                        ));
                    }
                }
            }
            Orderings::Named(n) => {
                bad.push(format!("run.orderings: unknown mode {n:?} (expected \"cyclic\")"));
            }
            Orderings::Explicit(lists) => {
                if r.num_orderings.is_some() {
                    bad.push("run.num_orderings: only applies to cyclic orderings".to_string());
                }
                if lists.is_empty() {
                    bad.push("run.orderings: need at least one ordering".to_string());
                }
                for (i, ord) in lists.iter().enumerate() {
                    if ord.is_empty() {
                        bad.push(format!("run.orderings[{i}]: empty ordering"));
                    }
                    for (j, d) in ord.iter().enumerate() {
                        if !names.contains(d) {
                            bad.push(format!(
                                "run.orderings[{i}]: domain {d:?} is not defined (corpus.count = {})",
                                self.corpus.count
                            ));
                        }
                        if ord[..j].contains(d) {
                            bad.push(format!("run.orderings[{i}]: domain {d:?} repeats"));
                        }
                    }
                }
            }
        }

        let st = &self.stage;
        if st.steps < 10 {
            bad.push(format!("stage.steps: {} below the minimum of 10", st.steps));
        }
        if let Some(l) = st.lambda {
            if !(l.is_finite() && l >= 0.0) {
                bad.push(format!("stage.lambda: {l} must be finite and >= 0"));
            }
        }
        if let Some(b) = st.probe_blend {
            if !(0.0..=0.5).contains(&b) {
                bad.push(format!("stage.probe_blend: {b} outside [0, 0.5]"));
            }
        }
        if st.grid_points == Some(0) {
            bad.push("stage.grid_points: need at least one point".to_string());
        }
        if st.probe_steps == Some(0) {
            bad.push("stage.probe_steps: need at least one step".to_string());
        }
        if st.batch_seqs == Some(0) {
            bad.push("stage.batch_seqs: need at least one sequence".to_string());
        }
        for (key, v) in [("stage.peak_lr", st.peak_lr), ("stage.probe_lr", st.probe_lr)] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    bad.push(format!("{key}: {v} must be finite and > 0"));
                }
            }
        }

        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "config invalid ({} problem{}):\n  - {}",
                bad.len(),
                if bad.len() == 1 { "" } else { "s" },
                bad.join("\n  - ")
            )))
        }
    }

    pub fn arch_spec(&self) -> ArchSpec {
        ArchSpec {
            vocab: self.corpus.vocab,
            embed_dim: self.arch.embed_dim,
            hidden_dim: self.arch.hidden_dim,
            context: self.arch.context,
        }
    }

    /// Domain names in family order.
    pub fn domain_names(&self) -> Vec<String> {
        (0..self.corpus.count).map(|i| format!("dom{i}")).collect()
    }

    /// The concrete ordering list the run executes.
    pub fn orderings(&self) -> Vec<Vec<String>> {
        let names = self.domain_names();
        match &self.run.orderings {
            Orderings::Named(_) => {
                let k = self.run.num_orderings.unwrap_or(names.len());
                (0..k)
                    .map(|start| {
                        (0..names.len())
                            .map(|j| names[(start + j) % names.len()].clone())
                            .collect()
                    })
                    .collect()
            }
            Orderings::Explicit(lists) => lists.clone(),
        }
    }

    /// Parsed strategy list in config order.
    pub fn strategies(&self) -> Result<Vec<Strategy>> {
        self.run
            .strategies
            .iter()
            .map(|s| match s.as_str() {
                "op_mix" => Ok(Strategy::OpMix),
                "sft" => Ok(Strategy::Sft),
                "replay" => Ok(Strategy::Replay {
                    alpha_old: self
                        .run
                        .replay_share
                        .ok_or_else(|| Error::invalid("replay strategy needs run.replay_share"))?,
                }),
                "retrain" => Ok(Strategy::Retrain),
                "merge_only" => Ok(Strategy::MergeOnly),
                "full_probes" => Ok(Strategy::FullProbes),
                other => Err(Error::invalid(format!("unknown strategy {other:?}"))),
            })
            .collect()
    }

    /// Generates the whole domain family.
    pub fn build_corpora(&self) -> Result<Vec<DomainCorpus>> {
        let c = &self.corpus;
        let specs = make_domain_family(
            c.count,
            c.vocab,
            c.similarity,
            c.train_tokens,
            c.heldout_tokens,
            c.seed,
        )?;
        specs.iter().map(generate_domain).collect()
    }

    /// The shared initial model every cell starts from.
    pub fn base_model(&self) -> Result<ModelParams> {
        ModelParams::init(self.arch_spec(), self.run.model_seed)
    }

    /// Desk-default continual config under `seed`, with the stage section's
    /// overrides applied to both the template and the first stage.
    pub fn continual_config(&self, seed: u64) -> Result<ContinualConfig> {
        let st = &self.stage;
        let mut cfg = ContinualConfig::desk(st.steps, seed)?;
        if let Some(l) = st.lambda {
            cfg.template.solve.lambda = l;
        }
        if let Some(b) = st.probe_blend {
            cfg.template.probe_blend = b;
        }
        if let Some(points) = st.grid_points {
            cfg.template.proxy = ProxyScheme::Grid { points };
        }
        if let Some(steps) = st.probe_steps {
            cfg.template.probe.steps = steps;
            cfg.template.probe.decay_steps = steps / 10;
        }
        if let Some(bs) = st.batch_seqs {
            cfg.stage1.batch_seqs = bs;
            cfg.template.probe.batch_seqs = bs;
            cfg.template.final_train.batch_seqs = bs;
        }
        if let Some(lr) = st.peak_lr {
            cfg.stage1.peak_lr = lr;
            cfg.template.final_train.peak_lr = lr;
        }
        if let Some(lr) = st.probe_lr {
            cfg.template.probe.peak_lr = lr;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
