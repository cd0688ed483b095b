//! Synthetic text domains: order-1 Markov chains over a shared vocabulary.
//!
//! A domain family blends one shared transition matrix with per-domain random
//! matrices; the `similarity` knob moves the family from identical (1.0) to
//! mutually antagonistic (0.0). Train and held-out streams of a domain use
//! structurally distinct sub-seeds, so no sampling randomness is shared.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::{sample_dirichlet_with, Mixture};
use crate::model::{ModelParams, Scratch, Tensor2, TokenBatch};
use crate::seeds;

/// Full recipe for one domain; regeneration from this spec is bit-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub vocab: usize,
    /// Row-stochastic `vocab x vocab` transition matrix.
    pub transition: Tensor2,
    /// Distribution of the first token of each stream.
    pub initial: Vec<f64>,
    pub train_tokens: usize,
    pub heldout_tokens: usize,
    pub seed: u64,
}

fn check_distribution(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::invalid(format!("{what}: negative or non-finite entry")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("{what}: sums to {sum}, expected 1")));
    }
    Ok(())
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::invalid("domain vocabulary must have >= 2 tokens"));
        }
        if self.name.is_empty() {
            return Err(Error::invalid("domain name must be non-empty"));
        }
        if self.transition.rows() != self.vocab || self.transition.cols() != self.vocab {
            return Err(Error::invalid(format!(
                "transition matrix is {}x{}, expected {v}x{v}",
                self.transition.rows(),
                self.transition.cols(),
                v = self.vocab
            )));
        }
        for r in 0..self.vocab {
            check_distribution(self.transition.row(r), &format!("transition row {r}"))?;
        }
        if self.initial.len() != self.vocab {
            return Err(Error::invalid("initial distribution length != vocab"));
        }
        check_distribution(&self.initial, "initial distribution")?;
        if self.train_tokens < 2 || self.heldout_tokens < 2 {
            return Err(Error::invalid("token budgets must be >= 2"));
        }
        Ok(())
    }

    /// Stationary distribution by power iteration from uniform.
    pub fn stationary(&self) -> Vec<f64> {
        let v = self.vocab;
        let mut pi = vec![1.0 / v as f64; v];
        let mut next = vec![0.0; v];
        for _ in 0..2000 {
            next.fill(0.0);
            for (a, &pa) in pi.iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                for (b, &t) in self.transition.row(a).iter().enumerate() {
                    next[b] += pa * t;
                }
            }
            let delta: f64 = pi.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
            std::mem::swap(&mut pi, &mut next);
            if delta < 1e-14 {
                break;
            }
        }
        pi
    }

    /// Entropy rate in nats under the stationary distribution: the held-out
    /// cross-entropy floor for any next-token model. Zero for deterministic chains.
    pub fn entropy_rate(&self) -> f64 {
        let pi = self.stationary();
        let mut h = 0.0;
        for (a, &pa) in pi.iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            let mut row_h = 0.0;
            for &t in self.transition.row(a) {
                if t > 0.0 {
                    row_h -= t * t.ln();
                }
            }
            h += pa * row_h;
        }
        h
    }
}

/// Generated token streams for one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainCorpus {
    pub name: String,
    pub vocab: usize,
    pub train: Vec<u32>,
    pub heldout: Vec<u32>,
    /// Sub-seeds the streams were drawn with; distinct by construction.
    pub train_seed: u64,
    pub heldout_seed: u64,
}

fn sample_from(dist: &[f64], r: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        acc += p;
        if r < acc {
            return i;
        }
    }
    // numerical slack at the top of the CDF
    dist.len() - 1
}

fn markov_stream(spec: &DomainSpec, tokens: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(tokens);
    let mut cur = sample_from(&spec.initial, rng.random::<f64>());
    out.push(cur as u32);
    while out.len() < tokens {
        cur = sample_from(spec.transition.row(cur), rng.random::<f64>());
        out.push(cur as u32);
    }
    out
}

/// Draws the train and held-out streams for a domain, deterministic in the
/// domain spec alone.
pub fn generate_domain(spec: &DomainSpec) -> Result<DomainCorpus> {
    spec.validate()?;
    let train_seed = seeds::derive(spec.seed, "train");
    let heldout_seed = seeds::derive(spec.seed, "held_out");
    assert_ne!(train_seed, heldout_seed, "stream sub-seeds must differ");
    Ok(DomainCorpus {
        name: spec.name.clone(),
        vocab: spec.vocab,
        train: markov_stream(spec, spec.train_tokens, train_seed),
        heldout: markov_stream(spec, spec.heldout_tokens, heldout_seed),
        train_seed,
        heldout_seed,
    })
}

fn random_stochastic(vocab: usize, rng: &mut ChaCha8Rng) -> Tensor2 {
    let mut t = Tensor2::zeros(vocab, vocab);
    for r in 0..vocab {
        let row = sample_dirichlet_with(vocab, 1.0, rng).expect("valid dirichlet parameters");
        t.row_mut(r).copy_from_slice(&row);
    }
    t
}

/// Builds `count` domain specs whose transition matrices are
/// `similarity * shared + (1 - similarity) * own_i`. Uniform initial distribution.
pub fn make_domain_family(
    count: usize,
    vocab: usize,
    similarity: f64,
    train_tokens: usize,
    heldout_tokens: usize,
    seed: u64,
) -> Result<Vec<DomainSpec>> {
    if count == 0 {
        return Err(Error::invalid("domain family needs at least one domain"));
    }
    if vocab < 2 {
        return Err(Error::invalid("domain family needs vocab >= 2"));
    }
    if !(0.0..=1.0).contains(&similarity) {
        return Err(Error::invalid(format!(
            "similarity must lie in [0, 1], got {similarity}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "family_shared"));
    let shared = random_stochastic(vocab, &mut rng);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut own_rng = ChaCha8Rng::seed_from_u64(seeds::derive_indexed(seed, "family_own", i));
        let own = random_stochastic(vocab, &mut own_rng);
        let mut transition = Tensor2::zeros(vocab, vocab);
        for r in 0..vocab {
            let dst = transition.row_mut(r);
            for (c, d) in dst.iter_mut().enumerate() {
                *d = similarity * shared.at(r, c) + (1.0 - similarity) * own.at(r, c);
            }
        }
        out.push(DomainSpec {
            name: format!("dom{i}"),
            vocab,
            transition,
            initial: vec![1.0 / vocab as f64; vocab],
            train_tokens,
            heldout_tokens,
            seed: seeds::derive_indexed(seed, "family_stream", i),
        });
    }
    Ok(out)
}

/// Mean over rows of the total-variation distance between two domains' transitions.
pub fn mean_row_tv(a: &DomainSpec, b: &DomainSpec) -> Result<f64> {
    if a.vocab != b.vocab {
        return Err(Error::invalid("domains have different vocabularies"));
    }
    let mut acc = 0.0;
    for r in 0..a.vocab {
        let tv: f64 = a
            .transition
            .row(r)
            .iter()
            .zip(b.transition.row(r))
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / 2.0;
        acc += tv;
    }
    Ok(acc / a.vocab as f64)
}

/// Draws training batches from a mixture over domains: each sequence picks its
/// domain i.i.d. from the mixture, then reads the next window of that domain's
/// train stream (wrapping at the end). Deterministic given the seed.
pub struct MixtureSampler<'a> {
    weights: Vec<f64>,
    corpora: Vec<&'a DomainCorpus>,
    cursors: Vec<usize>,
    batch_seqs: usize,
    seq_len: usize,
    rng: ChaCha8Rng,
}

impl<'a> MixtureSampler<'a> {
    /// `corpora` must cover every positive-weight domain of the mixture.
    pub fn new(
        mixture: &Mixture,
        corpora: &[&'a DomainCorpus],
        batch_seqs: usize,
        seq_len: usize,
        seed: u64,
    ) -> Result<Self> {
        if batch_seqs == 0 || seq_len < 2 {
            return Err(Error::invalid("need batch_seqs >= 1 and seq_len >= 2"));
        }
        let mut weights = Vec::new();
        let mut picked = Vec::new();
        for (name, w) in mixture.iter() {
            if w == 0.0 {
                continue;
            }
            let corpus = corpora
                .iter()
                .find(|c| c.name == name)
                .ok_or_else(|| Error::invalid(format!("no corpus for mixture domain {name:?}")))?;
            if corpus.train.len() < seq_len {
                return Err(Error::invalid(format!(
                    "domain {name:?} train stream ({} tokens) shorter than one sequence ({seq_len})",
                    corpus.train.len()
                )));
            }
            weights.push(w);
            picked.push(*corpus);
        }
        if picked.is_empty() {
            return Err(Error::invalid("mixture has no positive-weight domain"));
        }
        Ok(MixtureSampler {
            cursors: vec![0; picked.len()],
            corpora: picked,
            weights,
            batch_seqs,
            seq_len,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn draw_domain(&mut self) -> usize {
        let total: f64 = self.weights.iter().sum();
        let r = self.rng.random::<f64>() * total;
        sample_from_unnormalized(&self.weights, r)
    }

    /// Next batch plus the sampled corpus index per sequence.
    pub fn next_batch(&mut self) -> (TokenBatch, Vec<usize>) {
        let mut tokens = Vec::with_capacity(self.batch_seqs * self.seq_len);
        let mut provenance = Vec::with_capacity(self.batch_seqs);
        for _ in 0..self.batch_seqs {
            let d = self.draw_domain();
            provenance.push(d);
            let stream = &self.corpora[d].train;
            if self.cursors[d] + self.seq_len > stream.len() {
                self.cursors[d] = 0;
            }
            tokens.extend_from_slice(&stream[self.cursors[d]..self.cursors[d] + self.seq_len]);
            self.cursors[d] += self.seq_len;
        }
        let batch = TokenBatch::new(tokens, self.seq_len).expect("constructed shape is valid");
        (batch, provenance)
    }

    /// Name of the corpus behind a provenance index.
    pub fn domain_name(&self, index: usize) -> &str {
        &self.corpora[index].name
    }
}

fn sample_from_unnormalized(weights: &[f64], r: f64) -> usize {
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if r < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Mean held-out cross-entropy per domain, in nats.
///
/// Held-out streams are segmented into consecutive context-length windows and
/// only within-window transitions are scored, exactly as [`mean_loss`] would.
/// Because the model conditions on the current token alone, the mean is
/// aggregated from per-transition counts: one forward pass per vocabulary entry
/// instead of one per position.
pub fn eval_domain_losses(params: &ModelParams, corpora: &[&DomainCorpus]) -> Result<Vec<f64>> {
    let spec = params.spec();
    let context = spec.context;
    let mut scratch = Scratch::new(spec);
    let mut out = Vec::with_capacity(corpora.len());
    for corpus in corpora {
        if corpus.vocab != spec.vocab {
            return Err(Error::invalid(format!(
                "corpus {:?} vocab {} != model vocab {}",
                corpus.name, corpus.vocab, spec.vocab
            )));
        }
        if corpus.heldout.len() < 2 {
            return Err(Error::invalid(format!(
                "corpus {:?} held-out stream too short",
                corpus.name
            )));
        }
        let mut counts = vec![0u64; spec.vocab * spec.vocab];
        let mut total = 0u64;
        for (i, w) in corpus.heldout.windows(2).enumerate() {
            if (i + 1) % context == 0 {
                continue; // transition would span a window boundary
            }
            counts[w[0] as usize * spec.vocab + w[1] as usize] += 1;
            total += 1;
        }
        let mut sum = 0.0;
        for cur in 0..spec.vocab {
            let row = &counts[cur * spec.vocab..(cur + 1) * spec.vocab];
            if row.iter().all(|&c| c == 0) {
                continue;
            }
            let logprobs = crate::model::logit_logprobs(params, cur, &mut scratch);
            for (next, &c) in row.iter().enumerate() {
                if c > 0 {
                    sum -= c as f64 * logprobs[next];
                }
            }
        }
        out.push(sum / total as f64);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{mean_loss, ArchSpec};

    fn tiny_spec(vocab: usize, trans: Vec<Vec<f64>>) -> DomainSpec {
        DomainSpec {
            name: "t".into(),
            vocab,
            transition: Tensor2::from_rows(trans).unwrap(),
            initial: vec![1.0 / vocab as f64; vocab],
            train_tokens: 64,
            heldout_tokens: 64,
            seed: 5,
        }
    }

    #[test]
    fn validation_catches_non_stochastic_rows() {
        let mut spec = tiny_spec(2, vec![vec![0.5, 0.5], vec![0.7, 0.2]]);
        assert!(spec.validate().is_err());
        spec.transition = Tensor2::from_rows(vec![vec![0.5, 0.5], vec![0.8, 0.2]]).unwrap();
        assert!(spec.validate().is_ok());
    }

    #[test]
    fn entropy_rate_limits() {
        // deterministic cycle: zero entropy
        let det = tiny_spec(3, vec![
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![1.0, 0.0, 0.0],
        ]);
        assert!(det.entropy_rate() < 1e-12);
        // uniform rows: ln(vocab)
        let uni = tiny_spec(4, vec![vec![0.25; 4]; 4]);
        assert!((uni.entropy_rate() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn generation_is_deterministic_with_distinct_streams() {
        let spec = tiny_spec(2, vec![vec![0.5, 0.5], vec![0.8, 0.2]]);
        let a = generate_domain(&spec).unwrap();
        let b = generate_domain(&spec).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.train_seed, a.heldout_seed);
        assert_ne!(a.train[..32], a.heldout[..32]);
        assert_eq!(a.train.len(), 64);
        assert!(a.train.iter().all(|&t| t < 2));
    }

    #[test]
    fn family_blends_shared_and_own_structure() {
        let same = make_domain_family(3, 8, 1.0, 100, 100, 7).unwrap();
        assert!((mean_row_tv(&same[0], &same[1]).unwrap()).abs() < 1e-12);
        for spec in &same {
            spec.validate().unwrap();
        }
        let apart = make_domain_family(3, 8, 0.0, 100, 100, 7).unwrap();
        let tv = mean_row_tv(&apart[0], &apart[1]).unwrap();
        // independent Dirichlet(1) rows sit far apart; measured ~0.5 at this size
        assert!(tv > 0.25, "similarity 0 gave mean row TV {tv}");
        let half = make_domain_family(3, 8, 0.5, 100, 100, 7).unwrap();
        let tv_half = mean_row_tv(&half[0], &half[1]).unwrap();
        assert!(tv_half < tv, "blending should shrink TV: {tv_half} vs {tv}");
    }

    #[test]
    fn sampler_counts_match_mixture_within_three_sigma() {
        let specs = make_domain_family(2, 8, 0.5, 4096, 64, 3).unwrap();
        let corpora: Vec<DomainCorpus> =
            specs.iter().map(|s| generate_domain(s).unwrap()).collect();
        let refs: Vec<&DomainCorpus> = corpora.iter().collect();
        let mix = Mixture::new(
            vec!["dom0".into(), "dom1".into()],
            vec![0.3, 0.7],
        )
        .unwrap();
        let mut sampler = MixtureSampler::new(&mix, &refs, 8, 8, 11).unwrap();
        let mut count0 = 0usize;
        let draws = 500 * 8;
        for _ in 0..500 {
            let (_, prov) = sampler.next_batch();
            count0 += prov.iter().filter(|&&d| d == 0).count();
        }
        let mean = draws as f64 * 0.3;
        let sigma = (draws as f64 * 0.3 * 0.7).sqrt();
        assert!(
            (count0 as f64 - mean).abs() < 3.0 * sigma,
            "domain 0 drawn {count0} times, expected {mean} +- {sigma}"
        );
    }

    #[test]
    fn sampler_skips_zero_weight_and_rejects_missing_corpora() {
        let specs = make_domain_family(2, 8, 0.5, 64, 64, 3).unwrap();
        let corpora: Vec<DomainCorpus> =
            specs.iter().map(|s| generate_domain(s).unwrap()).collect();
        let refs: Vec<&DomainCorpus> = corpora.iter().collect();
        let mix = Mixture::new(vec!["dom0".into(), "dom1".into()], vec![1.0, 0.0]).unwrap();
        let mut sampler = MixtureSampler::new(&mix, &refs[..1], 4, 4, 1).unwrap();
        for _ in 0..50 {
            let (_, prov) = sampler.next_batch();
            assert!(prov.iter().all(|&d| sampler.domain_name(d) == "dom0"));
        }
        // positive weight on a domain without a corpus is a configuration error
        let bad = Mixture::new(vec!["dom0".into(), "ghost".into()], vec![0.5, 0.5]).unwrap();
        assert!(MixtureSampler::new(&bad, &refs, 4, 4, 1).is_err());
    }

    #[test]
    fn eval_matches_direct_batch_loss() {
        let arch = ArchSpec {
            vocab: 8,
            embed_dim: 4,
            hidden_dim: 6,
            context: 4,
        };
        let params = ModelParams::init(arch, 2).unwrap();
        let spec = DomainSpec {
            heldout_tokens: 32,
            ..tiny_spec(8, vec![vec![0.125; 8]; 8])
        };
        let corpus = generate_domain(&spec).unwrap();
        let direct = mean_loss(
            &params,
            &TokenBatch::new(corpus.heldout.clone(), 4).unwrap(),
        )
        .unwrap();
        let fast = eval_domain_losses(&params, &[&corpus]).unwrap()[0];
        assert!(
            (direct - fast).abs() < 1e-12,
            "count-based eval {fast} vs direct {direct}"
        );
    }
}
