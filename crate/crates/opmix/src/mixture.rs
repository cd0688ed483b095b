//! Mixtures over named data domains and the simplex geometry used everywhere else.
//!
//! Two coordinate systems appear throughout the crate:
//!
//! * a [`Mixture`]: a full distribution over `m` named domains, and
//! * [`ReducedWeights`]: a point on the reduced simplex `(old, new_1 .. new_K)` that
//!   splits mass between "everything trained so far" and `K` incoming domains.
//!
//! [`expand`] maps reduced weights back to a full mixture by scattering the old mass
//! across the previous mixture in proportion, which keeps the relative proportions of
//! old domains intact. That preservation is the property the continual pipeline leans
//! on: choosing a point on the reduced simplex can never reshuffle the old mix.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for "weights sum to one" checks.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Hard cap on lattice enumeration size.
pub const LATTICE_POINT_CAP: usize = 1_000_000;

fn check_weights(weights: &[f64], what: &str) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::invalid(format!("{what}: no weights given")));
    }
    for (i, &w) in weights.iter().enumerate() {
        if !w.is_finite() || w < 0.0 {
            return Err(Error::invalid(format!(
                "{what}: weight {i} is {w}, must be finite and >= 0"
            )));
        }
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::invalid(format!(
            "{what}: weights sum to {sum}, expected 1 within {WEIGHT_SUM_TOL}"
        )));
    }
    Ok(())
}

fn check_domain_name(name: &str) -> Result<()> {
    if name.is_empty() {
        return Err(Error::invalid("domain name must be non-empty"));
    }
    if name.chars().any(|c| c == '\t' || c == '\n' || c == '\r') {
        return Err(Error::invalid(format!(
            "domain name {name:?} contains tab or newline"
        )));
    }
    Ok(())
}

/// A probability distribution over named data domains.
///
/// Invariants, enforced at construction and deserialization: at least one domain,
/// unique record-safe names, finite non-negative weights summing to one within
/// [`WEIGHT_SUM_TOL`]. Zero-weight domains are allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMixture")]
pub struct Mixture {
    domains: Vec<String>,
    weights: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMixture {
    domains: Vec<String>,
    weights: Vec<f64>,
}

impl TryFrom<RawMixture> for Mixture {
    type Error = Error;
    fn try_from(raw: RawMixture) -> Result<Self> {
        Mixture::new(raw.domains, raw.weights)
    }
}

impl Mixture {
    pub fn new(domains: Vec<String>, weights: Vec<f64>) -> Result<Self> {
        if domains.len() != weights.len() {
            return Err(Error::invalid(format!(
                "mixture has {} domains but {} weights",
                domains.len(),
                weights.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &domains {
            check_domain_name(name)?;
            if !seen.insert(name.as_str()) {
                return Err(Error::invalid(format!("duplicate domain name {name:?}")));
            }
        }
        check_weights(&weights, "mixture")?;
        Ok(Mixture { domains, weights })
    }

    /// Equal weight on every domain.
    pub fn uniform(domains: Vec<String>) -> Result<Self> {
        let n = domains.len();
        if n == 0 {
            return Err(Error::invalid("uniform mixture over zero domains"));
        }
        let w = 1.0 / n as f64;
        Mixture::new(domains, vec![w; n])
    }

    /// All mass on `domains[index]`.
    pub fn one_hot(domains: Vec<String>, index: usize) -> Result<Self> {
        if index >= domains.len() {
            return Err(Error::invalid(format!(
                "one-hot index {index} out of range for {} domains",
                domains.len()
            )));
        }
        let mut w = vec![0.0; domains.len()];
        w[index] = 1.0;
        Mixture::new(domains, w)
    }

    /// Builds a mixture from non-negative weights that need not sum to one.
    pub fn from_unnormalized(domains: Vec<String>, weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !sum.is_finite() || sum <= 0.0 {
            return Err(Error::invalid(format!(
                "cannot normalize weights with sum {sum}"
            )));
        }
        let weights = weights.into_iter().map(|w| w / sum).collect();
        Mixture::new(domains, weights)
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        false // at least one domain by construction
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|d| d == name)
    }

    pub fn weight_of(&self, name: &str) -> Option<f64> {
        self.index_of(name).map(|i| self.weights[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.domains
            .iter()
            .map(String::as_str)
            .zip(self.weights.iter().copied())
    }

    /// Serializes to the plain text record: one `name<TAB>weight` line per domain,
    /// weights printed with 17 significant digits so the round trip is bit-stable.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, w) in self.iter() {
            out.push_str(name);
            out.push('\t');
            out.push_str(&format!("{w:.16e}"));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut domains = Vec::new();
        let mut weights = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (name, value) = line.split_once('\t').ok_or_else(|| {
                Error::invalid(format!("mixture record line {}: missing tab", lineno + 1))
            })?;
            let w: f64 = value.parse().map_err(|e| {
                Error::invalid(format!(
                    "mixture record line {}: bad weight {value:?}: {e}",
                    lineno + 1
                ))
            })?;
            domains.push(name.to_string());
            weights.push(w);
        }
        Mixture::new(domains, weights)
    }
}

/// A point on the reduced simplex: mass kept on the previous mixture plus one
/// weight per incoming domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawReduced")]
pub struct ReducedWeights {
    old_weight: f64,
    new_weights: Vec<f64>,
}

#[derive(Deserialize)]
struct RawReduced {
    old_weight: f64,
    new_weights: Vec<f64>,
}

impl TryFrom<RawReduced> for ReducedWeights {
    type Error = Error;
    fn try_from(raw: RawReduced) -> Result<Self> {
        ReducedWeights::new(raw.old_weight, raw.new_weights)
    }
}

impl ReducedWeights {
    pub fn new(old_weight: f64, new_weights: Vec<f64>) -> Result<Self> {
        if new_weights.is_empty() {
            return Err(Error::invalid("reduced weights need at least one new domain"));
        }
        let mut all = Vec::with_capacity(new_weights.len() + 1);
        all.push(old_weight);
        all.extend_from_slice(&new_weights);
        check_weights(&all, "reduced weights")?;
        Ok(ReducedWeights {
            old_weight,
            new_weights,
        })
    }

    /// Number of new-domain coordinates `K`.
    pub fn num_new(&self) -> usize {
        self.new_weights.len()
    }

    pub fn old_weight(&self) -> f64 {
        self.old_weight
    }

    pub fn new_weights(&self) -> &[f64] {
        &self.new_weights
    }

    /// All `K + 1` coordinates, old weight first.
    pub fn full(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.new_weights.len() + 1);
        v.push(self.old_weight);
        v.extend_from_slice(&self.new_weights);
        v
    }

    pub fn from_full(coords: &[f64]) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::invalid(
                "reduced weights need at least two coordinates (old + one new)",
            ));
        }
        ReducedWeights::new(coords[0], coords[1..].to_vec())
    }
}

/// A reference mixture with strictly positive weight on every domain, usable as the
/// target of a KL penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Mixture")]
pub struct MixturePrior(Mixture);

impl TryFrom<Mixture> for MixturePrior {
    type Error = Error;
    fn try_from(m: Mixture) -> Result<Self> {
        MixturePrior::new(m)
    }
}

impl MixturePrior {
    pub fn new(mixture: Mixture) -> Result<Self> {
        if let Some((name, _)) = mixture.iter().find(|(_, w)| *w <= 0.0) {
            return Err(Error::invalid(format!(
                "prior must have full support; domain {name:?} has zero weight"
            )));
        }
        Ok(MixturePrior(mixture))
    }

    pub fn uniform(domains: Vec<String>) -> Result<Self> {
        MixturePrior::new(Mixture::uniform(domains)?)
    }

    pub fn as_mixture(&self) -> &Mixture {
        &self.0
    }
}

/// Scatters reduced weights onto the full domain list: old mass spread over `prev`
/// in proportion, one fresh slot per new domain. The result is renormalized to
/// absorb rounding, which cannot change any weight ratio.
pub fn expand(alpha: &ReducedWeights, prev: &Mixture, new_domains: &[String]) -> Result<Mixture> {
    if alpha.num_new() != new_domains.len() {
        return Err(Error::invalid(format!(
            "reduced weights cover {} new domains but {} names were given",
            alpha.num_new(),
            new_domains.len()
        )));
    }
    for name in new_domains {
        if prev.index_of(name).is_some() {
            return Err(Error::invalid(format!(
                "new domain {name:?} already present in previous mixture"
            )));
        }
    }
    let mut domains = prev.domains().to_vec();
    domains.extend_from_slice(new_domains);
    let mut weights: Vec<f64> = prev
        .weights()
        .iter()
        .map(|w| alpha.old_weight() * w)
        .collect();
    weights.extend_from_slice(alpha.new_weights());
    Mixture::from_unnormalized(domains, weights)
}

/// Reweights an existing domain set in place: `p_i = alpha_old * prev_i + alpha_i`,
/// one new coordinate per existing domain. The collapse counterpart of [`expand`]
/// for runs where no domain is actually new.
pub fn overlay(alpha: &ReducedWeights, prev: &Mixture) -> Result<Mixture> {
    if alpha.num_new() != prev.len() {
        return Err(Error::invalid(format!(
            "overlay needs one coordinate per existing domain: {} vs {}",
            alpha.num_new(),
            prev.len()
        )));
    }
    let weights: Vec<f64> = prev
        .weights()
        .iter()
        .zip(alpha.new_weights())
        .map(|(w, a)| alpha.old_weight() * w + a)
        .collect();
    Mixture::from_unnormalized(prev.domains().to_vec(), weights)
}

/// KL divergence `sum p_i ln(p_i / q_i)` in nats.
///
/// Requires the same domains in the same order. Terms with `p_i = 0` contribute
/// zero; `q_i = 0` where `p_i > 0` is undefined and reported as an error.
pub fn kl_divergence(p: &Mixture, q: &Mixture) -> Result<f64> {
    if p.domains() != q.domains() {
        return Err(Error::invalid(
            "kl divergence requires identical domain lists in identical order",
        ));
    }
    let mut sum = 0.0;
    for ((name, pw), (_, qw)) in p.iter().zip(q.iter()) {
        if pw == 0.0 {
            continue;
        }
        if qw == 0.0 {
            return Err(Error::DivergenceUndefined {
                domain: name.to_string(),
            });
        }
        if pw == qw {
            continue; // ln(1) contributes exactly zero; keeps kl(p, p) == 0.0 bitwise
        }
        sum += pw * (pw / qw).ln();
    }
    // Gibbs' inequality bounds the true value below by -|1 - sum(q)|-ish; anything
    // more negative than rounding noise would be a bug upstream.
    if sum < 0.0 {
        debug_assert!(sum > -1e-8, "kl divergence {sum} below rounding tolerance");
        sum = 0.0;
    }
    Ok(sum)
}

/// Draws one point from the symmetric Dirichlet with the given concentration.
/// Deterministic in `seed`; `dim = 1` returns exactly `[1.0]`.
pub fn sample_dirichlet(dim: usize, concentration: f64, seed: u64) -> Result<Vec<f64>> {
    sample_dirichlet_with(dim, concentration, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// As [`sample_dirichlet`] but advancing a caller-owned generator.
pub fn sample_dirichlet_with(
    dim: usize,
    concentration: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(Error::invalid("dirichlet dimension must be >= 1"));
    }
    if !(concentration.is_finite() && concentration > 0.0) {
        return Err(Error::invalid(format!(
            "dirichlet concentration must be finite and > 0, got {concentration}"
        )));
    }
    let gamma = Gamma::new(concentration, 1.0)
        .map_err(|e| Error::invalid(format!("gamma distribution: {e}")))?;
    // Gamma draws can underflow to zero jointly for small concentrations; retry
    // on the same stream so the function stays deterministic.
    for _ in 0..64 {
        let draws: Vec<f64> = (0..dim).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum.is_finite() && sum > 0.0 {
            return Ok(draws.into_iter().map(|g| g / sum).collect());
        }
    }
    Err(Error::invalid(
        "dirichlet sampling underflowed 64 times; concentration too small",
    ))
}

/// The `n`-point interior grid on the two-block simplex: new weight
/// `k / (n + 1)` for `k = 1 ..= n`, old weight the complement.
pub fn grid_old_new(n: usize) -> Result<Vec<ReducedWeights>> {
    if n == 0 {
        return Err(Error::invalid("grid size must be >= 1"));
    }
    (1..=n)
        .map(|k| {
            let a_new = k as f64 / (n + 1) as f64;
            ReducedWeights::new(1.0 - a_new, vec![a_new])
        })
        .collect()
}

/// Every point of the uniform lattice on the reduced simplex with `new_dims` new
/// coordinates and spacing `1 / steps`, boundary included.
///
/// Points are emitted with the old coordinate descending, so a first-strictly-better
/// scan resolves objective ties toward larger old weight.
pub fn simplex_lattice(new_dims: usize, steps: usize) -> Result<Vec<ReducedWeights>> {
    if new_dims == 0 || steps == 0 {
        return Err(Error::invalid("lattice needs new_dims >= 1 and steps >= 1"));
    }
    let count = lattice_size(new_dims, steps)?;
    let mut out = Vec::with_capacity(count);
    let mut coords = vec![0usize; new_dims + 1];
    fill_lattice(&mut out, &mut coords, 0, steps, steps);
    debug_assert_eq!(out.len(), count);
    Ok(out)
}

fn lattice_size(new_dims: usize, steps: usize) -> Result<usize> {
    // C(steps + new_dims, new_dims), checked against the cap.
    let mut size: usize = 1;
    for i in 1..=new_dims {
        size = size
            .checked_mul(steps + i)
            .ok_or(Error::ResourceLimit {
                what: "lattice points",
                requested: usize::MAX,
                cap: LATTICE_POINT_CAP,
            })?
            / i;
        if size > LATTICE_POINT_CAP {
            return Err(Error::ResourceLimit {
                what: "lattice points",
                requested: size,
                cap: LATTICE_POINT_CAP,
            });
        }
    }
    Ok(size)
}

fn fill_lattice(
    out: &mut Vec<ReducedWeights>,
    coords: &mut [usize],
    dim: usize,
    remaining: usize,
    steps: usize,
) {
    if dim == coords.len() - 1 {
        coords[dim] = remaining;
        let w: Vec<f64> = coords.iter().map(|&c| c as f64 / steps as f64).collect();
        out.push(
            ReducedWeights::from_full(&w).expect("lattice coordinates sum to one by construction"),
        );
        return;
    }
    for c in (0..=remaining).rev() {
        coords[dim] = c;
        fill_lattice(out, coords, dim + 1, remaining - c, steps);
    }
}
