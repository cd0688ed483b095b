//! The desk-scale next-token model and its low-rank adapters.
//!
//! Architecture: token embedding -> hidden linear + tanh -> output projection.
//! The model conditions on the current token only, so it can represent any
//! order-1 transition table given enough hidden width, which keeps every loss
//! surface in this crate grounded in a known optimum.
//!
//! Everything is f64 and row-major. Gradients are hand-derived; the analytic
//! backward pass is checked against central finite differences in the tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::ReducedWeights;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub vocab: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Tokens per training sequence; predictions run over positions `1..context`.
    pub context: usize,
}

impl ArchSpec {
    pub fn desk_default() -> Self {
        ArchSpec {
            vocab: 32,
            embed_dim: 16,
            hidden_dim: 32,
            context: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.embed_dim == 0 || self.hidden_dim == 0 || self.context < 2 {
            return Err(Error::invalid(format!(
                "arch spec out of range: vocab {} (>=2), embed {} (>=1), hidden {} (>=1), context {} (>=2)",
                self.vocab, self.embed_dim, self.hidden_dim, self.context
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (v, d, h) = (self.vocab, self.embed_dim, self.hidden_dim);
        v * d + h * d + h + v * h + v
    }
}

/// Dense row-major matrix. Vectors are `n x 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor2::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let r = rows.len();
        if r == 0 {
            return Err(Error::invalid("matrix needs at least one row"));
        }
        let c = rows[0].len();
        if c == 0 || rows.iter().any(|row| row.len() != c) {
            return Err(Error::invalid("matrix rows must be non-empty and equal length"));
        }
        Ok(Tensor2 {
            rows: r,
            cols: c,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        Tensor2 {
            rows,
            cols,
            data: (0..rows * cols).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    /// `self += s * other`; shapes must match.
    pub fn add_scaled(&mut self, other: &Tensor2, s: f64) {
        assert_eq!(
            (self.rows, self.cols),
            (other.rows, other.cols),
            "tensor shape mismatch"
        );
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// `scale * self * other`, a fresh dense product.
    pub fn matmul_scaled(&self, other: &Tensor2, scale: f64) -> Tensor2 {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Tensor2::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let lhs_row = self.row(i);
            let out_row = out.row_mut(i);
            for (k, &l) in lhs_row.iter().enumerate() {
                if l == 0.0 {
                    continue;
                }
                let rhs_row = other.row(k);
                for (o, &r) in out_row.iter_mut().zip(rhs_row) {
                    *o += l * r;
                }
            }
            if scale != 1.0 {
                for o in out_row.iter_mut() {
                    *o *= scale;
                }
            }
        }
        out
    }
}

/// Dot product with four accumulators; fixed order, so results are reproducible.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(out: &mut [f64], s: f64, x: &[f64]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, &v) in out.iter_mut().zip(x) {
        *o += s * v;
    }
}

/// The five tensors of the model, shared between parameters, deltas, and gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSet {
    pub embedding: Tensor2, // vocab x embed
    pub hidden_w: Tensor2,  // hidden x embed
    pub hidden_b: Tensor2,  // hidden x 1
    pub output_w: Tensor2,  // vocab x hidden
    pub output_b: Tensor2,  // vocab x 1
}

pub const TENSOR_NAMES: [&str; 5] = ["embedding", "hidden_w", "hidden_b", "output_w", "output_b"];

impl TensorSet {
    pub fn zeros(spec: &ArchSpec) -> Self {
        TensorSet {
            embedding: Tensor2::zeros(spec.vocab, spec.embed_dim),
            hidden_w: Tensor2::zeros(spec.hidden_dim, spec.embed_dim),
            hidden_b: Tensor2::zeros(spec.hidden_dim, 1),
            output_w: Tensor2::zeros(spec.vocab, spec.hidden_dim),
            output_b: Tensor2::zeros(spec.vocab, 1),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2> {
        match name {
            "embedding" => Some(&self.embedding),
            "hidden_w" => Some(&self.hidden_w),
            "hidden_b" => Some(&self.hidden_b),
            "output_w" => Some(&self.output_w),
            "output_b" => Some(&self.output_b),
            _ => None,
        }
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor2> {
        match name {
            "embedding" => Some(&mut self.embedding),
            "hidden_w" => Some(&mut self.hidden_w),
            "hidden_b" => Some(&mut self.hidden_b),
            "output_w" => Some(&mut self.output_w),
            "output_b" => Some(&mut self.output_b),
            _ => None,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &Tensor2)> {
        [
            ("embedding", &self.embedding),
            ("hidden_w", &self.hidden_w),
            ("hidden_b", &self.hidden_b),
            ("output_w", &self.output_w),
            ("output_b", &self.output_b),
        ]
        .into_iter()
    }

    pub fn add_scaled(&mut self, other: &TensorSet, s: f64) {
        self.embedding.add_scaled(&other.embedding, s);
        self.hidden_w.add_scaled(&other.hidden_w, s);
        self.hidden_b.add_scaled(&other.hidden_b, s);
        self.output_w.add_scaled(&other.output_w, s);
        self.output_b.add_scaled(&other.output_b, s);
    }

    pub fn fill(&mut self, v: f64) {
        self.embedding.fill(v);
        self.hidden_w.fill(v);
        self.hidden_b.fill(v);
        self.output_w.fill(v);
        self.output_b.fill(v);
    }

    pub fn frobenius_norm(&self) -> f64 {
        (self.embedding.frobenius_sq()
            + self.hidden_w.frobenius_sq()
            + self.hidden_b.frobenius_sq()
            + self.output_w.frobenius_sq()
            + self.output_b.frobenius_sq())
        .sqrt()
    }

    pub fn param_count(&self) -> usize {
        self.iter().map(|(_, t)| t.data().len()).sum()
    }
}

/// Full model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    spec: ArchSpec,
    tensors: TensorSet,
}

pub const DEFAULT_INIT_STD: f64 = 0.02;

impl ModelParams {
    /// Seeded Gaussian init (std [`DEFAULT_INIT_STD`]) on weights, zero biases.
    pub fn init(spec: ArchSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = TensorSet {
            embedding: Tensor2::gaussian(spec.vocab, spec.embed_dim, DEFAULT_INIT_STD, &mut rng),
            hidden_w: Tensor2::gaussian(spec.hidden_dim, spec.embed_dim, DEFAULT_INIT_STD, &mut rng),
            hidden_b: Tensor2::zeros(spec.hidden_dim, 1),
            output_w: Tensor2::gaussian(spec.vocab, spec.hidden_dim, DEFAULT_INIT_STD, &mut rng),
            output_b: Tensor2::zeros(spec.vocab, 1),
        };
        Ok(ModelParams { spec, tensors })
    }

    pub fn zeros(spec: ArchSpec) -> Result<Self> {
        spec.validate()?;
        Ok(ModelParams {
            tensors: TensorSet::zeros(&spec),
            spec,
        })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn tensors(&self) -> &TensorSet {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut TensorSet {
        &mut self.tensors
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    /// `self + scale * delta` as a fresh model.
    pub fn plus(&self, delta: &ParamDelta, scale: f64) -> Result<ModelParams> {
        if delta.spec != self.spec {
            return Err(Error::invalid("delta arch spec does not match model"));
        }
        let mut out = self.clone();
        out.tensors.add_scaled(&delta.tensors, scale);
        Ok(out)
    }

    pub fn add_in_place(&mut self, delta: &ParamDelta, scale: f64) -> Result<()> {
        if delta.spec != self.spec {
            return Err(Error::invalid("delta arch spec does not match model"));
        }
        self.tensors.add_scaled(&delta.tensors, scale);
        Ok(())
    }
}

/// A dense parameter difference, same shape as the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDelta {
    spec: ArchSpec,
    tensors: TensorSet,
}

impl ParamDelta {
    pub fn zeros(spec: ArchSpec) -> Result<Self> {
        spec.validate()?;
        Ok(ParamDelta {
            tensors: TensorSet::zeros(&spec),
            spec,
        })
    }

    /// `trained - base`.
    pub fn between(base: &ModelParams, trained: &ModelParams) -> Result<Self> {
        if base.spec != trained.spec {
            return Err(Error::invalid("arch specs differ"));
        }
        let mut tensors = trained.tensors.clone();
        tensors.add_scaled(&base.tensors, -1.0);
        Ok(ParamDelta {
            spec: base.spec,
            tensors,
        })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn tensors(&self) -> &TensorSet {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut TensorSet {
        &mut self.tensors
    }

    pub fn add_scaled(&mut self, other: &ParamDelta, s: f64) -> Result<()> {
        if other.spec != self.spec {
            return Err(Error::invalid("arch specs differ"));
        }
        self.tensors.add_scaled(&other.tensors, s);
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.tensors.frobenius_norm()
    }
}

/// Frobenius distance between two parameter sets.
pub fn param_distance(a: &ModelParams, b: &ModelParams) -> Result<f64> {
    Ok(ParamDelta::between(a, b)?.frobenius_norm())
}

/// Layers that can carry a low-rank adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterLayer {
    Hidden,
    Output,
}

impl AdapterLayer {
    pub fn tensor_name(self) -> &'static str {
        match self {
            AdapterLayer::Hidden => "hidden_w",
            AdapterLayer::Output => "output_w",
        }
    }

    /// (out, in) dims of the adapted weight matrix.
    pub fn dims(self, spec: &ArchSpec) -> (usize, usize) {
        match self {
            AdapterLayer::Hidden => (spec.hidden_dim, spec.embed_dim),
            AdapterLayer::Output => (spec.vocab, spec.hidden_dim),
        }
    }
}

/// Low-rank additive adapter on one weight matrix: the effective weight is
/// `W + scale * up * down` with `up: out x rank` (zero init) and
/// `down: rank x in` (seeded Gaussian). `scale = scale_numerator / rank`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankAdapter {
    pub layer: AdapterLayer,
    pub up: Tensor2,
    pub down: Tensor2,
    pub rank: usize,
    pub scale: f64,
}

impl LowRankAdapter {
    pub fn seeded(
        layer: AdapterLayer,
        spec: &ArchSpec,
        rank: usize,
        scale_numerator: f64,
        init_std: f64,
        seed: u64,
    ) -> Result<Self> {
        let (out, inp) = layer.dims(spec);
        if rank == 0 || rank > out.min(inp) {
            return Err(Error::invalid(format!(
                "adapter rank {rank} out of range 1..={} for {layer:?}",
                out.min(inp)
            )));
        }
        if !(scale_numerator.is_finite() && scale_numerator > 0.0) {
            return Err(Error::invalid(format!(
                "adapter scale numerator must be positive, got {scale_numerator}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(LowRankAdapter {
            layer,
            up: Tensor2::zeros(out, rank),
            down: Tensor2::gaussian(rank, inp, init_std, &mut rng),
            rank,
            scale: scale_numerator / rank as f64,
        })
    }

    /// Saturated-rank adapter with `down` pinned to the identity and unit scale,
    /// so training only `up` reproduces dense updates of the target layer exactly.
    pub fn identity(layer: AdapterLayer, spec: &ArchSpec) -> Self {
        let (out, inp) = layer.dims(spec);
        LowRankAdapter {
            layer,
            up: Tensor2::zeros(out, inp),
            down: Tensor2::identity(inp),
            rank: inp,
            scale: 1.0,
        }
    }

    /// Dense contribution `scale * up * down`.
    pub fn delta(&self) -> Tensor2 {
        self.up.matmul_scaled(&self.down, self.scale)
    }
}

/// Hyperparameters for building a fresh adapter set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterHyper {
    pub rank: usize,
    pub scale_numerator: f64,
    pub init_std: f64,
}

impl AdapterHyper {
    /// Desk-scale default: rank 4, scale numerator 8 (effective scale 2).
    pub fn desk_default() -> Self {
        AdapterHyper {
            rank: 4,
            scale_numerator: 8.0,
            init_std: DEFAULT_INIT_STD,
        }
    }

    /// The rank-16 preset (scale numerator 32) used by larger reference runs.
    pub fn rank16_preset() -> Self {
        AdapterHyper {
            rank: 16,
            scale_numerator: 32.0,
            init_std: DEFAULT_INIT_STD,
        }
    }
}

/// One adapter per adaptable layer, applied and merged as a unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSet {
    adapters: Vec<LowRankAdapter>,
}

impl AdapterSet {
    pub fn seeded(spec: &ArchSpec, hyper: AdapterHyper, seed: u64) -> Result<Self> {
        let adapters = vec![
            LowRankAdapter::seeded(
                AdapterLayer::Hidden,
                spec,
                hyper.rank,
                hyper.scale_numerator,
                hyper.init_std,
                seed,
            )?,
            LowRankAdapter::seeded(
                AdapterLayer::Output,
                spec,
                hyper.rank,
                hyper.scale_numerator,
                hyper.init_std,
                seed.wrapping_add(1),
            )?,
        ];
        Ok(AdapterSet { adapters })
    }

    /// Saturated identity adapters on both layers (see [`LowRankAdapter::identity`]).
    pub fn identity(spec: &ArchSpec) -> Self {
        AdapterSet {
            adapters: vec![
                LowRankAdapter::identity(AdapterLayer::Hidden, spec),
                LowRankAdapter::identity(AdapterLayer::Output, spec),
            ],
        }
    }

    pub fn adapters(&self) -> &[LowRankAdapter] {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut [LowRankAdapter] {
        &mut self.adapters
    }

    /// Total trainable entries across factors.
    pub fn param_count(&self) -> usize {
        self.adapters
            .iter()
            .map(|a| a.up.data().len() + a.down.data().len())
            .sum()
    }

    /// Dense delta over the full parameter shape; non-adapted tensors stay zero.
    pub fn delta(&self, spec: &ArchSpec) -> Result<ParamDelta> {
        let mut out = ParamDelta::zeros(*spec)?;
        for ad in &self.adapters {
            let (rows, cols) = ad.layer.dims(spec);
            if ad.up.rows() != rows || ad.down.cols() != cols {
                return Err(Error::invalid(format!(
                    "adapter on {:?} has shape {}x{} for a {}x{} layer",
                    ad.layer,
                    ad.up.rows(),
                    ad.down.cols(),
                    rows,
                    cols
                )));
            }
            let dense = ad.delta();
            out.tensors_mut()
                .get_mut(ad.layer.tensor_name())
                .expect("adapter layer maps to a tensor")
                .add_scaled(&dense, 1.0);
        }
        Ok(out)
    }
}

/// Base weights plus every adapter contribution; unlisted tensors are bit-identical.
pub fn apply_adapters(base: &ModelParams, set: &AdapterSet) -> Result<ModelParams> {
    let delta = set.delta(base.spec())?;
    base.plus(&delta, 1.0)
}

/// Convex merge of `K + 1` adapter sets (old first) at the given reduced weights.
pub fn merge_adapters(
    spec: &ArchSpec,
    sets: &[AdapterSet],
    weights: &ReducedWeights,
) -> Result<ParamDelta> {
    let coeffs = weights.full();
    if sets.len() != coeffs.len() {
        return Err(Error::invalid(format!(
            "{} adapter sets for {} merge weights",
            sets.len(),
            coeffs.len()
        )));
    }
    let mut out = ParamDelta::zeros(*spec)?;
    for (set, &c) in sets.iter().zip(&coeffs) {
        out.add_scaled(&set.delta(spec)?, c)?;
    }
    Ok(out)
}

/// Convex merge of dense deltas at the given reduced weights, old first.
pub fn merge_full(
    spec: &ArchSpec,
    deltas: &[ParamDelta],
    weights: &ReducedWeights,
) -> Result<ParamDelta> {
    let coeffs = weights.full();
    if deltas.len() != coeffs.len() {
        return Err(Error::invalid(format!(
            "{} deltas for {} merge weights",
            deltas.len(),
            coeffs.len()
        )));
    }
    let mut out = ParamDelta::zeros(*spec)?;
    for (d, &c) in deltas.iter().zip(&coeffs) {
        out.add_scaled(d, c)?;
    }
    Ok(out)
}

/// A batch of equal-length token sequences, flattened row-major.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    tokens: Vec<u32>,
    seq_len: usize,
}

impl TokenBatch {
    pub fn new(tokens: Vec<u32>, seq_len: usize) -> Result<Self> {
        if seq_len < 2 {
            return Err(Error::invalid("sequences need at least two tokens"));
        }
        if tokens.is_empty() || tokens.len() % seq_len != 0 {
            return Err(Error::invalid(format!(
                "{} tokens do not form whole sequences of length {seq_len}",
                tokens.len()
            )));
        }
        Ok(TokenBatch { tokens, seq_len })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn num_seqs(&self) -> usize {
        self.tokens.len() / self.seq_len
    }

    pub fn seq(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn total_predictions(&self) -> usize {
        self.num_seqs() * (self.seq_len - 1)
    }
}

/// Reusable forward/backward buffers.
pub struct Scratch {
    z: Vec<f64>,
    hv: Vec<f64>,
    logits: Vec<f64>,
    probs: Vec<f64>,
    dhv: Vec<f64>,
    dz: Vec<f64>,
    de: Vec<f64>,
}

impl Scratch {
    pub fn new(spec: &ArchSpec) -> Self {
        Scratch {
            z: vec![0.0; spec.hidden_dim],
            hv: vec![0.0; spec.hidden_dim],
            logits: vec![0.0; spec.vocab],
            probs: vec![0.0; spec.vocab],
            dhv: vec![0.0; spec.hidden_dim],
            dz: vec![0.0; spec.hidden_dim],
            de: vec![0.0; spec.embed_dim],
        }
    }
}

#[inline]
fn forward_position(params: &ModelParams, token: usize, s: &mut Scratch) {
    let t = &params.tensors;
    let e = t.embedding.row(token);
    for (i, zi) in s.z.iter_mut().enumerate() {
        *zi = dot(t.hidden_w.row(i), e) + t.hidden_b.data()[i];
    }
    for (hi, &zi) in s.hv.iter_mut().zip(&s.z) {
        *hi = zi.tanh();
    }
    for (i, li) in s.logits.iter_mut().enumerate() {
        *li = dot(t.output_w.row(i), &s.hv) + t.output_b.data()[i];
    }
}

/// Cross-entropy of the target under softmax(logits), in nats. Fills `probs`.
#[inline]
fn softmax_loss(logits: &[f64], target: usize, probs: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (p, &l) in probs.iter_mut().zip(logits) {
        *p = (l - max).exp();
        z += *p;
    }
    for p in probs.iter_mut() {
        *p /= z;
    }
    z.ln() + max - logits[target]
}

/// Log-probabilities over the next token given the current one.
pub(crate) fn logit_logprobs(params: &ModelParams, token: usize, s: &mut Scratch) -> Vec<f64> {
    forward_position(params, token, s);
    let max = s.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = s.logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
    s.logits.iter().map(|&l| l - lse).collect()
}

fn check_tokens(spec: &ArchSpec, batch: &TokenBatch) -> Result<()> {
    for s in 0..batch.num_seqs() {
        for &tok in batch.seq(s) {
            if tok as usize >= spec.vocab {
                return Err(Error::invalid(format!(
                    "token {tok} out of vocabulary {}",
                    spec.vocab
                )));
            }
        }
    }
    Ok(())
}

/// Mean per-token next-token cross-entropy over the batch, in nats.
pub fn mean_loss(params: &ModelParams, batch: &TokenBatch) -> Result<f64> {
    check_tokens(params.spec(), batch)?;
    let mut s = Scratch::new(params.spec());
    let mut sum = 0.0;
    for i in 0..batch.num_seqs() {
        let seq = batch.seq(i);
        for w in seq.windows(2) {
            forward_position(params, w[0] as usize, &mut s);
            sum += softmax_loss(&s.logits, w[1] as usize, &mut s.probs);
        }
    }
    Ok(sum / batch.total_predictions() as f64)
}

/// Mean loss plus analytic gradients of the mean, accumulated into `grads`
/// (zeroed here first). Returns the loss.
pub fn loss_and_grad(
    params: &ModelParams,
    batch: &TokenBatch,
    grads: &mut TensorSet,
    s: &mut Scratch,
) -> Result<f64> {
    check_tokens(params.spec(), batch)?;
    grads.fill(0.0);
    let t = &params.tensors;
    let mut sum = 0.0;
    for i in 0..batch.num_seqs() {
        let seq = batch.seq(i);
        for w in seq.windows(2) {
            let (cur, next) = (w[0] as usize, w[1] as usize);
            forward_position(params, cur, s);
            sum += softmax_loss(&s.logits, next, &mut s.probs);

            // d loss / d logits = probs - onehot(next), reusing the probs buffer
            s.probs[next] -= 1.0;

            // output projection
            s.dhv.fill(0.0);
            for (v, &du) in s.probs.iter().enumerate() {
                axpy(grads.output_w.row_mut(v), du, &s.hv);
                grads.output_b.data_mut()[v] += du;
                axpy(&mut s.dhv, du, t.output_w.row(v));
            }

            // tanh hidden layer
            for ((dz, &dh), &hv) in s.dz.iter_mut().zip(&s.dhv).zip(&s.hv) {
                *dz = dh * (1.0 - hv * hv);
            }
            let e = t.embedding.row(cur);
            s.de.fill(0.0);
            for (j, &dzj) in s.dz.iter().enumerate() {
                axpy(grads.hidden_w.row_mut(j), dzj, e);
                grads.hidden_b.data_mut()[j] += dzj;
                axpy(&mut s.de, dzj, t.hidden_w.row(j));
            }

            // embedding row of the current token
            axpy(grads.embedding.row_mut(cur), 1.0, &s.de);
        }
    }
    let n = batch.total_predictions() as f64;
    let inv = 1.0 / n;
    grads.embedding.scale(inv);
    grads.hidden_w.scale(inv);
    grads.hidden_b.scale(inv);
    grads.output_w.scale(inv);
    grads.output_b.scale(inv);
    Ok(sum / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ArchSpec {
        ArchSpec {
            vocab: 7,
            embed_dim: 5,
            hidden_dim: 6,
            context: 4,
        }
    }

    #[test]
    fn param_count_matches_shape_sum() {
        let a = ArchSpec::desk_default();
        assert_eq!(a.param_count(), 32 * 16 + 32 * 16 + 32 + 32 * 32 + 32);
        assert_eq!(a.param_count(), 2112);
        let p = ModelParams::init(a, 0).unwrap();
        assert_eq!(p.tensors().param_count(), a.param_count());
    }

    #[test]
    fn zero_params_give_uniform_loss_exactly() {
        let s = spec();
        let p = ModelParams::zeros(s).unwrap();
        // single prediction: the mean is one cross-entropy term, ln(vocab) exactly
        let batch = TokenBatch::new(vec![3, 5], 2).unwrap();
        assert_eq!(mean_loss(&p, &batch).unwrap(), (s.vocab as f64).ln());
        // many predictions accumulate only rounding
        let batch = TokenBatch::new((0..20).map(|i| i % 7).collect(), 4).unwrap();
        let loss = mean_loss(&p, &batch).unwrap();
        assert!((loss - (s.vocab as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn rejects_out_of_vocab_tokens() {
        let p = ModelParams::zeros(spec()).unwrap();
        let batch = TokenBatch::new(vec![0, 7], 2).unwrap();
        assert!(mean_loss(&p, &batch).is_err());
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let s = spec();
        let params = ModelParams::init(s, 42).unwrap();
        let batch = TokenBatch::new(vec![0, 3, 6, 1, 2, 2, 5, 4], 4).unwrap();
        let mut grads = TensorSet::zeros(&s);
        let mut scratch = Scratch::new(&s);
        loss_and_grad(&params, &batch, &mut grads, &mut scratch).unwrap();

        let step = 1e-4;
        let mut checked = 0;
        for name in TENSOR_NAMES {
            let tensor = params.tensors().get(name).unwrap();
            for idx in [0usize, tensor.data().len() / 2, tensor.data().len() - 1] {
                let mut plus = params.clone();
                plus.tensors_mut().get_mut(name).unwrap().data_mut()[idx] += step;
                let mut minus = params.clone();
                minus.tensors_mut().get_mut(name).unwrap().data_mut()[idx] -= step;
                let fd = (mean_loss(&plus, &batch).unwrap() - mean_loss(&minus, &batch).unwrap())
                    / (2.0 * step);
                let an = grads.get(name).unwrap().data()[idx];
                let rel = (an - fd).abs() / (an.abs().max(fd.abs()) + 1e-8);
                assert!(rel < 1e-3, "{name}[{idx}]: analytic {an}, central {fd}");
                checked += 1;
            }
        }
        assert!(checked >= 15);
    }

    #[test]
    fn adapter_init_shapes_and_determinism() {
        let s = spec();
        let a = AdapterSet::seeded(&s, AdapterHyper { rank: 2, scale_numerator: 8.0, init_std: 0.02 }, 9).unwrap();
        let b = AdapterSet::seeded(&s, AdapterHyper { rank: 2, scale_numerator: 8.0, init_std: 0.02 }, 9).unwrap();
        assert_eq!(a, b);
        for ad in a.adapters() {
            assert!(ad.up.data().iter().all(|&v| v == 0.0), "up factor starts at zero");
            assert!(ad.down.data().iter().any(|&v| v != 0.0));
            assert_eq!(ad.scale, 4.0);
        }
        // zero up factor means applying changes nothing
        let base = ModelParams::init(s, 1).unwrap();
        assert_eq!(apply_adapters(&base, &a).unwrap(), base);
    }

    #[test]
    fn apply_matches_explicit_dense_addition() {
        // factor a known delta as up * identity so the application is exact
        let s = spec();
        let base = ModelParams::init(s, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dense = Tensor2::gaussian(s.hidden_dim, s.embed_dim, 0.3, &mut rng);
        let adapter = LowRankAdapter {
            layer: AdapterLayer::Hidden,
            up: dense.clone(),
            down: Tensor2::identity(s.embed_dim),
            rank: s.embed_dim,
            scale: 1.0,
        };
        let set = AdapterSet { adapters: vec![adapter] };
        let applied = apply_adapters(&base, &set).unwrap();
        let mut manual = base.clone();
        manual.tensors_mut().hidden_w.add_scaled(&dense, 1.0);
        assert_eq!(applied, manual);
    }

    #[test]
    fn merge_with_all_weight_on_old_is_exact() {
        let s = spec();
        let hyper = AdapterHyper { rank: 2, scale_numerator: 8.0, init_std: 0.02 };
        let mut old = AdapterSet::seeded(&s, hyper, 1).unwrap();
        let mut new = AdapterSet::seeded(&s, hyper, 2).unwrap();
        // give the up factors mass so the deltas are nonzero
        for set in [&mut old, &mut new] {
            for ad in set.adapters_mut() {
                ad.up.fill(0.25);
            }
        }
        let w = ReducedWeights::new(1.0, vec![0.0]).unwrap();
        let merged = merge_adapters(&s, &[old.clone(), new], &w).unwrap();
        assert_eq!(merged, old.delta(&s).unwrap());
    }

    #[test]
    fn merge_full_interpolates_linearly() {
        let s = spec();
        let base = ModelParams::init(s, 3).unwrap();
        let shifted = ModelParams::init(s, 4).unwrap();
        let d1 = ParamDelta::between(&base, &shifted).unwrap();
        let d0 = ParamDelta::zeros(s).unwrap();
        let w = ReducedWeights::new(0.25, vec![0.75]).unwrap();
        let merged = merge_full(&s, &[d0, d1.clone()], &w).unwrap();
        let got = merged.tensors().hidden_w.at(2, 3);
        let want = 0.75 * d1.tensors().hidden_w.at(2, 3);
        assert!((got - want).abs() < 1e-15);
    }

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
}
