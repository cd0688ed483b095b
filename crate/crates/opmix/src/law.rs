//! Per-domain loss surfaces `g_j(alpha) = c_j + exp(A_j . alpha)` fitted to
//! proxy observations on the reduced simplex.
//!
//! On the simplex the coefficient vector is only identified up to a constant
//! shift (a shift multiplies the exponential by a constant, colliding with the
//! offset), so the fit works in a chart that drops one coordinate. Stored
//! coefficients are always in full coordinates; the chart is a gauge and
//! predictions are the observable.
//!
//! The offset search is nested: for a candidate c the log-space problem
//! `ln(y - c) ~ affine(alpha)` has a closed-form least-squares solution, and a
//! scan over `c = min y - span * 10^u`, `u` in [-6, 6], picks the candidate
//! whose induced predictor has the smallest loss-space residual (coarse pass,
//! then golden-section refinement).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::ReducedWeights;

/// Relative span below which observations count as constant.
const CONSTANT_SPAN_TOL: f64 = 1e-12;
/// Coarse scan in u = log10((min y - c) / span): inclusive bounds and step.
const SCAN_LO: f64 = -6.0;
const SCAN_HI: f64 = 6.0;
const SCAN_STEP: f64 = 0.1;
/// Golden-section stops when the u bracket is this narrow.
const SCAN_TOL: f64 = 1e-13;
/// Rank tolerance for the design matrix, relative to its largest column norm.
const RANK_TOL: f64 = 1e-10;
/// Exponents are clamped here so predictions stay finite on wild fits.
const MAX_EXPONENT: f64 = 700.0;

/// One proxy observation: a reduced mixture and the held-out loss per eval domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyPoint {
    pub alpha: ReducedWeights,
    pub losses: Vec<f64>,
}

impl ProxyPoint {
    pub fn new(alpha: ReducedWeights, losses: Vec<f64>) -> Result<Self> {
        if losses.is_empty() || losses.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("proxy losses must be non-empty and finite"));
        }
        Ok(ProxyPoint { alpha, losses })
    }
}

/// Fitted surface for one eval domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainLaw {
    pub offset: f64,
    /// Full reduced coordinates, old weight first; length K+1.
    pub coeffs: Vec<f64>,
    /// Loss-space RMSE at the fit points.
    pub rmse: f64,
}

impl DomainLaw {
    pub fn exponent(&self, alpha_full: &[f64]) -> f64 {
        debug_assert_eq!(alpha_full.len(), self.coeffs.len());
        let mut acc = 0.0;
        for (a, c) in alpha_full.iter().zip(&self.coeffs) {
            acc += a * c;
        }
        acc.min(MAX_EXPONENT)
    }

    pub fn predict_full(&self, alpha_full: &[f64]) -> f64 {
        self.offset + self.exponent(alpha_full).exp()
    }

    /// `out += w * exp(A . alpha) * A`, the gradient of `w * predict`.
    pub fn accumulate_grad(&self, alpha_full: &[f64], w: f64, out: &mut [f64]) {
        let s = w * self.exponent(alpha_full).exp();
        for (o, c) in out.iter_mut().zip(&self.coeffs) {
            *o += s * c;
        }
    }
}

/// Fitted surfaces for all eval domains, sharing one chart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LawFit {
    pub laws: Vec<DomainLaw>,
    /// Which full coordinate the fit chart dropped (0 = the old weight).
    pub dropped_coord: usize,
    /// Pooled loss-space RMSE across domains and points.
    pub rmse: f64,
}

impl LawFit {
    /// Fits in the default chart (drops the old-weight coordinate).
    pub fn fit(points: &[ProxyPoint]) -> Result<LawFit> {
        LawFit::fit_with_chart(points, 0)
    }

    pub fn fit_with_chart(points: &[ProxyPoint], dropped_coord: usize) -> Result<LawFit> {
        let (k, n) = check_points(points)?;
        if dropped_coord > k {
            return Err(Error::invalid(format!(
                "chart drops coordinate {dropped_coord}, only {} exist",
                k + 1
            )));
        }
        let p = points.len();
        if p < k + 2 {
            return Err(Error::UnderdeterminedFit(format!(
                "{p} proxy points cannot identify {} parameters (need at least {})",
                k + 2,
                k + 2
            )));
        }
        let alphas: Vec<Vec<f64>> = points.iter().map(|pt| pt.alpha.full()).collect();
        // design: intercept column, then every full coordinate except the dropped one
        let m = k + 1;
        let mut design = Vec::with_capacity(p * m);
        for a in &alphas {
            design.push(1.0);
            for (i, &v) in a.iter().enumerate() {
                if i != dropped_coord {
                    design.push(v);
                }
            }
        }
        let solver = Lstsq::factor(design, p, m)?;

        let mut laws = Vec::with_capacity(n);
        let mut pooled_sse = 0.0;
        for j in 0..n {
            let y: Vec<f64> = points.iter().map(|pt| pt.losses[j]).collect();
            let law = fit_domain(&y, &alphas, &solver, dropped_coord, k)?;
            pooled_sse += law.rmse * law.rmse * p as f64;
            laws.push(law);
        }
        Ok(LawFit {
            laws,
            dropped_coord,
            rmse: (pooled_sse / (p * n) as f64).sqrt(),
        })
    }

    pub fn num_new(&self) -> usize {
        self.laws[0].coeffs.len() - 1
    }

    pub fn num_domains(&self) -> usize {
        self.laws.len()
    }

    pub fn predict(&self, alpha: &ReducedWeights) -> Result<Vec<f64>> {
        if alpha.num_new() != self.num_new() {
            return Err(Error::invalid(format!(
                "law fitted over {} new coordinates, alpha has {}",
                self.num_new(),
                alpha.num_new()
            )));
        }
        let full = alpha.full();
        Ok(self.laws.iter().map(|l| l.predict_full(&full)).collect())
    }

    /// One line per domain: index, offset, coefficients, rmse, chart tag.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (j, law) in self.laws.iter().enumerate() {
            let coeffs: Vec<String> = law.coeffs.iter().map(|c| format!("{c:.12e}")).collect();
            out.push_str(&format!(
                "{j}\t{:.12e}\t{}\t{:.12e}\tchart=drop:{}\n",
                law.offset,
                coeffs.join(","),
                law.rmse,
                self.dropped_coord
            ));
        }
        out
    }
}

fn check_points(points: &[ProxyPoint]) -> Result<(usize, usize)> {
    let first = points
        .first()
        .ok_or_else(|| Error::UnderdeterminedFit("no proxy points".into()))?;
    let k = first.alpha.num_new();
    let n = first.losses.len();
    for pt in points {
        if pt.alpha.num_new() != k || pt.losses.len() != n {
            return Err(Error::invalid(
                "proxy points disagree on coordinate or domain count",
            ));
        }
    }
    Ok((k, n))
}

fn fit_domain(
    y: &[f64],
    alphas: &[Vec<f64>],
    solver: &Lstsq,
    dropped_coord: usize,
    k: usize,
) -> Result<DomainLaw> {
    let p = y.len();
    let ymin = y.iter().copied().fold(f64::INFINITY, f64::min);
    let ymax = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = ymax - ymin;
    if span <= CONSTANT_SPAN_TOL * ymax.abs().max(1.0) {
        // flat observations: exp(0) soaks up one unit of the constant
        return Ok(DomainLaw {
            offset: ymin - 1.0,
            coeffs: vec![0.0; k + 1],
            rmse: 0.0,
        });
    }

    let mut z = vec![0.0; p];
    let mut eval = |u: f64| -> (f64, f64, Vec<f64>) {
        let c = ymin - span * 10f64.powf(u);
        for (zi, &yi) in z.iter_mut().zip(y) {
            *zi = (yi - c).ln();
        }
        let beta = solver.solve(&z);
        let mut sse = 0.0;
        for (a, &yi) in alphas.iter().zip(y) {
            let pred = c + chart_exponent(&beta, a, dropped_coord).exp();
            sse += (pred - yi) * (pred - yi);
        }
        (sse, c, beta)
    };

    // coarse bracket, then golden-section inside one step either side
    let mut best_u = SCAN_LO;
    let mut best_sse = f64::INFINITY;
    let steps = ((SCAN_HI - SCAN_LO) / SCAN_STEP).round() as usize;
    for i in 0..=steps {
        let u = SCAN_LO + SCAN_STEP * i as f64;
        let (sse, _, _) = eval(u);
        if sse < best_sse {
            best_sse = sse;
            best_u = u;
        }
    }
    let mut lo = (best_u - SCAN_STEP).max(SCAN_LO);
    let mut hi = (best_u + SCAN_STEP).min(SCAN_HI);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut u1 = hi - phi * (hi - lo);
    let mut u2 = lo + phi * (hi - lo);
    let mut f1 = eval(u1).0;
    let mut f2 = eval(u2).0;
    while hi - lo > SCAN_TOL {
        if f1 <= f2 {
            hi = u2;
            u2 = u1;
            f2 = f1;
            u1 = hi - phi * (hi - lo);
            f1 = eval(u1).0;
        } else {
            lo = u1;
            u1 = u2;
            f1 = f2;
            u2 = lo + phi * (hi - lo);
            f2 = eval(u2).0;
        }
    }
    let (sse, c, beta) = eval(0.5 * (lo + hi));

    // chart -> full coordinates: the dropped coordinate carries the intercept
    let mut coeffs = vec![0.0; k + 1];
    let mut src = 1;
    for (i, slot) in coeffs.iter_mut().enumerate() {
        if i == dropped_coord {
            *slot = beta[0];
        } else {
            *slot = beta[0] + beta[src];
            src += 1;
        }
    }
    Ok(DomainLaw {
        offset: c,
        coeffs,
        rmse: (sse / p as f64).sqrt(),
    })
}

/// Exponent under chart coefficients `beta = (intercept, kept coords...)`.
fn chart_exponent(beta: &[f64], alpha_full: &[f64], dropped_coord: usize) -> f64 {
    let mut acc = beta[0];
    let mut src = 1;
    for (i, &a) in alpha_full.iter().enumerate() {
        if i != dropped_coord {
            acc += beta[src] * a;
            src += 1;
        }
    }
    acc.min(MAX_EXPONENT)
}

/// Householder least squares, factored once and solved for many right-hand sides.
struct Lstsq {
    /// Column-major P x M; below-diagonal entries hold the Householder vectors.
    qr: Vec<f64>,
    /// Diagonal of R (the factored leading entries).
    diag: Vec<f64>,
    p: usize,
    m: usize,
}

impl Lstsq {
    /// `x` is row-major P x M.
    fn factor(x: Vec<f64>, p: usize, m: usize) -> Result<Self> {
        assert_eq!(x.len(), p * m);
        let mut qr = vec![0.0; p * m];
        for r in 0..p {
            for c in 0..m {
                qr[c * p + r] = x[r * m + c];
            }
        }
        let scale = (0..m)
            .map(|c| {
                qr[c * p..(c + 1) * p]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0f64, f64::max);
        let mut diag = vec![0.0; m];
        for kcol in 0..m {
            let col = &mut qr[kcol * p..(kcol + 1) * p];
            let norm = col[kcol..].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= RANK_TOL * scale {
                return Err(Error::UnderdeterminedFit(
                    "proxy mixtures are affinely dependent; the design matrix is rank-deficient"
                        .into(),
                ));
            }
            let alpha = if col[kcol] >= 0.0 { -norm } else { norm };
            diag[kcol] = alpha;
            col[kcol] -= alpha;
            let vnorm_sq: f64 = col[kcol..].iter().map(|v| v * v).sum();
            // normalize so applying the reflector is `w -= 2 (v.w / v.v) v`
            let inv = 2.0 / vnorm_sq;
            // fold the reflector into the remaining columns
            for c2 in kcol + 1..m {
                let (head, tail) = qr.split_at_mut(c2 * p);
                let v = &head[kcol * p + kcol..kcol * p + p];
                let w = &mut tail[kcol..p];
                let dot: f64 = v.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
                let s = dot * inv;
                for (wi, vi) in w.iter_mut().zip(v) {
                    *wi -= s * vi;
                }
            }
        }
        Ok(Lstsq { qr, diag, p, m })
    }

    /// Minimizes `|X b - y|`; returns b.
    fn solve(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.p);
        let mut w = y.to_vec();
        for kcol in 0..self.m {
            let v = &self.qr[kcol * self.p + kcol..(kcol + 1) * self.p];
            let vnorm_sq: f64 = v.iter().map(|a| a * a).sum();
            let dot: f64 = v.iter().zip(&w[kcol..]).map(|(a, b)| a * b).sum();
            let s = 2.0 * dot / vnorm_sq;
            for (wi, vi) in w[kcol..].iter_mut().zip(v) {
                *wi -= s * vi;
            }
        }
        let mut beta = vec![0.0; self.m];
        for krow in (0..self.m).rev() {
            let mut acc = w[krow];
            for c in krow + 1..self.m {
                acc -= self.qr[c * self.p + krow] * beta[c];
            }
            beta[krow] = acc / self.diag[krow];
        }
        beta
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::mixture::grid_old_new;

    fn surface_points(c: f64, b: f64, bnew: f64) -> Vec<ProxyPoint> {
        grid_old_new(9)
            .unwrap()
            .into_iter()
            .map(|alpha| {
                let a = alpha.new_weights()[0];
                let y = c + (b + bnew * a).exp();
                ProxyPoint::new(alpha, vec![y]).unwrap()
            })
            .collect()
    }

    #[test]
    fn recovers_the_reference_surface() {
        let points = surface_points(1.5, -2.0, 0.5);
        let fit = LawFit::fit(&points).unwrap();
        assert!(fit.rmse < 1e-6, "rmse {}", fit.rmse);
        let law = &fit.laws[0];
        assert!((law.offset - 1.5).abs() < 1e-6, "offset {}", law.offset);
        // chart (intercept, slope) = (-2, 0.5) maps to full coords (-2, -1.5)
        assert!((law.coeffs[0] + 2.0).abs() < 1e-6);
        assert!((law.coeffs[1] + 1.5).abs() < 1e-6);
        for pt in &points {
            let pred = fit.predict(&pt.alpha).unwrap()[0];
            assert!((pred - pt.losses[0]).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_losses_need_no_search() {
        let points: Vec<ProxyPoint> = grid_old_new(5)
            .unwrap()
            .into_iter()
            .map(|alpha| ProxyPoint::new(alpha, vec![3.25]).unwrap())
            .collect();
        let fit = LawFit::fit(&points).unwrap();
        let law = &fit.laws[0];
        assert_eq!(law.offset, 2.25);
        assert!(law.coeffs.iter().all(|&c| c == 0.0));
        assert_eq!(fit.rmse, 0.0);
        let pred = fit
            .predict(&ReducedWeights::new(0.4, vec![0.6]).unwrap())
            .unwrap();
        assert_eq!(pred[0], 3.25);
    }

    #[test]
    fn too_few_or_degenerate_points_are_rejected() {
        let one = vec![ProxyPoint::new(
            ReducedWeights::new(0.5, vec![0.5]).unwrap(),
            vec![1.0],
        )
        .unwrap()];
        assert!(matches!(
            LawFit::fit(&one),
            Err(Error::UnderdeterminedFit(_))
        ));
        // enough points, but all at the same alpha
        let same: Vec<ProxyPoint> = (0..4)
            .map(|i| {
                ProxyPoint::new(
                    ReducedWeights::new(0.5, vec![0.5]).unwrap(),
                    vec![1.0 + i as f64 * 0.1],
                )
                .unwrap()
            })
            .collect();
        assert!(matches!(
            LawFit::fit(&same),
            Err(Error::UnderdeterminedFit(_))
        ));
        assert!(LawFit::fit(&[]).is_err());
    }

    #[test]
    fn charts_agree_on_predictions() {
        // deterministic non-exponential wiggle so neither chart fits exactly
        let points: Vec<ProxyPoint> = grid_old_new(9)
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(i, alpha)| {
                let a = alpha.new_weights()[0];
                let y = 1.2 + (-1.0 + 0.8 * a).exp() + 1e-3 * (3.0 * i as f64).sin();
                ProxyPoint::new(alpha, vec![y]).unwrap()
            })
            .collect();
        let f0 = LawFit::fit_with_chart(&points, 0).unwrap();
        let f1 = LawFit::fit_with_chart(&points, 1).unwrap();
        for q in [0.0, 0.17, 0.5, 0.83, 1.0] {
            let alpha = ReducedWeights::new(1.0 - q, vec![q]).unwrap();
            let p0 = f0.predict(&alpha).unwrap()[0];
            let p1 = f1.predict(&alpha).unwrap()[0];
            assert!((p0 - p1).abs() < 1e-9, "charts disagree: {p0} vs {p1}");
        }
    }

    #[test]
    fn extra_consistent_point_cannot_worsen_the_fit() {
        let mut points = surface_points(0.8, -1.0, 1.2);
        let before = LawFit::fit(&points).unwrap().rmse;
        let alpha = ReducedWeights::new(0.55, vec![0.45]).unwrap();
        let y = 0.8 + (-1.0 + 1.2 * 0.45f64).exp();
        points.push(ProxyPoint::new(alpha, vec![y]).unwrap());
        let after = LawFit::fit(&points).unwrap().rmse;
        assert!(after <= before + 1e-9, "rmse rose from {before} to {after}");
    }

    #[test]
    fn predictions_are_convex_along_segments() {
        let fit = LawFit::fit(&surface_points(1.5, -2.0, 0.5)).unwrap();
        let at = |q: f64| {
            fit.predict(&ReducedWeights::new(1.0 - q, vec![q]).unwrap()).unwrap()[0]
        };
        for (a, b) in [(0.0, 1.0), (0.1, 0.7), (0.3, 0.9)] {
            let mid = at(0.5 * (a + b));
            assert!(mid <= 0.5 * (at(a) + at(b)) + 1e-9);
        }
    }

    #[test]
    fn random_surfaces_round_trip_in_two_dims() {
        // K = 2: alphas off the one-dimensional edge, same machinery
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..5 {
            let c = rng.random_range(0.1..2.0);
            let b = rng.random_range(-3.0..0.5);
            let b1 = rng.random_range(-2.0..2.0);
            let b2 = rng.random_range(-2.0..2.0);
            let mut points = Vec::new();
            for i in 1..5 {
                for j in 1..(5 - i) {
                    let (a1, a2) = (i as f64 / 6.0, j as f64 / 6.0);
                    let y = c + (b + b1 * a1 + b2 * a2).exp();
                    points.push(
                        ProxyPoint::new(
                            ReducedWeights::new(1.0 - a1 - a2, vec![a1, a2]).unwrap(),
                            vec![y],
                        )
                        .unwrap(),
                    );
                }
            }
            let fit = LawFit::fit(&points).unwrap();
            assert!(fit.rmse < 1e-7, "rmse {}", fit.rmse);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let fit = LawFit::fit(&surface_points(1.5, -2.0, 0.5)).unwrap();
        let law = &fit.laws[0];
        let alpha = [0.35, 0.65];
        let mut grad = vec![0.0; 2];
        law.accumulate_grad(&alpha, 1.0, &mut grad);
        let h = 1e-6;
        for i in 0..2 {
            let mut hi = alpha;
            hi[i] += h;
            let mut lo = alpha;
            lo[i] -= h;
            let fd = (law.predict_full(&hi) - law.predict_full(&lo)) / (2.0 * h);
            assert!((grad[i] - fd).abs() < 1e-6, "coord {i}: {} vs {fd}", grad[i]);
        }
    }
}
