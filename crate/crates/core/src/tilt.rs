//! Exponential tilting of a discrete reference distribution.
//!
//! For a reference F with atoms Yⱼ and masses pⱼ, the tilt (θ, b) targeting a
//! mean μ satisfies Σⱼ pⱼ e^{θYⱼ−b} = 1 and Σⱼ Yⱼ pⱼ e^{θYⱼ−b} = μ. The
//! normalizer is eliminated as b(θ) = log Σⱼ pⱼ e^{θYⱼ}, leaving a scalar
//! root-find on the tilted mean m(θ), which is strictly increasing with
//! m′(θ) equal to the tilted variance.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default absolute tolerance on the tilted-mean residual.
pub const DEFAULT_TILT_TOL: f64 = 1e-10;

const MAX_TILT_ITER: usize = 200;

/// Discrete distribution on the observed responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDistribution {
    support: Vec<f64>,
    masses: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(support: Vec<f64>, masses: Vec<f64>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::Parameter("empty support".into()));
        }
        if support.len() != masses.len() {
            return Err(Error::DimensionMismatch {
                expected: support.len(),
                found: masses.len(),
            });
        }
        if support.iter().chain(&masses).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("distribution entry".into()));
        }
        if masses.iter().any(|&p| p < 0.0) {
            return Err(Error::Parameter("negative probability mass".into()));
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::Parameter(format!("masses sum to {total}, not 1")));
        }
        Ok(Self { support, masses })
    }

    /// Uniform masses 1/n on the given atoms.
    pub fn empirical(support: Vec<f64>) -> Result<Self> {
        let n = support.len();
        Self::new(support, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.support.iter().zip(&self.masses).map(|(y, p)| y * p).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.support.iter().zip(&self.masses).map(|(y, p)| p * (y - m).powi(2)).sum()
    }

    /// F(y) = Σ pⱼ I(Yⱼ ≤ y).
    pub fn cdf(&self, y: f64) -> f64 {
        self.support
            .iter()
            .zip(&self.masses)
            .filter(|(s, _)| **s <= y)
            .map(|(_, p)| p)
            .sum::<f64>()
            .min(1.0)
    }

    /// Smallest and largest atoms carrying positive mass.
    pub fn hull(&self) -> (f64, f64) {
        self.support
            .iter()
            .zip(&self.masses)
            .filter(|(_, p)| **p > 0.0)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (y, _)| (lo.min(*y), hi.max(*y)))
    }
}

/// Per-observation tilt (θ, b) with the tilted moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiltSolution {
    pub theta: f64,
    pub b: f64,
    pub tilted_mean: f64,
    pub tilted_variance: f64,
}

/// Reference prepared for repeated tilting: centered atoms and log-masses.
pub(crate) struct PreparedReference {
    shifted: Vec<f64>,
    log_p: Vec<f64>,
    center: f64,
    lo: f64,
    hi: f64,
    scale: f64,
    buf: Vec<f64>,
}

struct Moments {
    b_shifted: f64,
    mean_shifted: f64,
    variance: f64,
}

impl PreparedReference {
    pub(crate) fn new(reference: &DiscreteDistribution) -> Self {
        let center = reference.mean();
        let (lo, hi) = reference.hull();
        let shifted: Vec<f64> = reference.support.iter().map(|y| y - center).collect();
        let log_p = reference.masses.iter().map(|p| p.ln()).collect();
        let scale = reference.support.iter().fold(0.0f64, |m, y| m.max(y.abs())).max(1.0);
        let buf = vec![0.0; shifted.len()];
        Self {
            shifted,
            log_p,
            center,
            lo,
            hi,
            scale,
            buf,
        }
    }

    fn moments(&mut self, theta: f64) -> Moments {
        let mut max = f64::NEG_INFINITY;
        for ((b, y), lp) in self.buf.iter_mut().zip(&self.shifted).zip(&self.log_p) {
            *b = theta * y + lp;
            max = max.max(*b);
        }
        let mut z = 0.0;
        let mut s1 = 0.0;
        for (b, y) in self.buf.iter_mut().zip(&self.shifted) {
            *b = (*b - max).exp();
            z += *b;
            s1 += *b * y;
        }
        let mean = s1 / z;
        let var = self
            .buf
            .iter()
            .zip(&self.shifted)
            .map(|(w, y)| w * (y - mean) * (y - mean))
            .sum::<f64>()
            / z;
        Moments {
            b_shifted: max + z.ln(),
            mean_shifted: mean,
            variance: var,
        }
    }

    pub(crate) fn solve(&mut self, target: f64, tol: f64, guess: Option<f64>) -> Result<TiltSolution> {
        if !(tol > 0.0) {
            return Err(Error::Parameter(format!("tilt tolerance must be positive, got {tol}")));
        }
        if !target.is_finite() {
            return Err(Error::NonFinite(format!("tilt target {target}")));
        }
        if self.lo == self.hi {
            if target == self.lo {
                return Ok(TiltSolution {
                    theta: 0.0,
                    b: 0.0,
                    tilted_mean: target,
                    tilted_variance: 0.0,
                });
            }
            return Err(self.infeasible(target));
        }
        if !(target > self.lo && target < self.hi) {
            return Err(self.infeasible(target));
        }
        let goal = target - self.center;
        // floating-point floor on the attainable residual for large-magnitude supports
        let tol = tol.max(32.0 * f64::EPSILON * self.scale);
        let span = self.hi - self.lo;

        let mut theta = match guess {
            Some(g) if g.is_finite() => g,
            _ => {
                let m0 = self.moments(0.0);
                if m0.variance > 0.0 { goal / m0.variance } else { 0.0 }
            }
        };
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        let mut best: Option<(f64, Moments)> = None;
        for _ in 0..MAX_TILT_ITER {
            let m = self.moments(theta);
            let f = m.mean_shifted - goal;
            if f.abs() < tol {
                return Ok(self.finish(theta, m));
            }
            if f < 0.0 {
                lo = lo.max(theta);
            } else {
                hi = hi.min(theta);
            }
            let variance = m.variance;
            best = match best {
                Some((t, bm)) if (bm.mean_shifted - goal).abs() <= f.abs() => Some((t, bm)),
                _ => Some((theta, m)),
            };
            let cap = (2.0 * theta.abs()).max(10.0 / span);
            let newton = if variance > 0.0 { -f / variance } else { f64::INFINITY };
            let step = newton.clamp(-cap, cap);
            let mut next = theta + step;
            if !(next > lo && next < hi) {
                next = if lo.is_finite() && hi.is_finite() {
                    0.5 * (lo + hi)
                } else if lo.is_finite() {
                    lo + cap
                } else {
                    hi - cap
                };
            }
            if lo.is_finite() && hi.is_finite() && (hi - lo) <= 4.0 * f64::EPSILON * hi.abs().max(lo.abs()).max(1.0) {
                break;
            }
            theta = next;
        }
        match best {
            Some((t, m)) if (m.mean_shifted - goal).abs() < 1e3 * tol => Ok(self.finish(t, m)),
            Some((_, m)) => Err(Error::Solver(format!(
                "tilt root-find stalled with mean residual {:e}",
                (m.mean_shifted - goal).abs()
            ))),
            None => Err(Error::Solver("tilt root-find did not evaluate".into())),
        }
    }

    fn finish(&self, theta: f64, m: Moments) -> TiltSolution {
        TiltSolution {
            theta,
            b: m.b_shifted + theta * self.center,
            tilted_mean: m.mean_shifted + self.center,
            tilted_variance: m.variance,
        }
    }

    fn infeasible(&self, target: f64) -> Error {
        Error::InfeasibleMean {
            index: None,
            target,
            lo: self.lo,
            hi: self.hi,
        }
    }

    /// Row of tilt weights e^{θYⱼ − b}.
    pub(crate) fn weights_into(&self, t: &TiltSolution, out: &mut [f64]) {
        let b_shifted = t.b - t.theta * self.center;
        for (w, y) in out.iter_mut().zip(&self.shifted) {
            *w = (t.theta * y - b_shifted).exp();
        }
    }
}

/// Solves the tilt for one target mean.
pub fn solve_tilt(reference: &DiscreteDistribution, target_mu: f64, tol: f64) -> Result<TiltSolution> {
    PreparedReference::new(reference).solve(target_mu, tol, None)
}

/// Tilts for many targets, plus the weight matrix wᵢⱼ = e^{θᵢYⱼ − bᵢ}.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltSet {
    pub solutions: Vec<TiltSolution>,
    /// n_targets × n_support.
    pub weights: DMatrix<f64>,
}

impl TiltSet {
    /// Largest normalization and mean-constraint residuals, by direct summation.
    pub fn constraint_residuals(&self, reference: &DiscreteDistribution, mus: &[f64]) -> (f64, f64) {
        let mut norm: f64 = 0.0;
        let mut mean: f64 = 0.0;
        for (i, mu) in mus.iter().enumerate() {
            let mut s0 = 0.0;
            let mut s1 = 0.0;
            for (j, (y, p)) in reference.support.iter().zip(&reference.masses).enumerate() {
                let w = self.weights[(i, j)];
                s0 += p * w;
                s1 += y * p * w;
            }
            norm = norm.max((s0 - 1.0).abs());
            mean = mean.max((s1 - mu).abs());
        }
        (norm, mean)
    }
}

pub fn solve_all_tilts(reference: &DiscreteDistribution, mus: &[f64], tol: f64) -> Result<TiltSet> {
    solve_all_tilts_from(reference, mus, tol, None)
}

/// As [`solve_all_tilts`], warm-starting each root-find from `guesses`.
pub fn solve_all_tilts_from(
    reference: &DiscreteDistribution,
    mus: &[f64],
    tol: f64,
    guesses: Option<&[f64]>,
) -> Result<TiltSet> {
    let mut prepared = PreparedReference::new(reference);
    let mut solutions = Vec::with_capacity(mus.len());
    for (i, &mu) in mus.iter().enumerate() {
        let guess = guesses.and_then(|g| g.get(i).copied());
        let sol = prepared.solve(mu, tol, guess).map_err(|e| match e {
            Error::InfeasibleMean { target, lo, hi, .. } => Error::InfeasibleMean {
                index: Some(i),
                target,
                lo,
                hi,
            },
            other => other,
        })?;
        solutions.push(sol);
    }
    let mut weights = DMatrix::zeros(mus.len(), reference.len());
    let mut row = vec![0.0; reference.len()];
    for (i, sol) in solutions.iter().enumerate() {
        prepared.weights_into(sol, &mut row);
        for (j, w) in row.iter().enumerate() {
            weights[(i, j)] = *w;
        }
    }
    Ok(TiltSet { solutions, weights })
}

/// Tilted CDF F_i(y) = Σⱼ pⱼ e^{θYⱼ−b} I(Yⱼ ≤ y), flat beyond the support.
pub fn tilted_cdf(reference: &DiscreteDistribution, t: &TiltSolution, y: f64) -> f64 {
    tilted_cdf_pair(reference, t, y).1
}

/// (F_i(y⁻), F_i(y)).
pub(crate) fn tilted_cdf_pair(reference: &DiscreteDistribution, t: &TiltSolution, y: f64) -> (f64, f64) {
    let mut below = 0.0;
    let mut at = 0.0;
    for (s, p) in reference.support.iter().zip(&reference.masses) {
        if *s <= y {
            let m = p * (t.theta * s - t.b).exp();
            if *s < y {
                below += m;
            } else {
                at += m;
            }
        }
    }
    ((below).min(1.0), (below + at).min(1.0))
}
