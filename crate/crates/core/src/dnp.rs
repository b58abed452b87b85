//! Doubly-nonparametric GAM fitting: joint maximization of the penalized
//! empirical log-likelihood over the coefficients and the reference masses,
//! with score certificates, sandwich covariance and confidence bands.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::basis::AdditiveDesign;
use crate::error::{Error, Result};
use crate::linalg;
use crate::link::{Link, MeanEval};
use crate::tilt::{DiscreteDistribution, PreparedReference, TiltSolution};

/// Tilted variances below this are treated as degenerate.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct DnpOptions {
    /// Relative change of the objective at convergence; KKT residuals must be below 10·tol.
    pub tol: f64,
    pub max_outer: usize,
    /// Initial step fraction of each sweep, in (0, 1].
    pub damping: f64,
    pub tilt_tol: f64,
    /// Lower bound on updated masses.
    pub mass_floor: f64,
    pub initial_beta: Option<DVector<f64>>,
    pub compute_covariance: bool,
}

impl Default for DnpOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_outer: 2000,
            damping: 1.0,
            tilt_tol: 1e-10,
            mass_floor: 1e-12,
            initial_beta: None,
            compute_covariance: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KktReport {
    pub score_beta_maxnorm: f64,
    pub score_f_maxnorm: f64,
    pub norm_constraint_max: f64,
    pub mean_constraint_max: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.score_beta_maxnorm
            .max(self.score_f_maxnorm)
            .max(self.norm_constraint_max)
            .max(self.mean_constraint_max)
    }
}

#[derive(Debug, Clone)]
pub struct DnpFit {
    pub beta_hat: DVector<f64>,
    /// Masses on the observed responses, in observation order.
    pub f_hat: DiscreteDistribution,
    pub tilts: Vec<TiltSolution>,
    pub penalized_loglik: f64,
    pub cov_beta: DMatrix<f64>,
    pub kkt: KktReport,
    pub lambda: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub link: Link,
    pub eta: Vec<f64>,
    pub fitted: Vec<f64>,
    /// Sweeps in which some mass-update denominator was not positive.
    pub nonpositive_denominators: usize,
    pub warnings: Vec<String>,
}

/// Penalized score and score-operator values at one (β, F).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub s_lambda: DVector<f64>,
    /// (threshold r, averaged score operator at I(y ≤ r)).
    pub a_values: Vec<(f64, f64)>,
}

/// A data set, link and penalty against which (β, p) pairs are evaluated.
pub struct DnpModel<'a> {
    design: &'a AdditiveDesign,
    y: &'a [f64],
    link: Link,
    penalty: DMatrix<f64>,
    lambda: Vec<f64>,
    tilt_tol: f64,
}

/// Everything derived from one (β, p): means, tilts, tilt weights and the objective.
pub struct DnpState {
    pub beta: DVector<f64>,
    pub masses: Vec<f64>,
    pub eta: Vec<f64>,
    pub means: Vec<MeanEval>,
    pub tilts: Vec<TiltSolution>,
    /// Row-major n × n, wᵢⱼ = exp(θᵢYⱼ − bᵢ).
    weights: Vec<f64>,
    pub objective: f64,
}

impl<'a> DnpModel<'a> {
    pub fn new(design: &'a AdditiveDesign, y: &'a [f64], link: Link, lambda: &[f64]) -> Result<Self> {
        if y.len() != design.nrows() {
            return Err(Error::DimensionMismatch {
                expected: design.nrows(),
                found: y.len(),
            });
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("response {i}")));
        }
        Ok(Self {
            design,
            y,
            link,
            penalty: design.penalty_for(lambda)?,
            lambda: lambda.to_vec(),
            tilt_tol: crate::tilt::DEFAULT_TILT_TOL,
        })
    }

    pub fn with_tilt_tol(mut self, tol: f64) -> Self {
        self.tilt_tol = tol;
        self
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Solves all tilts at (β, p) and evaluates the objective.
    pub fn evaluate(&self, beta: &DVector<f64>, masses: &[f64], guesses: Option<&[f64]>) -> Result<DnpState> {
        let n = self.n();
        if masses.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: masses.len(),
            });
        }
        let eta_v = &self.design.matrix * beta;
        let mut means = Vec::with_capacity(n);
        for &e in eta_v.iter() {
            means.push(self.link.eval(e)?);
        }
        let reference = DiscreteDistribution::new(self.y.to_vec(), masses.to_vec())?;
        let mut prepared = PreparedReference::new(&reference);
        let mut tilts = Vec::with_capacity(n);
        for (i, m) in means.iter().enumerate() {
            let guess = guesses.map(|g| g[i]);
            let t = prepared.solve(m.mu, self.tilt_tol, guess).map_err(|e| match e {
                Error::InfeasibleMean { target, lo, hi, .. } => Error::InfeasibleMean {
                    index: Some(i),
                    target,
                    lo,
                    hi,
                },
                other => other,
            })?;
            tilts.push(t);
        }
        let mut weights = vec![0.0; n * n];
        for (i, t) in tilts.iter().enumerate() {
            prepared.weights_into(t, &mut weights[i * n..(i + 1) * n]);
        }
        let objective = self.objective_from(beta, masses, &tilts);
        Ok(DnpState {
            beta: beta.clone(),
            masses: masses.to_vec(),
            eta: eta_v.iter().copied().collect(),
            means,
            tilts,
            weights,
            objective,
        })
    }

    fn objective_from(&self, beta: &DVector<f64>, masses: &[f64], tilts: &[TiltSolution]) -> f64 {
        let n = self.n() as f64;
        let ll: f64 = tilts
            .iter()
            .zip(self.y)
            .zip(masses)
            .map(|((t, y), p)| p.ln() + t.theta * y - t.b)
            .sum();
        ll / n - 0.5 * beta.dot(&(&self.penalty * beta))
    }

    fn check_variances(&self, state: &DnpState) -> Result<()> {
        match state.tilts.iter().position(|t| !(t.tilted_variance >= VARIANCE_FLOOR)) {
            Some(i) => Err(Error::VarianceDegenerate {
                index: i,
                variance: state.tilts[i].tilted_variance,
            }),
            None => Ok(()),
        }
    }

    /// (1/n) Σ (Yᵢ − μᵢ) μ′ᵢ/Vᵢ B(Xᵢ) − Pβ.
    pub fn score_beta(&self, state: &DnpState) -> Result<DVector<f64>> {
        self.check_variances(state)?;
        let n = self.n();
        let r = DVector::from_iterator(
            n,
            (0..n).map(|i| (self.y[i] - state.means[i].mu) * state.means[i].d1 / state.tilts[i].tilted_variance),
        );
        Ok(self.design.matrix.tr_mul(&r) / n as f64 - &self.penalty * &state.beta)
    }

    /// Dⱼ = Σᵢ wᵢⱼ [1 + ξᵢ (Yⱼ − μᵢ)], ξᵢ = (Yᵢ − μᵢ)/Vᵢ.
    fn denominators(&self, state: &DnpState) -> Vec<f64> {
        let n = self.n();
        let mut d = vec![0.0; n];
        for i in 0..n {
            let mu = state.means[i].mu;
            let xi = (self.y[i] - mu) / state.tilts[i].tilted_variance;
            let row = &state.weights[i * n..(i + 1) * n];
            for j in 0..n {
                d[j] += row[j] * (1.0 + xi * (self.y[j] - mu));
            }
        }
        d
    }

    /// Averaged score operator at h = I(y ≤ r) for each threshold.
    pub fn score_operator(&self, state: &DnpState, thresholds: &[f64]) -> Result<Vec<f64>> {
        self.check_variances(state)?;
        let n = self.n();
        let d = self.denominators(state);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| self.y[a].total_cmp(&self.y[b]));
        let mut sorted_y = Vec::with_capacity(n);
        let mut cum = Vec::with_capacity(n);
        let mut acc = 0.0;
        for &j in &order {
            acc += 1.0 - state.masses[j] * d[j];
            sorted_y.push(self.y[j]);
            cum.push(acc);
        }
        Ok(thresholds
            .iter()
            .map(|&r| {
                let k = sorted_y.partition_point(|&v| v <= r);
                if k == 0 { 0.0 } else { cum[k - 1] / n as f64 }
            })
            .collect())
    }

    /// Direct-summation residuals of the normalization and mean constraints.
    pub fn constraint_residuals(&self, state: &DnpState) -> (f64, f64) {
        let n = self.n();
        let mut norm: f64 = 0.0;
        let mut mean: f64 = 0.0;
        for i in 0..n {
            let row = &state.weights[i * n..(i + 1) * n];
            let mut s0 = 0.0;
            let mut s1 = 0.0;
            for j in 0..n {
                let m = state.masses[j] * row[j];
                s0 += m;
                s1 += m * self.y[j];
            }
            norm = norm.max((s0 - 1.0).abs());
            mean = mean.max((s1 - state.means[i].mu).abs());
        }
        (norm, mean)
    }

    pub fn kkt(&self, state: &DnpState) -> Result<KktReport> {
        let s = self.score_beta(state)?;
        let a = self.score_operator(state, self.y)?;
        let (norm, mean) = self.constraint_residuals(state);
        Ok(KktReport {
            score_beta_maxnorm: s.amax(),
            score_f_maxnorm: a.iter().fold(0.0f64, |m, v| m.max(v.abs())),
            norm_constraint_max: norm,
            mean_constraint_max: mean,
        })
    }

    /// W = Σᵢ ∂Sᵢ/∂βᵀ holding F fixed, with the tilted variance differentiated through θᵢ,
    /// and H = Σᵢ SᵢSᵢᵀ.
    pub fn sandwich_parts(&self, state: &DnpState) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check_variances(state)?;
        let n = self.n();
        let k = self.design.ncols();
        let b = &self.design.matrix;
        let pb = &self.penalty * &state.beta;
        let mut w = DMatrix::zeros(k, k);
        let mut h = DMatrix::zeros(k, k);
        for i in 0..n {
            let m = state.means[i];
            let v = state.tilts[i].tilted_variance;
            let row = &state.weights[i * n..(i + 1) * n];
            let kappa3: f64 = (0..n)
                .map(|j| state.masses[j] * row[j] * (self.y[j] - m.mu).powi(3))
                .sum();
            let resid = self.y[i] - m.mu;
            let c = -m.d1 * m.d1 / v + resid * (m.d2 / v - m.d1 * m.d1 * kappa3 / (v * v * v));
            let bi = b.row(i).transpose();
            w.ger(c, &bi, &bi, 1.0);
            let si = &bi * (resid * m.d1 / v) - &pb;
            h.ger(1.0, &si, &si, 1.0);
        }
        w -= &self.penalty * n as f64;
        Ok((w, h))
    }

    /// Ŵ = W⁻¹ H W⁻ᵀ, symmetrized.
    pub fn sandwich(&self, state: &DnpState) -> Result<DMatrix<f64>> {
        let (w, h) = self.sandwich_parts(state)?;
        sandwich_from_parts(&w, &h)
    }
}

/// W⁻¹ H W⁻ᵀ, symmetrized.
pub fn sandwich_from_parts(w: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let w_inv = w.clone().try_inverse().filter(|m| m.iter().all(|v| v.is_finite()));
    let Some(w_inv) = w_inv else {
        let eig = linalg::symmetrize(w).symmetric_eigen();
        let (idx, _) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap_or((0, &0.0));
        let dir: Vec<String> = eig.eigenvectors.column(idx).iter().map(|v| format!("{v:.3}")).collect();
        return Err(Error::RankDeficient(format!(
            "sandwich bread is singular; null direction [{}]",
            dir.join(", ")
        )));
    };
    Ok(linalg::symmetrize(&(&w_inv * h * w_inv.transpose())))
}

/// Penalized score for β at (β, F), solving the tilts for F.
pub fn penalized_score_beta(
    design: &AdditiveDesign,
    y: &[f64],
    link: Link,
    lambda: &[f64],
    beta: &DVector<f64>,
    masses: &[f64],
) -> Result<DVector<f64>> {
    let model = DnpModel::new(design, y, link, lambda)?;
    let state = model.evaluate(beta, masses, None)?;
    model.score_beta(&state)
}

/// Score operator values at left-indicator thresholds.
pub fn score_operator_f(
    design: &AdditiveDesign,
    y: &[f64],
    link: Link,
    lambda: &[f64],
    beta: &DVector<f64>,
    masses: &[f64],
    thresholds: &[f64],
) -> Result<ScoreReport> {
    let model = DnpModel::new(design, y, link, lambda)?;
    let state = model.evaluate(beta, masses, None)?;
    let s = model.score_beta(&state)?;
    let a = model.score_operator(&state, thresholds)?;
    Ok(ScoreReport {
        s_lambda: s,
        a_values: thresholds.iter().copied().zip(a).collect(),
    })
}

/// Sandwich covariance at the fit's (β̂, p̂).
pub fn sandwich_covariance(fit: &DnpFit, design: &AdditiveDesign, y: &[f64]) -> Result<DMatrix<f64>> {
    let model = DnpModel::new(design, y, fit.link, &fit.lambda)?;
    let guesses: Vec<f64> = fit.tilts.iter().map(|t| t.theta).collect();
    let state = model.evaluate(&fit.beta_hat, fit.f_hat.masses(), Some(&guesses))?;
    model.sandwich(&state)
}

/// Starting coefficients whose means lie strictly inside the response hull.
fn initial_beta(design: &AdditiveDesign, y: &[f64], link: Link, start: Option<&DVector<f64>>) -> Result<DVector<f64>> {
    let k = design.ncols();
    let ic = design.intercept_index();
    let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ybar = y.iter().sum::<f64>() / y.len() as f64;
    let inside = |mu: f64| mu > lo && mu < hi;
    let mut beta = match start {
        Some(b) if b.len() != k => {
            return Err(Error::DimensionMismatch {
                expected: k,
                found: b.len(),
            })
        }
        Some(b) => b.clone(),
        None => DVector::zeros(k),
    };
    if start.is_none() || !inside(link.inverse(beta[ic])) {
        beta[ic] = link.link(ybar);
    }
    if !beta[ic].is_finite() {
        return Err(Error::Domain {
            index: 0,
            reason: format!("mean response {ybar} is outside the range of the {link} link"),
        });
    }
    for _ in 0..5000 {
        let eta = &design.matrix * &beta;
        if eta.iter().all(|e| inside(link.inverse(*e))) {
            return Ok(beta);
        }
        for c in 0..k {
            if c != ic {
                beta[c] *= 0.99;
            }
        }
    }
    for c in 0..k {
        if c != ic {
            beta[c] = 0.0;
        }
    }
    Ok(beta)
}

/// Jointly maximizes the penalized empirical log-likelihood by block-coordinate ascent.
pub fn dnp_maximize(design: &AdditiveDesign, y: &[f64], link: Link, lambda: &[f64], opts: &DnpOptions) -> Result<DnpFit> {
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::Parameter(format!("damping must be in (0, 1], got {}", opts.damping)));
    }
    if !(opts.tol > 0.0) || opts.max_outer == 0 {
        return Err(Error::Parameter("tol must be positive and max_outer at least 1".into()));
    }
    let model = DnpModel::new(design, y, link, lambda)?.with_tilt_tol(opts.tilt_tol);
    let n = model.n();
    let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return degenerate_fit(&model, link);
    }

    let beta0 = initial_beta(design, y, link, opts.initial_beta.as_ref())?;
    let uniform = vec![1.0 / n as f64; n];
    let mut state = model.evaluate(&beta0, &uniform, None)?;
    let mut warnings = Vec::new();
    let mut alpha = opts.damping;
    let mut converged = false;
    let iterations;
    let mut nonpositive = 0;
    let mut kkt = KktReport::default();

    let mut sweeps = 0;
    let mut stalled = false;
    let mut step = |state: &DnpState, alpha: &mut f64, sweeps: &mut usize| -> Result<Option<DnpState>> {
        *sweeps += 1;
        match ascent_sweep(&model, state, *alpha, opts.mass_floor)? {
            Some((next, a, neg)) => {
                nonpositive += usize::from(neg);
                *alpha = (a * 2.0).min(opts.damping);
                Ok(Some(next))
            }
            None => Ok(None),
        }
    };
    while sweeps < opts.max_outer {
        // two plain sweeps, then a squared-extrapolation attempt on (β, log p)
        let before = state.objective;
        let Some(s1) = step(&state, &mut alpha, &mut sweeps)? else {
            stalled = true;
            break;
        };
        let mut next = s1;
        if sweeps < opts.max_outer {
            if let Some(s2) = step(&next, &mut alpha, &mut sweeps)? {
                let s1 = std::mem::replace(&mut next, s2);
                if sweeps < opts.max_outer {
                    if let Some(x) = extrapolate(&model, &state, &s1, &next)? {
                        let mut a = alpha;
                        if let Some(s3) = step(&x, &mut a, &mut sweeps)? {
                            if s3.objective >= next.objective {
                                next = s3;
                                alpha = a;
                            }
                        }
                    }
                }
            }
        }
        let change = (next.objective - before).abs() / before.abs().max(1.0);
        state = next;
        if change < opts.tol {
            kkt = model.kkt(&state)?;
            if kkt.max() < 10.0 * opts.tol {
                converged = true;
                break;
            }
        }
    }
    iterations = sweeps;
    if stalled {
        // no ascent possible at this resolution
        kkt = model.kkt(&state)?;
        converged = kkt.max() < 10.0 * opts.tol;
        if !converged {
            warnings.push(format!("sweep {sweeps}: no ascent step found; stopping"));
        }
    }
    if !converged {
        kkt = model.kkt(&state)?;
        warnings.push(format!(
            "not converged after {iterations} sweeps; largest KKT residual {:e}",
            kkt.max()
        ));
    }
    if nonpositive > 0 {
        warnings.push(format!("{nonpositive} sweeps had non-positive mass-update denominators"));
    }
    let cov_beta = if opts.compute_covariance {
        match model.sandwich(&state) {
            Ok(c) => c,
            Err(e) if !converged => {
                warnings.push(format!("covariance unavailable: {e}"));
                DMatrix::zeros(design.ncols(), design.ncols())
            }
            Err(e) => return Err(e),
        }
    } else {
        DMatrix::zeros(design.ncols(), design.ncols())
    };
    let fitted = state.means.iter().map(|m| m.mu).collect();
    Ok(DnpFit {
        f_hat: DiscreteDistribution::new(y.to_vec(), state.masses.clone())?,
        tilts: state.tilts,
        penalized_loglik: state.objective,
        cov_beta,
        kkt,
        lambda: lambda.to_vec(),
        iterations,
        converged,
        link,
        eta: state.eta,
        fitted,
        nonpositive_denominators: nonpositive,
        warnings,
        beta_hat: state.beta,
    })
}

/// One ascent-checked sweep from `state`, halving the damping until the objective does not drop.
/// Returns the new state, the damping used and whether a mass denominator was non-positive.
fn ascent_sweep(model: &DnpModel<'_>, state: &DnpState, alpha: f64, floor: f64) -> Result<Option<(DnpState, f64, bool)>> {
    let score = model.score_beta(state)?;
    let step = fisher_step(model, state, &score)?;
    let guesses: Vec<f64> = state.tilts.iter().map(|t| t.theta).collect();
    let mut a = alpha;
    while a >= 1e-10 {
        match trial_sweep(model, state, &step, a, floor, &guesses) {
            Ok((cand, neg)) if cand.objective >= state.objective - 1e-12 => return Ok(Some((cand, a, neg))),
            Ok(_)
            | Err(Error::InfeasibleMean { .. })
            | Err(Error::NonFinite(_))
            | Err(Error::Solver(_))
            | Err(Error::VarianceDegenerate { .. }) => a *= 0.5,
            Err(e) => return Err(e),
        }
    }
    Ok(None)
}

/// Squared extrapolation from three successive iterates; None when the
/// extrapolated point is infeasible or no better than the last iterate.
fn extrapolate(model: &DnpModel<'_>, s0: &DnpState, s1: &DnpState, s2: &DnpState) -> Result<Option<DnpState>> {
    let pack = |s: &DnpState| -> DVector<f64> {
        DVector::from_iterator(
            s.beta.len() + s.masses.len(),
            s.beta.iter().copied().chain(s.masses.iter().map(|p| p.ln())),
        )
    };
    let (x0, x1, x2) = (pack(s0), pack(s1), pack(s2));
    let r = &x1 - &x0;
    let v = &x2 - &x1 - &r;
    let (rn, vn) = (r.norm(), v.norm());
    if vn == 0.0 || !rn.is_finite() {
        return Ok(None);
    }
    let k = s0.beta.len();
    let guesses: Vec<f64> = s2.tilts.iter().map(|t| t.theta).collect();
    let mut step = -(rn / vn).max(1.0);
    while step < -1.0 {
        let x = &x0 - &r * (2.0 * step) + &v * (step * step);
        let beta = x.rows(0, k).into_owned();
        let mut masses: Vec<f64> = x.rows(k, x.len() - k).iter().map(|l| l.exp()).collect();
        let total: f64 = masses.iter().sum();
        if total.is_finite() && total > 0.0 {
            for p in &mut masses {
                *p /= total;
            }
            match model.evaluate(&beta, &masses, Some(&guesses)) {
                Ok(st) if model.check_variances(&st).is_ok() && st.objective > s2.objective => return Ok(Some(st)),
                Ok(_)
                | Err(Error::InfeasibleMean { .. })
                | Err(Error::NonFinite(_))
                | Err(Error::Solver(_))
                | Err(Error::VarianceDegenerate { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        step = 0.5 * (step - 1.0);
        if step > -1.0 + 1e-3 {
            break;
        }
    }
    Ok(None)
}

/// Penalized Fisher-scoring direction for β with p held fixed.
fn fisher_step(model: &DnpModel<'_>, state: &DnpState, score: &DVector<f64>) -> Result<DVector<f64>> {
    let n = model.n();
    let mut bw = model.design.matrix.clone();
    for i in 0..n {
        let m = state.means[i];
        bw.row_mut(i).scale_mut(m.d1 * m.d1 / state.tilts[i].tilted_variance / n as f64);
    }
    let info = model.design.matrix.tr_mul(&bw) + &model.penalty;
    linalg::solve_spd(&info, score)
}

/// One damped sweep: β-step, tilt re-solve, mass fixed-point step, tilt re-solve.
fn trial_sweep(
    model: &DnpModel<'_>,
    state: &DnpState,
    step: &DVector<f64>,
    alpha: f64,
    floor: f64,
    guesses: &[f64],
) -> Result<(DnpState, bool)> {
    let beta = &state.beta + step * alpha;
    let mid = model.evaluate(&beta, &state.masses, Some(guesses))?;
    model.check_variances(&mid)?;
    let d = model.denominators(&mid);
    let mut nonpositive = false;
    let mut masses: Vec<f64> = d
        .iter()
        .zip(&mid.masses)
        .map(|(&dj, &pj)| {
            let target = if dj > 0.0 {
                1.0 / dj
            } else {
                nonpositive = true;
                pj * std::f64::consts::E
            };
            ((1.0 - alpha) * pj + alpha * target).max(floor)
        })
        .collect();
    let total: f64 = masses.iter().sum();
    for p in &mut masses {
        *p /= total;
    }
    let mid_guesses: Vec<f64> = mid.tilts.iter().map(|t| t.theta).collect();
    let next = model.evaluate(&beta, &masses, Some(&mid_guesses))?;
    model.check_variances(&next)?;
    Ok((next, nonpositive))
}

/// All responses equal: the only feasible means are that value.
fn degenerate_fit(model: &DnpModel<'_>, link: Link) -> Result<DnpFit> {
    let n = model.n();
    let k = model.design.ncols();
    let y0 = model.y[0];
    let mut beta = DVector::zeros(k);
    beta[model.design.intercept_index()] = link.link(y0);
    if !beta[model.design.intercept_index()].is_finite() {
        return Err(Error::Domain {
            index: 0,
            reason: format!("constant response {y0} is outside the range of the {link} link"),
        });
    }
    let masses = vec![1.0 / n as f64; n];
    let eval = link.eval(beta[model.design.intercept_index()])?;
    let tilts = vec![
        TiltSolution {
            theta: 0.0,
            b: 0.0,
            tilted_mean: y0,
            tilted_variance: 0.0,
        };
        n
    ];
    let objective = model.objective_from(&beta, &masses, &tilts);
    Ok(DnpFit {
        f_hat: DiscreteDistribution::new(model.y.to_vec(), masses)?,
        tilts,
        penalized_loglik: objective,
        cov_beta: DMatrix::zeros(k, k),
        kkt: KktReport::default(),
        lambda: model.lambda.clone(),
        iterations: 0,
        converged: true,
        link,
        eta: vec![beta[model.design.intercept_index()]; n],
        fitted: vec![eval.mu; n],
        nonpositive_denominators: 0,
        warnings: vec!["all responses are equal; covariance set to zero".into()],
        beta_hat: beta,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothBandRow {
    pub x: f64,
    pub fhat: f64,
    pub se: f64,
    pub lo: f64,
    pub hi: f64,
    pub extrapolated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanBandRow {
    pub index: usize,
    pub eta: f64,
    pub se: f64,
    pub mu: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandTables {
    pub z: f64,
    pub smooths: Vec<Vec<SmoothBandRow>>,
    pub mean: Vec<MeanBandRow>,
    pub warnings: Vec<String>,
}

/// Two-sided standard normal quantile for a confidence level.
pub fn normal_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Parameter(format!("confidence level must be in (0, 1), got {level}")));
    }
    let normal = Normal::standard();
    Ok(normal.inverse_cdf(0.5 + 0.5 * level))
}

/// Pointwise bands for each smooth on its grid, and for the mean at each row of `mean_rows`.
pub fn confidence_bands(
    design: &AdditiveDesign,
    beta: &DVector<f64>,
    cov: &DMatrix<f64>,
    link: Link,
    grids: &[Vec<f64>],
    mean_rows: &DMatrix<f64>,
    level: f64,
) -> Result<BandTables> {
    let z = normal_quantile(level)?;
    let d = design.num_smooths();
    if grids.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: grids.len(),
        });
    }
    let k = design.ncols();
    if beta.len() != k || cov.nrows() != k || cov.ncols() != k || mean_rows.ncols() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            found: if beta.len() != k { beta.len() } else { cov.nrows() },
        });
    }
    let mut warnings = Vec::new();
    let mut smooths = Vec::with_capacity(d);
    for (j, grid) in grids.iter().enumerate() {
        let block = &design.blocks[j];
        let r = design.block_range(j);
        let bj = beta.rows(r.start, r.len());
        let cj = cov.view((r.start, r.start), (r.len(), r.len()));
        let mut rows = Vec::with_capacity(grid.len());
        let mut extrapolated = 0;
        for &x in grid {
            let b = DVector::from_vec(block.row(x));
            let fhat = b.dot(&bj);
            let se = (b.dot(&(cj * &b))).max(0.0).sqrt();
            let out = x < block.range.0 || x > block.range.1;
            extrapolated += usize::from(out);
            rows.push(SmoothBandRow {
                x,
                fhat,
                se,
                lo: fhat - z * se,
                hi: fhat + z * se,
                extrapolated: out,
            });
        }
        if extrapolated > 0 {
            warnings.push(format!(
                "smooth {}: {extrapolated} grid points outside the training range [{}, {}]",
                j + 1,
                block.range.0,
                block.range.1
            ));
        }
        smooths.push(rows);
    }
    let mut mean = Vec::with_capacity(mean_rows.nrows());
    for i in 0..mean_rows.nrows() {
        let b = mean_rows.row(i).transpose();
        let eta = b.dot(beta);
        let se = (b.dot(&(cov * &b))).max(0.0).sqrt();
        mean.push(MeanBandRow {
            index: i,
            eta,
            se,
            mu: link.inverse(eta),
            lo: link.inverse(eta - z * se),
            hi: link.inverse(eta + z * se),
        });
    }
    Ok(BandTables {
        z,
        smooths,
        mean,
        warnings,
    })
}

/// Kolmogorov sup-distance between two step CDFs.
pub fn distribution_distance(f1: &DiscreteDistribution, f2: &DiscreteDistribution) -> f64 {
    let sorted = |f: &DiscreteDistribution| {
        let mut v: Vec<(f64, f64)> = f.support().iter().copied().zip(f.masses().iter().copied()).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    };
    let (a, b) = (sorted(f1), sorted(f2));
    let mut points: Vec<f64> = a.iter().chain(&b).map(|p| p.0).collect();
    points.sort_by(f64::total_cmp);
    points.dedup();
    let (mut ia, mut ib) = (0, 0);
    let (mut ca, mut cb) = (0.0, 0.0);
    let mut sup: f64 = 0.0;
    for t in points {
        while ia < a.len() && a[ia].0 <= t {
            ca += a[ia].1;
            ia += 1;
        }
        while ib < b.len() && b[ib].0 <= t {
            cb += b[ib].1;
            ib += 1;
        }
        sup = sup.max((ca - cb).abs());
    }
    sup
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Poisson};

    fn small_problem(seed: u64, n: usize) -> (AdditiveDesign, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>());
        let y: Vec<f64> = (0..n)
            .map(|i| Poisson::new((0.5 + x[(i, 0)]).exp()).unwrap().sample(&mut rng) + rng.random::<f64>() * 0.1)
            .collect();
        let design = AdditiveDesign::build_with_quantile_knots(&x, 1, 2, &[0.05]).unwrap();
        (design, y)
    }

    #[test]
    fn distance_examples() {
        let a = DiscreteDistribution::new(vec![0.0], vec![1.0]).unwrap();
        let b = DiscreteDistribution::new(vec![1.0], vec![1.0]).unwrap();
        assert_eq!(distribution_distance(&a, &b), 1.0);
        assert_eq!(distribution_distance(&a, &a), 0.0);
        let c = DiscreteDistribution::new(vec![0.0, 1.0], vec![0.5, 0.5]).unwrap();
        let d = DiscreteDistribution::new(vec![0.0, 1.0], vec![0.25, 0.75]).unwrap();
        assert!((distribution_distance(&c, &d) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn z_for_95_percent() {
        assert!((normal_quantile(0.95).unwrap() - 1.959963984540054).abs() < 1e-9);
        assert!(normal_quantile(1.0).is_err());
    }

    #[test]
    fn single_observation() {
        let design = AdditiveDesign::intercept_only(1);
        let fit = dnp_maximize(&design, &[3.0], Link::Identity, &[], &DnpOptions::default()).unwrap();
        assert_eq!(fit.f_hat.masses(), &[1.0]);
        assert_eq!(fit.fitted, vec![3.0]);
        assert_eq!((fit.tilts[0].theta, fit.tilts[0].b), (0.0, 0.0));
    }

    #[test]
    fn intercept_only_gives_sample_mean_and_uniform_masses() {
        let y = [1.0, 2.0, 4.5, 7.0, 3.0];
        let design = AdditiveDesign::intercept_only(5);
        let fit = dnp_maximize(&design, &y, Link::Identity, &[], &DnpOptions::default()).unwrap();
        assert!(fit.converged);
        let ybar = y.iter().sum::<f64>() / 5.0;
        for (mu, t) in fit.fitted.iter().zip(&fit.tilts) {
            assert!((mu - ybar).abs() < 1e-9);
            assert!(t.theta.abs() < 1e-6);
        }
        for p in fit.f_hat.masses() {
            assert!((p - 0.2).abs() < 1e-8);
        }
    }

    #[test]
    fn score_with_zero_residuals_is_minus_penalty() {
        // a single common mean with all tilts at zero: residuals vanish only when y is constant in the
        // weighted sense, so test the β = 0 penalty-free case and the residual-free case separately
        let (design, y) = small_problem(1, 12);
        let n = y.len();
        let masses = vec![1.0 / n as f64; n];
        let mut beta = DVector::zeros(design.ncols());
        beta[design.intercept_index()] = y.iter().sum::<f64>() / n as f64;
        let model = DnpModel::new(&design, &y, Link::Identity, &[0.05]).unwrap();
        let state = model.evaluate(&beta, &masses, None).unwrap();
        let s = model.score_beta(&state).unwrap();
        let manual = design.matrix.tr_mul(&DVector::from_iterator(
            n,
            (0..n).map(|i| (y[i] - beta[design.intercept_index()]) / state.tilts[i].tilted_variance),
        )) / n as f64;
        assert!((s - manual).amax() < 1e-14);
    }

    #[test]
    fn score_operator_edges() {
        let (design, y) = small_problem(2, 10);
        let n = y.len();
        let masses: Vec<f64> = (0..n).map(|j| (1.0 + j as f64) / (n * (n + 1) / 2) as f64).collect();
        let mut beta = DVector::zeros(design.ncols());
        beta[design.intercept_index()] = 2.0;
        beta[0] = 0.3;
        let ymax = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ymin = y.iter().copied().fold(f64::INFINITY, f64::min);
        let rep = score_operator_f(&design, &y, Link::Identity, &[0.05], &beta, &masses, &[ymax, ymin - 1.0]).unwrap();
        // zero up to the tilt-solver tolerance
        assert!(rep.a_values[0].1.abs() < 1e-10, "{:?}", rep.a_values);
        assert_eq!(rep.a_values[1].1, 0.0);
    }

    #[test]
    fn sandwich_with_h_equal_w_is_inverse() {
        let w = DMatrix::from_row_slice(2, 2, &[-3.0, 1.0, 1.0, -2.0]);
        let s = sandwich_from_parts(&w, &w).unwrap();
        let inv = w.clone().try_inverse().unwrap();
        assert!((s - inv).amax() < 1e-14);
    }

    #[test]
    fn singular_bread_is_rank_error() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(sandwich_from_parts(&w, &w), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn small_fit_converges_with_certificates() {
        let (design, y) = small_problem(3, 60);
        let fit = dnp_maximize(&design, &y, Link::Log, &[0.05], &DnpOptions::default()).unwrap();
        assert!(fit.converged, "{:?}", fit.warnings);
        assert!(fit.kkt.score_beta_maxnorm < 1e-6);
        assert!(fit.kkt.score_f_maxnorm < 1e-6);
        assert!(fit.kkt.norm_constraint_max < 1e-8 && fit.kkt.mean_constraint_max < 1e-8);
        assert!((fit.f_hat.masses().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((&fit.cov_beta - fit.cov_beta.transpose()).amax() < 1e-12);
    }

    #[test]
    fn zero_covariance_collapses_bands() {
        let (design, y) = small_problem(4, 30);
        let k = design.ncols();
        let mut beta = DVector::zeros(k);
        beta[0] = 0.5;
        let grid = vec![vec![0.1, 0.5, 0.9]];
        let bands = confidence_bands(&design, &beta, &DMatrix::zeros(k, k), Link::Log, &grid, &design.matrix, 0.95).unwrap();
        for r in &bands.smooths[0] {
            assert_eq!((r.lo, r.hi), (r.fhat, r.fhat));
        }
        for r in &bands.mean {
            assert_eq!((r.lo, r.hi), (r.mu, r.mu));
        }
        let _ = y;
    }

    #[test]
    fn identity_mean_band_is_symmetric_and_extrapolation_flagged() {
        let (design, _) = small_problem(5, 30);
        let k = design.ncols();
        let beta = DVector::from_element(k, 0.2);
        let cov = DMatrix::identity(k, k) * 0.01;
        let bands = confidence_bands(&design, &beta, &cov, Link::Identity, &[vec![0.5, 2.0]], &design.matrix, 0.95).unwrap();
        for r in &bands.mean {
            assert!((r.lo - (r.eta - bands.z * r.se)).abs() < 1e-15);
            assert!((r.hi - (r.eta + bands.z * r.se)).abs() < 1e-15);
        }
        assert!(!bands.smooths[0][0].extrapolated);
        assert!(bands.smooths[0][1].extrapolated);
        assert_eq!(bands.warnings.len(), 1);
    }
}
