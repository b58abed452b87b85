//! Classical penalized GAMs with working variance functions: penalized IRLS,
//! GCV smoothing-parameter selection, and the plug-in smoothing parameters
//! handed to the doubly-nonparametric fitter.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::AdditiveDesign;
use crate::error::{Error, Result};
use crate::link::Link;
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceKind {
    /// V(μ) = 1, scaled by σ².
    Constant,
    Mu,
    /// V(μ) = μ², scaled by φ.
    PhiMuSq,
    /// Negative-binomial type V(μ) = μ + φμ² with φ estimated by moments.
    MuPlusPhiMuSq,
    MuOneMinusMu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispersionMode {
    Fixed,
    PearsonEstimated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VarianceFamily {
    pub kind: VarianceKind,
    pub dispersion: DispersionMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseType {
    Continuous,
    Count,
    Binary,
}

impl FromStr for ResponseType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "continuous" => Ok(Self::Continuous),
            "count" => Ok(Self::Count),
            "binary" => Ok(Self::Binary),
            other => Err(Error::Parameter(format!("unknown response type `{other}`"))),
        }
    }
}

impl VarianceKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Constant => "sigma2",
            Self::Mu => "mu",
            Self::PhiMuSq => "phi_mu_sq",
            Self::MuPlusPhiMuSq => "mu_plus_phi_mu_sq",
            Self::MuOneMinusMu => "mu_one_minus_mu",
        }
    }
}

impl VarianceFamily {
    pub fn new(kind: VarianceKind, dispersion: DispersionMode) -> Self {
        Self { kind, dispersion }
    }

    /// The usual dispersion treatment for a working family on a response type:
    /// Poisson, Bernoulli and negative-binomial families have known scale,
    /// everything else is quasi with Pearson dispersion.
    pub fn default_for(kind: VarianceKind, response: ResponseType) -> Self {
        let dispersion = match (kind, response) {
            (VarianceKind::Mu, ResponseType::Count)
            | (VarianceKind::MuOneMinusMu, ResponseType::Binary)
            | (VarianceKind::MuPlusPhiMuSq, _) => DispersionMode::Fixed,
            _ => DispersionMode::PearsonEstimated,
        };
        Self { kind, dispersion }
    }

    /// V(μ); `nb_phi` is the negative-binomial shape (ignored by other kinds).
    pub fn variance(&self, mu: f64, nb_phi: f64) -> f64 {
        match self.kind {
            VarianceKind::Constant => 1.0,
            VarianceKind::Mu => mu,
            VarianceKind::PhiMuSq => mu * mu,
            VarianceKind::MuPlusPhiMuSq => mu + nb_phi * mu * mu,
            VarianceKind::MuOneMinusMu => mu * (1.0 - mu),
        }
    }

    /// Quasi-log-likelihood Q(y; μ) with ∂Q/∂μ = (y − μ)/V(μ), up to terms free of μ.
    pub fn quasi_loglik(&self, y: f64, mu: f64, nb_phi: f64) -> f64 {
        match self.kind {
            VarianceKind::Constant => -0.5 * (y - mu) * (y - mu),
            VarianceKind::Mu => y * mu.ln() - mu,
            VarianceKind::PhiMuSq => -y / mu - mu.ln(),
            VarianceKind::MuPlusPhiMuSq => {
                if nb_phi <= 0.0 {
                    y * mu.ln() - mu
                } else {
                    y * (nb_phi * mu / (1.0 + nb_phi * mu)).ln() - (1.0 + nb_phi * mu).ln() / nb_phi
                }
            }
            VarianceKind::MuOneMinusMu => {
                let a = if y > 0.0 { y * mu.ln() } else { 0.0 };
                let b = if y < 1.0 { (1.0 - y) * (1.0 - mu).ln() } else { 0.0 };
                a + b
            }
        }
    }

    /// Rejects responses outside the family's domain.
    pub fn check_responses(&self, y: &[f64]) -> Result<()> {
        match self.kind {
            VarianceKind::Constant => Ok(()),
            VarianceKind::Mu | VarianceKind::PhiMuSq | VarianceKind::MuPlusPhiMuSq => {
                if y.iter().any(|v| *v < 0.0) {
                    Err(Error::NegativeResponses(self.kind.name().into()))
                } else {
                    Ok(())
                }
            }
            VarianceKind::MuOneMinusMu => match y.iter().position(|v| !(0.0..=1.0).contains(v)) {
                Some(i) => Err(Error::Domain {
                    index: i,
                    reason: format!("response {} is not a proportion in [0, 1]", y[i]),
                }),
                None => Ok(()),
            },
        }
    }

    pub fn label(&self) -> String {
        let mode = match self.dispersion {
            DispersionMode::Fixed => "fixed",
            DispersionMode::PearsonEstimated => "pearson",
        };
        format!("{}:{}", self.kind.name(), mode)
    }
}

impl fmt::Display for VarianceFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind.name())
    }
}

impl FromStr for VarianceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sigma2" | "constant" => Ok(Self::Constant),
            "mu" => Ok(Self::Mu),
            "phi_mu_sq" | "mu_sq" => Ok(Self::PhiMuSq),
            "mu_plus_phi_mu_sq" | "nb" => Ok(Self::MuPlusPhiMuSq),
            "mu_one_minus_mu" | "bernoulli" => Ok(Self::MuOneMinusMu),
            other => Err(Error::Parameter(format!("unknown variance family `{other}`"))),
        }
    }
}

impl VarianceFamily {
    /// Parses `kind` or `kind:fixed` / `kind:pearson`, defaulting the dispersion by response type.
    pub fn parse(s: &str, response: ResponseType) -> Result<Self> {
        let mut parts = s.splitn(2, ':');
        let kind: VarianceKind = parts.next().unwrap_or_default().parse()?;
        let mut fam = Self::default_for(kind, response);
        match parts.next() {
            None => {}
            Some("fixed") => fam.dispersion = DispersionMode::Fixed,
            Some("pearson") => fam.dispersion = DispersionMode::PearsonEstimated,
            Some(other) => return Err(Error::Parameter(format!("unknown dispersion mode `{other}`"))),
        }
        Ok(fam)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PirlsOptions {
    pub max_iter: usize,
    /// Max-norm tolerance on the penalized quasi-score.
    pub tol: f64,
    pub initial_beta: Option<DVector<f64>>,
    /// Return the last iterate with `converged = false` instead of an error.
    pub allow_nonconverged: bool,
}

impl Default for PirlsOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-8,
            initial_beta: None,
            allow_nonconverged: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GamFit {
    pub beta_hat: DVector<f64>,
    pub lambda: Vec<f64>,
    pub edf: f64,
    /// Dispersion used for inference (fixed or Pearson-estimated).
    pub dispersion_hat: f64,
    /// Pearson χ²/(n − edf), reported regardless of the dispersion mode.
    pub pearson_dispersion: f64,
    pub pearson: f64,
    pub cov_beta: DMatrix<f64>,
    pub gcv_score: f64,
    pub converged: bool,
    pub iterations: usize,
    pub score_maxnorm: f64,
    pub eta: Vec<f64>,
    pub fitted: Vec<f64>,
    pub family: VarianceFamily,
    /// Negative-binomial shape, when the family has one.
    pub nb_phi: Option<f64>,
    pub penalized_quasi_loglik: f64,
}

struct Working<'a> {
    design: &'a AdditiveDesign,
    y: &'a [f64],
    weights: Vec<f64>,
    link: Link,
    family: VarianceFamily,
    penalty: DMatrix<f64>,
    nb_phi: f64,
}

struct Evaluated {
    eta: DVector<f64>,
    mu: Vec<f64>,
    d1: Vec<f64>,
    var: Vec<f64>,
    objective: f64,
}

impl Working<'_> {
    fn evaluate(&self, beta: &DVector<f64>) -> Result<Evaluated> {
        let eta = &self.design.matrix * beta;
        self.evaluate_eta(eta, Some(beta))
    }

    fn evaluate_eta(&self, eta: DVector<f64>, beta: Option<&DVector<f64>>) -> Result<Evaluated> {
        let n = self.y.len();
        let mut mu = Vec::with_capacity(n);
        let mut d1 = Vec::with_capacity(n);
        let mut var = Vec::with_capacity(n);
        let mut q = 0.0;
        for i in 0..n {
            let m = self.link.eval(eta[i])?;
            let v = self.family.variance(m.mu, self.nb_phi);
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Domain {
                    index: i,
                    reason: format!("variance function {} is {v} at mean {}", self.family.kind.name(), m.mu),
                });
            }
            q += self.weights[i] * self.family.quasi_loglik(self.y[i], m.mu, self.nb_phi);
            mu.push(m.mu);
            d1.push(m.d1);
            var.push(v);
        }
        let pen = beta.map_or(0.0, |b| 0.5 * b.dot(&(&self.penalty * b)));
        Ok(Evaluated {
            eta,
            mu,
            d1,
            var,
            objective: q - pen,
        })
    }

    fn score(&self, beta: &DVector<f64>, ev: &Evaluated) -> DVector<f64> {
        let r = DVector::from_iterator(
            self.y.len(),
            (0..self.y.len()).map(|i| self.weights[i] * (self.y[i] - ev.mu[i]) * ev.d1[i] / ev.var[i]),
        );
        self.design.matrix.tr_mul(&r) - &self.penalty * beta
    }

    fn irls_weights(&self, ev: &Evaluated) -> Vec<f64> {
        (0..self.y.len())
            .map(|i| self.weights[i] * ev.d1[i] * ev.d1[i] / ev.var[i])
            .collect()
    }

    fn initial_eta(&self) -> DVector<f64> {
        let n = self.y.len();
        let wsum: f64 = self.weights.iter().sum();
        let ybar = self.y.iter().zip(&self.weights).map(|(y, w)| y * w).sum::<f64>() / wsum;
        DVector::from_iterator(
            n,
            self.y.iter().zip(&self.weights).map(|(&y, &w)| {
                let mu0 = match self.link {
                    Link::Identity => y,
                    Link::Log => 0.5 * (y.max(0.0) + ybar.max(1e-3)),
                    Link::Logit => (w * y + 0.5) / (w + 1.0),
                };
                self.link.link(mu0)
            }),
        )
    }
}

/// X'WX for diagonal W.
fn weighted_gram(b: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let mut bw = b.clone();
    for (i, wi) in w.iter().enumerate() {
        bw.row_mut(i).scale_mut(*wi);
    }
    b.tr_mul(&bw)
}

/// Penalized IRLS for a working variance family.
pub fn pirls_fit(
    design: &AdditiveDesign,
    y: &[f64],
    weights: Option<&[f64]>,
    link: Link,
    family: VarianceFamily,
    lambda: &[f64],
    opts: &PirlsOptions,
) -> Result<GamFit> {
    let n = design.nrows();
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: y.len(),
        });
    }
    let weights = match weights {
        Some(w) if w.len() != n => {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: w.len(),
            })
        }
        Some(w) => w.to_vec(),
        None => vec![1.0; n],
    };
    family.check_responses(y)?;
    let penalty = design.penalty_for(lambda)?;

    if family.kind != VarianceKind::MuPlusPhiMuSq {
        let work = Working {
            design,
            y,
            weights,
            link,
            family,
            penalty,
            nb_phi: 0.0,
        };
        return pirls_inner(&work, lambda, opts, None);
    }

    // alternate the IRLS fit with a moment update of the negative-binomial shape
    let mut nb_phi = 0.1;
    let mut start = opts.initial_beta.clone();
    let mut last = None;
    for _ in 0..30 {
        let work = Working {
            design,
            y,
            weights: weights.clone(),
            link,
            family,
            penalty: penalty.clone(),
            nb_phi,
        };
        let inner = PirlsOptions {
            initial_beta: start.clone(),
            ..opts.clone()
        };
        let fit = pirls_inner(&work, lambda, &inner, Some(nb_phi))?;
        let (num, den) = y
            .iter()
            .zip(&fit.fitted)
            .fold((0.0, 0.0), |(a, b), (yi, mi)| (a + (yi - mi).powi(2) - mi, b + mi * mi));
        let next = (num / den).max(1e-8);
        start = Some(fit.beta_hat.clone());
        let done = (next - nb_phi).abs() <= 1e-6 * nb_phi.max(1e-8);
        last = Some(fit);
        if done {
            break;
        }
        nb_phi = next;
    }
    last.ok_or_else(|| Error::Diverged("negative-binomial shape iteration did not run".into()))
}

fn pirls_inner(work: &Working<'_>, lambda: &[f64], opts: &PirlsOptions, nb_phi: Option<f64>) -> Result<GamFit> {
    let design = work.design;
    let n = design.nrows();
    let b = &design.matrix;

    let mut current = match &opts.initial_beta {
        Some(beta0) => {
            if beta0.len() != design.ncols() {
                return Err(Error::DimensionMismatch {
                    expected: design.ncols(),
                    found: beta0.len(),
                });
            }
            let ev = work.evaluate(beta0)?;
            Some((beta0.clone(), ev))
        }
        None => None,
    };
    let mut start_eval = match &current {
        Some(_) => None,
        None => Some(work.evaluate_eta(work.initial_eta(), None)?),
    };

    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=opts.max_iter {
        iterations = it;
        let ev_ref = match (&current, &start_eval) {
            (Some((_, ev)), _) => ev,
            (None, Some(ev)) => ev,
            _ => unreachable!(),
        };
        let w = work.irls_weights(ev_ref);
        let z: DVector<f64> = DVector::from_iterator(
            n,
            (0..n).map(|i| ev_ref.eta[i] + (work.y[i] - ev_ref.mu[i]) / ev_ref.d1[i]),
        );
        let gram = weighted_gram(b, &w);
        let a = &gram + &work.penalty;
        let wz = DVector::from_iterator(n, (0..n).map(|i| w[i] * z[i]));
        let rhs = b.tr_mul(&wz);
        let proposal = linalg::solve_spd(&a, &rhs)?;

        let (beta, ev) = match &current {
            None => {
                let ev = work.evaluate(&proposal)?;
                (proposal, ev)
            }
            Some((old_beta, old_ev)) => {
                let mut step = 1.0;
                loop {
                    let cand = old_beta + (&proposal - old_beta) * step;
                    match work.evaluate(&cand) {
                        Ok(ev) if ev.objective >= old_ev.objective - 1e-12 * old_ev.objective.abs().max(1.0) => {
                            break (cand, ev);
                        }
                        Ok(_) | Err(Error::Domain { .. }) | Err(Error::NonFinite(_)) if step > 1e-10 => step *= 0.5,
                        Ok(_) => break (old_beta.clone(), work.evaluate(old_beta)?),
                        Err(e) => return Err(e),
                    }
                }
            }
        };
        let score = work.score(&beta, &ev);
        let smax = score.amax();
        trace.push(smax);
        let stalled = current
            .as_ref()
            .is_some_and(|(old, _)| (&beta - old).amax() <= 1e-13 * beta.amax().max(1.0));
        current = Some((beta, ev));
        start_eval = None;
        let scale = rhs.amax().max(1.0);
        if smax < opts.tol || (stalled && smax < 1e-9 * scale) {
            converged = true;
            break;
        }
    }
    let (beta, ev) = current.expect("at least one IRLS iteration");
    if !converged && !opts.allow_nonconverged {
        return Err(Error::Diverged(format!(
            "penalized IRLS did not converge in {} iterations; score max-norm trace tail {:?}",
            opts.max_iter,
            &trace[trace.len().saturating_sub(5)..]
        )));
    }
    finish_fit(work, lambda, beta, ev, converged, iterations, nb_phi)
}

fn finish_fit(
    work: &Working<'_>,
    lambda: &[f64],
    beta: DVector<f64>,
    ev: Evaluated,
    converged: bool,
    iterations: usize,
    nb_phi: Option<f64>,
) -> Result<GamFit> {
    let n = work.y.len();
    let w = work.irls_weights(&ev);
    let gram = weighted_gram(&work.design.matrix, &w);
    let a = &gram + &work.penalty;
    let a_inv = linalg::inverse_spd(&a)?;
    let edf = (&a_inv * &gram).trace();
    let pearson: f64 = (0..n)
        .map(|i| work.weights[i] * (work.y[i] - ev.mu[i]).powi(2) / ev.var[i])
        .sum();
    let resid_df = (n as f64 - edf).max(1e-8);
    let pearson_dispersion = pearson / resid_df;
    let dispersion_hat = match work.family.dispersion {
        DispersionMode::Fixed => 1.0,
        DispersionMode::PearsonEstimated => pearson_dispersion,
    };
    let score = work.score(&beta, &ev);
    let cov_beta = linalg::symmetrize(&(a_inv * dispersion_hat));
    Ok(GamFit {
        lambda: lambda.to_vec(),
        edf,
        dispersion_hat,
        pearson_dispersion,
        pearson,
        cov_beta,
        gcv_score: gcv_value(n, pearson, edf),
        converged,
        iterations,
        score_maxnorm: score.amax(),
        eta: ev.eta.iter().copied().collect(),
        fitted: ev.mu,
        family: work.family,
        nb_phi,
        penalized_quasi_loglik: ev.objective,
        beta_hat: beta,
    })
}

/// GCV = n·D/(n − edf)² with the Pearson statistic as D.
pub fn gcv_value(n: usize, pearson: f64, edf: f64) -> f64 {
    let n = n as f64;
    n * pearson / (n - edf).powi(2)
}

/// Candidate smoothing parameters for GCV selection.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaGrid {
    values: Vec<f64>,
}

impl LambdaGrid {
    /// Deduplicated, sorted ascending.
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Parameter("empty smoothing-parameter grid".into()));
        }
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Parameter("grid values must be finite and >= 0".into()));
        }
        values.sort_by(f64::total_cmp);
        values.dedup();
        Ok(Self { values })
    }

    /// `points` values log-spaced over [10^lo, 10^hi].
    pub fn log_spaced(lo: f64, hi: f64, points: usize) -> Result<Self> {
        if points == 0 {
            return Err(Error::Parameter("grid needs at least one point".into()));
        }
        let values = if points == 1 {
            vec![10f64.powf(lo)]
        } else {
            (0..points)
                .map(|k| 10f64.powf(lo + (hi - lo) * k as f64 / (points - 1) as f64))
                .collect()
        };
        Self::new(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

impl Default for LambdaGrid {
    fn default() -> Self {
        Self::log_spaced(-4.0, 4.0, 21).expect("static grid")
    }
}

#[derive(Debug, Clone)]
pub struct GcvSelection {
    pub lambda: Vec<f64>,
    pub score: f64,
    pub fit: GamFit,
    /// Number of distinct λ vectors fitted.
    pub evaluations: usize,
}

/// Coordinate descent over a per-term grid minimizing GCV; ties go to larger λ.
pub fn gcv_select(
    design: &AdditiveDesign,
    y: &[f64],
    weights: Option<&[f64]>,
    link: Link,
    family: VarianceFamily,
    grid: &LambdaGrid,
) -> Result<GcvSelection> {
    family.check_responses(y)?;
    let d = design.num_smooths();
    let g = grid.values();
    let tie_tol = gcv_tie_tolerance(y, weights, family);

    let mut cache: HashMap<Vec<usize>, Option<GamFit>> = HashMap::new();
    let mut warm: Option<DVector<f64>> = None;
    let mut eval = |idx: &[usize], warm: &mut Option<DVector<f64>>| -> Option<GamFit> {
        if let Some(hit) = cache.get(idx) {
            return hit.clone();
        }
        let lambdas: Vec<f64> = idx.iter().map(|&k| g[k]).collect();
        let opts = PirlsOptions {
            initial_beta: warm.clone(),
            ..PirlsOptions::default()
        };
        let fit = pirls_fit(design, y, weights, link, family, &lambdas, &opts)
            .or_else(|_| pirls_fit(design, y, weights, link, family, &lambdas, &PirlsOptions::default()))
            .ok();
        if let Some(f) = &fit {
            *warm = Some(f.beta_hat.clone());
        }
        cache.insert(idx.to_vec(), fit.clone());
        fit
    };

    let mut current = vec![g.len() / 2; d];
    let mut best = eval(&current, &mut warm);
    if d > 0 {
        for _sweep in 0..3 {
            let mut changed = false;
            for j in 0..d {
                // largest λ first so that ties keep the larger value
                for k in (0..g.len()).rev() {
                    if k == current[j] {
                        continue;
                    }
                    let mut cand = current.clone();
                    cand[j] = k;
                    let Some(fit) = eval(&cand, &mut warm) else { continue };
                    let better = match &best {
                        None => true,
                        Some(b) => {
                            fit.gcv_score < b.gcv_score - tie_tol
                                || (fit.gcv_score <= b.gcv_score + tie_tol && k > current[j])
                        }
                    };
                    if better {
                        best = Some(fit);
                        current = cand;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
    }
    let evaluations = cache.len();
    match best {
        Some(fit) => Ok(GcvSelection {
            lambda: current.iter().map(|&k| g[k]).collect(),
            score: fit.gcv_score,
            fit,
            evaluations,
        }),
        None => Err(Error::Selection("every candidate fit diverged".into())),
    }
}

/// Absolute slack under which two GCV scores count as tied.
fn gcv_tie_tolerance(y: &[f64], weights: Option<&[f64]>, family: VarianceFamily) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let v = family.variance(mean.abs().max(1e-8), 0.0).max(1e-12);
    let wbar = weights.map_or(1.0, |w| w.iter().sum::<f64>() / n);
    let null = y.iter().map(|yi| (yi - mean).powi(2)).sum::<f64>() * wbar / v / n;
    1e-10 * null.max(f64::MIN_POSITIVE)
}

/// Smoothing parameters from a preliminary working GAM, with the dispersion
/// needed to move them onto the averaged-likelihood scale of the DNP objective.
#[derive(Debug, Clone)]
pub struct PluginSmoothing {
    pub lambda: Vec<f64>,
    pub dispersion: f64,
    pub n: usize,
    pub response_type: ResponseType,
    pub link: Link,
    pub fit: GamFit,
}

impl PluginSmoothing {
    /// λ / (n φ̂): the penalty that matches the preliminary fit when the
    /// log-likelihood is averaged over observations and the scale is absorbed into F.
    pub fn dnp_lambda(&self) -> Vec<f64> {
        let scale = self.n as f64 * self.dispersion.max(1e-12);
        self.lambda.iter().map(|l| l / scale).collect()
    }
}

/// Preliminary working family and link by response type.
pub fn preliminary_model(response_type: ResponseType) -> (VarianceFamily, Link) {
    match response_type {
        ResponseType::Continuous => (
            VarianceFamily::new(VarianceKind::Constant, DispersionMode::PearsonEstimated),
            Link::Identity,
        ),
        ResponseType::Count => (VarianceFamily::new(VarianceKind::Mu, DispersionMode::Fixed), Link::Log),
        ResponseType::Binary => (
            VarianceFamily::new(VarianceKind::MuOneMinusMu, DispersionMode::Fixed),
            Link::Logit,
        ),
    }
}

/// Plug-in smoothing parameters from the preliminary GAM chosen by response type.
pub fn plugin_lambda(
    design: &AdditiveDesign,
    y: &[f64],
    weights: Option<&[f64]>,
    response_type: ResponseType,
    grid: &LambdaGrid,
) -> Result<PluginSmoothing> {
    match response_type {
        ResponseType::Count => {
            if let Some(i) = y.iter().position(|v| *v < 0.0 || v.fract() != 0.0) {
                return Err(Error::Domain {
                    index: i,
                    reason: format!("count response {} is not a nonnegative integer", y[i]),
                });
            }
        }
        ResponseType::Binary => {
            if let Some(i) = y.iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Domain {
                    index: i,
                    reason: format!("binary response {} is not on the [0, 1] scale", y[i]),
                });
            }
        }
        ResponseType::Continuous => {}
    }
    let (family, link) = preliminary_model(response_type);
    let sel = gcv_select(design, y, weights, link, family, grid)?;
    Ok(PluginSmoothing {
        lambda: sel.lambda,
        dispersion: sel.fit.pearson_dispersion,
        n: y.len(),
        response_type,
        link,
        fit: sel.fit,
    })
}
