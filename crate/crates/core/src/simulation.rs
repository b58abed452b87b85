//! Simulation settings: true smooth functions, response generators (including
//! mean-parametrized Conway-Maxwell-Poisson and beta-binomial), and datasets.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Binomial, Distribution, Gamma, Normal, Poisson};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::gam::{ResponseType, VarianceKind};
use crate::link::Link;

/// Multiplier applied to the summed smooths under the log link.
pub const LOG_LINK_SCALE: f64 = 0.1;
/// Multiplier and centering offset for the summed smooths under the logit link.
pub const LOGIT_LINK_SCALE: f64 = 0.25;
pub const LOGIT_LINK_OFFSET: f64 = 11.5;

/// Over-dispersed binomial: intra-cluster correlation giving dispersion 1 + (m − 1)ρ = 4 at m = 6.
pub const BETA_BINOMIAL_RHO: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimDistribution {
    Gamma,
    HeteroscedasticNormal,
    Poisson,
    NegativeBinomial,
    CmpUnder,
    CmpOver,
    Binomial,
    BetaBinomial,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimSetting {
    pub id: u8,
    pub n: usize,
    pub seed: u64,
}

/// f₁ … f₄ evaluated at x.
pub fn true_f(j: usize, x: f64) -> Result<f64> {
    match j {
        1 => Ok(2.0 * (std::f64::consts::PI * x).sin()),
        2 => Ok((2.0 * x).exp()),
        3 => Ok(x.powi(11) * (10.0 * (1.0 - x)).powi(6) + 10.0 * (10.0 * x).powi(3) * (1.0 - x).powi(10)),
        4 => Ok(0.0),
        _ => Err(Error::Parameter(format!("smooth index {j} outside 1..4"))),
    }
}

impl SimSetting {
    pub fn new(id: u8, n: usize, seed: u64) -> Result<Self> {
        if !(1..=8).contains(&id) {
            return Err(Error::Parameter(format!("simulation setting {id} outside 1..8")));
        }
        if n == 0 {
            return Err(Error::Parameter("sample size must be positive".into()));
        }
        Ok(Self { id, n, seed })
    }

    pub fn distribution(&self) -> SimDistribution {
        match self.id {
            1 => SimDistribution::Gamma,
            2 => SimDistribution::HeteroscedasticNormal,
            3 => SimDistribution::Poisson,
            4 => SimDistribution::NegativeBinomial,
            5 => SimDistribution::CmpUnder,
            6 => SimDistribution::CmpOver,
            7 => SimDistribution::Binomial,
            _ => SimDistribution::BetaBinomial,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.distribution() {
            SimDistribution::Gamma => "Gamma",
            SimDistribution::HeteroscedasticNormal => "Heteroscedastic Normal",
            SimDistribution::Poisson => "Poisson",
            SimDistribution::NegativeBinomial => "Negative-Binomial",
            SimDistribution::CmpUnder => "COMPoisson (under-dispersed)",
            SimDistribution::CmpOver => "COMPoisson (over-dispersed)",
            SimDistribution::Binomial => "Binomial",
            SimDistribution::BetaBinomial => "Quasi-Binomial",
        }
    }

    pub fn link(&self) -> Link {
        match self.id {
            7 | 8 => Link::Logit,
            _ => Link::Log,
        }
    }

    pub fn response_type(&self) -> ResponseType {
        match self.id {
            1 | 2 => ResponseType::Continuous,
            3..=6 => ResponseType::Count,
            _ => ResponseType::Binary,
        }
    }

    /// Dispersion entry: gamma 0.6, NB 1, CMP ν, beta-binomial 4.
    pub fn dispersion(&self) -> Option<f64> {
        match self.id {
            1 => Some(0.6),
            4 => Some(1.0),
            5 => Some(3.0),
            6 => Some(0.2),
            8 => Some(4.0),
            _ => None,
        }
    }

    pub fn trials(&self) -> Option<u64> {
        match self.id {
            7 => Some(3),
            8 => Some(6),
            _ => None,
        }
    }

    /// Working variance families compared against the DNP fit.
    pub fn working_families(&self) -> [VarianceKind; 3] {
        match self.response_type() {
            ResponseType::Continuous => [VarianceKind::Constant, VarianceKind::Mu, VarianceKind::PhiMuSq],
            ResponseType::Count => [VarianceKind::Constant, VarianceKind::Mu, VarianceKind::MuPlusPhiMuSq],
            ResponseType::Binary => [VarianceKind::Constant, VarianceKind::Mu, VarianceKind::MuOneMinusMu],
        }
    }

    /// (multiplier, offset) mapping Σfⱼ to η = multiplier·(Σfⱼ − offset).
    pub fn predictor_scaling(&self) -> (f64, f64) {
        match self.link() {
            Link::Logit => (LOGIT_LINK_SCALE, LOGIT_LINK_OFFSET),
            _ => (LOG_LINK_SCALE, 0.0),
        }
    }

    /// True smooth on the η scale: the multiplier times fⱼ.
    pub fn true_smooth(&self, j: usize, x: f64) -> Result<f64> {
        Ok(self.predictor_scaling().0 * true_f(j, x)?)
    }

    pub fn eta(&self, x: &[f64]) -> Result<f64> {
        let (s, c) = self.predictor_scaling();
        let mut sum = 0.0;
        for (j, &xj) in x.iter().enumerate() {
            sum += true_f(j + 1, xj)?;
        }
        Ok(s * (sum - c))
    }

    /// Mean of the conditional law at η (success probability for binomial types).
    pub fn mean(&self, eta: f64) -> f64 {
        self.link().inverse(eta)
    }

    /// Conditional variance of the generated response on its natural scale (counts for binomial types).
    pub fn variance(&self, eta: f64) -> Result<f64> {
        let mu = self.mean(eta);
        Ok(match self.distribution() {
            SimDistribution::Gamma => 0.6 * mu * mu,
            SimDistribution::HeteroscedasticNormal | SimDistribution::Poisson => mu,
            SimDistribution::NegativeBinomial => mu + mu * mu,
            SimDistribution::CmpUnder | SimDistribution::CmpOver => {
                let nu = self.dispersion().unwrap_or(1.0);
                let lambda = cmp_mean_solve(mu, nu, 1e-12)?;
                cmp_moments(&cmp_pmf(lambda, nu)?).1
            }
            SimDistribution::Binomial => 3.0 * mu * (1.0 - mu),
            SimDistribution::BetaBinomial => {
                let m = 6.0;
                m * mu * (1.0 - mu) * (1.0 + (m - 1.0) * BETA_BINOMIAL_RHO)
            }
        })
    }
}

/// A sampler for the conditional law at one η, with any per-η set-up done once.
pub struct ResponseSampler {
    dist: SimDistribution,
    mu: f64,
    cmp_cdf: Vec<f64>,
    beta: Option<Beta<f64>>,
}

impl ResponseSampler {
    pub fn new(setting: &SimSetting, eta: f64) -> Result<Self> {
        if !eta.is_finite() {
            return Err(Error::NonFinite(format!("linear predictor {eta}")));
        }
        let dist = setting.distribution();
        let mu = setting.mean(eta);
        let mut cmp_cdf = Vec::new();
        let mut beta = None;
        match dist {
            SimDistribution::CmpUnder | SimDistribution::CmpOver => {
                let nu = setting.dispersion().unwrap_or(1.0);
                let lambda = cmp_mean_solve(mu, nu, 1e-12)?;
                let mut acc = 0.0;
                cmp_cdf = cmp_pmf(lambda, nu)?
                    .into_iter()
                    .map(|p| {
                        acc += p;
                        acc
                    })
                    .collect();
            }
            SimDistribution::BetaBinomial => {
                let k = (1.0 - BETA_BINOMIAL_RHO) / BETA_BINOMIAL_RHO;
                beta = Some(Beta::new(mu * k, (1.0 - mu) * k).map_err(|e| Error::Parameter(e.to_string()))?);
            }
            _ => {}
        }
        Ok(Self {
            dist,
            mu,
            cmp_cdf,
            beta,
        })
    }

    /// One draw; binomial types return the success count.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let mu = self.mu;
        match self.dist {
            SimDistribution::Gamma => {
                let shape = 1.0 / 0.6;
                Gamma::new(shape, mu / shape).expect("positive gamma parameters").sample(rng)
            }
            SimDistribution::HeteroscedasticNormal => Normal::new(mu, mu.sqrt()).expect("finite normal").sample(rng),
            SimDistribution::Poisson => Poisson::new(mu).expect("positive mean").sample(rng),
            SimDistribution::NegativeBinomial => {
                let rate = Gamma::new(1.0, mu).expect("positive mean").sample(rng);
                if rate <= 0.0 {
                    0.0
                } else {
                    Poisson::new(rate).expect("positive rate").sample(rng)
                }
            }
            SimDistribution::CmpUnder | SimDistribution::CmpOver => {
                let u: f64 = rng.random();
                let k = self.cmp_cdf.partition_point(|&c| c < u);
                k.min(self.cmp_cdf.len() - 1) as f64
            }
            SimDistribution::Binomial => Binomial::new(3, mu).expect("probability").sample(rng) as f64,
            SimDistribution::BetaBinomial => {
                let p = self.beta.as_ref().expect("beta set up").sample(rng).clamp(0.0, 1.0);
                Binomial::new(6, p).expect("probability").sample(rng) as f64
            }
        }
    }
}

pub fn draw_response<R: Rng + ?Sized>(setting: &SimSetting, eta: f64, rng: &mut R) -> Result<f64> {
    Ok(ResponseSampler::new(setting, eta)?.draw(rng))
}

/// Log of the unnormalized CMP terms, up to truncation; returns the normalized pmf on 0..K.
pub fn cmp_pmf(lambda: f64, nu: f64) -> Result<Vec<f64>> {
    cmp_series(lambda.ln(), nu).map(|(p, _)| p)
}

/// (pmf, truncation bound on the neglected relative mass).
fn cmp_series(log_lambda: f64, nu: f64) -> Result<(Vec<f64>, f64)> {
    if !(nu > 0.0) || !log_lambda.is_finite() {
        return Err(Error::Parameter(format!("CMP parameters log λ = {log_lambda}, ν = {nu}")));
    }
    let lambda = log_lambda.exp();
    // the series mode sits near λ^{1/ν}; never stop before passing it
    let mode = lambda.powf(1.0 / nu);
    let cap = (10.0 * mode / nu + 200.0).ceil().max(mode * 2.0 + 200.0) as usize;
    let mut logs = Vec::with_capacity(64);
    let mut max = f64::NEG_INFINITY;
    let mut bound = f64::INFINITY;
    for y in 0..=cap {
        let t = y as f64 * log_lambda - nu * ln_gamma(y as f64 + 1.0);
        max = max.max(t);
        logs.push(t);
        // ratio of successive terms from here on is at most r
        let r = (log_lambda - nu * ((y + 2) as f64).ln()).exp();
        if r < 1.0 && y as f64 > mode {
            let z: f64 = logs.iter().map(|l| (l - max).exp()).sum();
            bound = (t - max).exp() * r / (1.0 - r) / z;
            if bound < 1e-12 {
                break;
            }
        }
    }
    let mut p: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = p.iter().sum();
    for v in &mut p {
        *v /= z;
    }
    Ok((p, bound))
}

/// (mean, variance) of a pmf on 0..K.
pub fn cmp_moments(pmf: &[f64]) -> (f64, f64) {
    let mean: f64 = pmf.iter().enumerate().map(|(y, p)| y as f64 * p).sum();
    let var = pmf.iter().enumerate().map(|(y, p)| (y as f64 - mean).powi(2) * p).sum();
    (mean, var)
}

/// λ such that the CMP(λ, ν) mean equals μ, by safeguarded Newton on log λ.
pub fn cmp_mean_solve(mu: f64, nu: f64, tol: f64) -> Result<f64> {
    if !(mu > 0.0) || !mu.is_finite() || !(nu > 0.0) {
        return Err(Error::Parameter(format!("CMP mean solve needs μ > 0 and ν > 0, got μ = {mu}, ν = {nu}")));
    }
    if nu == 1.0 {
        return Ok(mu);
    }
    let tol = tol.max(1e-14 * mu.max(1.0));
    let mut x = nu * (mu + (nu - 1.0) / (2.0 * nu)).max(mu.min(0.5)).ln();
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut last = f64::NAN;
    for _ in 0..200 {
        let (pmf, _) = cmp_series(x, nu)?;
        let (m, v) = cmp_moments(&pmf);
        let f = m - mu;
        last = f;
        if f.abs() < tol {
            return Ok(x.exp());
        }
        if f < 0.0 {
            lo = lo.max(x);
        } else {
            hi = hi.min(x);
        }
        let mut next = if v > 0.0 { x - f / v } else { f64::NAN };
        let step_cap = 5.0;
        if next.is_finite() {
            next = next.clamp(x - step_cap, x + step_cap);
        }
        if !(next > lo && next < hi) || !next.is_finite() {
            next = match (lo.is_finite(), hi.is_finite()) {
                (true, true) => 0.5 * (lo + hi),
                (true, false) => lo + step_cap,
                (false, true) => hi - step_cap,
                _ => x,
            };
        }
        if (hi - lo).abs() < 1e-15 * x.abs().max(1.0) {
            break;
        }
        x = next;
    }
    Err(Error::Solver(format!(
        "CMP mean solve for μ = {mu}, ν = {nu} stopped at log λ = {x} with mean residual {last:e}"
    )))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimDataset {
    /// n × 4 covariates in [0, 1].
    pub x: DMatrix<f64>,
    /// Responses on the fitting scale (proportions for binomial types).
    pub y: Vec<f64>,
    /// Prior weights (trials for binomial types).
    pub weights: Option<Vec<f64>>,
    pub eta: Vec<f64>,
    pub true_mu: Vec<f64>,
}

/// RNG stream for replication `rep` of a setting.
pub fn replication_rng(master_seed: u64, setting_id: u8, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(((setting_id as u64) << 40) | rep);
    rng
}

/// Dataset for replication `rep`, reproducible from (seed, setting id, rep).
pub fn generate_replication(setting: &SimSetting, rep: u64) -> Result<SimDataset> {
    let mut rng = replication_rng(setting.seed, setting.id, rep);
    generate_with(setting, &mut rng)
}

pub fn generate_dataset(setting: &SimSetting) -> Result<SimDataset> {
    generate_replication(setting, 0)
}

fn generate_with<R: Rng + ?Sized>(setting: &SimSetting, rng: &mut R) -> Result<SimDataset> {
    let n = setting.n;
    let x = DMatrix::from_fn(n, 4, |_, _| rng.random::<f64>());
    let mut y = Vec::with_capacity(n);
    let mut eta = Vec::with_capacity(n);
    let mut true_mu = Vec::with_capacity(n);
    for i in 0..n {
        let row: Vec<f64> = x.row(i).iter().copied().collect();
        let e = setting.eta(&row)?;
        let draw = draw_response(setting, e, rng)?;
        y.push(match setting.trials() {
            Some(m) => draw / m as f64,
            None => draw,
        });
        eta.push(e);
        true_mu.push(setting.mean(e));
    }
    Ok(SimDataset {
        x,
        y,
        weights: setting.trials().map(|m| vec![m as f64; n]),
        eta,
        true_mu,
    })
}

impl SimDataset {
    /// CSV with header x1,x2,x3,x4,y,true_mu[,weight].
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["x1", "x2", "x3", "x4", "y", "true_mu"];
        if self.weights.is_some() {
            header.push("weight");
        }
        w.write_record(&header)?;
        for i in 0..self.y.len() {
            let mut rec: Vec<String> = (0..4).map(|j| self.x[(i, j)].to_string()).collect();
            rec.push(self.y[i].to_string());
            rec.push(self.true_mu[i].to_string());
            if let Some(wt) = &self.weights {
                rec.push(wt[i].to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn true_function_values() {
        assert!((true_f(1, 0.5).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(true_f(2, 0.0).unwrap(), 1.0);
        let direct = 0.5f64.powi(11) * 5f64.powi(6) + 10.0 * 5f64.powi(3) * 0.5f64.powi(10);
        assert!((true_f(3, 0.5).unwrap() - direct).abs() < 1e-12);
        assert!((true_f(3, 0.5).unwrap() - 8.8501).abs() < 1e-4);
        assert_eq!(true_f(4, 0.3).unwrap(), 0.0);
        assert!(true_f(5, 0.3).is_err());
        assert!(true_f(0, 0.3).is_err());
    }

    #[test]
    fn cmp_poisson_reduction() {
        assert_eq!(cmp_mean_solve(2.0, 1.0, 1e-12).unwrap(), 2.0);
        let pmf = cmp_pmf(2.0, 1.0).unwrap();
        for (y, p) in pmf.iter().enumerate() {
            let pois = (-2.0f64 + y as f64 * 2f64.ln() - ln_gamma(y as f64 + 1.0)).exp();
            assert!((p - pois).abs() < 1e-10);
        }
    }

    #[test]
    fn cmp_under_dispersed_mean_two() {
        let lambda = cmp_mean_solve(2.0, 3.0, 1e-12).unwrap();
        // brute-force summation far past the truncation point
        let logs: Vec<f64> = (0..400).map(|y| y as f64 * lambda.ln() - 3.0 * ln_gamma(y as f64 + 1.0)).collect();
        let z: f64 = logs.iter().map(|l| l.exp()).sum();
        let mean: f64 = logs.iter().enumerate().map(|(y, l)| y as f64 * l.exp()).sum::<f64>() / z;
        let var: f64 = logs.iter().enumerate().map(|(y, l)| (y as f64 - mean).powi(2) * l.exp()).sum::<f64>() / z;
        assert!((mean - 2.0).abs() < 1e-8);
        assert!(var < 2.0);
    }

    #[test]
    fn cmp_over_dispersed_solves_across_means() {
        for mu in [0.05, 0.5, 1.1, 5.0, 13.0, 40.0] {
            for nu in [0.2, 3.0] {
                let l = cmp_mean_solve(mu, nu, 1e-12).unwrap();
                let (m, v) = cmp_moments(&cmp_pmf(l, nu).unwrap());
                assert!((m - mu).abs() < 1e-8 * mu.max(1.0), "{mu} {nu} {m}");
                if nu < 1.0 {
                    assert!(v > m);
                } else {
                    assert!(v < m);
                }
            }
        }
    }

    #[test]
    fn beta_binomial_rho() {
        assert!((BETA_BINOMIAL_RHO - (4.0 - 1.0) / (6.0 - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn dataset_reproducible_and_in_range() {
        let s = SimSetting::new(3, 50, 9).unwrap();
        let a = generate_dataset(&s).unwrap();
        let b = generate_dataset(&s).unwrap();
        assert_eq!(a, b);
        assert!(a.x.iter().all(|v| (0.0..=1.0).contains(v)));
        for (e, m) in a.eta.iter().zip(&a.true_mu) {
            assert_eq!(*m, e.exp());
        }
        let c = generate_replication(&s, 1).unwrap();
        assert_ne!(a.y, c.y);
    }

    #[test]
    fn binomial_types_store_proportions() {
        let s = SimSetting::new(8, 100, 2).unwrap();
        let d = generate_dataset(&s).unwrap();
        assert!(d.y.iter().all(|v| (0.0..=1.0).contains(v) && (v * 6.0).fract().abs() < 1e-12));
        assert_eq!(d.weights.as_ref().unwrap()[0], 6.0);
    }

    #[test]
    fn invalid_setting_rejected() {
        assert!(SimSetting::new(9, 10, 0).is_err());
        assert!(SimSetting::new(0, 10, 0).is_err());
    }
}
