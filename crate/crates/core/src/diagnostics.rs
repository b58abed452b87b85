//! PIT diagnostics, Kolmogorov-Smirnov statistics, and CDF/QQ tables.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, Gamma, NegativeBinomial, Normal, Poisson};

use crate::dnp::DnpFit;
use crate::error::{Error, Result};
use crate::tilt::{tilted_cdf_pair, DiscreteDistribution, TiltSolution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitSample {
    pub values: Vec<f64>,
    pub randomized: bool,
    pub rng_seed: Option<u64>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// One predictive distribution per observation.
pub trait PredictiveCdf {
    fn len(&self) -> usize;

    /// (F_i(y⁻), F_i(y)).
    fn cdf_pair(&self, i: usize, y: f64) -> (f64, f64);

    /// Whether the predictive laws have atoms at the observed values.
    fn is_discrete(&self, y: &[f64]) -> bool;
}

/// Tilted predictive distributions of a DNP fit.
pub struct DnpPredictive<'a> {
    pub reference: &'a DiscreteDistribution,
    pub tilts: &'a [TiltSolution],
}

impl<'a> DnpPredictive<'a> {
    pub fn from_fit(fit: &'a DnpFit) -> Self {
        Self {
            reference: &fit.f_hat,
            tilts: &fit.tilts,
        }
    }
}

impl PredictiveCdf for DnpPredictive<'_> {
    fn len(&self) -> usize {
        self.tilts.len()
    }

    fn cdf_pair(&self, i: usize, y: f64) -> (f64, f64) {
        tilted_cdf_pair(self.reference, &self.tilts[i], y)
    }

    /// Ties among the responses mark discrete data.
    fn is_discrete(&self, y: &[f64]) -> bool {
        has_ties(y)
    }
}

fn has_ties(y: &[f64]) -> bool {
    let mut s = y.to_vec();
    s.sort_by(f64::total_cmp);
    s.windows(2).any(|w| w[0] == w[1])
}

/// Parametric predictive laws, parametrized by their means.
#[derive(Debug, Clone, PartialEq)]
pub enum Parametric {
    Normal { mean: Vec<f64>, sd: f64 },
    /// Gamma with the given shape and per-observation means.
    Gamma { mean: Vec<f64>, shape: f64 },
    Poisson { mean: Vec<f64> },
    /// Responses are proportions out of `trials`.
    Binomial { prob: Vec<f64>, trials: u64 },
    /// Variance μ + φμ².
    NegativeBinomial { mean: Vec<f64>, phi: f64 },
}

impl PredictiveCdf for Parametric {
    fn len(&self) -> usize {
        match self {
            Parametric::Normal { mean, .. }
            | Parametric::Gamma { mean, .. }
            | Parametric::Poisson { mean }
            | Parametric::NegativeBinomial { mean, .. } => mean.len(),
            Parametric::Binomial { prob, .. } => prob.len(),
        }
    }

    fn cdf_pair(&self, i: usize, y: f64) -> (f64, f64) {
        let count_pair = |k: f64, cdf: &dyn Fn(u64) -> f64| -> (f64, f64) {
            if k < 0.0 {
                return (0.0, 0.0);
            }
            let fl = k.floor();
            let at = cdf(fl as u64);
            if fl == k {
                let below = if fl >= 1.0 { cdf(fl as u64 - 1) } else { 0.0 };
                (below, at)
            } else {
                (at, at)
            }
        };
        match self {
            Parametric::Normal { mean, sd } => {
                let f = Normal::new(mean[i], *sd).map_or(f64::NAN, |d| d.cdf(y));
                (f, f)
            }
            Parametric::Gamma { mean, shape } => {
                let f = if y <= 0.0 {
                    0.0
                } else {
                    Gamma::new(*shape, shape / mean[i]).map_or(f64::NAN, |d| d.cdf(y))
                };
                (f, f)
            }
            Parametric::Poisson { mean } => match Poisson::new(mean[i]) {
                Ok(d) => count_pair(y, &|k| d.cdf(k)),
                Err(_) => (f64::NAN, f64::NAN),
            },
            Parametric::Binomial { prob, trials } => match Binomial::new(prob[i], *trials) {
                Ok(d) => count_pair((y * *trials as f64).round(), &|k| d.cdf(k)),
                Err(_) => (f64::NAN, f64::NAN),
            },
            Parametric::NegativeBinomial { mean, phi } => {
                // size r = 1/φ, success probability r/(r + μ)
                let r = 1.0 / phi;
                match NegativeBinomial::new(r, r / (r + mean[i])) {
                    Ok(d) => count_pair(y, &|k| d.cdf(k)),
                    Err(_) => (f64::NAN, f64::NAN),
                }
            }
        }
    }

    fn is_discrete(&self, _y: &[f64]) -> bool {
        matches!(
            self,
            Parametric::Poisson { .. } | Parametric::Binomial { .. } | Parametric::NegativeBinomial { .. }
        )
    }
}

/// PIT values, randomized within (F(y⁻), F(y)] when the predictive laws are discrete.
pub fn pit(predictive: &dyn PredictiveCdf, y: &[f64], seed: u64) -> Result<PitSample> {
    if predictive.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: predictive.len(),
            found: y.len(),
        });
    }
    let randomized = predictive.is_discrete(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(y.len());
    let mut boundary = 0;
    for (i, &yi) in y.iter().enumerate() {
        let (lo, hi) = predictive.cdf_pair(i, yi);
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(Error::NonFinite(format!("predictive CDF at observation {i}")));
        }
        if hi <= 0.0 || lo >= 1.0 {
            boundary += 1;
        }
        let u = if randomized {
            let v: f64 = rng.random();
            lo + v * (hi - lo)
        } else {
            hi
        };
        values.push(u.clamp(0.0, 1.0));
    }
    let warnings = if boundary > 0 {
        vec![format!("{boundary} observations fall where the predictive CDF is 0 or 1")]
    } else {
        Vec::new()
    };
    Ok(PitSample {
        values,
        randomized,
        rng_seed: randomized.then_some(seed),
        warnings,
    })
}

/// sup_t |ECDF(t) − t|, evaluated at the jumps.
pub fn ks_uniform(u: &[f64]) -> f64 {
    let n = u.len();
    if n == 0 {
        return 0.0;
    }
    let mut s = u.to_vec();
    s.sort_by(f64::total_cmp);
    let nf = n as f64;
    s.iter().enumerate().fold(0.0f64, |d, (i, &v)| {
        d.max((i + 1) as f64 / nf - v).max(v - i as f64 / nf)
    })
}

/// Asymptotic Kolmogorov p-value P(√n D > √n d).
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let t = (n as f64).sqrt() * d;
    if t <= 0.0 {
        return 1.0;
    }
    if t < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * t * t).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionRow {
    pub support: f64,
    pub mass: f64,
    pub cdf: f64,
}

/// Sorted support with tied atoms merged and the cumulative mass appended.
pub fn export_distribution(f: &DiscreteDistribution) -> Vec<DistributionRow> {
    let mut atoms: Vec<(f64, f64)> = f.support().iter().copied().zip(f.masses().iter().copied()).collect();
    atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rows: Vec<DistributionRow> = Vec::new();
    let mut acc = 0.0;
    for (s, p) in atoms {
        acc += p;
        match rows.last_mut() {
            Some(last) if last.support == s => {
                last.mass += p;
                last.cdf = acc;
            }
            _ => rows.push(DistributionRow {
                support: s,
                mass: p,
                cdf: acc,
            }),
        }
    }
    rows
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QqRow {
    pub k: usize,
    pub uniform: f64,
    pub pit: f64,
}

/// Sorted PIT against plotting positions k/(n+1).
pub fn qq_table(u: &[f64]) -> Vec<QqRow> {
    let mut s = u.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.into_iter()
        .enumerate()
        .map(|(i, v)| QqRow {
            k: i + 1,
            uniform: (i + 1) as f64 / (n + 1.0),
            pit: v,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct PitRow {
    index: usize,
    pit: f64,
}

pub fn write_pit_csv(path: &Path, pit: &PitSample) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (index, &v) in pit.values.iter().enumerate() {
        w.serialize(PitRow { index, pit: v })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pit_csv(path: &Path) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize::<PitRow>() {
        out.push(row?.pit);
    }
    Ok(out)
}

pub fn write_distribution_csv(path: &Path, rows: &[DistributionRow]) -> Result<()> {
    write_rows(path, rows)
}

pub fn read_distribution_csv(path: &Path) -> Result<Vec<DistributionRow>> {
    read_rows(path)
}

pub fn write_qq_csv(path: &Path, rows: &[QqRow]) -> Result<()> {
    write_rows(path, rows)
}

pub fn read_qq_csv(path: &Path) -> Result<Vec<QqRow>> {
    read_rows(path)
}

pub(crate) fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn read_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// KS statistic and asymptotic p-value as `key = value` lines.
pub fn ks_report(pit: &PitSample) -> String {
    let d = ks_uniform(&pit.values);
    let p = ks_pvalue(d, pit.values.len());
    let mut s = format!("statistic = {d}\npvalue = {p}\nn = {}\nrandomized = {}\n", pit.values.len(), pit.randomized);
    if let Some(seed) = pit.rng_seed {
        s.push_str(&format!("seed = {seed}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    struct PointMass(Vec<f64>);

    impl PredictiveCdf for PointMass {
        fn len(&self) -> usize {
            self.0.len()
        }
        fn cdf_pair(&self, i: usize, y: f64) -> (f64, f64) {
            let a = self.0[i];
            if y < a {
                (0.0, 0.0)
            } else if y == a {
                (0.0, 1.0)
            } else {
                (1.0, 1.0)
            }
        }
        fn is_discrete(&self, _y: &[f64]) -> bool {
            true
        }
    }

    #[test]
    fn point_mass_pit_is_uniform_draw() {
        let y: Vec<f64> = (0..2000).map(|i| i as f64).collect();
        let p = pit(&PointMass(y.clone()), &y, 7).unwrap();
        assert!(p.randomized);
        assert_eq!(p.rng_seed, Some(7));
        assert!(ks_uniform(&p.values) < 0.05);
        assert_eq!(p, pit(&PointMass(y.clone()), &y, 7).unwrap());
    }

    #[test]
    fn continuous_pit_is_cdf_value() {
        let pred = Parametric::Normal {
            mean: vec![0.0, 1.0],
            sd: 1.0,
        };
        let p = pit(&pred, &[0.0, 1.0], 0).unwrap();
        assert!(!p.randomized);
        assert_eq!(p.values, vec![0.5, 0.5]);
        assert_eq!(p.rng_seed, None);
    }

    #[test]
    fn ks_examples() {
        assert_eq!(ks_uniform(&[0.5]), 0.5);
        assert_eq!(ks_uniform(&[0.0; 4]), 1.0);
        let u: Vec<f64> = (1..=99).map(|k| k as f64 / 100.0).collect();
        assert!((ks_uniform(&u) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn ks_pvalue_known_points() {
        // Kolmogorov distribution: P(K > 1.3581) ≈ 0.05
        assert!((ks_pvalue(1.3581 / 10.0, 100) - 0.05).abs() < 1e-3);
        assert_eq!(ks_pvalue(0.0, 10), 1.0);
        assert!(ks_pvalue(0.5, 1000) < 1e-10);
    }

    #[test]
    fn export_examples() {
        let f = DiscreteDistribution::new(vec![1.0, 0.0], vec![0.5, 0.5]).unwrap();
        let rows = export_distribution(&f);
        assert_eq!(
            rows,
            vec![
                DistributionRow { support: 0.0, mass: 0.5, cdf: 0.5 },
                DistributionRow { support: 1.0, mass: 0.5, cdf: 1.0 }
            ]
        );
        let f = DiscreteDistribution::new(vec![0.0, 0.0], vec![0.3, 0.7]).unwrap();
        assert_eq!(export_distribution(&f), vec![DistributionRow { support: 0.0, mass: 1.0, cdf: 1.0 }]);
        let f = DiscreteDistribution::empirical(vec![5.0, 3.0, 1.0, 2.0, 4.0]).unwrap();
        let cdf: Vec<f64> = export_distribution(&f).iter().map(|r| r.cdf).collect();
        for (c, e) in cdf.iter().zip([0.2, 0.4, 0.6, 0.8, 1.0]) {
            assert!((c - e).abs() < 1e-15);
        }
    }

    #[test]
    fn qq_positions() {
        let rows = qq_table(&[0.9, 0.1, 0.5]);
        assert_eq!(rows[0].pit, 0.1);
        assert_eq!(rows[2].uniform, 0.75);
    }

    #[test]
    fn parametric_count_pairs() {
        let pred = Parametric::Poisson { mean: vec![2.0] };
        let (lo, hi) = pred.cdf_pair(0, 0.0);
        assert_eq!(lo, 0.0);
        assert!((hi - (-2.0f64).exp()).abs() < 1e-12);
        let pred = Parametric::Binomial { prob: vec![0.5], trials: 2 };
        let (lo, hi) = pred.cdf_pair(0, 0.5);
        assert!((lo - 0.25).abs() < 1e-12 && (hi - 0.75).abs() < 1e-12);
        let pred = Parametric::NegativeBinomial { mean: vec![2.0], phi: 1.0 };
        // geometric with success probability 1/3
        let (_, hi) = pred.cdf_pair(0, 0.0);
        assert!((hi - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = PitSample {
            values: vec![0.1, 0.123456789012345, 1.0 / 3.0],
            randomized: false,
            rng_seed: None,
            warnings: vec![],
        };
        let path = dir.path().join("pit.csv");
        write_pit_csv(&path, &p).unwrap();
        assert_eq!(read_pit_csv(&path).unwrap(), p.values);
        let f = DiscreteDistribution::empirical(vec![0.3, 0.1, 0.7]).unwrap();
        let rows = export_distribution(&f);
        let path = dir.path().join("d.csv");
        write_distribution_csv(&path, &rows).unwrap();
        assert_eq!(read_distribution_csv(&path).unwrap(), rows);
    }

    proptest! {
        #[test]
        fn ks_matches_brute_force(u in proptest::collection::vec(0.0f64..1.0, 1..60)) {
            let d = ks_uniform(&u);
            let n = u.len() as f64;
            let mut brute: f64 = 0.0;
            for k in 0..=20000 {
                let t = k as f64 / 20000.0;
                let ecdf = u.iter().filter(|v| **v <= t).count() as f64 / n;
                brute = brute.max((ecdf - t).abs());
            }
            prop_assert!(d >= 0.0 && d <= 1.0);
            prop_assert!((d - brute).abs() <= 1.0 / (10.0 * n));
        }

        #[test]
        fn exported_masses_sum_to_one(ys in proptest::collection::vec(0u8..5, 1..30)) {
            let f = DiscreteDistribution::empirical(ys.iter().map(|v| *v as f64).collect()).unwrap();
            let rows = export_distribution(&f);
            prop_assert!((rows.iter().map(|r| r.mass).sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(rows.windows(2).all(|w| w[0].support < w[1].support));
        }
    }
}
