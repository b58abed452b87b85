//! Monte Carlo coverage study of pointwise confidence bands for classical
//! working-variance GAMs and the DNP GAM.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::AdditiveDesign;
use crate::dnp::{dnp_maximize, normal_quantile, DnpOptions};
use crate::error::{Error, Result};
use crate::gam::{gcv_select, pirls_fit, plugin_lambda, LambdaGrid, PirlsOptions, VarianceFamily, VarianceKind};
use crate::simulation::{generate_replication, SimDataset, SimSetting};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "DNPGAM_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Dnp,
    Gam(VarianceKind),
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::Dnp => "dnp".into(),
            Method::Gam(k) => format!("gam:{}", k.name()),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "dnp" {
            return Ok(Method::Dnp);
        }
        match s.strip_prefix("gam:") {
            Some(kind) => Ok(Method::Gam(kind.parse()?)),
            None => Err(Error::Parameter(format!("unknown method `{s}`; expected dnp or gam:<family>"))),
        }
    }

    /// Comma-separated list; `all` expands to DNP plus the setting's three working families.
    pub fn parse_list(s: &str, setting: &SimSetting) -> Result<Vec<Self>> {
        if s.trim() == "all" {
            let mut v: Vec<Method> = setting.working_families().iter().map(|k| Method::Gam(*k)).collect();
            v.push(Method::Dnp);
            return Ok(v);
        }
        s.split(',').filter(|t| !t.trim().is_empty()).map(Method::parse).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageOptions {
    pub level: f64,
    pub degree: usize,
    pub num_knots: usize,
    pub grid: LambdaGrid,
    pub dnp: DnpOptions,
    /// Multiplier on every covariance matrix before forming bands.
    pub cov_scale: f64,
    pub threads: usize,
}

impl Default for CoverageOptions {
    fn default() -> Self {
        Self {
            level: 0.95,
            degree: 3,
            num_knots: 10,
            grid: LambdaGrid::default(),
            dnp: DnpOptions::default(),
            cov_scale: 1.0,
            threads: threads_from_env(),
        }
    }
}

/// Thread count from the environment, defaulting to 1.
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|t| *t > 0)
        .unwrap_or(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    pub setting: u8,
    pub method: Method,
    /// Average coverage (%) for f₁..f₄ and μ, or None when no replication succeeded.
    pub coverage: [Option<f64>; 5],
    pub reps: usize,
    pub n: usize,
    pub successes: usize,
    pub failures: usize,
    /// Set when the working family cannot be fitted to this setting at all.
    pub not_applicable: Option<String>,
    pub runtime: Duration,
}

enum Outcome {
    Covered([f64; 5]),
    Failed(String),
    NegativeResponses,
}

/// Pointwise coverage (%) at the sample points for each smooth and the mean.
pub fn replication_coverage(
    setting: &SimSetting,
    data: &SimDataset,
    design: &AdditiveDesign,
    beta: &DVector<f64>,
    cov: &DMatrix<f64>,
    z: f64,
) -> Result<[f64; 5]> {
    let n = data.y.len();
    let link = setting.link();
    let mut out = [0.0; 5];
    for j in 0..4 {
        let r = design.block_range(j);
        let bj = beta.rows(r.start, r.len());
        let cj = cov.view((r.start, r.start), (r.len(), r.len()));
        let truth: Vec<f64> = (0..n)
            .map(|i| setting.true_smooth(j + 1, data.x[(i, j)]))
            .collect::<Result<_>>()?;
        let center = truth.iter().sum::<f64>() / n as f64;
        let mut hits = 0usize;
        for i in 0..n {
            let b = design.matrix.view((i, r.start), (1, r.len())).transpose();
            let fhat = b.dot(&bj);
            let se = b.dot(&(cj * &b)).max(0.0).sqrt();
            if (fhat - (truth[i] - center)).abs() <= z * se {
                hits += 1;
            }
        }
        out[j] = 100.0 * hits as f64 / n as f64;
    }
    let mut hits = 0usize;
    for i in 0..n {
        let b = design.matrix.row(i).transpose();
        let eta = b.dot(beta);
        let se = b.dot(&(cov * &b)).max(0.0).sqrt();
        let lo = link.inverse(eta - z * se);
        let hi = link.inverse(eta + z * se);
        if data.true_mu[i] >= lo && data.true_mu[i] <= hi {
            hits += 1;
        }
    }
    out[4] = 100.0 * hits as f64 / n as f64;
    Ok(out)
}

fn run_replication(setting: &SimSetting, methods: &[Method], rep: u64, opts: &CoverageOptions) -> Vec<Outcome> {
    let fail_all = |msg: String| methods.iter().map(|_| Outcome::Failed(msg.clone())).collect();
    let data = match generate_replication(setting, rep) {
        Ok(d) => d,
        Err(e) => return fail_all(format!("generation: {e}")),
    };
    let lambdas = vec![1.0; 4];
    let design = match AdditiveDesign::build_with_quantile_knots(&data.x, opts.degree, opts.num_knots, &lambdas) {
        Ok(d) => d,
        Err(e) => return fail_all(format!("design: {e}")),
    };
    let z = match normal_quantile(opts.level) {
        Ok(z) => z,
        Err(e) => return fail_all(e.to_string()),
    };
    let weights = data.weights.as_deref();
    let link = setting.link();
    methods
        .iter()
        .map(|m| {
            let fitted = match m {
                Method::Gam(kind) => {
                    let family = VarianceFamily::default_for(*kind, setting.response_type());
                    gcv_select(&design, &data.y, weights, link, family, &opts.grid).map(|s| (s.fit.beta_hat, s.fit.cov_beta))
                }
                Method::Dnp => fit_dnp(setting, &data, &design, opts),
            };
            match fitted {
                Ok((beta, cov)) => match replication_coverage(setting, &data, &design, &beta, &(cov * opts.cov_scale), z) {
                    Ok(c) => Outcome::Covered(c),
                    Err(e) => Outcome::Failed(e.to_string()),
                },
                Err(Error::NegativeResponses(_)) => Outcome::NegativeResponses,
                Err(e) => Outcome::Failed(e.to_string()),
            }
        })
        .collect()
}

/// Plug-in λ from the preliminary GAM, then the DNP fit.
fn fit_dnp(
    setting: &SimSetting,
    data: &SimDataset,
    design: &AdditiveDesign,
    opts: &CoverageOptions,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let link = setting.link();
    let weights = data.weights.as_deref();
    let plug = plugin_lambda(design, &data.y, weights, setting.response_type(), &opts.grid)?;
    let start = if plug.link == link {
        Some(plug.fit.beta_hat.clone())
    } else {
        // same smoothing, refitted on the target link
        let family = plug.fit.family;
        pirls_fit(design, &data.y, weights, link, family, &plug.lambda, &PirlsOptions::default())
            .ok()
            .map(|f| f.beta_hat)
    };
    let dnp_opts = DnpOptions {
        initial_beta: start,
        ..opts.dnp.clone()
    };
    let fit = dnp_maximize(design, &data.y, link, &plug.dnp_lambda(), &dnp_opts)?;
    if !fit.converged {
        return Err(Error::Diverged(fit.warnings.join("; ")));
    }
    Ok((fit.beta_hat, fit.cov_beta))
}

/// Runs `reps` replications and aggregates coverage per method in replication order.
pub fn run_coverage(setting: &SimSetting, methods: &[Method], reps: usize, opts: &CoverageOptions) -> Result<Vec<CoverageReport>> {
    if reps == 0 {
        return Err(Error::Parameter("at least one replication is required".into()));
    }
    if methods.is_empty() {
        return Err(Error::Parameter("no methods requested".into()));
    }
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.max(1))
        .build()
        .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?;
    let outcomes: Vec<Vec<Outcome>> = pool.install(|| {
        (0..reps as u64)
            .into_par_iter()
            .map(|r| run_replication(setting, methods, r, opts))
            .collect()
    });
    let runtime = start.elapsed();

    let mut reports = Vec::with_capacity(methods.len());
    for (k, method) in methods.iter().enumerate() {
        let mut sums = [0.0; 5];
        let mut successes = 0;
        let mut negative = 0;
        for rep in &outcomes {
            match &rep[k] {
                Outcome::Covered(c) => {
                    successes += 1;
                    for t in 0..5 {
                        sums[t] += c[t];
                    }
                }
                Outcome::NegativeResponses => negative += 1,
                Outcome::Failed(_) => {}
            }
        }
        let coverage = if successes > 0 {
            sums.map(|s| Some(s / successes as f64))
        } else {
            [None; 5]
        };
        let not_applicable = (successes == 0 && negative > 0).then(|| "negative responses".to_string());
        reports.push(CoverageReport {
            setting: setting.id,
            method: *method,
            coverage,
            reps,
            n: setting.n,
            successes,
            failures: reps - successes,
            not_applicable,
            runtime,
        });
    }
    Ok(reports)
}

/// Failure messages per method, for logging.
pub fn failure_messages(setting: &SimSetting, methods: &[Method], rep: u64, opts: &CoverageOptions) -> Vec<Option<String>> {
    run_replication(setting, methods, rep, opts)
        .into_iter()
        .map(|o| match o {
            Outcome::Covered(_) => None,
            Outcome::Failed(m) => Some(m),
            Outcome::NegativeResponses => Some("negative responses".into()),
        })
        .collect()
}

/// One row of the exported coverage table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub setting: u8,
    pub method: String,
    pub f1: String,
    pub f2: String,
    pub f3: String,
    pub f4: String,
    pub mu: String,
    pub reps: usize,
    pub n: usize,
    pub successes: usize,
    pub failures: usize,
}

impl CoverageRow {
    /// Numeric coverages; None for NA cells.
    pub fn values(&self) -> [Option<f64>; 5] {
        [&self.f1, &self.f2, &self.f3, &self.f4, &self.mu].map(|c| c.parse::<f64>().ok())
    }
}

fn cell(report: &CoverageReport, t: usize) -> String {
    match (&report.not_applicable, report.coverage[t]) {
        (Some(reason), _) => format!("NA({reason})"),
        (None, Some(v)) => v.to_string(),
        (None, None) => "NA(all replications failed)".into(),
    }
}

pub fn coverage_rows(reports: &[CoverageReport]) -> Vec<CoverageRow> {
    reports
        .iter()
        .map(|r| CoverageRow {
            setting: r.setting,
            method: r.method.label(),
            f1: cell(r, 0),
            f2: cell(r, 1),
            f3: cell(r, 2),
            f4: cell(r, 3),
            mu: cell(r, 4),
            reps: r.reps,
            n: r.n,
            successes: r.successes,
            failures: r.failures,
        })
        .collect()
}

pub fn write_coverage_csv(path: &Path, reports: &[CoverageReport]) -> Result<()> {
    crate::diagnostics::write_rows(path, &coverage_rows(reports))
}

pub fn read_coverage_csv(path: &Path) -> Result<Vec<CoverageRow>> {
    crate::diagnostics::read_rows(path)
}

/// Aligned text table: one row per method, columns f1..f4 and mu.
pub fn coverage_text(reports: &[CoverageReport]) -> String {
    let mut rows: Vec<[String; 7]> = vec![[
        "method".into(),
        "variance".into(),
        "f1".into(),
        "f2".into(),
        "f3".into(),
        "f4".into(),
        "mu".into(),
    ]];
    for r in reports {
        let (method, family) = match r.method {
            Method::Dnp => ("DNP".to_string(), "---".to_string()),
            Method::Gam(k) => ("GAM".to_string(), k.name().to_string()),
        };
        let mut row = [method, family, String::new(), String::new(), String::new(), String::new(), String::new()];
        for t in 0..5 {
            row[t + 2] = match (&r.not_applicable, r.coverage[t]) {
                (Some(reason), _) => format!("NA({reason})"),
                (None, Some(v)) => format!("{v:.1}"),
                (None, None) => "NA".into(),
            };
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..7).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in &rows {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_labels_round_trip() {
        for m in [Method::Dnp, Method::Gam(VarianceKind::Mu), Method::Gam(VarianceKind::MuPlusPhiMuSq)] {
            assert_eq!(Method::parse(&m.label()).unwrap(), m);
        }
        assert!(Method::parse("glm").is_err());
        let s = SimSetting::new(3, 10, 0).unwrap();
        assert_eq!(Method::parse_list("all", &s).unwrap().len(), 4);
    }

    #[test]
    fn saturated_bands_cover_everything() {
        let s = SimSetting::new(3, 100, 1).unwrap();
        let opts = CoverageOptions {
            cov_scale: 1e6,
            threads: 1,
            ..Default::default()
        };
        let rep = run_coverage(&s, &[Method::Gam(VarianceKind::Mu)], 1, &opts).unwrap();
        assert_eq!(rep[0].coverage, [Some(100.0); 5]);
        assert_eq!(rep[0].successes + rep[0].failures, 1);
    }

    #[test]
    fn negative_responses_give_na() {
        let s = SimSetting::new(2, 100, 3).unwrap();
        let opts = CoverageOptions { threads: 1, ..Default::default() };
        let rep = run_coverage(&s, &[Method::Gam(VarianceKind::Mu)], 2, &opts).unwrap();
        assert_eq!(rep[0].not_applicable.as_deref(), Some("negative responses"));
        assert!(coverage_text(&rep).contains("NA(negative responses)"));
    }

    #[test]
    fn single_report_table_and_csv_round_trip() {
        let report = CoverageReport {
            setting: 3,
            method: Method::Dnp,
            coverage: [Some(91.25), Some(1.0 / 3.0), None, Some(100.0), Some(89.0)],
            reps: 10,
            n: 200,
            successes: 9,
            failures: 1,
            not_applicable: None,
            runtime: Duration::ZERO,
        };
        let text = coverage_text(std::slice::from_ref(&report));
        assert_eq!(text.lines().count(), 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        write_coverage_csv(&path, std::slice::from_ref(&report)).unwrap();
        let back = read_coverage_csv(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].values(), report.coverage);
    }
}
