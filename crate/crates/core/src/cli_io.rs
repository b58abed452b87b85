//! Configuration, CSV ingestion, fit persistence and the `fit`, `simulate`
//! and `diagnose` commands.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::basis::{AdditiveDesign, BasisSpec, DesignBlock};
use crate::diagnostics::{
    export_distribution, ks_report, pit, qq_table, write_distribution_csv, write_pit_csv, write_qq_csv, write_rows,
    DistributionRow, DnpPredictive, Parametric, PitSample, PredictiveCdf,
};
use crate::dnp::{confidence_bands, dnp_maximize, BandTables, DnpOptions, KktReport, MeanBandRow};
use crate::error::{Error, Result};
use crate::gam::{
    gcv_select, pirls_fit, plugin_lambda, DispersionMode, LambdaGrid, PirlsOptions, ResponseType, VarianceFamily,
    VarianceKind,
};
use crate::harness::{coverage_text, run_coverage, write_coverage_csv, CoverageOptions, Method};
use crate::link::Link;
use crate::simulation::{SimSetting, LOGIT_LINK_OFFSET, LOGIT_LINK_SCALE, LOG_LINK_SCALE};
use crate::tilt::{solve_all_tilts_from, DiscreteDistribution};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_NONCONVERGED: i32 = 2;

/// Points per covariate in curves.csv.
pub const CURVE_GRID_POINTS: usize = 101;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaSpec {
    Values(Vec<f64>),
    Mode(String),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    pub tol: Option<f64>,
    pub max_outer: Option<usize>,
    pub tilt_tol: Option<f64>,
    pub damping: Option<f64>,
    pub pirls_tol: Option<f64>,
    pub pirls_max_iter: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub response: String,
    pub covariates: Vec<String>,
    pub link: Link,
    #[serde(default = "default_degree")]
    pub degree: usize,
    #[serde(default = "default_knots")]
    pub num_knots: usize,
    pub lambda: LambdaSpec,
    pub method: String,
    #[serde(default)]
    pub seed: u64,
    /// Optional prior-weight column (trials for proportions).
    pub weights: Option<String>,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub tolerances: Tolerances,
}

fn default_degree() -> usize {
    3
}
fn default_knots() -> usize {
    10
}
fn default_level() -> f64 {
    0.95
}

impl FitConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Input(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    fn validate(&self) -> Result<()> {
        if self.covariates.is_empty() {
            return Err(Error::Input("config: at least one covariate is required".into()));
        }
        if let LambdaSpec::Values(v) = &self.lambda {
            if v.len() != self.covariates.len() {
                return Err(Error::Input(format!(
                    "config: {} smoothing parameters given for {} covariates",
                    v.len(),
                    self.covariates.len()
                )));
            }
            if v.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
                return Err(Error::Input("config: explicit smoothing parameters must be finite and >= 0".into()));
            }
        }
        self.method_kind()?;
        Ok(())
    }

    pub fn method_kind(&self) -> Result<Method> {
        Method::parse(&self.method).map_err(|e| Error::Input(format!("config: {e}")))
    }

    fn pirls_options(&self) -> PirlsOptions {
        let d = PirlsOptions::default();
        PirlsOptions {
            tol: self.tolerances.pirls_tol.unwrap_or(d.tol),
            max_iter: self.tolerances.pirls_max_iter.unwrap_or(d.max_iter),
            ..d
        }
    }

    fn dnp_options(&self) -> DnpOptions {
        let d = DnpOptions::default();
        DnpOptions {
            tol: self.tolerances.tol.unwrap_or(d.tol),
            max_outer: self.tolerances.max_outer.unwrap_or(d.max_outer),
            tilt_tol: self.tolerances.tilt_tol.unwrap_or(d.tilt_tol),
            damping: self.tolerances.damping.unwrap_or(d.damping),
            ..d
        }
    }
}

/// Named numeric columns read from a CSV with a header row.
#[derive(Debug, Clone, PartialEq)]
pub struct DataTable {
    pub columns: HashMap<String, Vec<f64>>,
    pub nrows: usize,
}

impl DataTable {
    /// Reads the requested columns; other columns are ignored.
    pub fn read(path: &Path, wanted: &[&str]) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
        let headers = reader.headers()?.clone();
        let mut idx = Vec::with_capacity(wanted.len());
        for name in wanted {
            match headers.iter().position(|h| h.trim() == *name) {
                Some(i) => idx.push(i),
                None => return Err(Error::Input(format!("missing column `{name}` in {}", path.display()))),
            }
        }
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); wanted.len()];
        for (r, rec) in reader.records().enumerate() {
            let rec = rec?;
            for (k, &i) in idx.iter().enumerate() {
                let cell = rec.get(i).unwrap_or("").trim();
                let v: f64 = cell.parse().map_err(|_| {
                    Error::Input(format!(
                        "non-numeric value `{cell}` at data row {} (line {}), column `{}`",
                        r + 1,
                        r + 2,
                        wanted[k]
                    ))
                })?;
                if !v.is_finite() {
                    return Err(Error::Input(format!(
                        "non-finite value at data row {} (line {}), column `{}`",
                        r + 1,
                        r + 2,
                        wanted[k]
                    )));
                }
                cols[k].push(v);
            }
        }
        let nrows = cols.first().map_or(0, Vec::len);
        Ok(Self {
            columns: wanted.iter().map(|s| s.to_string()).zip(cols).collect(),
            nrows,
        })
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.columns
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Input(format!("missing column `{name}`")))
    }

    pub fn matrix(&self, names: &[String]) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(self.nrows, names.len());
        for (j, name) in names.iter().enumerate() {
            for (i, v) in self.column(name)?.iter().enumerate() {
                m[(i, j)] = *v;
            }
        }
        Ok(m)
    }
}

/// Serialized fit: a self-contained JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDocument {
    pub method: String,
    pub link: Link,
    pub degree: usize,
    pub response: String,
    pub covariates: Vec<String>,
    pub weights: Option<String>,
    pub beta: Vec<f64>,
    pub knots: Vec<Vec<f64>>,
    pub centering: Vec<Vec<f64>>,
    pub ranges: Vec<[f64; 2]>,
    pub lambda: Vec<f64>,
    pub masses: Vec<f64>,
    pub support: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub kkt: KktReport,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub level: f64,
    pub seed: u64,
    /// Working family label for classical fits.
    pub family: Option<String>,
    pub dispersion: Option<f64>,
    pub nb_phi: Option<f64>,
    pub warnings: Vec<String>,
}

/// (field, expected JSON kind) checked in order when loading.
const REQUIRED_FIELDS: &[(&str, &str)] = &[
    ("method", "string"),
    ("link", "string"),
    ("degree", "number"),
    ("response", "string"),
    ("covariates", "array"),
    ("beta", "array"),
    ("knots", "array"),
    ("centering", "array"),
    ("ranges", "array"),
    ("lambda", "array"),
    ("masses", "array"),
    ("support", "array"),
    ("cov", "array"),
    ("kkt", "object"),
    ("loglik", "number"),
    ("converged", "bool"),
    ("iterations", "number"),
    ("level", "number"),
    ("seed", "number"),
];

fn kind_matches(v: &Value, kind: &str) -> bool {
    match kind {
        "string" => v.is_string(),
        "number" => v.is_number(),
        "array" => v.is_array(),
        "object" => v.is_object(),
        "bool" => v.is_boolean(),
        _ => false,
    }
}

impl FitDocument {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses and validates, naming the first missing or mistyped field.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Input(format!("fit document: {e}")))?;
        let obj = value.as_object().ok_or_else(|| Error::Schema("<root>".into()))?;
        for (field, kind) in REQUIRED_FIELDS {
            match obj.get(*field) {
                Some(v) if kind_matches(v, kind) => {}
                _ => return Err(Error::Schema((*field).into())),
            }
        }
        let doc: Self = serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))?;
        doc.check_shapes()?;
        Ok(doc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn check_shapes(&self) -> Result<()> {
        let d = self.covariates.len();
        if self.knots.len() != d {
            return Err(Error::Schema("knots".into()));
        }
        if self.centering.len() != d || self.centering.iter().zip(&self.knots).any(|(c, k)| c.len() != self.degree + k.len()) {
            return Err(Error::Schema("centering".into()));
        }
        if self.ranges.len() != d {
            return Err(Error::Schema("ranges".into()));
        }
        if self.lambda.len() != d {
            return Err(Error::Schema("lambda".into()));
        }
        let p: usize = self.centering.iter().map(Vec::len).sum::<usize>() + 1;
        if self.beta.len() != p {
            return Err(Error::Schema("beta".into()));
        }
        if self.cov.len() != p || self.cov.iter().any(|r| r.len() != p) {
            return Err(Error::Schema("cov".into()));
        }
        if self.masses.len() != self.support.len() {
            return Err(Error::Schema("masses".into()));
        }
        Ok(())
    }

    pub fn method_kind(&self) -> Result<Method> {
        Method::parse(&self.method).map_err(|_| Error::Schema("method".into()))
    }

    /// Design on new covariates using the stored knots, centering and ranges.
    pub fn design_for(&self, x: &DMatrix<f64>) -> Result<AdditiveDesign> {
        if x.ncols() != self.covariates.len() {
            return Err(Error::DimensionMismatch {
                expected: self.covariates.len(),
                found: x.ncols(),
            });
        }
        let blocks = (0..self.covariates.len())
            .map(|j| {
                let spec = BasisSpec::explicit(self.degree, self.knots[j].clone())?;
                let col: Vec<f64> = x.column(j).iter().copied().collect();
                DesignBlock::with_centering(j, &col, spec, self.centering[j].clone(), (self.ranges[j][0], self.ranges[j][1]))
            })
            .collect::<Result<Vec<_>>>()?;
        AdditiveDesign::from_blocks(blocks, &self.lambda, Vec::new())
    }

    pub fn beta_vector(&self) -> DVector<f64> {
        DVector::from_vec(self.beta.clone())
    }

    pub fn cov_matrix(&self) -> DMatrix<f64> {
        let p = self.cov.len();
        DMatrix::from_fn(p, p, |i, j| self.cov[i][j])
    }

    /// Evenly spaced grids over each training range.
    pub fn curve_grids(&self) -> Vec<Vec<f64>> {
        self.ranges.iter().map(|r| curve_grid(r[0], r[1])).collect()
    }

    /// Recomputes the band tables from the stored fit at the given covariates.
    pub fn bands(&self, x: &DMatrix<f64>) -> Result<BandTables> {
        let design = self.design_for(x)?;
        confidence_bands(
            &design,
            &self.beta_vector(),
            &self.cov_matrix(),
            self.link,
            &self.curve_grids(),
            &design.matrix,
            self.level,
        )
    }
}

fn curve_grid(lo: f64, hi: f64) -> Vec<f64> {
    let m = CURVE_GRID_POINTS - 1;
    (0..=m).map(|k| if k == m { hi } else { lo + (hi - lo) * k as f64 / m as f64 }).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub covariate: String,
    pub grid: f64,
    pub fhat: f64,
    pub se: f64,
    pub lo: f64,
    pub hi: f64,
    pub extrapolated: bool,
}

pub fn curve_rows(doc: &FitDocument, bands: &BandTables) -> Vec<CurveRow> {
    bands
        .smooths
        .iter()
        .zip(&doc.covariates)
        .flat_map(|(rows, name)| {
            rows.iter().map(move |r| CurveRow {
                covariate: name.clone(),
                grid: r.x,
                fhat: r.fhat,
                se: r.se,
                lo: r.lo,
                hi: r.hi,
                extrapolated: r.extrapolated,
            })
        })
        .collect()
}

pub fn read_curves_csv(path: &Path) -> Result<Vec<CurveRow>> {
    crate::diagnostics::read_rows(path)
}

pub fn read_mean_curve_csv(path: &Path) -> Result<Vec<MeanBandRow>> {
    crate::diagnostics::read_rows(path)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Input(format!("cannot create {}: {e}", dir.display())))
}

/// Maps an error to its exit code and prints it.
fn report(e: &Error) -> i32 {
    eprintln!("error: {e}");
    match e {
        Error::Diverged(_) => EXIT_NONCONVERGED,
        _ => EXIT_INPUT,
    }
}

/// Result of fitting one configured model to a table.
pub struct FitOutcome {
    pub document: FitDocument,
    pub pit: PitSample,
    pub distribution: Vec<DistributionRow>,
    pub x: DMatrix<f64>,
}

/// Fits the configured model; non-convergence is reported through `document.converged`.
pub fn fit_from_config(cfg: &FitConfig, data: &DataTable) -> Result<FitOutcome> {
    let method = cfg.method_kind()?;
    let y = data.column(&cfg.response)?.to_vec();
    let x = data.matrix(&cfg.covariates)?;
    let weights = match &cfg.weights {
        Some(w) => Some(data.column(w)?.to_vec()),
        None => None,
    };
    let n = y.len();
    let placeholder = vec![1.0; cfg.covariates.len()];
    let design = AdditiveDesign::build_with_quantile_knots(&x, cfg.degree, cfg.num_knots, &placeholder)?;
    let grid = LambdaGrid::default();
    let pirls = cfg.pirls_options();

    // smoothing parameters on the classical (summed) scale, with the dispersion used to convert them
    let (gam_lambda, dispersion, start): (Vec<f64>, f64, Option<DVector<f64>>) = match &cfg.lambda {
        LambdaSpec::Values(v) => (v.clone(), 1.0, None),
        LambdaSpec::Mode(mode) => {
            let (kind, arg) = mode
                .split_once(':')
                .ok_or_else(|| Error::Input(format!("config: lambda mode `{mode}` must be gcv:<family> or plugin:<type>")))?;
            match kind {
                "gcv" => {
                    let fam_kind: VarianceKind = arg.parse().map_err(|e: Error| Error::Input(format!("config: {e}")))?;
                    let response = match cfg.link {
                        Link::Identity => ResponseType::Continuous,
                        Link::Log => ResponseType::Count,
                        Link::Logit => ResponseType::Binary,
                    };
                    let family = VarianceFamily::default_for(fam_kind, response);
                    let sel = gcv_select(&design, &y, weights.as_deref(), cfg.link, family, &grid)?;
                    (sel.lambda, sel.fit.pearson_dispersion, Some(sel.fit.beta_hat))
                }
                "plugin" => {
                    let rt: ResponseType = arg.parse().map_err(|e: Error| Error::Input(format!("config: {e}")))?;
                    let plug = plugin_lambda(&design, &y, weights.as_deref(), rt, &grid)?;
                    let start = (plug.link == cfg.link).then(|| plug.fit.beta_hat.clone());
                    (plug.lambda.clone(), plug.dispersion, start)
                }
                other => return Err(Error::Input(format!("config: unknown lambda mode `{other}`"))),
            }
        }
    };

    let mut warnings = design.warnings.clone();
    let (document, predictive, distribution): (FitDocument, Box<dyn PredictiveCdf>, Vec<DistributionRow>);
    let base = |beta: &DVector<f64>, cov: &DMatrix<f64>, lambda: Vec<f64>| FitDocument {
        method: method.label(),
        link: cfg.link,
        degree: cfg.degree,
        response: cfg.response.clone(),
        covariates: cfg.covariates.clone(),
        weights: cfg.weights.clone(),
        beta: beta.iter().copied().collect(),
        knots: design.blocks.iter().map(|b| b.spec.knots.clone()).collect(),
        centering: design.blocks.iter().map(|b| b.column_means.clone()).collect(),
        ranges: design.blocks.iter().map(|b| [b.range.0, b.range.1]).collect(),
        lambda,
        masses: Vec::new(),
        support: Vec::new(),
        cov: (0..cov.nrows()).map(|i| cov.row(i).iter().copied().collect()).collect(),
        kkt: KktReport::default(),
        loglik: 0.0,
        converged: false,
        iterations: 0,
        level: cfg.level,
        seed: cfg.seed,
        family: None,
        dispersion: None,
        nb_phi: None,
        warnings: Vec::new(),
    };
    match method {
        Method::Dnp => {
            let lambda = match &cfg.lambda {
                LambdaSpec::Values(v) => v.clone(),
                LambdaSpec::Mode(_) => gam_lambda.iter().map(|l| l / (n as f64 * dispersion.max(1e-12))).collect(),
            };
            let opts = DnpOptions {
                initial_beta: start,
                ..cfg.dnp_options()
            };
            let fit = dnp_maximize(&design, &y, cfg.link, &lambda, &opts)?;
            warnings.extend(fit.warnings.iter().cloned());
            let mut doc = base(&fit.beta_hat, &fit.cov_beta, lambda);
            doc.masses = fit.f_hat.masses().to_vec();
            doc.support = fit.f_hat.support().to_vec();
            doc.kkt = fit.kkt;
            doc.loglik = fit.penalized_loglik;
            doc.converged = fit.converged;
            doc.iterations = fit.iterations;
            distribution = export_distribution(&fit.f_hat);
            let tilts = fit.tilts.clone();
            let reference = fit.f_hat.clone();
            predictive = Box::new(OwnedTilts { reference, tilts });
            document = doc;
        }
        Method::Gam(kind) => {
            let response = match cfg.link {
                Link::Identity => ResponseType::Continuous,
                Link::Log => ResponseType::Count,
                Link::Logit => ResponseType::Binary,
            };
            let family = VarianceFamily::default_for(kind, response);
            let opts = PirlsOptions {
                allow_nonconverged: true,
                initial_beta: None,
                ..pirls
            };
            let fit = pirls_fit(&design, &y, weights.as_deref(), cfg.link, family, &gam_lambda, &opts)?;
            let mut doc = base(&fit.beta_hat, &fit.cov_beta, gam_lambda.clone());
            doc.kkt.score_beta_maxnorm = fit.score_maxnorm;
            doc.loglik = fit.penalized_quasi_loglik;
            doc.converged = fit.converged;
            doc.iterations = fit.iterations;
            doc.family = Some(family.label());
            doc.dispersion = Some(fit.dispersion_hat);
            doc.nb_phi = fit.nb_phi;
            predictive = Box::new(parametric_predictive(&doc, &fit.fitted, weights.as_deref())?);
            distribution = export_distribution(&DiscreteDistribution::empirical(y.clone())?);
            document = doc;
        }
    }
    let mut document = document;
    document.warnings = warnings;
    let pit = pit(predictive.as_ref(), &y, cfg.seed)?;
    Ok(FitOutcome {
        document,
        pit,
        distribution,
        x,
    })
}

struct OwnedTilts {
    reference: DiscreteDistribution,
    tilts: Vec<crate::tilt::TiltSolution>,
}

impl PredictiveCdf for OwnedTilts {
    fn len(&self) -> usize {
        self.tilts.len()
    }
    fn cdf_pair(&self, i: usize, y: f64) -> (f64, f64) {
        DnpPredictive {
            reference: &self.reference,
            tilts: &self.tilts,
        }
        .cdf_pair(i, y)
    }
    fn is_discrete(&self, y: &[f64]) -> bool {
        DnpPredictive {
            reference: &self.reference,
            tilts: &self.tilts,
        }
        .is_discrete(y)
    }
}

/// Parametric predictive laws matching a classical fit's working family.
fn parametric_predictive(doc: &FitDocument, mu: &[f64], weights: Option<&[f64]>) -> Result<Parametric> {
    let family = doc.family.as_deref().ok_or_else(|| Error::Schema("family".into()))?;
    let kind: VarianceKind = family.split(':').next().unwrap_or_default().parse().map_err(|_| Error::Schema("family".into()))?;
    let phi = doc.dispersion.unwrap_or(1.0);
    let mean = mu.to_vec();
    Ok(match kind {
        VarianceKind::Constant => Parametric::Normal { mean, sd: phi.sqrt() },
        VarianceKind::Mu => Parametric::Poisson { mean },
        VarianceKind::PhiMuSq => Parametric::Gamma { mean, shape: 1.0 / phi },
        VarianceKind::MuPlusPhiMuSq => Parametric::NegativeBinomial {
            mean,
            phi: doc.nb_phi.unwrap_or(phi),
        },
        VarianceKind::MuOneMinusMu => {
            let trials = weights.and_then(|w| w.first().copied()).unwrap_or(1.0);
            Parametric::Binomial {
                prob: mean,
                trials: trials.round().max(1.0) as u64,
            }
        }
    })
}

/// Writes fit.json, curves.csv, mean_curve.csv, pit.csv and distribution.csv.
pub fn write_fit_outputs(out: &Path, outcome: &FitOutcome) -> Result<()> {
    ensure_dir(out)?;
    let doc = &outcome.document;
    fs::write(out.join("fit.json"), doc.to_json()?)?;
    let bands = doc.bands(&outcome.x)?;
    write_rows(&out.join("curves.csv"), &curve_rows(doc, &bands))?;
    write_rows(&out.join("mean_curve.csv"), &bands.mean)?;
    write_pit_csv(&out.join("pit.csv"), &outcome.pit)?;
    write_distribution_csv(&out.join("distribution.csv"), &outcome.distribution)?;
    Ok(())
}

/// `fit`: exit 0 on convergence, 2 on non-convergence (outputs still written), 1 on input errors.
pub fn cmd_fit(config: &Path, data: &Path, out: &Path) -> i32 {
    let run = || -> Result<bool> {
        let cfg = FitConfig::load(config)?;
        let mut wanted: Vec<&str> = vec![cfg.response.as_str()];
        wanted.extend(cfg.covariates.iter().map(String::as_str));
        if let Some(w) = &cfg.weights {
            wanted.push(w.as_str());
        }
        let table = DataTable::read(data, &wanted)?;
        let outcome = fit_from_config(&cfg, &table)?;
        write_fit_outputs(out, &outcome)?;
        for w in &outcome.document.warnings {
            eprintln!("warning: {w}");
        }
        Ok(outcome.document.converged)
    };
    match run() {
        Ok(true) => EXIT_OK,
        Ok(false) => {
            eprintln!("fit did not converge; outputs written with converged=false");
            EXIT_NONCONVERGED
        }
        Err(e) => report(&e),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateArgs {
    pub setting: u8,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub methods: String,
    pub out: PathBuf,
}

/// Provenance block written above the coverage table.
pub fn provenance(args: &SimulateArgs, setting: &SimSetting, methods: &[Method], opts: &CoverageOptions) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# setting = {} ({})", setting.id, setting.name());
    let _ = writeln!(s, "# n = {}", args.n);
    let _ = writeln!(s, "# replications = {}", args.reps);
    let _ = writeln!(s, "# seed = {}", args.seed);
    let labels: Vec<String> = methods.iter().map(Method::label).collect();
    let _ = writeln!(s, "# methods = {}", labels.join(","));
    let _ = writeln!(s, "# level = {}", opts.level);
    let _ = writeln!(s, "# basis = truncated power, degree {}, {} knots at quantiles", opts.degree, opts.num_knots);
    let _ = writeln!(
        s,
        "# predictor scaling = log link {LOG_LINK_SCALE}*sum(f); logit link {LOGIT_LINK_SCALE}*(sum(f) - {LOGIT_LINK_OFFSET})"
    );
    let _ = writeln!(
        s,
        "# tolerances = dnp tol {}, max_outer {}, tilt_tol {}, pirls tol {}",
        opts.dnp.tol,
        opts.dnp.max_outer,
        opts.dnp.tilt_tol,
        PirlsOptions::default().tol
    );
    let _ = writeln!(s, "# version = {}", env!("CARGO_PKG_VERSION"));
    s
}

/// `simulate`: coverage.csv and coverage.txt.
pub fn cmd_simulate(args: &SimulateArgs) -> i32 {
    let run = || -> Result<()> {
        let setting = SimSetting::new(args.setting, args.n, args.seed).map_err(|e| Error::Input(e.to_string()))?;
        let methods = Method::parse_list(&args.methods, &setting).map_err(|e| Error::Input(e.to_string()))?;
        if methods.is_empty() {
            return Err(Error::Input("no methods requested".into()));
        }
        let opts = CoverageOptions::default();
        let reports = run_coverage(&setting, &methods, args.reps, &opts).map_err(|e| Error::Input(e.to_string()))?;
        ensure_dir(&args.out)?;
        write_coverage_csv(&args.out.join("coverage.csv"), &reports)?;
        let text = format!("{}\n{}", provenance(args, &setting, &methods, &opts), coverage_text(&reports));
        fs::write(args.out.join("coverage.txt"), text)?;
        Ok(())
    };
    match run() {
        Ok(()) => EXIT_OK,
        Err(e) => report(&e),
    }
}

/// PIT of a saved fit on a data set.
pub fn diagnose_pit(doc: &FitDocument, table: &DataTable) -> Result<PitSample> {
    let y = table.column(&doc.response)?.to_vec();
    let x = table.matrix(&doc.covariates)?;
    let design = doc.design_for(&x)?;
    let eta = &design.matrix * doc.beta_vector();
    let mu: Vec<f64> = eta.iter().map(|e| doc.link.inverse(*e)).collect();
    match doc.method_kind()? {
        Method::Dnp => {
            let reference = DiscreteDistribution::new(doc.support.clone(), doc.masses.clone())
                .map_err(|_| Error::Schema("masses".into()))?;
            let tilts = solve_all_tilts_from(&reference, &mu, crate::tilt::DEFAULT_TILT_TOL, None)?;
            let pred = DnpPredictive {
                reference: &reference,
                tilts: &tilts.solutions,
            };
            pit(&pred, &y, doc.seed)
        }
        Method::Gam(_) => {
            let weights = match &doc.weights {
                Some(w) => Some(table.column(w)?.to_vec()),
                None => None,
            };
            let pred = parametric_predictive(doc, &mu, weights.as_deref())?;
            pit(&pred, &y, doc.seed)
        }
    }
}

/// `diagnose`: pit.csv, qq.csv and ks.txt.
pub fn cmd_diagnose(fit: &Path, data: &Path, out: &Path) -> i32 {
    let run = || -> Result<()> {
        let doc = FitDocument::load(fit)?;
        let mut wanted: Vec<&str> = vec![doc.response.as_str()];
        wanted.extend(doc.covariates.iter().map(String::as_str));
        if let Some(w) = &doc.weights {
            wanted.push(w.as_str());
        }
        let table = DataTable::read(data, &wanted)?;
        let sample = diagnose_pit(&doc, &table)?;
        ensure_dir(out)?;
        write_pit_csv(&out.join("pit.csv"), &sample)?;
        write_qq_csv(&out.join("qq.csv"), &qq_table(&sample.values))?;
        fs::write(out.join("ks.txt"), ks_report(&sample))?;
        Ok(())
    };
    match run() {
        Ok(()) => EXIT_OK,
        Err(e) => report(&e),
    }
}

/// Parses `key = value` lines of ks.txt.
pub fn parse_ks_report(text: &str) -> HashMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

impl DispersionMode {
    pub fn name(self) -> &'static str {
        match self {
            DispersionMode::Fixed => "fixed",
            DispersionMode::PearsonEstimated => "pearson",
        }
    }
}
