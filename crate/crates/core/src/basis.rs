//! Truncated-power P-spline bases, ridge penalties and sum-to-zero centering
//! for additive predictors.
//!
//! Each smooth f_j is represented by the columns
//! `x, x², …, x^p, (x − κ₁)₊^p, …, (x − κ_m)₊^p`, centered over the fitting
//! sample so that Σᵢ f̂_j(X_ij) = 0 for every coefficient vector. A single
//! unpenalized intercept column is appended after all blocks.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnotRule {
    /// Empirical quantiles of the covariate at k/(m+1).
    Quantiles,
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub degree: usize,
    pub knot_rule: KnotRule,
    pub knots: Vec<f64>,
}

/// Result of quantile knot placement.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotPlacement {
    pub knots: Vec<f64>,
    /// Number of requested knots dropped because they coincided with another
    /// knot or with the covariate maximum.
    pub collapsed: usize,
}

impl BasisSpec {
    pub fn new(degree: usize, knots: Vec<f64>, knot_rule: KnotRule) -> Result<Self> {
        if degree == 0 {
            return Err(Error::Parameter("spline degree must be at least 1".into()));
        }
        if knots.iter().any(|k| !k.is_finite()) {
            return Err(Error::NonFinite("knot".into()));
        }
        if knots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parameter("knots must be strictly increasing".into()));
        }
        Ok(Self {
            degree,
            knot_rule,
            knots,
        })
    }

    pub fn explicit(degree: usize, knots: Vec<f64>) -> Result<Self> {
        Self::new(degree, knots, KnotRule::Explicit)
    }

    /// Places `num_knots` knots at the empirical quantiles of `x`.
    pub fn from_quantiles(x: &[f64], degree: usize, num_knots: usize) -> Result<(Self, KnotPlacement)> {
        let placement = place_knots(x, num_knots)?;
        let spec = Self::new(degree, placement.knots.clone(), KnotRule::Quantiles)?;
        Ok((spec, placement))
    }

    pub fn num_knots(&self) -> usize {
        self.knots.len()
    }

    /// Number of basis columns (intercept excluded).
    pub fn dim(&self) -> usize {
        self.degree + self.knots.len()
    }

    /// Ridge penalty on the truncated-power coefficients; the polynomial part is unpenalized.
    pub fn penalty(&self) -> DMatrix<f64> {
        let k = self.dim();
        DMatrix::from_fn(k, k, |i, j| if i == j && i >= self.degree { 1.0 } else { 0.0 })
    }
}

/// Type-7 empirical quantile of sorted data.
fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Knots at the empirical quantiles k/(m+1), k = 1..m, with duplicates collapsed.
pub fn place_knots(x: &[f64], num_knots: usize) -> Result<KnotPlacement> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariate value".into()));
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let distinct = sorted.windows(2).filter(|w| w[0] != w[1]).count() + usize::from(!sorted.is_empty());
    if distinct < 2 {
        return Err(Error::DegenerateCovariate);
    }
    if x.len() < num_knots + 2 {
        return Err(Error::Parameter(format!(
            "{} knots need at least {} observations, got {}",
            num_knots,
            num_knots + 2,
            x.len()
        )));
    }
    let max = sorted[sorted.len() - 1];
    let scale = (max - sorted[0]).abs().max(1.0);
    let mut knots: Vec<f64> = Vec::with_capacity(num_knots);
    for k in 1..=num_knots {
        let q = quantile_sorted(&sorted, k as f64 / (num_knots + 1) as f64);
        let duplicate = knots.last().is_some_and(|&last| q - last <= 1e-12 * scale);
        if !duplicate && q < max {
            knots.push(q);
        }
    }
    Ok(KnotPlacement {
        collapsed: num_knots - knots.len(),
        knots,
    })
}

/// Uncentered basis row `(x, …, x^p, (x−κ₁)₊^p, …)`.
pub fn truncated_power_row(x: f64, spec: &BasisSpec) -> Vec<f64> {
    let mut row = Vec::with_capacity(spec.dim());
    let mut power = 1.0;
    for _ in 0..spec.degree {
        power *= x;
        row.push(power);
    }
    let p = spec.degree as i32;
    row.extend(spec.knots.iter().map(|&k| if x > k { (x - k).powi(p) } else { 0.0 }));
    row
}

/// One covariate's centered basis block.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignBlock {
    pub covariate_index: usize,
    pub spec: BasisSpec,
    /// n × K centered basis matrix.
    pub matrix: DMatrix<f64>,
    /// K × K penalty (unscaled by λ).
    pub penalty: DMatrix<f64>,
    pub column_means: Vec<f64>,
    /// Training covariate range, used to flag extrapolation.
    pub range: (f64, f64),
}

impl DesignBlock {
    pub fn build(covariate_index: usize, x: &[f64], spec: BasisSpec) -> Result<Self> {
        let column_means = training_column_means(x, &spec);
        let range = x
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        Self::with_centering(covariate_index, x, spec, column_means, range)
    }

    /// Builds a block with given centering offsets (e.g. restored from a saved fit).
    pub fn with_centering(
        covariate_index: usize,
        x: &[f64],
        spec: BasisSpec,
        column_means: Vec<f64>,
        range: (f64, f64),
    ) -> Result<Self> {
        if column_means.len() != spec.dim() {
            return Err(Error::DimensionMismatch {
                expected: spec.dim(),
                found: column_means.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariate value".into()));
        }
        let k = spec.dim();
        let mut matrix = DMatrix::zeros(x.len(), k);
        for (i, &xi) in x.iter().enumerate() {
            for (c, v) in truncated_power_row(xi, &spec).into_iter().enumerate() {
                matrix[(i, c)] = v - column_means[c];
            }
        }
        let penalty = spec.penalty();
        Ok(Self {
            covariate_index,
            spec,
            matrix,
            penalty,
            column_means,
            range,
        })
    }

    pub fn ncols(&self) -> usize {
        self.spec.dim()
    }

    /// Centered basis row at a new covariate value.
    pub fn row(&self, x: f64) -> Vec<f64> {
        let mut r = truncated_power_row(x, &self.spec);
        for (v, m) in r.iter_mut().zip(&self.column_means) {
            *v -= m;
        }
        r
    }
}

fn training_column_means(x: &[f64], spec: &BasisSpec) -> Vec<f64> {
    let mut means = vec![0.0; spec.dim()];
    for &xi in x {
        for (m, v) in means.iter_mut().zip(truncated_power_row(xi, spec)) {
            *m += v;
        }
    }
    let n = x.len().max(1) as f64;
    means.iter_mut().for_each(|m| *m /= n);
    means
}

/// f̂_j on a grid, using the block's stored centering.
pub fn evaluate_smooth(block: &DesignBlock, beta_j: &[f64], x_grid: &[f64]) -> Result<Vec<f64>> {
    if beta_j.len() != block.ncols() {
        return Err(Error::DimensionMismatch {
            expected: block.ncols(),
            found: beta_j.len(),
        });
    }
    Ok(x_grid
        .iter()
        .map(|&x| block.row(x).iter().zip(beta_j).map(|(b, c)| b * c).sum())
        .collect())
}

/// Full additive design: centered blocks followed by one intercept column.
#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveDesign {
    pub blocks: Vec<DesignBlock>,
    pub lambdas: Vec<f64>,
    /// n × p design matrix, p = Σ K_j + 1.
    pub matrix: DMatrix<f64>,
    /// Messages about collapsed knots and similar recoverable conditions.
    pub warnings: Vec<String>,
}

impl AdditiveDesign {
    /// Builds the design from an n × d covariate matrix.
    pub fn build(x: &DMatrix<f64>, specs: &[BasisSpec], lambdas: &[f64]) -> Result<Self> {
        let n = x.nrows();
        if n < 2 {
            return Err(Error::Parameter("at least 2 observations are required".into()));
        }
        if specs.len() != x.ncols() {
            return Err(Error::DimensionMismatch {
                expected: x.ncols(),
                found: specs.len(),
            });
        }
        let blocks = specs
            .iter()
            .enumerate()
            .map(|(j, spec)| {
                let col: Vec<f64> = x.column(j).iter().copied().collect();
                DesignBlock::build(j, &col, spec.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_blocks(blocks, lambdas, Vec::new())
    }

    /// Builds with quantile knots placed per covariate.
    pub fn build_with_quantile_knots(x: &DMatrix<f64>, degree: usize, num_knots: usize, lambdas: &[f64]) -> Result<Self> {
        let mut specs = Vec::with_capacity(x.ncols());
        let mut warnings = Vec::new();
        for j in 0..x.ncols() {
            let col: Vec<f64> = x.column(j).iter().copied().collect();
            let (spec, placement) = BasisSpec::from_quantiles(&col, degree, num_knots)?;
            if placement.collapsed > 0 {
                warnings.push(format!(
                    "covariate {j}: {} duplicate knot(s) collapsed, {} remain",
                    placement.collapsed,
                    placement.knots.len()
                ));
            }
            specs.push(spec);
        }
        let mut design = Self::build(x, &specs, lambdas)?;
        design.warnings = warnings;
        Ok(design)
    }

    pub fn from_blocks(blocks: Vec<DesignBlock>, lambdas: &[f64], warnings: Vec<String>) -> Result<Self> {
        check_lambdas(lambdas, blocks.len())?;
        let n = blocks.first().map_or(0, |b| b.matrix.nrows());
        if blocks.iter().any(|b| b.matrix.nrows() != n) {
            return Err(Error::Parameter("blocks have different row counts".into()));
        }
        let p: usize = blocks.iter().map(DesignBlock::ncols).sum::<usize>() + 1;
        let mut matrix = DMatrix::zeros(n, p);
        let mut offset = 0;
        for block in &blocks {
            matrix.view_mut((0, offset), (n, block.ncols())).copy_from(&block.matrix);
            offset += block.ncols();
        }
        matrix.column_mut(p - 1).fill(1.0);
        Ok(Self {
            blocks,
            lambdas: lambdas.to_vec(),
            matrix,
            warnings,
        })
    }

    /// Intercept-only design on `n` observations.
    pub fn intercept_only(n: usize) -> Self {
        Self {
            blocks: Vec::new(),
            lambdas: Vec::new(),
            matrix: DMatrix::from_element(n, 1, 1.0),
            warnings: Vec::new(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn num_smooths(&self) -> usize {
        self.blocks.len()
    }

    pub fn intercept_index(&self) -> usize {
        self.ncols() - 1
    }

    /// Column range of smooth `j` in the full coefficient vector.
    pub fn block_range(&self, j: usize) -> Range<usize> {
        let start: usize = self.blocks[..j].iter().map(DesignBlock::ncols).sum();
        start..start + self.blocks[j].ncols()
    }

    /// P = diag(λ₁D, …, λ_dD, 0) for the stored smoothing parameters.
    pub fn penalty(&self) -> DMatrix<f64> {
        self.penalty_for(&self.lambdas)
            .expect("stored smoothing parameters were validated at construction")
    }

    /// Penalty for arbitrary smoothing parameters.
    pub fn penalty_for(&self, lambdas: &[f64]) -> Result<DMatrix<f64>> {
        check_lambdas(lambdas, self.blocks.len())?;
        let p = self.ncols();
        let mut pen = DMatrix::zeros(p, p);
        for (j, block) in self.blocks.iter().enumerate() {
            let r = self.block_range(j);
            let scaled = &block.penalty * lambdas[j];
            pen.view_mut((r.start, r.start), (r.len(), r.len())).copy_from(&scaled);
        }
        Ok(pen)
    }

    pub fn with_lambdas(&self, lambdas: &[f64]) -> Result<Self> {
        check_lambdas(lambdas, self.blocks.len())?;
        let mut out = self.clone();
        out.lambdas = lambdas.to_vec();
        Ok(out)
    }

    /// Full centered basis row (with intercept) at a new covariate vector.
    pub fn row(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.blocks.len() {
            return Err(Error::DimensionMismatch {
                expected: self.blocks.len(),
                found: x.len(),
            });
        }
        let mut row = DVector::zeros(self.ncols());
        for (j, block) in self.blocks.iter().enumerate() {
            let r = self.block_range(j);
            for (c, v) in block.row(x[j]).into_iter().enumerate() {
                row[r.start + c] = v;
            }
        }
        row[self.ncols() - 1] = 1.0;
        Ok(row)
    }

    /// Rebuilds the design matrix for new covariates using stored knots and centering.
    pub fn rebuild_for(&self, x: &DMatrix<f64>) -> Result<Self> {
        if x.ncols() != self.blocks.len() {
            return Err(Error::DimensionMismatch {
                expected: self.blocks.len(),
                found: x.ncols(),
            });
        }
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let col: Vec<f64> = x.column(b.covariate_index).iter().copied().collect();
                DesignBlock::with_centering(b.covariate_index, &col, b.spec.clone(), b.column_means.clone(), b.range)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_blocks(blocks, &self.lambdas, self.warnings.clone())
    }
}

fn check_lambdas(lambdas: &[f64], d: usize) -> Result<()> {
    if lambdas.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: lambdas.len(),
        });
    }
    if let Some(l) = lambdas.iter().find(|l| !(**l >= 0.0) || !l.is_finite()) {
        return Err(Error::Parameter(format!("smoothing parameter must be finite and >= 0, got {l}")));
    }
    Ok(())
}
