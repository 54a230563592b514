//! Deterministic functional model: linear trend, seasonal harmonics and
//! Heaviside offsets, fitted by generalized least squares.
//!
//! Design columns are `[t, 1, cos(d_1 t), sin(d_1 t), ..., H(t - T_1), ...]`
//! with `t` in years from the window's first epoch for the trend and
//! `d_j = 2 pi j / 365.25` per day for the harmonics.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::noise::DAYS_PER_YEAR;
use crate::series::{OffsetCatalog, TimeSeries};
use crate::whiten::{dot, Whitener};

pub const MAX_HARMONICS: usize = 7;
pub const DEFAULT_HARMONICS: usize = 2;

/// `theta_1`: rate (mm/yr), intercept (mm), harmonic (cos, sin) amplitude
/// pairs (mm) and offset magnitudes (mm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalParams {
    pub rate: f64,
    pub intercept: f64,
    pub harmonics: Vec<(f64, f64)>,
    pub offsets: Vec<f64>,
}

impl FunctionalParams {
    /// Flat parameter vector in design-column order.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.rate, self.intercept];
        for &(c, e) in &self.harmonics {
            v.push(c);
            v.push(e);
        }
        v.extend_from_slice(&self.offsets);
        v
    }

    pub fn from_vec(v: &[f64], n_harmonics: usize) -> Self {
        let harmonics = (0..n_harmonics).map(|j| (v[2 + 2 * j], v[3 + 2 * j])).collect();
        Self {
            rate: v[0],
            intercept: v[1],
            harmonics,
            offsets: v[2 + 2 * n_harmonics..].to_vec(),
        }
    }

    /// Model values at `epochs` (days) with time origin `origin` and
    /// offset epochs matching `self.offsets`.
    pub fn evaluate(&self, epochs: &[f64], origin: f64, offset_epochs: &[f64]) -> Vec<f64> {
        epochs
            .iter()
            .map(|&t| {
                let days = t - origin;
                let mut v = self.rate * days / DAYS_PER_YEAR + self.intercept;
                for (j, &(c, e)) in self.harmonics.iter().enumerate() {
                    let w = harmonic_frequency(j + 1) * days;
                    v += c * w.cos() + e * w.sin();
                }
                for (&g, &tk) in self.offsets.iter().zip(offset_epochs) {
                    if t >= tk {
                        v += g;
                    }
                }
                v
            })
            .collect()
    }
}

/// Angular frequency (rad/day) of harmonic `j` of the annual signal.
pub fn harmonic_frequency(j: usize) -> f64 {
    2.0 * PI * j as f64 / DAYS_PER_YEAR
}

/// Column-major design matrix with column names.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub columns: Vec<Vec<f64>>,
    pub names: Vec<String>,
    pub n_harmonics: usize,
}

impl Design {
    pub fn nrows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn ncols(&self) -> usize {
        self.columns.len()
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.nrows(), self.ncols(), |i, j| self.columns[j][i])
    }
}

/// Builds the `L x (2 + 2N + ng)` design on `epochs`, time origin at the
/// first epoch.
pub fn build_design(epochs: &[f64], n_harmonics: usize, offsets: &OffsetCatalog) -> Result<Design> {
    if !(1..=MAX_HARMONICS).contains(&n_harmonics) {
        return Err(Error::Domain(format!("harmonic count {n_harmonics} outside [1, {MAX_HARMONICS}]")));
    }
    if epochs.len() < 2 {
        return Err(Error::Validation("design needs at least 2 epochs".into()));
    }
    let origin = epochs[0];
    let (start, end) = (epochs[0], epochs[epochs.len() - 1]);
    for &tk in offsets.epochs() {
        if tk < start || tk > end {
            return Err(Error::OffsetOutOfSpan { epoch: tk, start, end });
        }
    }
    let mut columns = Vec::new();
    let mut names = Vec::new();
    columns.push(epochs.iter().map(|t| (t - origin) / DAYS_PER_YEAR).collect());
    names.push("rate".to_string());
    columns.push(vec![1.0; epochs.len()]);
    names.push("intercept".to_string());
    for j in 1..=n_harmonics {
        let w = harmonic_frequency(j);
        columns.push(epochs.iter().map(|t| (w * (t - origin)).cos()).collect());
        names.push(format!("cos{j}"));
        columns.push(epochs.iter().map(|t| (w * (t - origin)).sin()).collect());
        names.push(format!("sin{j}"));
    }
    for (k, &tk) in offsets.epochs().iter().enumerate() {
        columns.push(epochs.iter().map(|&t| if t >= tk { 1.0 } else { 0.0 }).collect());
        names.push(format!("offset{}", k + 1));
    }
    Ok(Design { columns, names, n_harmonics })
}

/// Generalized least-squares solution in whitened space.
#[derive(Debug, Clone)]
pub struct GlsSolution {
    pub theta: Vec<f64>,
    /// `(X^T C^-1 X)^-1`.
    pub covariance: DMatrix<f64>,
    /// `r^T C^-1 r` at the optimum.
    pub weighted_rss: f64,
    pub log_det: f64,
    pub n_obs: usize,
}

/// Relative column norm below which a whitened design column counts as
/// collinear with its predecessors.
const RANK_TOL: f64 = 1e-10;

/// Minimizes `(y - X theta)^T C^-1 (y - X theta)`.
pub fn gls_solve(y: &[f64], design: &Design, cov: &dyn Whitener) -> Result<GlsSolution> {
    let mut inputs: Vec<&[f64]> = Vec::with_capacity(design.ncols() + 1);
    inputs.push(y);
    inputs.extend(design.columns.iter().map(Vec::as_slice));
    let w = cov.whiten(&inputs)?;
    let mut vs = w.vectors;
    let mut yw = vs.remove(0);
    let p = vs.len();
    // modified Gram-Schmidt on the whitened design: X~ = Q R
    let mut r = DMatrix::<f64>::zeros(p, p);
    let mut collinear = Vec::new();
    for j in 0..p {
        let orig = dot(&vs[j], &vs[j]).sqrt();
        let (done, rest) = vs.split_at_mut(j);
        let v = &mut rest[0];
        for (i, q) in done.iter().enumerate() {
            let c = dot(q, v);
            r[(i, j)] = c;
            crate::whiten::axpy(-c, q, v);
        }
        let nrm = dot(v, v).sqrt();
        if !(nrm > RANK_TOL * orig.max(f64::MIN_POSITIVE)) || orig == 0.0 {
            collinear.push(design.names[j].clone());
            continue;
        }
        r[(j, j)] = nrm;
        for x in v.iter_mut() {
            *x /= nrm;
        }
    }
    if !collinear.is_empty() {
        return Err(Error::RankDeficient(collinear));
    }
    let mut qty = vec![0.0; p];
    for (j, q) in vs.iter().enumerate() {
        qty[j] = dot(q, &yw);
        crate::whiten::axpy(-qty[j], q, &mut yw);
    }
    let weighted_rss = dot(&yw, &yw);
    // back substitution R theta = Q^T y
    let mut theta = vec![0.0; p];
    for i in (0..p).rev() {
        let mut acc = qty[i];
        for k in i + 1..p {
            acc -= r[(i, k)] * theta[k];
        }
        theta[i] = acc / r[(i, i)];
    }
    let rinv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| Error::RankDeficient(design.names.clone()))?;
    let covariance = &rinv * rinv.transpose();
    Ok(GlsSolution { theta, covariance, weighted_rss, log_det: w.log_det, n_obs: w.n_obs })
}

/// Fitted functional model with residual series.
#[derive(Debug, Clone)]
pub struct GlsFit {
    pub params: FunctionalParams,
    pub residuals: TimeSeries,
    pub covariance: DMatrix<f64>,
    pub names: Vec<String>,
    pub weighted_rss: f64,
}

/// GLS fit of the functional model on `ts` under covariance `cov`.
pub fn gls_fit(
    ts: &TimeSeries,
    n_harmonics: usize,
    offsets: &OffsetCatalog,
    cov: &dyn Whitener,
) -> Result<GlsFit> {
    let design = build_design(ts.epochs(), n_harmonics, offsets)?;
    let sol = gls_solve(ts.values(), &design, cov)?;
    let residuals = residuals_of(ts, &design, &sol.theta)?;
    Ok(GlsFit {
        params: FunctionalParams::from_vec(&sol.theta, n_harmonics),
        residuals,
        covariance: sol.covariance,
        names: design.names,
        weighted_rss: sol.weighted_rss,
    })
}

pub(crate) fn residuals_of(ts: &TimeSeries, design: &Design, theta: &[f64]) -> Result<TimeSeries> {
    let mut r = ts.values().to_vec();
    for (col, &th) in design.columns.iter().zip(theta) {
        crate::whiten::axpy(-th, col, &mut r);
    }
    ts.with_values(r)
}
