//! Whitening transforms for noise covariances.
//!
//! A whitener maps vectors `v` on the observed epochs to `w(v)` such that
//! `w(a) . w(b) = a^T C^-1 b`, and reports `ln det C`.
//!
//! The power-law covariance `C = q_w I + q_c U U^T` (with `U` the lower
//! triangular Toeplitz filter matrix) satisfies
//! `C - Z C Z^T = q_w e_0 e_0^T + q_c h h^T` for the down-shift `Z`, so its
//! Cholesky factor follows from the generalized Schur algorithm on a
//! two-column generator in O(N^2) time and O(N) memory. Gaps are handled
//! exactly on the full grid: with `P = C^-1` and missing set `M`,
//! `C_OO^-1 = P_OO - P_OM P_MM^-1 P_MO` and `det C_OO = det C det P_MM`,
//! which amounts to whitening the unit vectors of the missing epochs and
//! projecting them out.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::noise::{coloured_step_scale, pl_filter};
use crate::series::TimeSeries;

/// Whitened vectors plus the log-determinant of the covariance.
#[derive(Debug, Clone)]
pub struct Whitened {
    pub vectors: Vec<Vec<f64>>,
    pub log_det: f64,
    /// Number of observations (dimension of the observed space).
    pub n_obs: usize,
}

impl Whitened {
    pub fn dot(&self, a: usize, b: usize) -> f64 {
        dot(&self.vectors[a], &self.vectors[b])
    }
}

pub trait Whitener {
    /// Number of observed epochs the covariance acts on.
    fn n_obs(&self) -> usize;

    fn whiten(&self, vectors: &[&[f64]]) -> Result<Whitened>;
}

/// `sigma^2 I`.
#[derive(Debug, Clone, Copy)]
pub struct ScaledIdentity {
    pub n: usize,
    pub variance: f64,
}

impl Whitener for ScaledIdentity {
    fn n_obs(&self) -> usize {
        self.n
    }

    fn whiten(&self, vectors: &[&[f64]]) -> Result<Whitened> {
        if !(self.variance > 0.0 && self.variance.is_finite()) {
            return Err(Error::NotPositiveDefinite(format!("variance {}", self.variance)));
        }
        check_lengths(vectors, self.n)?;
        let s = self.variance.sqrt().recip();
        Ok(Whitened {
            vectors: vectors.iter().map(|v| v.iter().map(|x| x * s).collect()).collect(),
            log_det: self.n as f64 * self.variance.ln(),
            n_obs: self.n,
        })
    }
}

/// Any explicit symmetric positive definite matrix, factored by dense
/// Cholesky. O(n^3); used as the reference route.
#[derive(Debug, Clone)]
pub struct DenseCovariance {
    factor: DMatrix<f64>,
}

impl DenseCovariance {
    pub fn new(c: DMatrix<f64>) -> Result<Self> {
        if c.nrows() != c.ncols() {
            return Err(Error::Validation("covariance must be square".into()));
        }
        let asym = (&c - c.transpose()).abs().max();
        if asym > 1e-10 * c.abs().max().max(1.0) {
            return Err(Error::Validation(format!("covariance not symmetric (max diff {asym:e})")));
        }
        let chol = nalgebra::Cholesky::new(c)
            .ok_or_else(|| Error::NotPositiveDefinite("dense Cholesky failed".into()))?;
        Ok(Self { factor: chol.l() })
    }
}

impl Whitener for DenseCovariance {
    fn n_obs(&self) -> usize {
        self.factor.nrows()
    }

    fn whiten(&self, vectors: &[&[f64]]) -> Result<Whitened> {
        let n = self.n_obs();
        check_lengths(vectors, n)?;
        let log_det = 2.0 * self.factor.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let out = vectors
            .iter()
            .map(|v| {
                let mut x = v.to_vec();
                // forward substitution L x = v
                for i in 0..n {
                    let mut acc = x[i];
                    for k in 0..i {
                        acc -= self.factor[(i, k)] * x[k];
                    }
                    x[i] = acc / self.factor[(i, i)];
                }
                x
            })
            .collect();
        Ok(Whitened { vectors: out, log_det, n_obs: n })
    }
}

/// `a_wh^2 I + b_cl^2 dt_yr^(beta/2) U U^T` on a uniform grid with gaps.
#[derive(Debug, Clone)]
pub struct PowerLawCovariance {
    white_var: f64,
    coloured_var: f64,
    beta: f64,
    grid_len: usize,
    observed: Vec<usize>,
    missing: Vec<usize>,
}

impl PowerLawCovariance {
    /// Covariance on the observed epochs of `ts`.
    pub fn for_series(ts: &TimeSeries, a_wh: f64, b_cl: f64, beta: f64) -> Result<Self> {
        let observed = ts
            .grid_indices()
            .ok_or_else(|| Error::Validation("epochs do not lie on a uniform grid".into()))?;
        let scale = coloured_step_scale(beta, ts.dt());
        Self::on_grid(ts.grid_len(), observed, a_wh * a_wh, b_cl * b_cl * scale * scale, beta)
    }

    /// Raw constructor: variances are per-step (already time-scaled).
    pub fn on_grid(
        grid_len: usize,
        observed: Vec<usize>,
        white_var: f64,
        coloured_var: f64,
        beta: f64,
    ) -> Result<Self> {
        if observed.is_empty() || observed.iter().any(|&i| i >= grid_len) {
            return Err(Error::Validation("observed indices outside the grid".into()));
        }
        if observed.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Validation("observed indices must increase".into()));
        }
        if !(white_var >= 0.0 && coloured_var >= 0.0) || !(white_var + coloured_var > 0.0) {
            return Err(Error::NotPositiveDefinite(format!(
                "white variance {white_var}, coloured variance {coloured_var}, beta {beta}"
            )));
        }
        let mut missing = Vec::with_capacity(grid_len - observed.len());
        let mut it = observed.iter().peekable();
        for k in 0..grid_len {
            if it.peek() == Some(&&k) {
                it.next();
            } else {
                missing.push(k);
            }
        }
        Ok(Self { white_var, coloured_var, beta, grid_len, observed, missing })
    }

    pub fn missing_count(&self) -> usize {
        self.missing.len()
    }
}

impl Whitener for PowerLawCovariance {
    fn n_obs(&self) -> usize {
        self.observed.len()
    }

    fn whiten(&self, vectors: &[&[f64]]) -> Result<Whitened> {
        let n_obs = self.observed.len();
        check_lengths(vectors, n_obs)?;
        let n = self.grid_len;
        let n_user = vectors.len();
        let mut work: Vec<Vec<f64>> = Vec::with_capacity(n_user + self.missing.len());
        for v in vectors {
            let mut full = vec![0.0; n];
            for (&g, &x) in self.observed.iter().zip(v.iter()) {
                full[g] = x;
            }
            work.push(full);
        }
        for &g in &self.missing {
            let mut e = vec![0.0; n];
            e[g] = 1.0;
            work.push(e);
        }
        let mut log_det = schur_whiten(self.white_var, self.coloured_var, self.beta, n, &mut work)
            .map_err(|_| {
                Error::NotPositiveDefinite(format!(
                    "white variance {}, coloured variance {}, beta {}",
                    self.white_var, self.coloured_var, self.beta
                ))
            })?;
        let mut user: Vec<Vec<f64>> = work.drain(..n_user).collect();
        if !work.is_empty() {
            let r_diag = orthonormalize(&mut work)?;
            log_det += 2.0 * r_diag.iter().map(|r| r.ln()).sum::<f64>();
            for v in &mut user {
                for q in &work {
                    let c = dot(q, v);
                    axpy(-c, q, v);
                }
            }
        }
        Ok(Whitened { vectors: user, log_det, n_obs })
    }
}

const LANES: usize = 8;
const PANEL: usize = 16;

/// Whitens `vectors` (full-grid length `n`) in place with the Cholesky
/// factor of `q_w I + q_c U U^T`, returning `ln det`.
fn schur_whiten(q_w: f64, q_c: f64, beta: f64, n: usize, vectors: &mut [Vec<f64>]) -> Result<f64> {
    // generator column 0 stored shifted: a[k] is row i + k at step i
    let mut a = vec![0.0; n];
    a[0] = q_w.sqrt();
    let mut b = pl_filter(beta, n);
    let sc = q_c.sqrt();
    for x in &mut b {
        *x *= sc;
    }
    // vectors interleaved in groups of LANES so the row update vectorizes
    let mut blocks: Vec<Vec<[f64; LANES]>> = vectors
        .chunks(LANES)
        .map(|group| {
            (0..n)
                .map(|row| {
                    let mut lane = [0.0; LANES];
                    for (j, v) in group.iter().enumerate() {
                        lane[j] = v[row];
                    }
                    lane
                })
                .collect()
        })
        .collect();
    let log_det = schur_dispatch(&mut a, &mut b, &mut blocks)?;
    for (c, chunk) in blocks.iter().enumerate() {
        for (j, v) in vectors.iter_mut().skip(c * LANES).take(LANES).enumerate() {
            for (dst, row) in v.iter_mut().zip(chunk) {
                *dst = row[j];
            }
        }
    }
    Ok(log_det)
}

fn schur_dispatch(a: &mut [f64], b: &mut [f64], blocks: &mut [Vec<[f64; LANES]>]) -> Result<f64> {
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were detected at runtime.
            return unsafe { schur_avx2(a, b, blocks) };
        }
    }
    schur_kernel::<false>(a, b, blocks)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn schur_avx2(a: &mut [f64], b: &mut [f64], blocks: &mut [Vec<[f64; LANES]>]) -> Result<f64> {
    schur_kernel::<true>(a, b, blocks)
}

/// Pivots are processed in panels: the generator rotation runs pivot by
/// pivot (it only touches two columns), while the vectors below a panel
/// receive all of its Cholesky columns in a single rank-`PANEL` sweep.
#[inline(always)]
fn schur_kernel<const FMA: bool>(a: &mut [f64], b: &mut [f64], blocks: &mut [Vec<[f64; LANES]>]) -> Result<f64> {
    #[inline(always)]
    fn fmadd<const FMA: bool>(l: f64, x: f64, acc: f64) -> f64 {
        if FMA {
            l.mul_add(x, acc)
        } else {
            acc + l * x
        }
    }
    let n = a.len();
    let mut log_det = 0.0;
    let mut cols: Vec<Vec<f64>> = (0..PANEL).map(|_| Vec::with_capacity(n)).collect();
    let mut xs: Vec<[[f64; LANES]; PANEL]> = vec![[[0.0; LANES]; PANEL]; blocks.len()];
    let mut live: Vec<bool> = vec![false; blocks.len()];
    let mut i0 = 0;
    while i0 < n {
        let i1 = (i0 + PANEL).min(n);
        live.iter_mut().for_each(|l| *l = false);
        for i in i0..i1 {
            let p = i - i0;
            let len = n - i;
            let (a0, b0) = (a[0], b[i]);
            let r = a0.hypot(b0);
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::NotPositiveDefinite(format!("pivot {r} at row {i}")));
            }
            let (c, s) = (a0 / r, b0 / r);
            a[0] = r;
            b[i] = c * b0 - s * a0;
            log_det += 2.0 * r.ln();
            for (ak, bk) in a[1..len].iter_mut().zip(b[i + 1..].iter_mut()) {
                let (x, y) = (*ak, *bk);
                *ak = c * x + s * y;
                *bk = c * y - s * x;
            }
            // column i of the factor, rows i+1..n
            cols[p].clear();
            cols[p].extend_from_slice(&a[1..len]);
            for (q, chunk) in blocks.iter_mut().enumerate() {
                let x = chunk[i].map(|v| v / r);
                chunk[i] = x;
                xs[q][p] = x;
                if x == [0.0; LANES] {
                    continue;
                }
                live[q] = true;
                for (row, &l) in chunk[i + 1..i1].iter_mut().zip(&cols[p]) {
                    for j in 0..LANES {
                        row[j] = fmadd::<FMA>(-l, x[j], row[j]);
                    }
                }
            }
        }
        let np = i1 - i0;
        let tails: Vec<&[f64]> = (0..np).map(|p| &cols[p][i1 - (i0 + p) - 1..]).collect();
        for (q, chunk) in blocks.iter_mut().enumerate() {
            if !live[q] {
                continue;
            }
            let xq = &xs[q];
            for (t, row) in chunk[i1..].iter_mut().enumerate() {
                let mut acc = [0.0; LANES];
                for p in 0..np {
                    let l = tails[p][t];
                    for j in 0..LANES {
                        acc[j] = fmadd::<FMA>(l, xq[p][j], acc[j]);
                    }
                }
                for j in 0..LANES {
                    row[j] -= acc[j];
                }
            }
        }
        i0 = i1;
    }
    Ok(log_det)
}

/// Modified Gram-Schmidt in place; returns the diagonal of R.
fn orthonormalize(vs: &mut [Vec<f64>]) -> Result<Vec<f64>> {
    let mut diag = Vec::with_capacity(vs.len());
    for j in 0..vs.len() {
        let (done, rest) = vs.split_at_mut(j);
        let v = &mut rest[0];
        for q in done.iter() {
            let c = dot(q, v);
            axpy(-c, q, v);
        }
        let nrm = dot(v, v).sqrt();
        if !(nrm > 0.0) {
            return Err(Error::NotPositiveDefinite("singular gap projection".into()));
        }
        for x in v.iter_mut() {
            *x /= nrm;
        }
        diag.push(nrm);
    }
    Ok(diag)
}

fn check_lengths(vectors: &[&[f64]], n: usize) -> Result<()> {
    if let Some(v) = vectors.iter().find(|v| v.len() != n) {
        return Err(Error::Validation(format!("vector of length {} for {} observations", v.len(), n)));
    }
    Ok(())
}

/// Dot product with independent accumulators so it vectorizes.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s: f64 = acc.iter().sum();
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_agree() {
        let n = 300;
        let setup = || {
            let mut a = vec![0.0; n];
            a[0] = 0.7f64.sqrt();
            let mut b = pl_filter(1.3, n);
            for x in &mut b {
                *x *= 0.4;
            }
            let blocks: Vec<Vec<[f64; LANES]>> = (0..2)
                .map(|c| (0..n).map(|r| std::array::from_fn(|j| ((r * 3 + j + c) % 11) as f64 - 5.0)).collect())
                .collect();
            (a, b, blocks)
        };
        let (mut a1, mut b1, mut k1) = setup();
        let (mut a2, mut b2, mut k2) = setup();
        let d1 = schur_dispatch(&mut a1, &mut b1, &mut k1).unwrap();
        let d2 = schur_kernel::<false>(&mut a2, &mut b2, &mut k2).unwrap();
        assert!((d1 - d2).abs() < 1e-10);
        for (x, y) in k1.iter().flatten().zip(k2.iter().flatten()) {
            for j in 0..LANES {
                assert!((x[j] - y[j]).abs() < 1e-9 * (1.0 + y[j].abs()));
            }
        }
    }
    use crate::noise::pl_covariance;

    fn series_with_gaps(n: usize, gaps: &[usize]) -> TimeSeries {
        let epochs: Vec<f64> = (0..n).filter(|i| !gaps.contains(i)).map(|i| i as f64).collect();
        let vals = epochs.iter().map(|t| (t * 0.37).sin()).collect();
        TimeSeries::new(epochs, vals).unwrap()
    }

    fn compare(ts: &TimeSeries, a: f64, b: f64, beta: f64) {
        let dense = DenseCovariance::new(pl_covariance(beta, a, b, ts).unwrap()).unwrap();
        let fast = PowerLawCovariance::for_series(ts, a, b, beta).unwrap();
        let y = ts.values().to_vec();
        let t: Vec<f64> = ts.epochs().to_vec();
        let wd = dense.whiten(&[&y, &t]).unwrap();
        let wf = fast.whiten(&[&y, &t]).unwrap();
        let tol = |x: f64| 1e-9 * x.abs().max(1.0);
        assert!((wd.log_det - wf.log_det).abs() < tol(wd.log_det), "{} {}", wd.log_det, wf.log_det);
        for (i, j) in [(0, 0), (0, 1), (1, 1)] {
            let (d, f) = (wd.dot(i, j), wf.dot(i, j));
            assert!((d - f).abs() < tol(d), "({i},{j}) {d} vs {f}");
        }
    }

    #[test]
    fn structured_matches_dense_gap_free() {
        let ts = series_with_gaps(120, &[]);
        compare(&ts, 1.6, 2.0, 1.1);
        compare(&ts, 0.0, 1.0, 1.5);
        compare(&ts, 1.0, 0.0, 0.7);
        compare(&ts, 0.3, 5.0, 2.0);
    }

    #[test]
    fn structured_matches_dense_with_gaps() {
        let ts = series_with_gaps(150, &[3, 4, 5, 40, 99, 148]);
        compare(&ts, 1.6, 2.0, 1.1);
        compare(&ts, 0.5, 3.0, 1.9);
    }

    #[test]
    fn zero_covariance_is_not_pd() {
        let ts = series_with_gaps(10, &[]);
        let c = PowerLawCovariance::for_series(&ts, 0.0, 0.0, 1.0);
        assert!(matches!(c, Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..37).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..37).map(|i| 1.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-9);
    }
}
