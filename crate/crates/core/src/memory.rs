//! ARMA(p,q) and FARIMA(p,d,q) Gaussian maximum likelihood with BIC lag
//! selection.
//!
//! Sign conventions: `φ(B) = 1 − Σ φ_j B^j`, `ψ(B) = 1 + Σ ψ_j B^j`. Both are
//! parameterized through partial autocorrelations so every evaluated model
//! is stationary and invertible.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use rustfft::num_complex::Complex;
use statrs::function::gamma::ln_gamma;

use crate::noise::causal_convolve;
use crate::optim::{nelder_mead, NmOptions};
use crate::stats;
use crate::{Error, Result};

/// Largest AR or MA order searched by [`select_bic`].
pub const MAX_LAG_ORDER: usize = 5;

/// Bound on the magnitude of each partial autocorrelation.
pub const PACF_MAX: f64 = 0.9995;

/// Quadrature tolerance for [`arfima_autocov`], relative to `γ(0)`.
pub const QUAD_TOL: f64 = 1e-10;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const ACVF_TAIL: f64 = 1e-13;
const MAX_ACVF_SPAN: usize = 400_000;
const MAX_QUAD_INTERVALS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MemoryModel {
    #[serde(rename = "ARMA")]
    Arma,
    #[serde(rename = "FARIMA")]
    Farima,
}

impl std::fmt::Display for MemoryModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MemoryModel::Arma => "ARMA",
            MemoryModel::Farima => "FARIMA",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmaFit {
    pub p: usize,
    pub q: usize,
    /// Fractional parameter of the fitted (possibly differenced) series.
    pub d: f64,
    /// Integer differences applied before fitting.
    pub differences: usize,
    pub ar: Vec<f64>,
    pub ma: Vec<f64>,
    pub sigma2: f64,
    pub log_likelihood: f64,
    pub bic: f64,
    /// Standard deviation of the one-step prediction errors (input units).
    pub fit_error: f64,
    pub n_obs: usize,
    pub converged: bool,
}

impl ArmaFit {
    /// Free parameters counted by BIC: coefficients, innovation variance, and
    /// `d` for the fractional branch.
    pub fn n_params(&self, branch: MemoryModel) -> usize {
        self.p + self.q + 1 + usize::from(branch == MemoryModel::Farima)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicSelection {
    pub arma: ArmaFit,
    pub farima: ArmaFit,
    pub winner: MemoryModel,
}

/// Maps partial autocorrelations to the coefficients `a` of a stable
/// polynomial `1 − Σ a_j z^j`.
pub fn pacf_to_coeffs(r: &[f64]) -> Vec<f64> {
    let mut a: Vec<f64> = Vec::with_capacity(r.len());
    for (k, &rk) in r.iter().enumerate() {
        let prev = a.clone();
        for j in 0..k {
            a[j] = prev[j] - rk * prev[k - 1 - j];
        }
        a.push(rk);
    }
    a
}

fn bounded_pacf(u: &[f64]) -> Vec<f64> {
    u.iter().map(|&v| PACF_MAX * v.tanh()).collect()
}

/// AR and MA coefficients from unconstrained parameters `[u_ar.., u_ma..]`.
fn coeffs_from_params(u: &[f64], p: usize) -> (Vec<f64>, Vec<f64>) {
    let ar = pacf_to_coeffs(&bounded_pacf(&u[..p]));
    let ma = pacf_to_coeffs(&bounded_pacf(&u[p..])).into_iter().map(|a| -a).collect();
    (ar, ma)
}

/// Moduli of the roots of `1 + Σ c_j z^j`.
pub fn root_moduli(c: &[f64]) -> Vec<f64> {
    let mut deg = c.len();
    while deg > 0 && c[deg - 1] == 0.0 {
        deg -= 1;
    }
    if deg == 0 {
        return Vec::new();
    }
    // companion of the monic polynomial z^deg + (c_{deg-1}/c_deg) z^{deg-1} + ... + 1/c_deg
    let lead = c[deg - 1];
    let mut m = DMatrix::<f64>::zeros(deg, deg);
    for j in 0..deg {
        let coef = if j + 1 < deg { c[deg - 2 - j] } else { 1.0 };
        m[(0, j)] = -coef / lead;
    }
    for i in 1..deg {
        m[(i, i - 1)] = 1.0;
    }
    m.complex_eigenvalues().iter().map(|z| z.norm()).collect()
}

/// Autocovariances `γ(0..=maxlag)` of ARMA(p,q) with unit innovation
/// variance.
pub fn arma_acvf(ar: &[f64], ma: &[f64], maxlag: usize) -> Result<Vec<f64>> {
    let p = ar.len();
    let q = ma.len();
    let theta = |j: usize| if j == 0 { 1.0 } else if j <= q { ma[j - 1] } else { 0.0 };
    let mut psi = vec![0.0; q + 1];
    for j in 0..=q {
        let mut s = theta(j);
        for i in 1..=j.min(p) {
            s += ar[i - 1] * psi[j - i];
        }
        psi[j] = s;
    }
    let rhs = |k: usize| (k..=q).map(|j| theta(j) * psi[j - k]).sum::<f64>();

    let mut a = DMatrix::<f64>::zeros(p + 1, p + 1);
    let mut b = DVector::<f64>::zeros(p + 1);
    for k in 0..=p {
        a[(k, k)] += 1.0;
        for i in 1..=p {
            a[(k, k.abs_diff(i))] -= ar[i - 1];
        }
        b[k] = rhs(k);
    }
    let head = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Domain("AR polynomial has a unit root".into()))?;
    let mut g = vec![0.0; maxlag + 1];
    for k in 0..=maxlag {
        g[k] = if k <= p {
            head[k]
        } else {
            let mut s = rhs(k);
            for i in 1..=p {
                s += ar[i - 1] * g[k - i];
            }
            s
        };
    }
    Ok(g)
}

/// Autocovariances of fractionally integrated white noise, unit variance.
pub fn fractional_acvf(d: f64, maxlag: usize) -> Vec<f64> {
    let mut g = vec![0.0; maxlag + 1];
    g[0] = (ln_gamma(1.0 - 2.0 * d) - 2.0 * ln_gamma(1.0 - d)).exp();
    for k in 1..=maxlag {
        let kf = k as f64;
        g[k] = g[k - 1] * (kf - 1.0 + d) / (kf - d);
    }
    g
}

fn check_fractional(d: f64) -> Result<()> {
    if !(d.is_finite() && d.abs() < 0.5) {
        return Err(Error::Domain(format!("fractional parameter d = {d} must satisfy |d| < 0.5")));
    }
    Ok(())
}

fn check_polynomials(ar: &[f64], ma: &[f64]) -> Result<()> {
    let neg_ar: Vec<f64> = ar.iter().map(|a| -a).collect();
    if root_moduli(&neg_ar).iter().any(|&m| m <= 1.0) {
        return Err(Error::Domain("AR polynomial is not stationary".into()));
    }
    if root_moduli(ma).iter().any(|&m| m <= 1.0) {
        return Err(Error::Domain("MA polynomial is not invertible".into()));
    }
    Ok(())
}

/// ARFIMA autocovariances by convolving the fractional-noise sequence with
/// the ARMA autocovariances. Accepts `d ∈ [−0.5, 0.5)`.
fn arfima_acvf_fast(ar: &[f64], ma: &[f64], d: f64, maxlag: usize) -> Result<Vec<f64>> {
    if d == 0.0 {
        return arma_acvf(ar, ma, maxlag);
    }
    let span = if ar.is_empty() {
        ma.len()
    } else {
        let mut len = 256.max(4 * (ar.len() + ma.len()));
        loop {
            let c = arma_acvf(ar, ma, len)?;
            let tail = c[len - ar.len()..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if tail < ACVF_TAIL * c[0] {
                break (0..=len).rev().find(|&j| c[j].abs() >= ACVF_TAIL * c[0]).unwrap_or(0);
            }
            if len >= MAX_ACVF_SPAN {
                break len;
            }
            len = (len * 4).min(MAX_ACVF_SPAN);
        }
    };
    let c = arma_acvf(ar, ma, span)?;
    let fd = fractional_acvf(d, maxlag + span);
    let kernel: Vec<f64> = (0..=2 * span).map(|i| c[i.abs_diff(span)]).collect();
    let x: Vec<f64> = (0..maxlag + 1 + 2 * span).map(|m| fd[m.abs_diff(span)]).collect();
    let y = causal_convolve(&kernel, &x);
    Ok(y[2 * span..2 * span + maxlag + 1].to_vec())
}

/// Autocovariances `γ(0..=maxlag)` of ARFIMA(p,d,q) by adaptive
/// Gauss-Kronrod integration of the spectral density over `[0, π]`.
///
/// The density is `ω^{−2d}·h(ω)` with `h` smooth and even; the `h(0)` part
/// is integrated in closed form and only the bounded remainder is handed to
/// the quadrature.
pub fn arfima_autocov(ar: &[f64], ma: &[f64], d: f64, sigma2: f64, maxlag: usize) -> Result<Vec<f64>> {
    autocov_quadrature(ar, ma, d, sigma2, maxlag, MAX_QUAD_INTERVALS)
}

fn autocov_quadrature(
    ar: &[f64],
    ma: &[f64],
    d: f64,
    sigma2: f64,
    maxlag: usize,
    max_intervals: usize,
) -> Result<Vec<f64>> {
    use std::f64::consts::PI;
    check_fractional(d)?;
    check_polynomials(ar, ma)?;
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::Domain(format!("innovation variance {sigma2} must be positive")));
    }
    let gain = |w: f64| -> f64 {
        let z = Complex::from_polar(1.0, w);
        let mut num = Complex::new(1.0, 0.0);
        let mut zp = Complex::new(1.0, 0.0);
        for &c in ma {
            zp *= z;
            num += zp * c;
        }
        let mut den = Complex::new(1.0, 0.0);
        zp = Complex::new(1.0, 0.0);
        for &c in ar {
            zp *= z;
            den -= zp * c;
        }
        num.norm_sqr() / den.norm_sqr()
    };
    let h0 = gain(0.0);
    let integrand = |w: f64, out: &mut [f64]| {
        let ratio = if w > 1e-8 { 2.0 * (w / 2.0).sin() / w } else { 1.0 - w * w / 24.0 };
        let h = gain(w) * ratio.powf(-2.0 * d);
        let wp = w.powf(-2.0 * d);
        let c1 = w.cos();
        let (mut prev, mut cur) = (c1, 1.0);
        for o in out.iter_mut() {
            *o = wp * (h * cur - h0);
            let next = 2.0 * c1 * cur - prev;
            prev = cur;
            cur = next;
        }
    };
    let nl = maxlag + 1;
    let closed = h0 * PI.powf(1.0 - 2.0 * d) / (1.0 - 2.0 * d);
    let whole = gk15(&integrand, 0.0, PI, nl);
    let tol = QUAD_TOL * closed.abs().max(whole.0[0].abs()).max(f64::MIN_POSITIVE);

    let mut rest = vec![0.0; nl];
    let mut stack = vec![(0.0, PI, whole)];
    let mut intervals = 0usize;
    while let Some((a, b, (est, err))) = stack.pop() {
        intervals += 1;
        if intervals > max_intervals {
            return Err(Error::Quadrature(format!(
                "spectral integral for d = {d} needs more than {max_intervals} subintervals"
            )));
        }
        let width = b - a;
        // near the origin the subtraction h - h(0) loses the error estimate
        // in rounding noise of order eps * ω^{-2d} * h(0)
        let noise = 100.0 * f64::EPSILON * width * h0 * (0.5 * (a + b)).powf(-2.0 * d);
        if err <= (tol * width / PI).max(noise) {
            for (t, e) in rest.iter_mut().zip(&est) {
                *t += e;
            }
            continue;
        }
        if width < 1e-14 {
            return Err(Error::Quadrature(format!("interval collapsed near omega = {a} for d = {d}")));
        }
        let mid = 0.5 * (a + b);
        stack.push((a, mid, gk15(&integrand, a, mid, nl)));
        stack.push((mid, b, gk15(&integrand, mid, b, nl)));
    }
    let scale = sigma2 / PI;
    let g: Vec<f64> = rest.iter().map(|r| scale * (closed + r)).collect();
    if !(g[0] > 0.0 && g.iter().all(|v| v.is_finite())) {
        return Err(Error::Quadrature(format!("non-positive or non-finite variance for d = {d}")));
    }
    Ok(g)
}

const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const GK_WK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728_0,
];
const GK_WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// One 15-point Kronrod estimate of a vector integral, with the max
/// Kronrod-Gauss difference as error.
fn gk15<F: Fn(f64, &mut [f64])>(f: &F, a: f64, b: f64, nl: usize) -> (Vec<f64>, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut k = vec![0.0; nl];
    let mut g = vec![0.0; nl];
    let mut buf = vec![0.0; nl];
    let acc = |x: f64, wk: f64, wg: f64, k: &mut [f64], g: &mut [f64], buf: &mut [f64]| {
        f(x, buf);
        for i in 0..nl {
            k[i] += wk * buf[i];
            g[i] += wg * buf[i];
        }
    };
    for (i, &x) in GK_NODES.iter().enumerate() {
        let wg = if i % 2 == 1 { GK_WG[i / 2] } else { 0.0 };
        if x == 0.0 {
            acc(c, GK_WK[i], GK_WG[3], &mut k, &mut g, &mut buf);
        } else {
            acc(c - h * x, GK_WK[i], wg, &mut k, &mut g, &mut buf);
            acc(c + h * x, GK_WK[i], wg, &mut k, &mut g, &mut buf);
        }
    }
    let mut err = 0.0f64;
    for i in 0..nl {
        k[i] *= h;
        g[i] *= h;
        err = err.max((k[i] - g[i]).abs());
    }
    (k, err)
}

/// One-step prediction errors with their unit-variance prediction variances.
struct Innovations {
    errors: Vec<f64>,
    vars: Vec<f64>,
}

impl Innovations {
    /// Log-likelihood with the innovation variance profiled out, skipping the
    /// first `skip` observations (conditional likelihood).
    fn profile(&self, skip: usize) -> (f64, f64) {
        let n = (self.errors.len() - skip) as f64;
        let mut ss = 0.0;
        let mut ld = 0.0;
        for (e, v) in self.errors[skip..].iter().zip(&self.vars[skip..]) {
            ss += e * e / v;
            ld += v.ln();
        }
        let s2 = ss / n;
        (-0.5 * (n * (LN_2PI + s2.ln() + 1.0) + ld), s2)
    }
}

/// `(Σ w·a, Σ w·b, Σ w·c)` in one pass.
fn dot3(w: &[f64], a: &[f64], b: &[f64], c: &[f64]) -> (f64, f64, f64) {
    const W: usize = 8;
    let n = w.len();
    let (a, b, c) = (&a[..n], &b[..n], &c[..n]);
    let mut sa = [0.0; W];
    let mut sb = [0.0; W];
    let mut sc = [0.0; W];
    let chunks = w.chunks_exact(W).zip(a.chunks_exact(W)).zip(b.chunks_exact(W)).zip(c.chunks_exact(W));
    for (((w8, a8), b8), c8) in chunks {
        for k in 0..W {
            sa[k] += w8[k] * a8[k];
            sb[k] += w8[k] * b8[k];
            sc[k] += w8[k] * c8[k];
        }
    }
    let m = n / W * W;
    let (mut ra, mut rb, mut rc) = (sa.iter().sum::<f64>(), sb.iter().sum::<f64>(), sc.iter().sum::<f64>());
    for i in m..n {
        ra += w[i] * a[i];
        rb += w[i] * b[i];
        rc += w[i] * c[i];
    }
    (ra, rb, rc)
}

/// Exact innovations of a zero-mean series with autocovariances `g`.
fn durbin_levinson(x: &[f64], g: &[f64]) -> Result<Innovations> {
    let n = x.len();
    let xr: Vec<f64> = x.iter().rev().copied().collect();
    let gr: Vec<f64> = g[..n].iter().rev().copied().collect();
    let mut phi = vec![0.0; n];
    let mut rev = vec![0.0; n];
    let mut v = g[0];
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::NotPositiveDefinite(format!("gamma(0) = {v}")));
    }
    let mut errors = Vec::with_capacity(n);
    let mut vars = Vec::with_capacity(n);
    errors.push(x[0]);
    vars.push(v);
    for t in 1..n {
        // one pass over the order t-1 coefficients gives the reflection
        // numerator and both halves of the order-t prediction
        let (sg, sa, sb) = dot3(&phi[..t - 1], &gr[n - t..n - 1], &xr[n - t..n - 1], &x[1..t]);
        let kappa = (g[t] - sg) / v;
        let len = t - 1;
        // rev[n - len..] holds the coefficients in reverse order, so the
        // update pairs aligned slices
        let (head, tail) = (&mut phi[..len], &mut rev[n - len..]);
        for (a, b) in head.iter_mut().zip(tail.iter_mut()) {
            let (pa, pb) = (*a, *b);
            *a = pa - kappa * pb;
            *b = pb - kappa * pa;
        }
        phi[t - 1] = kappa;
        rev[n - t] = kappa;
        v *= 1.0 - kappa * kappa;
        if !(v > 0.0) {
            return Err(Error::NotPositiveDefinite(format!("prediction variance vanished at lag {t}")));
        }
        let pred = sa - kappa * (sb - x[0]);
        errors.push(x[t] - pred);
        vars.push(v);
    }
    Ok(Innovations { errors, vars })
}

/// Exact innovations of a zero-mean ARMA series by the Kalman filter.
fn kalman(x: &[f64], ar: &[f64], ma: &[f64]) -> Result<Innovations> {
    let p = ar.len();
    let r = p.max(ma.len() + 1);
    let t_of = |i: usize| if i < p { ar[i] } else { 0.0 };
    let mut rv = vec![0.0; r];
    rv[0] = 1.0;
    rv[1..=ma.len()].copy_from_slice(ma);

    // stationary state covariance: P = T P T' + R R'
    let rr = r * r;
    let tm = |i: usize, k: usize| -> f64 {
        if k == 0 {
            t_of(i)
        } else if k == i + 1 {
            1.0
        } else {
            0.0
        }
    };
    let mut m = DMatrix::<f64>::identity(rr, rr);
    let mut rhs = DVector::<f64>::zeros(rr);
    for i in 0..r {
        for j in 0..r {
            rhs[i * r + j] = rv[i] * rv[j];
            for k in 0..r {
                let tik = tm(i, k);
                if tik == 0.0 {
                    continue;
                }
                for l in 0..r {
                    m[(i * r + j, k * r + l)] -= tik * tm(j, l);
                }
            }
        }
    }
    let p0 = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::NotPositiveDefinite("singular state covariance equation".into()))?;
    let mut pm: Vec<f64> = p0.iter().copied().collect();
    let mut a = vec![0.0; r];
    let mut tp = vec![0.0; rr];
    let mut next = vec![0.0; rr];
    let mut col = vec![0.0; r];
    let mut steady = false;
    let n = x.len();
    let mut errors = Vec::with_capacity(n);
    let mut vars = Vec::with_capacity(n);
    for &xt in x {
        let f = pm[0];
        if !(f > 0.0 && f.is_finite()) {
            return Err(Error::NotPositiveDefinite(format!("innovation variance {f}")));
        }
        let e = xt - a[0];
        errors.push(e);
        vars.push(f);
        for i in 0..r {
            col[i] = pm[i * r];
            a[i] += col[i] / f * e;
        }
        // state prediction with the companion transition
        let a0 = a[0];
        for i in 0..r {
            a[i] = t_of(i) * a0 + if i + 1 < r { a[i + 1] } else { 0.0 };
        }
        if steady {
            continue;
        }
        for i in 0..r {
            for j in 0..r {
                pm[i * r + j] -= col[i] * col[j] / f;
            }
        }
        for i in 0..r {
            for j in 0..r {
                tp[i * r + j] = t_of(i) * pm[j] + if i + 1 < r { pm[(i + 1) * r + j] } else { 0.0 };
            }
        }
        let mut delta = 0.0f64;
        for i in 0..r {
            for j in 0..r {
                let v = t_of(j) * tp[i * r] + if j + 1 < r { tp[i * r + j + 1] } else { 0.0 } + rv[i] * rv[j];
                next[i * r + j] = v;
            }
        }
        // compare against the covariance before this step's update
        for (k, v) in next.iter().enumerate() {
            let prev = if k == 0 { f } else { pm[k] + col[k / r] * col[k % r] / f };
            delta = delta.max((v - prev).abs());
        }
        std::mem::swap(&mut pm, &mut next);
        if delta < 1e-15 * (1.0 + pm[0]) {
            steady = true;
        }
    }
    Ok(Innovations { errors, vars })
}

/// Which likelihood engine a fit uses.
#[derive(Clone, Copy)]
enum Route {
    /// Kalman filter; ARMA only.
    StateSpace,
    /// Durbin-Levinson on ARFIMA autocovariances with this `d`.
    Fractional(f64),
}

fn innovations(x: &[f64], ar: &[f64], ma: &[f64], route: Route) -> Result<Innovations> {
    match route {
        Route::StateSpace => kalman(x, ar, ma),
        Route::Fractional(d) => {
            let g = arfima_acvf_fast(ar, ma, d, x.len() - 1)?;
            durbin_levinson(x, &g)
        }
    }
}

#[derive(Clone)]
struct Cell {
    fit: ArmaFit,
    u: Vec<f64>,
}

/// Whittle approximation to the ARFIMA likelihood with fixed `d`, used to
/// steer the search before the exact likelihood is scored.
struct Whittle {
    per: Vec<f64>,
    cos: Vec<Vec<f64>>,
    sin: Vec<Vec<f64>>,
    /// `−2d·ln(2 sin(ω/2))` at each Fourier frequency.
    frac: Vec<f64>,
}

impl Whittle {
    fn new(x: &[f64], d: f64) -> Self {
        let n = x.len();
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        rustfft::FftPlanner::<f64>::new().plan_fft_forward(n).process(&mut buf);
        let m = (n - 1) / 2;
        let omega: Vec<f64> = (1..=m).map(|j| 2.0 * std::f64::consts::PI * j as f64 / n as f64).collect();
        let per = buf[1..=m].iter().map(|c| c.norm_sqr() / n as f64).collect();
        let cos = (1..=MAX_LAG_ORDER).map(|k| omega.iter().map(|w| (k as f64 * w).cos()).collect()).collect();
        let sin = (1..=MAX_LAG_ORDER).map(|k| omega.iter().map(|w| (k as f64 * w).sin()).collect()).collect();
        let frac = omega.iter().map(|w| -2.0 * d * (2.0 * (w / 2.0).sin()).ln()).collect();
        Self { per, cos, sin, frac }
    }

    /// Negative Whittle log-likelihood with the innovation variance
    /// profiled out, up to a constant.
    fn objective(&self, ar: &[f64], ma: &[f64]) -> f64 {
        let m = self.per.len();
        let mut sum_ln = 0.0;
        let mut sum_ratio = 0.0;
        for j in 0..m {
            let (mut mr, mut mi) = (1.0, 0.0);
            for (k, c) in ma.iter().enumerate() {
                mr += c * self.cos[k][j];
                mi -= c * self.sin[k][j];
            }
            let (mut ar_r, mut ar_i) = (1.0, 0.0);
            for (k, c) in ar.iter().enumerate() {
                ar_r -= c * self.cos[k][j];
                ar_i += c * self.sin[k][j];
            }
            let lg = (mr * mr + mi * mi).ln() - (ar_r * ar_r + ar_i * ar_i).ln() + self.frac[j];
            sum_ln += lg;
            sum_ratio += self.per[j] * (-lg).exp();
        }
        sum_ln + m as f64 * (sum_ratio / m as f64).ln()
    }
}

/// Scores the model at unconstrained parameters `u` with the exact
/// likelihood.
fn score(x: &[f64], p: usize, q: usize, route: Route, skip: usize, u: Vec<f64>, converged: bool) -> Result<Cell> {
    let (ar, ma) = coeffs_from_params(&u, p);
    let inn = innovations(x, &ar, &ma, route)?;
    let (ll, s2) = inn.profile(skip);
    let errs = &inn.errors[skip..];
    let branch = if matches!(route, Route::Fractional(_)) { MemoryModel::Farima } else { MemoryModel::Arma };
    let n = errs.len();
    let mut fit = ArmaFit {
        p,
        q,
        d: match route {
            Route::Fractional(d) => d,
            Route::StateSpace => 0.0,
        },
        differences: 0,
        ar,
        ma,
        sigma2: s2,
        log_likelihood: ll,
        bic: 0.0,
        fit_error: stats::std_dev(errs),
        n_obs: n,
        converged: converged && ll.is_finite(),
    };
    fit.bic = -2.0 * ll + fit.n_params(branch) as f64 * (n as f64).ln();
    Ok(Cell { fit, u })
}

/// Simplex search on the exact likelihood from `u0`.
fn exact_search(x: &[f64], p: usize, route: Route, skip: usize, u0: &[f64], step: f64) -> (Vec<f64>, bool) {
    let dim = u0.len();
    let objective = |u: &[f64]| -> f64 {
        let (ar, ma) = coeffs_from_params(u, p);
        match innovations(x, &ar, &ma, route) {
            Ok(inn) => -inn.profile(skip).0,
            Err(_) => f64::INFINITY,
        }
    };
    let opts = NmOptions { f_tol: 1e-4, x_tol: 1e-3, max_evals: 100 + 100 * dim };
    let r = nelder_mead(objective, u0, &vec![step; dim], opts);
    (r.x, r.converged)
}

/// Fits one (p,q) cell from the unconstrained start `u0`. With a Whittle
/// surrogate the search runs on it and the exact likelihood only scores the
/// surrogate optimum against the start.
fn fit_cell(x: &[f64], p: usize, q: usize, route: Route, skip: usize, u0: &[f64], whittle: Option<&Whittle>) -> Result<Cell> {
    let dim = p + q;
    if dim == 0 {
        return score(x, p, q, route, skip, Vec::new(), true);
    }
    match whittle {
        None => {
            let (u, conv) = exact_search(x, p, route, skip, u0, 0.3);
            score(x, p, q, route, skip, u, conv)
        }
        Some(w) => {
            let objective = |u: &[f64]| {
                let (ar, ma) = coeffs_from_params(u, p);
                w.objective(&ar, &ma)
            };
            let opts = NmOptions { f_tol: 1e-7, x_tol: 1e-5, max_evals: 400 + 300 * dim };
            let r = nelder_mead(objective, u0, &vec![0.3; dim], opts);
            let found = score(x, p, q, route, skip, r.x, r.converged)?;
            let start = score(x, p, q, route, skip, u0.to_vec(), r.converged)?;
            Ok(if start.fit.log_likelihood > found.fit.log_likelihood { start } else { found })
        }
    }
}

/// Continues an exact-likelihood search from a grid cell's optimum.
fn polish(x: &[f64], cell: Cell, route: Route, skip: usize) -> Result<Cell> {
    let (p, q) = (cell.fit.p, cell.fit.q);
    if p + q == 0 {
        return Ok(cell);
    }
    let (u, conv) = exact_search(x, p, route, skip, &cell.u, 0.1);
    let refined = score(x, p, q, route, skip, u, conv)?;
    Ok(if refined.fit.log_likelihood >= cell.fit.log_likelihood {
        refined
    } else {
        Cell { fit: ArmaFit { converged: conv, ..cell.fit }, u: cell.u }
    })
}

fn centred(x: &[f64]) -> Result<Vec<f64>> {
    if x.len() < 3 * (2 * MAX_LAG_ORDER + 2) {
        return Err(Error::Domain(format!("series of length {} is too short for memory models", x.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("series contains non-finite values".into()));
    }
    let m = stats::mean(x);
    let out: Vec<f64> = x.iter().map(|v| v - m).collect();
    if out.iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate("constant series".into()));
    }
    Ok(out)
}

fn check_orders(p: usize, q: usize) -> Result<()> {
    if p > MAX_LAG_ORDER || q > MAX_LAG_ORDER {
        return Err(Error::Domain(format!("orders ({p},{q}) exceed {MAX_LAG_ORDER}")));
    }
    Ok(())
}

/// Exact profile log-likelihood (innovation variance concentrated out) of
/// the mean-removed `x` under ARFIMA(ar, d, ma), by Durbin-Levinson.
pub fn exact_log_likelihood(x: &[f64], ar: &[f64], ma: &[f64], d: f64) -> Result<f64> {
    check_fractional(d)?;
    check_polynomials(ar, ma)?;
    let x = centred(x)?;
    Ok(innovations(&x, ar, ma, Route::Fractional(d))?.profile(0).0)
}

/// Same quantity as [`exact_log_likelihood`] at `d = 0`, by the Kalman
/// filter.
pub fn state_space_log_likelihood(x: &[f64], ar: &[f64], ma: &[f64]) -> Result<f64> {
    check_polynomials(ar, ma)?;
    let x = centred(x)?;
    Ok(innovations(&x, ar, ma, Route::StateSpace)?.profile(0).0)
}

/// ARMA(p,q) with `d` held fixed at `d_fixed`; `d_fixed = 0` uses the
/// state-space likelihood.
pub fn fit_arma(x: &[f64], p: usize, q: usize, d_fixed: f64) -> Result<ArmaFit> {
    check_orders(p, q)?;
    check_fractional(d_fixed)?;
    let x = centred(x)?;
    let route = if d_fixed == 0.0 { Route::StateSpace } else { Route::Fractional(d_fixed) };
    fit_single(&x, p, q, route)
}

fn fit_single(x: &[f64], p: usize, q: usize, route: Route) -> Result<ArmaFit> {
    let u0 = vec![0.0; p + q];
    match route {
        Route::StateSpace => Ok(fit_cell(x, p, q, route, 0, &u0, None)?.fit),
        Route::Fractional(d) => {
            let w = Whittle::new(x, d);
            let cell = fit_cell(x, p, q, route, 0, &u0, Some(&w))?;
            Ok(polish(x, cell, route, 0)?.fit)
        }
    }
}

/// FARIMA(p,d,q) with `d` held fixed; always uses Durbin-Levinson on the
/// ARFIMA autocovariances, including at `d = 0`.
pub fn fit_farima(x: &[f64], p: usize, q: usize, d: f64) -> Result<ArmaFit> {
    check_orders(p, q)?;
    check_fractional(d)?;
    let x = centred(x)?;
    fit_single(&x, p, q, Route::Fractional(d))
}

/// All cells `(p,q) ∈ [0,max]²`, indexed `[p][q]`. Cells on one
/// anti-diagonal run in parallel, each warm-started from the better of its
/// nested predecessors, so log-likelihood never decreases along either
/// axis.
fn fit_grid(x: &[f64], route: Route, skip: usize, max: usize, whittle: Option<&Whittle>) -> Result<Vec<Vec<Cell>>> {
    let mut grid: Vec<Vec<Option<Cell>>> = vec![vec![None; max + 1]; max + 1];
    for s in 0..=2 * max {
        let cells: Vec<(usize, usize)> =
            (0..=max).filter_map(|p| s.checked_sub(p).filter(|&q| q <= max).map(|q| (p, q))).collect();
        let starts: Vec<Vec<f64>> = cells
            .iter()
            .map(|&(p, q)| {
                let mut best: Option<(f64, Vec<f64>)> = None;
                if p > 0 {
                    let c = grid[p - 1][q].as_ref().expect("predecessor fitted");
                    let mut u = c.u[..p - 1].to_vec();
                    u.push(0.0);
                    u.extend_from_slice(&c.u[p - 1..]);
                    best = Some((c.fit.log_likelihood, u));
                }
                if q > 0 {
                    let c = grid[p][q - 1].as_ref().expect("predecessor fitted");
                    if best.as_ref().map_or(true, |b| c.fit.log_likelihood > b.0) {
                        let mut u = c.u.clone();
                        u.push(0.0);
                        best = Some((c.fit.log_likelihood, u));
                    }
                }
                best.map_or_else(Vec::new, |b| b.1)
            })
            .collect();
        let fitted: Vec<Result<Cell>> = cells
            .par_iter()
            .zip(starts.par_iter())
            .map(|(&(p, q), u0)| fit_cell(x, p, q, route, skip, u0, whittle))
            .collect();
        for (&(p, q), cell) in cells.iter().zip(fitted) {
            grid[p][q] = Some(cell?);
        }
    }
    Ok(grid.into_iter().map(|row| row.into_iter().map(|c| c.expect("all cells fitted")).collect()).collect())
}

fn best_by_bic(grid: Vec<Vec<Cell>>) -> Cell {
    grid.into_iter()
        .flatten()
        .min_by(|a, b| a.fit.bic.total_cmp(&b.fit.bic).then((a.fit.p + a.fit.q).cmp(&(b.fit.p + b.fit.q))))
        .expect("non-empty grid")
}

/// Grid search over `p, q ∈ [0,5]` for ARMA (`d = 0`) and FARIMA
/// (`d = d_candidate`), returning the lowest-BIC model of each branch and
/// the overall winner.
///
/// FARIMA cells are searched on the Whittle likelihood and scored with the
/// exact one; the selected FARIMA model is then refined on the exact
/// likelihood.
///
/// When `d_candidate ≥ 0.5` the FARIMA branch fits the differenced series
/// with `d − 1`; both branches then score the likelihood conditional on the
/// leading observations so their BIC values remain comparable.
pub fn select_bic(x: &[f64], d_candidate: f64) -> Result<BicSelection> {
    if !(d_candidate.is_finite() && d_candidate > -0.5) {
        return Err(Error::Domain(format!("fractional candidate d = {d_candidate} must exceed -0.5")));
    }
    let x = centred(x)?;
    let mut d = d_candidate;
    let mut dx = x.clone();
    let mut differences = 0;
    while d >= 0.5 {
        dx = dx.windows(2).map(|w| w[1] - w[0]).collect();
        d -= 1.0;
        differences += 1;
    }
    let arma = best_by_bic(fit_grid(&x, Route::StateSpace, differences, MAX_LAG_ORDER, None)?).fit;
    let route = Route::Fractional(d);
    let whittle = Whittle::new(&dx, d);
    let best = best_by_bic(fit_grid(&dx, route, 0, MAX_LAG_ORDER, Some(&whittle))?);
    let mut farima = polish(&dx, best, route, 0)?.fit;
    farima.differences = differences;
    let winner = match farima.bic.total_cmp(&arma.bic) {
        std::cmp::Ordering::Less => MemoryModel::Farima,
        std::cmp::Ordering::Greater => MemoryModel::Arma,
        std::cmp::Ordering::Equal => {
            if farima.n_params(MemoryModel::Farima) < arma.n_params(MemoryModel::Arma) {
                MemoryModel::Farima
            } else {
                MemoryModel::Arma
            }
        }
    };
    Ok(BicSelection { arma, farima, winner })
}
