//! Levy alpha-stable distributions: characteristic function, sampling,
//! density by Fourier inversion, maximum-likelihood fitting, and the
//! histogram correlation used to compare residuals with a model density.
//!
//! The characteristic function of the standardized variable `Z` is
//!
//! ```text
//! alpha != 1:  exp(-|u|^alpha [1 - i k tan(pi alpha / 2) sign(u)])
//! alpha == 1:  exp(-|u| [1 + i k (2/pi) sign(u)])
//! ```
//!
//! and `X = a Z + b`. The `alpha == 1` branch has no logarithmic term, so it
//! is a Cauchy variable shifted by `-2k/pi`. Sampler and density both follow
//! this convention.

use std::f64::consts::{FRAC_PI_2, PI};
use std::sync::{Arc, Mutex, OnceLock};

use rand::Rng;
use rand_distr::{Distribution, Exp1, Uniform};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{nelder_mead, sigmoid, NmOptions};
use crate::stats;

/// Smallest exponent for which the inverted density is trusted.
pub const MIN_PDF_ALPHA: f64 = 0.3;
/// Lower bound on alpha used by the ML fit.
pub const FIT_ALPHA_MIN: f64 = 0.5;
/// Minimum sample size for fitting and histogram comparison.
pub const MIN_SAMPLE: usize = 200;

const GRID_LOG2: usize = 15;
const MAX_DX: f64 = 0.05;
const CF_CUTOFF: f64 = 30.0;
const TINY: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StableParams {
    pub alpha: f64,
    /// Skewness, `k` in `[-1, 1]`.
    pub k: f64,
    pub scale: f64,
    pub location: f64,
}

impl StableParams {
    pub fn new(alpha: f64, k: f64, scale: f64, location: f64) -> Result<Self> {
        let p = Self { alpha, k: if alpha == 2.0 { 0.0 } else { k }, scale, location };
        p.validate()?;
        Ok(p)
    }

    pub fn standard(alpha: f64, k: f64) -> Result<Self> {
        Self::new(alpha, k, 1.0, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        check_shape(self.alpha, self.k)?;
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Domain(format!("scale must be positive, got {}", self.scale)));
        }
        if !self.location.is_finite() {
            return Err(Error::Domain("location must be finite".into()));
        }
        Ok(())
    }
}

fn check_shape(alpha: f64, k: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 2.0) {
        return Err(Error::Domain(format!("alpha must lie in (0, 2], got {alpha}")));
    }
    if !(-1.0..=1.0).contains(&k) {
        return Err(Error::Domain(format!("skewness must lie in [-1, 1], got {k}")));
    }
    Ok(())
}

/// Characteristic function of the standardized variable.
pub fn stable_charfn(u: f64, alpha: f64, k: f64) -> Complex<f64> {
    if u == 0.0 {
        return Complex::new(1.0, 0.0);
    }
    let s = u.signum();
    let au = u.abs();
    let (re, im) = if alpha == 1.0 {
        (-au, -au * k * (2.0 / PI) * s)
    } else {
        let p = au.powf(alpha);
        (-p, p * k * (PI * alpha / 2.0).tan() * s)
    };
    let m = re.exp();
    Complex::new(m * im.cos(), m * im.sin())
}

/// Draws one standardized variate (Chambers-Mallows-Stuck).
///
/// At `alpha = 2` this is N(0, 2).
pub fn sample_stable<R: Rng + ?Sized>(alpha: f64, k: f64, rng: &mut R) -> f64 {
    let v = Uniform::new(-FRAC_PI_2, FRAC_PI_2).sample(rng);
    let w: f64 = Exp1.sample(rng);
    if alpha == 1.0 {
        return v.tan() - 2.0 * k / PI;
    }
    let t = k * (PI * alpha / 2.0).tan();
    let b = t.atan() / alpha;
    let s = (1.0 + t * t).powf(1.0 / (2.0 * alpha));
    let av = alpha * (v + b);
    s * av.sin() / v.cos().powf(1.0 / alpha) * ((v - av).cos() / w).powf((1.0 - alpha) / alpha)
}

/// Density of the standardized variable tabulated by FFT inversion of the
/// characteristic function on a uniform grid centred at zero.
#[derive(Debug, Clone)]
pub struct StandardDensity {
    alpha: f64,
    k: f64,
    x0: f64,
    dx: f64,
    values: Vec<f64>,
}

fn fft_plan() -> Arc<dyn Fft<f64>> {
    static PLAN: OnceLock<Mutex<Option<Arc<dyn Fft<f64>>>>> = OnceLock::new();
    let cell = PLAN.get_or_init(|| Mutex::new(None));
    let mut g = cell.lock().unwrap();
    g.get_or_insert_with(|| FftPlanner::new().plan_fft_forward(1 << GRID_LOG2)).clone()
}

impl StandardDensity {
    pub fn new(alpha: f64, k: f64) -> Result<Self> {
        check_shape(alpha, k)?;
        if alpha < MIN_PDF_ALPHA {
            return Err(Error::Accuracy(format!(
                "density inversion unreliable for alpha < {MIN_PDF_ALPHA} (got {alpha})"
            )));
        }
        let n = 1usize << GRID_LOG2;
        // |phi(u)| = exp(-u^alpha) is below e^-30 past u_need
        let u_need = CF_CUTOFF.powf(1.0 / alpha);
        let dx = MAX_DX.min(PI / u_need);
        let du = 2.0 * PI / (n as f64 * dx);
        let half = (n / 2) as i64;
        let mut buf: Vec<Complex<f64>> = (0..n)
            .map(|m| {
                let kk = if (m as i64) < half { m as i64 } else { m as i64 - n as i64 };
                let c = stable_charfn(kk as f64 * du, alpha, k);
                if kk % 2 == 0 {
                    c
                } else {
                    -c
                }
            })
            .collect();
        fft_plan().process(&mut buf);
        let norm = du / (2.0 * PI);
        let values = buf.iter().map(|c| (c.re * norm).max(0.0)).collect();
        Ok(Self { alpha, k, x0: -(half as f64) * dx, dx, values })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    /// Grid abscissae and tabulated values.
    pub fn grid(&self) -> (Vec<f64>, &[f64]) {
        let xs = (0..self.values.len()).map(|j| self.x0 + j as f64 * self.dx).collect();
        (xs, &self.values)
    }

    /// Riemann mass of the tabulated density.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.dx
    }

    /// Density at `z`; six-point Lagrange interpolation inside the grid and
    /// the asymptotic tail outside it.
    pub fn eval(&self, z: f64) -> f64 {
        let s = (z - self.x0) / self.dx;
        let n = self.values.len();
        if !(s >= 2.0 && s < (n - 4) as f64) {
            return self.tail(z);
        }
        let i = s.floor() as usize;
        let t = s - i as f64;
        let y = &self.values[i - 2..i + 4];
        let d = [t + 2.0, t + 1.0, t, t - 1.0, t - 2.0, t - 3.0];
        // denominators prod_{n != m}(m - n) for nodes -2..3
        const DEN: [f64; 6] = [-120.0, 24.0, -12.0, 12.0, -24.0, 120.0];
        let mut acc = 0.0;
        for m in 0..6 {
            let mut num = 1.0;
            for (j, dj) in d.iter().enumerate() {
                if j != m {
                    num *= dj;
                }
            }
            acc += y[m] * num / DEN[m];
        }
        acc.max(0.0)
    }

    fn tail(&self, z: f64) -> f64 {
        let a = self.alpha;
        if a == 2.0 {
            return (-z * z / 4.0).exp() / (4.0 * PI).sqrt();
        }
        if a == 1.0 {
            let c = z + 2.0 * self.k / PI;
            return 1.0 / (PI * (1.0 + c * c));
        }
        let c = statrs::function::gamma::gamma(a) * (PI * a / 2.0).sin() / PI;
        let side = if z > 0.0 { 1.0 + self.k } else { 1.0 - self.k };
        a * c * side * z.abs().powf(-a - 1.0)
    }
}

/// Stable density at arbitrary points.
pub fn stable_pdf(xs: &[f64], params: &StableParams) -> Result<Vec<f64>> {
    params.validate()?;
    let d = StandardDensity::new(params.alpha, params.k)?;
    Ok(pdf_with(&d, xs, params.scale, params.location))
}

fn pdf_with(d: &StandardDensity, xs: &[f64], scale: f64, loc: f64) -> Vec<f64> {
    xs.iter().map(|x| d.eval((x - loc) / scale) / scale).collect()
}

/// Result of [`fit_stable_ml`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StableFit {
    pub params: StableParams,
    pub log_likelihood: f64,
    pub converged: bool,
}

fn quantile_table() -> &'static Vec<(f64, f64, f64)> {
    // (alpha, nu_alpha, inter-quartile range) of symmetric standardized laws
    static TABLE: OnceLock<Vec<(f64, f64, f64)>> = OnceLock::new();
    TABLE.get_or_init(|| {
        (0..=13)
            .map(|i| {
                let a = 0.7 + 0.1 * i as f64;
                let d = StandardDensity::new(a, 0.0).expect("table density");
                let (xs, f) = d.grid();
                let mut cdf = Vec::with_capacity(f.len());
                let mut acc = 0.0;
                for v in f {
                    acc += v * d.dx();
                    cdf.push(acc);
                }
                let q = |p: f64| {
                    let j = cdf.partition_point(|&c| c < p);
                    let j = j.clamp(1, cdf.len() - 1);
                    let w = (p - cdf[j - 1]) / (cdf[j] - cdf[j - 1]);
                    xs[j - 1] + d.dx() * (w + 0.5)
                };
                let (q05, q25, q75, q95) = (q(0.05), q(0.25), q(0.75), q(0.95));
                (a, (q95 - q05) / (q75 - q25), q75 - q25)
            })
            .collect()
    })
}

/// Quantile-based starting values (alpha from the tail-spread ratio, scale
/// from the inter-quartile range, location from the median).
pub fn quantile_initial(sample: &[f64]) -> Result<StableParams> {
    let s = stats::sorted(sample);
    let q = |p| stats::quantile_sorted(&s, p);
    let iqr = q(0.75) - q(0.25);
    if !(iqr > 0.0) {
        return Err(Error::Degenerate("inter-quartile range is zero".into()));
    }
    let nu = (q(0.95) - q(0.05)) / iqr;
    let table = quantile_table();
    // nu decreases with alpha
    let (alpha, iqr_std) = if nu >= table[0].1 {
        (table[0].0, table[0].2)
    } else if nu <= table[table.len() - 1].1 {
        let t = table[table.len() - 1];
        (t.0, t.2)
    } else {
        let j = table.iter().position(|t| t.1 < nu).unwrap();
        let (a0, n0, i0) = table[j - 1];
        let (a1, n1, i1) = table[j];
        let w = (nu - n0) / (n1 - n0);
        (a0 + w * (a1 - a0), i0 + w * (i1 - i0))
    };
    StableParams::new(alpha, 0.0, iqr / iqr_std, q(0.5))
}

/// Maximum-likelihood fit of all four stable parameters.
pub fn fit_stable_ml(sample: &[f64]) -> Result<StableFit> {
    check_sample(sample)?;
    let init = quantile_initial(sample)?;
    let a0 = init.alpha.clamp(FIT_ALPHA_MIN + 0.05, 1.98);
    let (s0, b0) = (init.scale, init.location);
    let span = 2.0 - FIT_ALPHA_MIN;
    let unpack = |x: &[f64]| {
        let alpha = FIT_ALPHA_MIN + span * sigmoid(x[0]);
        (alpha, x[1].tanh(), s0 * x[2].exp(), b0 + s0 * x[3])
    };
    let objective = |x: &[f64]| {
        let (alpha, k, scale, loc) = unpack(x);
        match StandardDensity::new(alpha, k) {
            Ok(d) => -sample.iter().map(|v| (d.eval((v - loc) / scale) / scale).max(TINY).ln()).sum::<f64>(),
            Err(_) => f64::INFINITY,
        }
    };
    let p0 = (a0 - FIT_ALPHA_MIN) / span;
    let x0 = [(p0 / (1.0 - p0)).ln(), 0.0, 0.0, 0.0];
    let opts = NmOptions { f_tol: 1e-7, x_tol: 1e-5, max_evals: 1500 };
    let mut r = nelder_mead(objective, &x0, &[0.5, 0.3, 0.2, 0.2], opts);
    // one restart from the optimum guards against premature collapse
    let r2 = nelder_mead(objective, &r.x, &[0.2, 0.2, 0.1, 0.1], opts);
    if r2.f <= r.f {
        r = r2;
    }
    let (alpha, k, scale, loc) = unpack(&r.x);
    Ok(StableFit {
        params: StableParams::new(alpha, k, scale, loc)?,
        log_likelihood: -r.f,
        converged: r.converged,
    })
}

fn check_sample(sample: &[f64]) -> Result<()> {
    if sample.len() < MIN_SAMPLE {
        return Err(Error::Domain(format!("need at least {MIN_SAMPLE} values, got {}", sample.len())));
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("sample contains non-finite values".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalFit {
    pub mean: f64,
    pub std: f64,
}

impl NormalFit {
    pub fn pdf(&self, xs: &[f64]) -> Vec<f64> {
        let c = 1.0 / (self.std * (2.0 * PI).sqrt());
        xs.iter().map(|x| c * (-0.5 * ((x - self.mean) / self.std).powi(2)).exp()).collect()
    }
}

/// Maximum-likelihood Normal fit (divisor `n` for the variance).
pub fn fit_normal(sample: &[f64]) -> Result<NormalFit> {
    check_sample(sample)?;
    let std = stats::variance_ml(sample).sqrt();
    if !(std > 0.0) {
        return Err(Error::Degenerate("zero spread".into()));
    }
    Ok(NormalFit { mean: stats::mean(sample), std })
}

/// Freedman-Diaconis bin width, widened so there are at most `10 n` bins.
pub fn fd_histogram(sample: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = stats::sorted(sample);
    let n = s.len();
    let iqr = stats::quantile_sorted(&s, 0.75) - stats::quantile_sorted(&s, 0.25);
    let range = s[n - 1] - s[0];
    if !(iqr > 0.0) {
        return Err(Error::Degenerate("inter-quartile range is zero".into()));
    }
    let mut h = 2.0 * iqr / (n as f64).cbrt();
    let mut bins = (range / h).ceil().max(1.0) as usize;
    if bins > 10 * n {
        bins = 10 * n;
        h = range / bins as f64;
    }
    if bins < 5 {
        return Err(Error::Degenerate(format!("histogram has {bins} bins, need at least 5")));
    }
    let mut counts = vec![0usize; bins];
    for v in &s {
        let j = (((v - s[0]) / h) as usize).min(bins - 1);
        counts[j] += 1;
    }
    let centres = (0..bins).map(|j| s[0] + (j as f64 + 0.5) * h).collect();
    let dens = counts.iter().map(|&c| c as f64 / (n as f64 * h)).collect();
    Ok((centres, dens))
}

/// Pearson correlation between the histogram density of `sample` and the
/// model density evaluated at the bin centres.
pub fn dist_correlation<F>(sample: &[f64], pdf: F) -> Result<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    check_sample(sample)?;
    let (centres, dens) = fd_histogram(sample)?;
    let model = pdf(&centres);
    stats::pearson(&dens, &model).ok_or_else(|| Error::Degenerate("model density is constant on the bins".into()))
}

/// Convenience: correlation against a fitted stable law.
pub fn stable_correlation(sample: &[f64], params: &StableParams) -> Result<f64> {
    let d = StandardDensity::new(params.alpha, params.k)?;
    dist_correlation(sample, |xs| pdf_with(&d, xs, params.scale, params.location))
}
