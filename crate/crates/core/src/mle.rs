//! Maximum-likelihood estimation of the white + power-law noise model with
//! the functional model re-estimated by GLS at every likelihood evaluation.
//!
//! The covariance is written `C = sigma^2 K(f, beta)` with
//! `K = f I + (1 - f) S U U^T` (`S` the per-step time scaling), so `sigma^2`
//! and `theta_1` are profiled out analytically and the simplex only searches
//! `(logit f, logit((beta - beta_min) / (3 - beta_min)))`, or `logit f` alone for flicker noise.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functional::{build_design, gls_solve, residuals_of, Design, FunctionalParams};
use crate::noise::{coloured_step_scale, NoiseKind, NoiseModelSpec, BETA_MAX};
use crate::optim::{logit, nelder_mead, sigmoid, NmOptions};
use crate::series::{OffsetCatalog, TimeSeries, MIN_FIT_EPOCHS};
use crate::stats;
use crate::whiten::{PowerLawCovariance, Whitener};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Logit bound keeping `f` and `beta / 3` away from exact 0 and 1.
const LOGIT_CLAMP: f64 = 35.0;
pub const DEFAULT_BETA_MIN: f64 = 0.5;

/// Estimated `theta_2` with formal sigmas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StochasticFit {
    pub kind: NoiseKind,
    pub a_wh: f64,
    pub b_cl: f64,
    pub beta: f64,
    pub sigma_a_wh: f64,
    pub sigma_b_cl: f64,
    /// Zero for the flicker model (beta is fixed); NaN when beta is not
    /// identified.
    pub sigma_beta: f64,
    /// False when the coloured amplitude has collapsed so far that the
    /// likelihood no longer depends on beta.
    pub beta_identified: bool,
    pub log_likelihood: f64,
    pub n_obs: usize,
    pub converged: bool,
    /// Outer (restart) iterations used.
    pub iterations: usize,
}

impl StochasticFit {
    pub fn spec(&self) -> NoiseModelSpec {
        NoiseModelSpec { kind: self.kind, a_wh: self.a_wh, b_cl: self.b_cl, beta: self.beta }
    }

    /// `[a_wh, b_cl, beta]`.
    pub fn params(&self) -> Vec<f64> {
        vec![self.a_wh, self.b_cl, self.beta]
    }

    /// Shape parameters `(f, beta)` of the normalized covariance, used to
    /// warm-start a related fit.
    pub fn shape(&self, dt_days: f64) -> (f64, f64) {
        let s = coloured_step_scale(self.beta, dt_days);
        let qw = self.a_wh * self.a_wh;
        let qc = self.b_cl * self.b_cl * s * s;
        (qw / (qw + qc), self.beta)
    }
}

/// Settings for [`fit_stochastic`].
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub n_harmonics: usize,
    pub offsets: OffsetCatalog,
    /// Number of simplex starts (the default start plus jittered ones).
    pub restarts: usize,
    pub max_outer: usize,
    /// Log-likelihood improvement below which restarting stops.
    pub tol: f64,
    /// Optional `(f, beta)` starting shape; replaces the default start.
    pub warm_start: Option<(f64, f64)>,
    /// Lower bound on the estimated spectral index. At `beta = 0` the
    /// power-law term is itself white, so the two amplitudes stop being
    /// separately identifiable as the index approaches zero.
    pub beta_min: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            n_harmonics: crate::functional::DEFAULT_HARMONICS,
            offsets: OffsetCatalog::empty(),
            restarts: 3,
            max_outer: 50,
            tol: 1e-6,
            warm_start: None,
            beta_min: DEFAULT_BETA_MIN,
        }
    }
}

/// Output of [`fit_stochastic`].
#[derive(Debug, Clone)]
pub struct StochasticResult {
    pub fit: StochasticFit,
    pub functional: FunctionalParams,
    /// Formal sigmas of the functional parameters, design-column order.
    pub functional_sigma: Vec<f64>,
    pub names: Vec<String>,
    pub residuals: TimeSeries,
}

/// Gaussian log-likelihood of `residuals` under `spec`.
pub fn log_likelihood(residuals: &TimeSeries, spec: &NoiseModelSpec) -> Result<f64> {
    spec.validate()?;
    let cov = PowerLawCovariance::for_series(residuals, spec.a_wh, spec.b_cl, spec.beta)?;
    let w = cov.whiten(&[residuals.values()])?;
    let n = w.n_obs as f64;
    Ok(-0.5 * (n * LN_2PI + w.log_det + w.dot(0, 0)))
}

struct Problem<'a> {
    ts: &'a TimeSeries,
    design: Design,
    observed: Vec<usize>,
    kind: NoiseKind,
    beta_min: f64,
}

struct Profile {
    loglik: f64,
    sigma2: f64,
    theta: Vec<f64>,
    theta_cov: DMatrix<f64>,
}

impl Problem<'_> {
    fn n(&self) -> usize {
        self.observed.len()
    }

    /// Likelihood with `theta_1` and the overall scale profiled out.
    fn profile(&self, f: f64, beta: f64) -> Result<Profile> {
        let cov = PowerLawCovariance::on_grid(self.ts.grid_len(), self.observed.clone(), f, 1.0 - f, beta)?;
        let sol = gls_solve(self.ts.values(), &self.design, &cov)?;
        let n = self.n() as f64;
        let sigma2 = sol.weighted_rss / n;
        if !(sigma2 > 0.0) {
            return Err(Error::Degenerate("zero residual variance".into()));
        }
        let loglik = -0.5 * (n * (LN_2PI + sigma2.ln() + 1.0) + sol.log_det);
        Ok(Profile { loglik, sigma2, theta: sol.theta, theta_cov: sol.covariance })
    }

    /// Likelihood at explicit amplitudes, `theta_1` still profiled.
    fn loglik_at(&self, a_wh: f64, b_cl: f64, beta: f64) -> Result<f64> {
        let s = coloured_step_scale(beta, self.ts.dt());
        let cov = PowerLawCovariance::on_grid(
            self.ts.grid_len(),
            self.observed.clone(),
            a_wh * a_wh,
            b_cl * b_cl * s * s,
            beta,
        )?;
        let sol = gls_solve(self.ts.values(), &self.design, &cov)?;
        Ok(-0.5 * (self.n() as f64 * LN_2PI + sol.log_det + sol.weighted_rss))
    }

    fn unpack(&self, x: &[f64]) -> (f64, f64) {
        let f = sigmoid(x[0].clamp(-LOGIT_CLAMP, LOGIT_CLAMP));
        let beta = match self.kind {
            NoiseKind::FlickerWhite => 1.0,
            NoiseKind::PowerLawWhite => {
                self.beta_min + (BETA_MAX - self.beta_min) * sigmoid(x[1].clamp(-LOGIT_CLAMP, LOGIT_CLAMP))
            }
        };
        (f, beta)
    }

    fn pack(&self, f: f64, beta: f64) -> Vec<f64> {
        let tf = logit(f.clamp(1e-12, 1.0 - 1e-12));
        match self.kind {
            NoiseKind::FlickerWhite => vec![tf],
            NoiseKind::PowerLawWhite => {
                let u = (beta - self.beta_min) / (BETA_MAX - self.beta_min);
                vec![tf, logit(u.clamp(1e-6, 1.0 - 1e-6))]
            }
        }
    }

    fn negloglik(&self, x: &[f64]) -> f64 {
        let (f, beta) = self.unpack(x);
        self.profile(f, beta).map(|p| -p.loglik).unwrap_or(f64::INFINITY)
    }
}

/// Default starting shape: white sigma from first differences of the OLS
/// residuals (MAD based), coloured amplitude half of it, beta = 1.
fn default_start(p: &Problem) -> Result<(f64, f64)> {
    let ols = gls_solve(
        p.ts.values(),
        &p.design,
        &crate::whiten::ScaledIdentity { n: p.n(), variance: 1.0 },
    )?;
    let r = residuals_of(p.ts, &p.design, &ols.theta)?;
    let d: Vec<f64> = r.values().windows(2).map(|w| w[1] - w[0]).collect();
    let mut a = stats::mad_sigma(&d) / std::f64::consts::SQRT_2;
    if !(a > 0.0) {
        a = stats::std_dev(r.values()).max(f64::MIN_POSITIVE);
    }
    let beta = 1.0;
    let s = coloured_step_scale(beta, p.ts.dt());
    let qw = a * a;
    let qc = 0.25 * a * a * s * s;
    Ok((qw / (qw + qc), beta))
}

/// Jointly estimates `theta_1` (GLS) and `theta_2` (ML) on `ts`.
///
/// Non-convergence is reported through `fit.converged`, not as an error.
pub fn fit_stochastic(ts: &TimeSeries, kind: NoiseKind, cfg: &FitConfig) -> Result<StochasticResult> {
    if ts.len() < MIN_FIT_EPOCHS {
        return Err(Error::WindowTooShort { len: ts.len(), min: MIN_FIT_EPOCHS });
    }
    let observed = ts
        .grid_indices()
        .ok_or_else(|| Error::Validation("epochs do not lie on a uniform grid".into()))?;
    let offsets = cfg.offsets.restricted_to(ts.first_epoch(), ts.last_epoch());
    let design = build_design(ts.epochs(), cfg.n_harmonics, &offsets)?;
    if !(0.0..BETA_MAX).contains(&cfg.beta_min) {
        return Err(Error::Domain(format!("beta_min must lie in [0, {BETA_MAX}), got {}", cfg.beta_min)));
    }
    let p = Problem { ts, design, observed, kind, beta_min: cfg.beta_min };

    let dim = match kind {
        NoiseKind::FlickerWhite => 1,
        NoiseKind::PowerLawWhite => 2,
    };
    let step = vec![1.0; dim];
    let opts = NmOptions { f_tol: 1e-5, x_tol: 1e-3, max_evals: 300 };
    let base = match cfg.warm_start {
        // a shape inherited from a boundary optimum would start the simplex
        // on a flat plateau
        Some((f, b)) => p.pack(f.clamp(1e-3, 1.0 - 1e-3), b.clamp(p.beta_min + 0.05, BETA_MAX - 0.05)),
        None => {
            let (f, b) = default_start(&p)?;
            p.pack(f, b)
        }
    };
    let jitters: [[f64; 2]; 4] = [[0.0, 0.0], [-3.0, 0.7], [3.0, -0.7], [-6.0, -0.3]];
    let mut best: Option<(Vec<f64>, f64, bool)> = None;
    for j in jitters.iter().take(cfg.restarts.max(1)) {
        let x0: Vec<f64> = base.iter().zip(j).map(|(b, d)| b + d).collect();
        let r = nelder_mead(|x| p.negloglik(x), &x0, &step, opts);
        if best.as_ref().map_or(true, |b| r.f < b.1) {
            best = Some((r.x, r.f, r.converged));
        }
    }
    let (mut x, mut fbest, _) = best.unwrap();
    let mut iterations = 1;
    let mut converged = false;
    // restart from the incumbent until the likelihood stops improving
    while iterations < cfg.max_outer {
        iterations += 1;
        let r = nelder_mead(|x| p.negloglik(x), &x, &vec![0.3; dim], opts);
        let gain = fbest - r.f;
        if r.f < fbest {
            x = r.x;
            fbest = r.f;
        }
        if !(gain > cfg.tol) {
            converged = true;
            break;
        }
    }
    if !fbest.is_finite() {
        return Err(Error::NotPositiveDefinite("no admissible covariance found".into()));
    }

    let (f, beta) = p.unpack(&x);
    let prof = p.profile(f, beta)?;
    let s = coloured_step_scale(beta, ts.dt());
    let a_wh = (prof.sigma2 * f).sqrt();
    let b_cl = (prof.sigma2 * (1.0 - f)).sqrt() / s;

    let (sig, beta_identified) = formal_sigmas(&p, a_wh, b_cl, beta);
    let checked = if beta_identified { dim + 1 } else { 2 };
    let sigmas_ok = sig[..checked].iter().all(|v| v.is_finite() && *v > 0.0);
    let functional_sigma = (0..prof.theta.len()).map(|i| (prof.sigma2 * prof.theta_cov[(i, i)]).sqrt()).collect();
    let residuals = residuals_of(ts, &p.design, &prof.theta)?;
    let fit = StochasticFit {
        kind,
        a_wh,
        b_cl,
        beta,
        sigma_a_wh: sig[0],
        sigma_b_cl: sig[1],
        sigma_beta: if dim == 2 { sig[2] } else { 0.0 },
        beta_identified,
        log_likelihood: prof.loglik,
        n_obs: p.n(),
        converged: converged && sigmas_ok && prof.loglik.is_finite(),
        iterations,
    };
    Ok(StochasticResult {
        fit,
        functional: FunctionalParams::from_vec(&prof.theta, cfg.n_harmonics),
        functional_sigma,
        names: p.design.names.clone(),
        residuals,
    })
}

/// Square roots of the diagonal of the inverse negative Hessian of the
/// log-likelihood in `(a_wh, b_cl[, beta])`, by central differences.
fn formal_sigmas(p: &Problem, a_wh: f64, b_cl: f64, beta: f64) -> (Vec<f64>, bool) {
    let free_beta = p.kind == NoiseKind::PowerLawWhite;
    let dim = if free_beta { 3 } else { 2 };
    let x0 = [a_wh, b_cl, beta];
    let amp = a_wh.max(b_cl).max(1e-12);
    let h = [1e-3 * a_wh.max(1e-3 * amp), 1e-3 * b_cl.max(1e-2 * amp), 1e-3];
    let eval = |d: &[f64; 3]| -> f64 {
        let a = (x0[0] + d[0]).abs();
        let b = (x0[1] + d[1]).abs();
        let be = (x0[2] + d[2]).clamp(0.0, BETA_MAX);
        p.loglik_at(a, b, be).unwrap_or(f64::NAN)
    };
    let f0 = eval(&[0.0; 3]);
    let mut hess = DMatrix::<f64>::zeros(dim, dim);
    for i in 0..dim {
        let mut d = [0.0; 3];
        d[i] = h[i];
        let fp = eval(&d);
        d[i] = -h[i];
        let fm = eval(&d);
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let mut v = [0.0; 4];
            for (n, (si, sj)) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)].iter().enumerate() {
                let mut d = [0.0; 3];
                d[i] = si * h[i];
                d[j] = sj * h[j];
                v[n] = eval(&d);
            }
            let hij = (v[0] - v[1] - v[2] + v[3]) / (4.0 * h[i] * h[j]);
            hess[(i, j)] = hij;
            hess[(j, i)] = hij;
        }
    }
    // with the coloured term gone the likelihood is flat in beta across its
    // whole admissible range
    let beta_range = BETA_MAX - p.beta_min;
    let identified = !free_beta || 0.5 * hess[(2, 2)].abs() * beta_range * beta_range > 1e-3;
    let dim = if identified { dim } else { 2 };
    let neg = -hess.view((0, 0), (dim, dim)).into_owned();
    let diag_fallback = |m: &DMatrix<f64>| (0..dim).map(|i| (1.0 / m[(i, i)]).sqrt()).collect::<Vec<f64>>();
    let mut out = match neg.clone().cholesky() {
        Some(c) => {
            let inv = c.inverse();
            (0..dim).map(|i| inv[(i, i)].sqrt()).collect()
        }
        None => diag_fallback(&neg),
    };
    out.resize(3, if identified { 0.0 } else { f64::NAN });
    (out, identified)
}
