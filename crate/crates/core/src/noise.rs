//! Power-law noise machinery.
//!
//! Coloured noise is white noise passed through the fractional-integration
//! filter `(1 - B)^(-beta/2)` with zero initial conditions, so for
//! `beta >= 1` the process is non-stationary. Coloured amplitudes are in
//! mm/yr^(beta/4); the driving white noise of each step is scaled by
//! `dt_years^(beta/4)`.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::functional::FunctionalParams;
use crate::series::TimeSeries;
use crate::stable::sample_stable;

/// Days per year for amplitude units and trend rates.
pub const DAYS_PER_YEAR: f64 = 365.25;

/// First epoch (MJD) of simulated series.
pub const SIM_START_MJD: f64 = 51544.0;

/// Largest spectral index accepted by the power-law models.
pub const BETA_MAX: f64 = 3.0;

/// Power-law spectral index with its Hurst and fractional-difference
/// equivalents (`beta = 2H - 1`, `H = d + 0.5`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralIndex(f64);

impl SpectralIndex {
    pub fn new(beta: f64) -> Result<Self> {
        if !(0.0..=BETA_MAX).contains(&beta) {
            return Err(Error::Domain(format!("spectral index {beta} outside [0, {BETA_MAX}]")));
        }
        Ok(Self(beta))
    }

    pub fn from_hurst(h: f64) -> Result<Self> {
        Self::new(2.0 * h - 1.0)
    }

    pub fn from_fractional_d(d: f64) -> Result<Self> {
        Self::new(2.0 * d)
    }

    pub fn beta(self) -> f64 {
        self.0
    }

    pub fn hurst(self) -> f64 {
        (self.0 + 1.0) / 2.0
    }

    pub fn fractional_d(self) -> f64 {
        self.hurst() - 0.5
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NoiseKind {
    /// Power-law plus white noise, beta estimated.
    #[serde(rename = "pl+wn")]
    PowerLawWhite,
    /// Flicker plus white noise, beta fixed at 1.
    #[serde(rename = "fn+wn")]
    FlickerWhite,
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseKind::PowerLawWhite => write!(f, "pl+wn"),
            NoiseKind::FlickerWhite => write!(f, "fn+wn"),
        }
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pl+wn" | "plwn" | "pl" => Ok(NoiseKind::PowerLawWhite),
            "fn+wn" | "fnwn" | "fn" => Ok(NoiseKind::FlickerWhite),
            other => Err(Error::Domain(format!("unknown noise model '{other}'"))),
        }
    }
}

/// White + coloured noise model `theta_2 = [a_wh, b_cl, beta]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModelSpec {
    pub kind: NoiseKind,
    /// White amplitude (mm).
    pub a_wh: f64,
    /// Coloured amplitude (mm/yr^(beta/4)).
    pub b_cl: f64,
    pub beta: f64,
}

impl NoiseModelSpec {
    pub fn power_law(a_wh: f64, b_cl: f64, beta: f64) -> Result<Self> {
        let s = Self { kind: NoiseKind::PowerLawWhite, a_wh, b_cl, beta };
        s.validate()?;
        Ok(s)
    }

    pub fn flicker(a_wh: f64, b_cl: f64) -> Result<Self> {
        let s = Self { kind: NoiseKind::FlickerWhite, a_wh, b_cl, beta: 1.0 };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a_wh >= 0.0 && self.b_cl >= 0.0) || !self.a_wh.is_finite() || !self.b_cl.is_finite() {
            return Err(Error::Domain(format!(
                "amplitudes must be finite and non-negative (a_wh={}, b_cl={})",
                self.a_wh, self.b_cl
            )));
        }
        if self.a_wh == 0.0 && self.b_cl == 0.0 {
            return Err(Error::Domain("white and coloured amplitudes both zero".into()));
        }
        SpectralIndex::new(self.beta)?;
        if self.kind == NoiseKind::FlickerWhite && self.beta != 1.0 {
            return Err(Error::Domain("flicker model requires beta = 1".into()));
        }
        Ok(())
    }

    pub fn params(&self) -> [f64; 3] {
        [self.a_wh, self.b_cl, self.beta]
    }
}

/// Impulse response of `(1 - B)^(-beta/2)`: `h_0 = 1`,
/// `h_i = h_{i-1} (beta/2 + i - 1) / i`.
pub fn pl_filter(beta: f64, len: usize) -> Vec<f64> {
    let mut h = Vec::with_capacity(len);
    if len == 0 {
        return h;
    }
    h.push(1.0);
    let d = beta / 2.0;
    for i in 1..len {
        let prev = h[i - 1];
        h.push(prev * (d + i as f64 - 1.0) / i as f64);
    }
    h
}

/// Per-step scale of the coloured driving noise for sampling `dt_days`.
pub fn coloured_step_scale(beta: f64, dt_days: f64) -> f64 {
    (dt_days / DAYS_PER_YEAR).powf(beta / 4.0)
}

/// Dense covariance `a_wh^2 I + b_cl^2 dt^(beta/2) U U^T` on the observed
/// epochs of `ts` (gap rows and columns deleted).
///
/// This is the O(L^2)-memory reference route; the likelihood code uses the
/// structured factorisation in [`crate::whiten`].
pub fn pl_covariance(beta: f64, a_wh: f64, b_cl: f64, ts: &TimeSeries) -> Result<DMatrix<f64>> {
    let idx = ts
        .grid_indices()
        .ok_or_else(|| Error::Validation("epochs do not lie on a uniform grid".into()))?;
    let n_grid = ts.grid_len();
    let h = pl_filter(beta, n_grid);
    let s2 = b_cl * b_cl * coloured_step_scale(beta, ts.dt()).powi(2);
    let n = idx.len();
    let mut c = DMatrix::<f64>::zeros(n, n);
    for (a, &i) in idx.iter().enumerate() {
        for (b, &j) in idx.iter().enumerate().take(a + 1) {
            // i >= j: sum_k h_{i-k} h_{j-k}, k = 0..=j
            let mut acc = 0.0;
            for k in 0..=j {
                acc += h[i - k] * h[j - k];
            }
            let v = s2 * acc;
            c[(a, b)] = v;
            c[(b, a)] = v;
        }
        c[(a, a)] += a_wh * a_wh;
    }
    Ok(c)
}

/// Causal (truncated) convolution `y_n = sum_{k<=n} h_{n-k} x_k`, first
/// `x.len()` outputs.
pub fn causal_convolve(h: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let h = &h[..h.len().min(n)];
    if (n as u64) * (h.len() as u64) <= 1 << 20 {
        let mut y = vec![0.0; n];
        for (k, &xk) in x.iter().enumerate() {
            if xk == 0.0 {
                continue;
            }
            for (yi, &hi) in y[k..].iter_mut().zip(h) {
                *yi += hi * xk;
            }
        }
        return y;
    }
    let size = (n + h.len()).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut a: Vec<Complex<f64>> = h.iter().map(|&v| Complex::new(v, 0.0)).collect();
    a.resize(size, Complex::new(0.0, 0.0));
    let mut b: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    b.resize(size, Complex::new(0.0, 0.0));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (ai, bi) in a.iter_mut().zip(&b) {
        *ai *= bi;
    }
    inv.process(&mut a);
    a[..n].iter().map(|c| c.re / size as f64).collect()
}

pub(crate) fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// White + power-law noise values on a gap-free daily grid.
pub fn noise_values(spec: &NoiseModelSpec, len: usize, dt_days: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let white: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
    let driving: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
    let mut out: Vec<f64> = white.iter().map(|w| spec.a_wh * w).collect();
    if spec.b_cl > 0.0 {
        let h = pl_filter(spec.beta, len);
        let coloured = causal_convolve(&h, &driving);
        let s = spec.b_cl * coloured_step_scale(spec.beta, dt_days);
        for (o, c) in out.iter_mut().zip(coloured) {
            *o += s * c;
        }
    }
    out
}

/// Simulated noise series of `len` daily epochs.
pub fn gen_noise(spec: &NoiseModelSpec, len: usize, seed: u64) -> Result<TimeSeries> {
    spec.validate()?;
    if len < 2 {
        return Err(Error::Domain("series length must be at least 2".into()));
    }
    let mut rng = rng_from_seed(seed);
    TimeSeries::regular(SIM_START_MJD, 1.0, noise_values(spec, len, 1.0, &mut rng))
}

/// Coloured-noise amplitude scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    /// Low coloured amplitude, b_cl in [0.01, 0.1].
    A,
    /// Intermediate, b_cl in [0.1, 1].
    B,
    /// High, b_cl in [1, 3].
    C,
}

impl Scenario {
    pub fn coloured_band(self) -> (f64, f64) {
        match self {
            Scenario::A => (0.01, 0.1),
            Scenario::B => (0.1, 1.0),
            Scenario::C => (1.0, 3.0),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Scenario::A => "A",
            Scenario::B => "B",
            Scenario::C => "C",
        };
        f.write_str(s)
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Scenario::A),
            "B" | "b" => Ok(Scenario::B),
            "C" | "c" => Ok(Scenario::C),
            other => Err(Error::UnknownScenario(other.to_string())),
        }
    }
}

/// White amplitude used by all scenarios (mm).
pub const SCENARIO_WHITE_MM: f64 = 1.6;
/// Default simulated length: 10 years of daily epochs.
pub const SCENARIO_LENGTH: usize = 3650;

/// Simulated series with its functional and stochastic truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedSeries {
    pub scenario: Scenario,
    pub seed: u64,
    pub series: TimeSeries,
    pub functional: FunctionalParams,
    pub noise: NoiseModelSpec,
}

/// Trend + annual signal + white/power-law noise.
///
/// Truth: rate `a ~ U[1, 3]` mm/yr, intercept 0, annual cosine/sine
/// amplitudes (0.4, 0.2) mm, white 1.6 mm, `b_cl ~ U(band)`.
pub fn gen_scenario(scenario: Scenario, beta: f64, len: usize, seed: u64) -> Result<SimulatedSeries> {
    SpectralIndex::new(beta)?;
    if len < 2 {
        return Err(Error::Domain("series length must be at least 2".into()));
    }
    let mut rng = rng_from_seed(seed);
    let rate = Uniform::new_inclusive(1.0, 3.0).sample(&mut rng);
    let (lo, hi) = scenario.coloured_band();
    let b_cl = Uniform::new(lo, hi).sample(&mut rng);
    let noise = NoiseModelSpec::power_law(SCENARIO_WHITE_MM, b_cl, beta)?;
    let functional = FunctionalParams {
        rate,
        intercept: 0.0,
        harmonics: vec![(0.4, 0.2)],
        offsets: Vec::new(),
    };
    let values = noise_values(&noise, len, 1.0, &mut rng);
    let epochs: Vec<f64> = (0..len).map(|i| SIM_START_MJD + i as f64).collect();
    let signal = functional.evaluate(&epochs, SIM_START_MJD, &[]);
    let values = values.iter().zip(&signal).map(|(n, s)| n + s).collect();
    let series = TimeSeries::with_dt(epochs, values, 1.0)?
        .with_header(vec![format!(" simulated scenario {scenario} beta {beta} seed {seed}")]);
    Ok(SimulatedSeries { scenario, seed, series, functional, noise })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 2.0) {
        return Err(Error::Domain(format!("stable index alpha={alpha} outside (0, 2]")));
    }
    Ok(())
}

/// Levy alpha-stable motion: cumulative sum of i.i.d. standard stable
/// increments, `X_n = sum_{j<n} dZ_j` for `n = 1..=len`.
pub fn gen_stable_motion(alpha: f64, skew: f64, len: usize, seed: u64) -> Result<TimeSeries> {
    check_alpha(alpha)?;
    if !(-1.0..=1.0).contains(&skew) {
        return Err(Error::Domain(format!("skewness {skew} outside [-1, 1]")));
    }
    let mut rng = rng_from_seed(seed);
    let mut acc = 0.0;
    let values = (0..len)
        .map(|_| {
            acc += sample_stable(alpha, skew, &mut rng);
            acc
        })
        .collect();
    TimeSeries::regular(SIM_START_MJD, 1.0, values)
}

/// Default past-support multiplier of the fLsm moving-average kernel.
pub const FLSM_PAST_FACTOR: usize = 10;

/// Fractional Levy stable motion with the default `10 L` past support.
pub fn gen_flsm(alpha: f64, hurst: f64, len: usize, seed: u64) -> Result<TimeSeries> {
    gen_flsm_with_past(alpha, hurst, len, FLSM_PAST_FACTOR * len, seed)
}

/// Fractional Levy stable motion by a midpoint Riemann sum of the
/// moving-average kernel `(t-u)_+^g - (-u)_+^g`, `g = H - 1/alpha`,
/// against symmetric stable increments on unit cells.
///
/// With `H = 1/alpha` the kernel is an indicator and the output equals
/// [`gen_stable_motion`] with `skew = 0` for the same seed. With
/// `alpha = 2` it is a truncated Mandelbrot-Van Ness fBm.
pub fn gen_flsm_with_past(alpha: f64, hurst: f64, len: usize, past: usize, seed: u64) -> Result<TimeSeries> {
    check_alpha(alpha)?;
    if !(hurst > 0.0 && hurst < 1.0) {
        return Err(Error::Domain(format!("Hurst parameter {hurst} outside (0, 1)")));
    }
    let g = hurst - 1.0 / alpha;
    let mut rng = rng_from_seed(seed);
    // future increments first so H = 1/alpha reproduces the stable motion
    let future: Vec<f64> = (0..len).map(|_| sample_stable(alpha, 0.0, &mut rng)).collect();
    // z[i] is the increment of cell j = i - past; one trailing zero so the
    // convolution reaches index past + len
    let mut z: Vec<f64> = (0..past).map(|_| sample_stable(alpha, 0.0, &mut rng)).collect();
    z.extend_from_slice(&future);
    z.push(0.0);
    let kernel: Vec<f64> = (0..z.len())
        .map(|x| if x == 0 { 0.0 } else { (x as f64 - 0.5).powf(g) })
        .collect();
    let conv = causal_convolve(&kernel, &z);
    let base = conv[past];
    let values: Vec<f64> = (1..=len).map(|n| conv[past + n] - base).collect();
    TimeSeries::regular(SIM_START_MJD, 1.0, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_white() {
        assert_eq!(pl_filter(0.0, 5), vec![1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn filter_random_walk() {
        assert!(pl_filter(2.0, 50).iter().all(|&h| h == 1.0));
    }

    #[test]
    fn filter_flicker_first_terms() {
        let h = pl_filter(1.0, 3);
        assert_eq!(h, vec![1.0, 0.5, 0.375]);
    }

    #[test]
    fn spectral_index_relations() {
        let s = SpectralIndex::new(1.0).unwrap();
        assert_eq!(s.hurst(), 1.0);
        assert_eq!(SpectralIndex::new(0.0).unwrap().hurst(), 0.5);
        assert_eq!(SpectralIndex::new(2.0).unwrap().hurst(), 1.5);
        assert_eq!(SpectralIndex::new(1.1).unwrap().fractional_d(), 0.55);
        assert!(SpectralIndex::new(3.5).is_err());
        assert!(SpectralIndex::new(-0.1).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(NoiseModelSpec::power_law(0.0, 0.0, 1.0).is_err());
        assert!(NoiseModelSpec::power_law(-1.0, 1.0, 1.0).is_err());
        assert!(NoiseModelSpec::flicker(1.0, 1.0).is_ok());
        assert_eq!("PL+WN".parse::<NoiseKind>().unwrap(), NoiseKind::PowerLawWhite);
    }

    fn regular(n: usize) -> TimeSeries {
        TimeSeries::regular(0.0, 1.0, vec![0.0; n]).unwrap()
    }

    #[test]
    fn covariance_white_limits() {
        let ts = regular(6);
        let c = pl_covariance(0.0, 0.0, 1.0, &ts).unwrap();
        let s = coloured_step_scale(0.0, 1.0);
        assert_eq!(s, 1.0);
        assert!((c - DMatrix::<f64>::identity(6, 6)).abs().max() < 1e-15);
        let c = pl_covariance(1.3, 2.0, 0.0, &ts).unwrap();
        assert!((c - DMatrix::<f64>::identity(6, 6) * 4.0).abs().max() < 1e-15);
    }

    #[test]
    fn covariance_random_walk_is_brownian() {
        let ts = regular(7);
        let c = pl_covariance(2.0, 0.0, 1.0, &ts).unwrap();
        let s2 = coloured_step_scale(2.0, 1.0).powi(2);
        for i in 0..7 {
            for j in 0..7 {
                let want = s2 * (i.min(j) + 1) as f64;
                assert!((c[(i, j)] - want).abs() < 1e-15 * want.max(1.0));
            }
        }
    }

    #[test]
    fn covariance_drops_gap_rows() {
        let ts = TimeSeries::new(vec![0.0, 1.0, 3.0, 4.0], vec![0.0; 4]).unwrap();
        let full = pl_covariance(1.0, 1.0, 1.0, &regular(5)).unwrap();
        let c = pl_covariance(1.0, 1.0, 1.0, &ts).unwrap();
        let keep = [0, 1, 3, 4];
        for (a, &i) in keep.iter().enumerate() {
            for (b, &j) in keep.iter().enumerate() {
                assert_eq!(c[(a, b)], full[(i, j)]);
            }
        }
        let odd = TimeSeries::new(vec![0.0, 1.0, 2.5], vec![0.0; 3]).unwrap();
        assert!(pl_covariance(1.0, 1.0, 1.0, &odd).is_err());
    }

    #[test]
    fn fft_convolution_matches_direct() {
        let h = pl_filter(1.3, 3000);
        let x: Vec<f64> = (0..3000).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let fast = causal_convolve(&h, &x);
        for n in [0usize, 1, 17, 999, 2999] {
            let direct: f64 = (0..=n).map(|k| h[n - k] * x[k]).sum();
            assert!((fast[n] - direct).abs() < 1e-8 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn noise_is_deterministic() {
        let spec = NoiseModelSpec::power_law(1.6, 1.0, 1.1).unwrap();
        assert_eq!(gen_noise(&spec, 500, 3).unwrap(), gen_noise(&spec, 500, 3).unwrap());
        assert_ne!(gen_noise(&spec, 500, 3).unwrap(), gen_noise(&spec, 500, 4).unwrap());
    }

    #[test]
    fn scenario_bands() {
        for seed in 0..20 {
            let a = gen_scenario(Scenario::A, 1.1, 400, seed).unwrap();
            assert!(a.noise.b_cl < 0.1 && a.noise.b_cl >= 0.01);
            let c = gen_scenario(Scenario::C, 1.5, 400, seed).unwrap();
            assert!((1.0..=3.0).contains(&c.noise.b_cl));
            assert!((1.0..=3.0).contains(&c.functional.rate));
            assert_eq!(c.noise.a_wh, 1.6);
        }
        assert!(matches!("D".parse::<Scenario>(), Err(Error::UnknownScenario(_))));
    }

    #[test]
    fn flsm_at_inverse_alpha_is_stable_motion() {
        let a = gen_flsm_with_past(1.5, 1.0 / 1.5, 300, 50, 11).unwrap();
        let b = gen_stable_motion(1.5, 0.0, 300, 11).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-9 * y.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn stable_domain_errors() {
        assert!(gen_stable_motion(0.0, 0.0, 10, 1).is_err());
        assert!(gen_stable_motion(2.1, 0.0, 10, 1).is_err());
        assert!(gen_flsm(1.5, 1.0, 10, 1).is_err());
    }
}
