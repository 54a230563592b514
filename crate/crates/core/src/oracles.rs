//! Mean and variance of a residual series that still carries an unmodelled
//! trend, seasonal signal or offsets on top of white noise.
//!
//! Epochs are `t_i = i` for `i = 1..=L` (unit sampling, no gaps), so rates and
//! frequencies are per epoch. Each kind has an exact closed form, the large-L
//! approximation as usually printed, and a brute-force summation to check both.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};

const DAYS_PER_YEAR: f64 = 365.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Harmonic {
    /// Angular frequency in rad/epoch.
    pub frequency: f64,
    pub cos: f64,
    pub sin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Step {
    pub epoch: f64,
    pub size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Signal {
    Trend { rate: f64, intercept: f64 },
    /// `delta` is the signal mean used by the approximate form; the exact
    /// form computes it.
    Seasonal { harmonics: Vec<Harmonic>, delta: f64 },
    Offsets { steps: Vec<Step> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum OracleKind {
    Trend,
    Seasonal,
    Offsets,
}

impl std::fmt::Display for OracleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OracleKind::Trend => "trend",
            OracleKind::Seasonal => "seasonal",
            OracleKind::Offsets => "offsets",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Exact,
    Approx,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualSignalSpec {
    pub signal: Signal,
    /// Mean of the noise, mm.
    pub noise_mean: f64,
    /// Per-epoch standard deviation of the white noise, mm.
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
}

impl ResidualSignalSpec {
    pub fn trend(rate_mm_per_yr: f64, intercept: f64, noise_mean: f64, noise_sigma: f64) -> Self {
        Self {
            signal: Signal::Trend { rate: rate_mm_per_yr / DAYS_PER_YEAR, intercept },
            noise_mean,
            noise_sigma,
        }
    }

    pub fn kind(&self) -> OracleKind {
        match self.signal {
            Signal::Trend { .. } => OracleKind::Trend,
            Signal::Seasonal { .. } => OracleKind::Seasonal,
            Signal::Offsets { .. } => OracleKind::Offsets,
        }
    }

    /// Expected time-average variance of the noise over `l` epochs,
    /// `sigma^2 (L - 1) / L` for white noise.
    pub fn noise_variance(&self, l: usize) -> f64 {
        self.noise_sigma * self.noise_sigma * (l as f64 - 1.0) / l as f64
    }

    pub fn validate(&self, l: usize) -> Result<()> {
        if l == 0 {
            return Err(Error::Domain("L must be at least 1".into()));
        }
        if !self.noise_mean.is_finite() || !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::Domain("noise mean and sigma must be finite, sigma >= 0".into()));
        }
        let finite = match &self.signal {
            Signal::Trend { rate, intercept } => rate.is_finite() && intercept.is_finite(),
            Signal::Seasonal { harmonics, delta } => {
                delta.is_finite()
                    && harmonics.iter().all(|h| h.frequency.is_finite() && h.cos.is_finite() && h.sin.is_finite())
            }
            Signal::Offsets { steps } => {
                for s in steps {
                    if !(1.0..=l as f64).contains(&s.epoch) {
                        return Err(Error::OffsetOutOfSpan { epoch: s.epoch, start: 1.0, end: l as f64 });
                    }
                }
                steps.iter().all(|s| s.size.is_finite())
            }
        };
        if finite {
            Ok(())
        } else {
            Err(Error::Domain("signal coefficients must be finite".into()))
        }
    }

    /// Deterministic part at epoch `t`.
    pub fn signal_at(&self, t: f64) -> f64 {
        match &self.signal {
            Signal::Trend { rate, intercept } => rate * t + intercept,
            Signal::Seasonal { harmonics, .. } => harmonics
                .iter()
                .map(|h| h.cos * (h.frequency * t).cos() + h.sin * (h.frequency * t).sin())
                .sum(),
            Signal::Offsets { steps } => steps.iter().filter(|s| t >= s.epoch).map(|s| s.size).sum(),
        }
    }
}

fn expect_kind(spec: &ResidualSignalSpec, kind: OracleKind, l: usize) -> Result<()> {
    if spec.kind() != kind {
        return Err(Error::Domain(format!("expected a {kind} spec, got {}", spec.kind())));
    }
    spec.validate(l)
}

pub fn trend_moments(spec: &ResidualSignalSpec, l: usize, mode: Mode) -> Result<Moments> {
    expect_kind(spec, OracleKind::Trend, l)?;
    let Signal::Trend { rate: a, intercept: b } = spec.signal else { unreachable!() };
    let lf = l as f64;
    let mu = spec.noise_mean;
    let sn2 = spec.noise_variance(l);
    Ok(match mode {
        Mode::Exact => Moments {
            mean: b + a * (lf + 1.0) / 2.0 + mu,
            variance: a * a * (lf * lf - 1.0) / 12.0 + sn2,
        },
        Mode::Approx => Moments {
            mean: a * lf / 2.0 + mu,
            variance: a * a * lf * lf / 12.0 + sn2 + b * b - mu * a * lf,
        },
    })
}

/// `sum_{i=1}^{L} (cos(w i), sin(w i))`.
fn trig_sums(w: f64, l: usize) -> (f64, f64) {
    let lf = l as f64;
    let half = 0.5 * w;
    let s = half.sin();
    if s.abs() < 1e-12 {
        // w is a multiple of 2 pi
        return (lf, 0.0);
    }
    let k = (lf * half).sin() / s;
    let c = (lf + 1.0) * half;
    (k * c.cos(), k * c.sin())
}

pub fn seasonal_moments(spec: &ResidualSignalSpec, l: usize, mode: Mode) -> Result<Moments> {
    expect_kind(spec, OracleKind::Seasonal, l)?;
    let Signal::Seasonal { harmonics, delta } = &spec.signal else { unreachable!() };
    let mu = spec.noise_mean;
    let sn2 = spec.noise_variance(l);
    Ok(match mode {
        Mode::Exact => {
            let lf = l as f64;
            let mut sum = 0.0;
            for h in harmonics {
                let (c, s) = trig_sums(h.frequency, l);
                sum += h.cos * c + h.sin * s;
            }
            let mut sq = 0.0;
            for hj in harmonics {
                for hk in harmonics {
                    let (cm, sm) = trig_sums(hj.frequency - hk.frequency, l);
                    let (cp, sp) = trig_sums(hj.frequency + hk.frequency, l);
                    sq += hj.cos * hk.cos * 0.5 * (cm + cp)
                        + hj.sin * hk.sin * 0.5 * (cm - cp)
                        + 2.0 * hj.cos * hk.sin * 0.5 * (sp - sm);
                }
            }
            let m = sum / lf;
            Moments { mean: m + mu, variance: sq / lf - m * m + sn2 }
        }
        Mode::Approx => {
            let amp: f64 = harmonics.iter().map(|h| h.cos * h.cos + h.sin * h.sin).sum();
            let m = delta + mu;
            Moments { mean: m, variance: sn2 + amp - m * m }
        }
    })
}

pub fn offset_moments(spec: &ResidualSignalSpec, l: usize, mode: Mode) -> Result<Moments> {
    expect_kind(spec, OracleKind::Offsets, l)?;
    let Signal::Offsets { steps } = &spec.signal else { unreachable!() };
    let lf = l as f64;
    let mu = spec.noise_mean;
    let sn2 = spec.noise_variance(l);
    Ok(match mode {
        Mode::Exact => {
            // epochs on or after each step
            let counts: Vec<f64> = steps.iter().map(|s| (lf - s.epoch.ceil() + 1.0).clamp(0.0, lf)).collect();
            let sum: f64 = steps.iter().zip(&counts).map(|(s, n)| s.size * n).sum();
            let mut sq = 0.0;
            for (sj, nj) in steps.iter().zip(&counts) {
                for (sk, nk) in steps.iter().zip(&counts) {
                    sq += sj.size * sk.size * nj.min(*nk);
                }
            }
            let m = sum / lf;
            Moments { mean: m + mu, variance: sq / lf - m * m + sn2 }
        }
        Mode::Approx => {
            let g: f64 = steps.iter().filter(|s| lf >= s.epoch).map(|s| s.size).sum();
            let mean = g / lf + mu;
            Moments { mean, variance: sn2 + g * g / lf - mean * mean }
        }
    })
}

pub fn moments(spec: &ResidualSignalSpec, l: usize, mode: Mode) -> Result<Moments> {
    match spec.kind() {
        OracleKind::Trend => trend_moments(spec, l, mode),
        OracleKind::Seasonal => seasonal_moments(spec, l, mode),
        OracleKind::Offsets => offset_moments(spec, l, mode),
    }
}

/// Direct summation over the deterministic part plus the expected noise
/// contribution.
pub fn brute_force_moments(spec: &ResidualSignalSpec, l: usize) -> Result<Moments> {
    spec.validate(l)?;
    let s: Vec<f64> = (1..=l).map(|i| spec.signal_at(i as f64)).collect();
    let m = crate::stats::mean(&s);
    let v = crate::stats::variance_ml(&s);
    Ok(Moments { mean: m + spec.noise_mean, variance: v + spec.noise_variance(l) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonteCarloMoments {
    pub mean: f64,
    pub variance: f64,
    pub mean_se: f64,
    pub variance_se: f64,
}

/// Averages the sample mean and the 1/L variance of `draws` noisy
/// realisations of the series, with their standard errors.
pub fn monte_carlo_moments(spec: &ResidualSignalSpec, l: usize, draws: usize, seed: u64) -> Result<MonteCarloMoments> {
    spec.validate(l)?;
    if draws < 2 {
        return Err(Error::Domain("need at least two draws".into()));
    }
    let det: Vec<f64> = (1..=l).map(|i| spec.signal_at(i as f64)).collect();
    let noise = Normal::new(spec.noise_mean, spec.noise_sigma).map_err(|e| Error::Domain(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = vec![0.0; l];
    let mut means = Vec::with_capacity(draws);
    let mut vars = Vec::with_capacity(draws);
    for _ in 0..draws {
        for (b, d) in buf.iter_mut().zip(&det) {
            *b = d + noise.sample(&mut rng);
        }
        means.push(crate::stats::mean(&buf));
        vars.push(crate::stats::variance_ml(&buf));
    }
    let se = |x: &[f64]| crate::stats::std_dev(x) / (x.len() as f64).sqrt();
    Ok(MonteCarloMoments {
        mean: crate::stats::mean(&means),
        variance: crate::stats::mean(&vars),
        mean_se: se(&means),
        variance_se: se(&vars),
    })
}

pub fn relative_error(x: f64, reference: f64) -> f64 {
    let d = (x - reference).abs();
    if d == 0.0 {
        0.0
    } else {
        d / x.abs().max(reference.abs())
    }
}

/// One line of an oracle comparison.
#[derive(Debug, Clone, Serialize)]
pub struct OracleRow {
    pub kind: OracleKind,
    pub length: usize,
    pub exact_mean: f64,
    pub approx_mean: f64,
    pub brute_mean: f64,
    pub exact_variance: f64,
    pub approx_variance: f64,
    pub brute_variance: f64,
    pub exact_mean_rel_err: f64,
    pub approx_mean_rel_err: f64,
    pub exact_variance_rel_err: f64,
    pub approx_variance_rel_err: f64,
    /// Exact variance at `2L` over exact variance at `L`.
    pub variance_growth_2x: f64,
}

pub fn compare(spec: &ResidualSignalSpec, l: usize) -> Result<OracleRow> {
    let e = moments(spec, l, Mode::Exact)?;
    let a = moments(spec, l, Mode::Approx)?;
    let b = brute_force_moments(spec, l)?;
    let e2 = moments(spec, 2 * l, Mode::Exact)?;
    Ok(OracleRow {
        kind: spec.kind(),
        length: l,
        exact_mean: e.mean,
        approx_mean: a.mean,
        brute_mean: b.mean,
        exact_variance: e.variance,
        approx_variance: a.variance,
        brute_variance: b.variance,
        exact_mean_rel_err: relative_error(e.mean, b.mean),
        approx_mean_rel_err: relative_error(a.mean, b.mean),
        exact_variance_rel_err: relative_error(e.variance, b.variance),
        approx_variance_rel_err: relative_error(a.variance, b.variance),
        variance_growth_2x: e2.variance / e.variance,
    })
}

/// Default specs for a grid check at length `l`: a 1 mm/yr trend, annual plus
/// semi-annual residual harmonics, and two sub-millimetre offsets placed at
/// fixed fractions of the span.
pub fn default_specs(l: usize) -> Vec<ResidualSignalSpec> {
    let w = 2.0 * std::f64::consts::PI / DAYS_PER_YEAR;
    let (mu, sigma) = (0.2, 1.6);
    let lf = l as f64;
    vec![
        ResidualSignalSpec::trend(1.0, 0.5, mu, sigma),
        ResidualSignalSpec {
            signal: Signal::Seasonal {
                harmonics: vec![
                    Harmonic { frequency: w, cos: 0.1, sin: 0.05 },
                    Harmonic { frequency: 2.0 * w, cos: 0.02, sin: 0.01 },
                ],
                delta: 0.0,
            },
            noise_mean: mu,
            noise_sigma: sigma,
        },
        ResidualSignalSpec {
            signal: Signal::Offsets {
                steps: vec![
                    Step { epoch: (0.5 * lf).max(1.0).round(), size: 0.5 },
                    Step { epoch: (0.8 * lf).max(1.0).round(), size: -0.3 },
                ],
            },
            noise_mean: mu,
            noise_sigma: sigma,
        },
    ]
}

pub fn default_grid(lengths: &[usize]) -> Result<Vec<OracleRow>> {
    let mut rows = Vec::new();
    for &l in lengths {
        for spec in default_specs(l) {
            rows.push(compare(&spec, l)?);
        }
    }
    Ok(rows)
}
