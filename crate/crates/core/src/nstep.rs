//! The N-step procedure: fit nested windows that grow by up to one year,
//! measure how much the functional and stochastic estimates move, and
//! classify the residual driver as a Gaussian, fractional or stable Levy
//! process.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functional::FunctionalParams;
use crate::memory::{select_bic, BicSelection};
use crate::mle::{fit_stochastic, FitConfig, StochasticFit, StochasticResult};
use crate::noise::NoiseKind;
use crate::series::{TimeSeries, WINDOW_YEAR_DAYS};
use crate::stable::{dist_correlation, fit_normal, fit_stable_ml, stable_correlation, NormalFit, StableParams};
use crate::stats;

/// Window end offsets as fractions of a year.
pub const DEFAULT_STEP_FRACTIONS: [f64; 6] = [0.0, 0.3, 0.5, 0.7, 0.8, 1.0];

/// Parameters below this magnitude in the reference window are left out of
/// variation percentages.
pub const VARIATION_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Largest variation (%) still counted as "little difference".
    pub gaussian_pct: f64,
    /// Variation (%) above which the process is taken as stable.
    pub stable_pct: f64,
    /// Stable index below which tails count as heavy...
    pub heavy_alpha: f64,
    /// ...provided the stable law correlates better than the Normal by more
    /// than this margin.
    pub corr_margin: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { gaussian_pct: 3.0, stable_pct: 20.0, heavy_alpha: 1.9, corr_margin: 0.02 }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gaussian_pct >= 0.0
            && self.gaussian_pct < self.stable_pct
            && self.stable_pct.is_finite()
            && self.heavy_alpha > 0.0
            && self.heavy_alpha <= 2.0
            && (-1.0..=1.0).contains(&self.corr_margin);
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "thresholds need 0 <= gaussian_pct < stable_pct, heavy_alpha in (0, 2], corr_margin in [-1, 1]; got {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LevyClass {
    GaussianLevy,
    FractionalLevy,
    StableLevy,
}

impl std::fmt::Display for LevyClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LevyClass::GaussianLevy => "GaussianLevy",
            LevyClass::FractionalLevy => "FractionalLevy",
            LevyClass::StableLevy => "StableLevy",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistributionVerdict {
    Gaussian,
    LevyStable,
}

/// Which windows get the (costly) distribution or memory-model fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scope {
    None,
    First,
    All,
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(Scope::None),
            "first" => Ok(Scope::First),
            "all" => Ok(Scope::All),
            other => Err(Error::Domain(format!("unknown scope '{other}' (none, first, all)"))),
        }
    }
}

impl Scope {
    fn covers(self, index: usize) -> bool {
        match self {
            Scope::None => false,
            Scope::First => index == 0,
            Scope::All => true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NStepConfig {
    /// Window end offsets in days, each within `[0, 365]`.
    pub steps_days: Vec<f64>,
    pub fit: FitConfig,
    pub thresholds: Thresholds,
    pub distributions: Scope,
    pub memory: Scope,
    /// Start later windows from the first window's optimum with a single
    /// simplex start.
    pub warm_start: bool,
}

impl Default for NStepConfig {
    fn default() -> Self {
        Self {
            steps_days: DEFAULT_STEP_FRACTIONS.iter().map(|f| f * WINDOW_YEAR_DAYS).collect(),
            fit: FitConfig::default(),
            thresholds: Thresholds::default(),
            distributions: Scope::All,
            memory: Scope::All,
            warm_start: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub std: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlations {
    pub normal: f64,
    pub levy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowFitRecord {
    pub end_offset_days: f64,
    pub n_obs: usize,
    pub last_epoch: f64,
    pub functional: FunctionalParams,
    pub functional_names: Vec<String>,
    pub functional_sigma: Vec<f64>,
    pub stochastic: StochasticFit,
    pub residuals: ResidualSummary,
    pub stable: Option<StableParams>,
    pub normal: Option<NormalFit>,
    pub correlations: Option<Correlations>,
    pub memory: Option<BicSelection>,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesMeta {
    pub n_epochs: usize,
    pub first_epoch: f64,
    pub last_epoch: f64,
    pub dt_days: f64,
    pub gaps: usize,
    pub header: Vec<String>,
    pub noise_model: NoiseKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variations {
    /// `V_F` between the reference and compared windows (%).
    pub functional_pct: Option<f64>,
    /// `V_G` between the reference and compared windows (%).
    pub stochastic_pct: Option<f64>,
    /// Class bands are applied to the larger of the two.
    pub rule: String,
    pub reference_step: Option<usize>,
    pub compared_step: Option<usize>,
    /// Variation of every window against the reference window, by step.
    pub functional_curve: Vec<Option<f64>>,
    pub stochastic_curve: Vec<Option<f64>>,
    /// Per-parameter `100 |Δθ_j| / |θ_j|` by step.
    pub functional_per_parameter: Vec<Vec<f64>>,
    pub stochastic_per_parameter: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub normal: Option<NormalFit>,
    pub stable: Option<StableParams>,
    pub correlations: Option<Correlations>,
    pub heavy_tail: Option<bool>,
    pub verdict: Option<DistributionVerdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub series_meta: SeriesMeta,
    pub steps: Vec<WindowFitRecord>,
    pub variations: Variations,
    pub distribution: DistributionSummary,
    pub memory_model: Option<BicSelection>,
    pub levy_class: Option<LevyClass>,
    pub thresholds: Thresholds,
    pub flags: Vec<String>,
}

/// `100 Σ|θ_N − θ_1| / Σ|θ_1|`, skipping parameters with `|θ_1|` below
/// [`VARIATION_FLOOR`].
pub fn variation_pct(first: &[f64], last: &[f64]) -> Result<f64> {
    if first.len() != last.len() {
        return Err(Error::Domain(format!(
            "parameter vectors differ in length ({} vs {})",
            first.len(),
            last.len()
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in first.iter().zip(last) {
        if a.abs() < VARIATION_FLOOR {
            continue;
        }
        num += (b - a).abs();
        den += a.abs();
    }
    if den == 0.0 {
        return Err(Error::Domain("all reference parameters are zero".into()));
    }
    Ok(100.0 * num / den)
}

fn per_parameter_pct(first: &[f64], last: &[f64]) -> Vec<f64> {
    first
        .iter()
        .zip(last)
        .map(|(a, b)| if a.abs() < VARIATION_FLOOR { 0.0 } else { 100.0 * (b - a).abs() / a.abs() })
        .collect()
}

/// Inputs of [`classify`]; any `None` is reported as missing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassifyInputs {
    pub stochastic_pct: Option<f64>,
    pub functional_pct: Option<f64>,
    pub alpha: Option<f64>,
    pub corr_levy: Option<f64>,
    pub corr_normal: Option<f64>,
}

/// Heavy tails: small stable index and a stable law that tracks the
/// histogram better than the Normal.
pub fn heavy_tail(alpha: f64, corr_levy: f64, corr_normal: f64, th: &Thresholds) -> bool {
    alpha < th.heavy_alpha && corr_levy - corr_normal > th.corr_margin
}

/// Decision table:
/// StableLevy if `max(V_G, V_F) > stable_pct` or tails are heavy;
/// GaussianLevy if `max(V_G, V_F) <= gaussian_pct`; FractionalLevy otherwise.
pub fn classify(inputs: &ClassifyInputs, th: &Thresholds) -> Result<LevyClass> {
    let mut missing = Vec::new();
    if inputs.stochastic_pct.is_none() {
        missing.push("stochastic_pct");
    }
    if inputs.functional_pct.is_none() {
        missing.push("functional_pct");
    }
    if inputs.alpha.is_none() {
        missing.push("alpha");
    }
    if inputs.corr_levy.is_none() {
        missing.push("corr_levy");
    }
    if inputs.corr_normal.is_none() {
        missing.push("corr_normal");
    }
    let (Some(vg), Some(vf), Some(alpha), Some(cl), Some(cn)) =
        (inputs.stochastic_pct, inputs.functional_pct, inputs.alpha, inputs.corr_levy, inputs.corr_normal)
    else {
        return Err(Error::MissingInputs(missing));
    };
    let v = vg.max(vf);
    let heavy = heavy_tail(alpha, cl, cn, th);
    Ok(if v > th.stable_pct || heavy {
        LevyClass::StableLevy
    } else if v <= th.gaussian_pct {
        LevyClass::GaussianLevy
    } else {
        LevyClass::FractionalLevy
    })
}

struct DistFits {
    stable: StableParams,
    normal: NormalFit,
    correlations: Correlations,
}

fn distribution_fits(residuals: &[f64]) -> Result<DistFits> {
    let normal = fit_normal(residuals)?;
    let stable = fit_stable_ml(residuals)?.params;
    let corr_normal = dist_correlation(residuals, |xs| normal.pdf(xs))?;
    let corr_levy = stable_correlation(residuals, &stable)?;
    Ok(DistFits { stable, normal, correlations: Correlations { normal: corr_normal, levy: corr_levy } })
}

fn window_record(
    index: usize,
    offset: f64,
    window: &TimeSeries,
    fitted: StochasticResult,
    cfg: &NStepConfig,
) -> WindowFitRecord {
    let r = fitted.residuals.values();
    let mut flags = Vec::new();
    if !fitted.fit.converged {
        flags.push(format!("step {index} (offset {offset} d): stochastic fit did not converge"));
    }
    let dist = if cfg.distributions.covers(index) {
        match distribution_fits(r) {
            Ok(d) => Some(d),
            Err(e) => {
                flags.push(format!("step {index}: distribution fit failed: {e}"));
                None
            }
        }
    } else {
        None
    };
    let memory = if cfg.memory.covers(index) {
        match select_bic(r, fitted.fit.beta / 2.0) {
            Ok(m) => {
                if !(m.arma.converged && m.farima.converged) {
                    flags.push(format!("step {index}: memory-model search hit its evaluation limit"));
                }
                Some(m)
            }
            Err(e) => {
                flags.push(format!("step {index}: memory-model selection failed: {e}"));
                None
            }
        }
    } else {
        None
    };
    WindowFitRecord {
        end_offset_days: offset,
        n_obs: window.len(),
        last_epoch: window.last_epoch(),
        functional: fitted.functional,
        functional_names: fitted.names,
        functional_sigma: fitted.functional_sigma,
        stochastic: fitted.fit,
        residuals: ResidualSummary {
            std: stats::std_dev(r),
            skewness: stats::skewness(r),
            excess_kurtosis: stats::excess_kurtosis(r),
        },
        stable: dist.as_ref().map(|d| d.stable),
        normal: dist.as_ref().map(|d| d.normal),
        correlations: dist.as_ref().map(|d| d.correlations),
        memory,
        flags,
    }
}

/// Runs the N-step procedure on `ts`.
///
/// Window fits that fail to converge are flagged and excluded; variations
/// then compare the first and last converged windows and the report carries
/// a degraded-confidence flag.
pub fn run_nstep(ts: &TimeSeries, kind: NoiseKind, cfg: &NStepConfig) -> Result<ClassificationReport> {
    cfg.thresholds.validate()?;
    if cfg.steps_days.is_empty() {
        return Err(Error::Domain("at least one step offset is required".into()));
    }
    if cfg.steps_days.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Domain("step offsets must be nondecreasing".into()));
    }
    let windows: Vec<TimeSeries> = cfg.steps_days.iter().map(|&o| ts.slice_window(o)).collect::<Result<_>>()?;

    let first = fit_stochastic(&windows[0], kind, &cfg.fit)?;
    let mut later_cfg = cfg.fit.clone();
    if cfg.warm_start {
        later_cfg.warm_start = Some(first.fit.shape(ts.dt()));
        later_cfg.restarts = 1;
    }
    let rest: Vec<Result<StochasticResult>> =
        windows[1..].par_iter().map(|w| fit_stochastic(w, kind, &later_cfg)).collect();
    let fits: Vec<StochasticResult> =
        std::iter::once(Ok(first)).chain(rest).collect::<Result<Vec<_>>>()?;

    let steps: Vec<WindowFitRecord> = fits
        .into_par_iter()
        .enumerate()
        .map(|(i, f)| window_record(i, cfg.steps_days[i], &windows[i], f, cfg))
        .collect();

    let mut flags: Vec<String> = steps.iter().flat_map(|s| s.flags.iter().cloned()).collect();
    let converged: Vec<usize> = (0..steps.len()).filter(|&i| steps[i].stochastic.converged).collect();
    let reference = converged.first().copied();
    let compared = converged.last().copied();
    if converged.len() < steps.len() {
        flags.push(format!(
            "degraded confidence: {} of {} windows converged",
            converged.len(),
            steps.len()
        ));
    }

    let theta1 = |i: usize| steps[i].functional.to_vec();
    // an unidentified beta carries no information, so it is left out of any
    // comparison that involves it
    let theta2_pair = |r: usize, i: usize| {
        let (mut a, mut b) = (steps[r].stochastic.params(), steps[i].stochastic.params());
        if !(steps[r].stochastic.beta_identified && steps[i].stochastic.beta_identified) {
            a.truncate(2);
            b.truncate(2);
        }
        (a, b)
    };
    let mut variations = Variations {
        functional_pct: None,
        stochastic_pct: None,
        rule: "max(functional_pct, stochastic_pct)".into(),
        reference_step: reference,
        compared_step: compared,
        functional_curve: vec![None; steps.len()],
        stochastic_curve: vec![None; steps.len()],
        functional_per_parameter: Vec::new(),
        stochastic_per_parameter: Vec::new(),
    };
    if let Some(r) = reference {
        for i in 0..steps.len() {
            variations.functional_curve[i] = variation_pct(&theta1(r), &theta1(i)).ok();
            let (t2r, t2i) = theta2_pair(r, i);
            variations.stochastic_curve[i] = variation_pct(&t2r, &t2i).ok();
            variations.functional_per_parameter.push(per_parameter_pct(&theta1(r), &theta1(i)));
            let mut pp = per_parameter_pct(&steps[r].stochastic.params(), &steps[i].stochastic.params());
            if t2r.len() < pp.len() {
                pp[2] = f64::NAN;
            }
            variations.stochastic_per_parameter.push(pp);
        }
        if let Some(c) = compared.filter(|&c| c != r) {
            variations.functional_pct = variations.functional_curve[c];
            variations.stochastic_pct = variations.stochastic_curve[c];
        } else {
            flags.push("fewer than two converged windows: variations unavailable".into());
        }
    } else {
        flags.push("no window converged".into());
    }

    let dist_window = reference.and_then(|r| (r..steps.len()).find(|&i| steps[i].correlations.is_some()));
    let mut distribution =
        DistributionSummary { normal: None, stable: None, correlations: None, heavy_tail: None, verdict: None };
    if let Some(i) = dist_window {
        let s = &steps[i];
        let (stable, corr) = (s.stable.expect("fitted with correlations"), s.correlations.expect("checked"));
        let heavy = heavy_tail(stable.alpha, corr.levy, corr.normal, &cfg.thresholds);
        distribution = DistributionSummary {
            normal: s.normal,
            stable: Some(stable),
            correlations: Some(corr),
            heavy_tail: Some(heavy),
            verdict: Some(if heavy { DistributionVerdict::LevyStable } else { DistributionVerdict::Gaussian }),
        };
    }
    let memory_model = reference
        .and_then(|r| (r..steps.len()).find_map(|i| steps[i].memory.clone()))
        .or_else(|| steps.iter().find_map(|s| s.memory.clone()));

    let inputs = ClassifyInputs {
        stochastic_pct: variations.stochastic_pct,
        functional_pct: variations.functional_pct,
        alpha: distribution.stable.map(|s| s.alpha),
        corr_levy: distribution.correlations.map(|c| c.levy),
        corr_normal: distribution.correlations.map(|c| c.normal),
    };
    let levy_class = match classify(&inputs, &cfg.thresholds) {
        Ok(c) => Some(c),
        Err(e) => {
            flags.push(format!("classification not possible: {e}"));
            None
        }
    };

    Ok(ClassificationReport {
        series_meta: SeriesMeta {
            n_epochs: ts.len(),
            first_epoch: ts.first_epoch(),
            last_epoch: ts.last_epoch(),
            dt_days: ts.dt(),
            gaps: ts.gap_count(),
            header: ts.header().to_vec(),
            noise_model: kind,
        },
        steps,
        variations,
        distribution,
        memory_model,
        levy_class,
        thresholds: cfg.thresholds,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(vg: f64, vf: f64, alpha: f64, cl: f64, cn: f64) -> ClassifyInputs {
        ClassifyInputs {
            stochastic_pct: Some(vg),
            functional_pct: Some(vf),
            alpha: Some(alpha),
            corr_levy: Some(cl),
            corr_normal: Some(cn),
        }
    }

    #[test]
    fn variation_examples() {
        assert_eq!(variation_pct(&[1.0, -2.0], &[1.0, -2.0]).unwrap(), 0.0);
        assert!((variation_pct(&[2.0], &[2.06]).unwrap() - 3.0).abs() < 1e-12);
        assert!((variation_pct(&[1.0, 3.0], &[1.2, 3.6]).unwrap() - 20.0).abs() < 1e-12);
        // zero reference entries drop out of both sums
        assert!((variation_pct(&[0.0, 2.0], &[5.0, 2.06]).unwrap() - 3.0).abs() < 1e-12);
        assert!(variation_pct(&[0.0, 0.0], &[1.0, 1.0]).is_err());
        assert!(variation_pct(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn table_columns() {
        let th = Thresholds::default();
        assert_eq!(classify(&inputs(1.0, 2.0, 1.98, 0.93, 0.93), &th).unwrap(), LevyClass::GaussianLevy);
        assert_eq!(classify(&inputs(8.0, 15.0, 1.95, 0.93, 0.93), &th).unwrap(), LevyClass::FractionalLevy);
        assert_eq!(classify(&inputs(30.0, 1.0, 1.98, 0.93, 0.93), &th).unwrap(), LevyClass::StableLevy);
        assert_eq!(classify(&inputs(1.0, 1.0, 1.4, 0.96, 0.89), &th).unwrap(), LevyClass::StableLevy);
    }

    #[test]
    fn low_alpha_without_margin_is_not_heavy() {
        let th = Thresholds::default();
        assert_eq!(classify(&inputs(1.0, 1.0, 1.4, 0.90, 0.89), &th).unwrap(), LevyClass::GaussianLevy);
    }

    #[test]
    fn missing_inputs_are_listed() {
        let mut i = inputs(1.0, 1.0, 1.9, 0.9, 0.9);
        i.alpha = None;
        i.corr_normal = None;
        match classify(&i, &Thresholds::default()) {
            Err(Error::MissingInputs(m)) => assert_eq!(m, vec!["alpha", "corr_normal"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn thresholds_validated() {
        let bad = Thresholds { gaussian_pct: 25.0, ..Thresholds::default() };
        assert!(bad.validate().is_err());
        assert!(Thresholds::default().validate().is_ok());
    }

    #[test]
    fn scope_parsing() {
        assert_eq!("First".parse::<Scope>().unwrap(), Scope::First);
        assert!("sometimes".parse::<Scope>().is_err());
    }
}
