//! Monte-Carlo ensembles of simulated series run through the N-step
//! classifier, and the per-step statistics drawn from them.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{gen_scenario, NoiseKind, Scenario, SimulatedSeries, DAYS_PER_YEAR};
use crate::nstep::{run_nstep, ClassificationReport, LevyClass, NStepConfig};

/// Seed of replicate `index` derived from `master` (splitmix64 finaliser).
pub fn replicate_seed(master: u64, index: usize) -> u64 {
    let mut z = master.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct CampaignConfig {
    pub scenario: Scenario,
    pub beta: f64,
    pub replicates: usize,
    pub length: usize,
    pub seed: u64,
    pub kind: NoiseKind,
    pub nstep: NStepConfig,
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Domain("replicate count must be at least 1".into()));
        }
        self.nstep.thresholds.validate()
    }
}

/// Simulates `replicates` independent series. Output order follows the
/// replicate index whatever the thread schedule.
pub fn simulate_ensemble(
    scenario: Scenario,
    beta: f64,
    length: usize,
    replicates: usize,
    seed: u64,
) -> Result<Vec<SimulatedSeries>> {
    if replicates == 0 {
        return Err(Error::Domain("replicate count must be at least 1".into()));
    }
    (0..replicates)
        .into_par_iter()
        .map(|i| gen_scenario(scenario, beta, length, replicate_seed(seed, i)))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub index: usize,
    pub seed: u64,
    pub truth: SimulatedSeries,
    pub report: Option<ClassificationReport>,
    /// Set when the whole N-step run failed.
    pub error: Option<String>,
}

/// Mean and spread of the variation curves at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step_offset_yr: f64,
    pub functional_pct_mean: f64,
    pub functional_pct_std: f64,
    pub stochastic_pct_mean: f64,
    pub stochastic_pct_std: f64,
    pub n_functional: usize,
    pub n_stochastic: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub replicates: usize,
    pub failed: usize,
    pub mean_arma_fit_error: Option<f64>,
    pub mean_farima_fit_error: Option<f64>,
    pub mean_corr_normal: Option<f64>,
    pub mean_corr_levy: Option<f64>,
    pub class_counts: BTreeMap<String, usize>,
    pub unclassified: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CampaignResult {
    pub outcomes: Vec<ReplicateOutcome>,
    pub curve: Vec<CurvePoint>,
    pub summary: EnsembleSummary,
}

pub fn run_ensemble(series: Vec<SimulatedSeries>, kind: NoiseKind, cfg: &NStepConfig) -> CampaignResult {
    let outcomes: Vec<ReplicateOutcome> = series
        .into_par_iter()
        .enumerate()
        .map(|(index, truth)| {
            let (report, error) = match run_nstep(&truth.series, kind, cfg) {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            ReplicateOutcome { index, seed: truth.seed, truth, report, error }
        })
        .collect();
    let reports: Vec<&ClassificationReport> = outcomes.iter().filter_map(|o| o.report.as_ref()).collect();
    let curve = variation_curve(&reports, &cfg.steps_days);
    let summary = summarize(&reports, outcomes.len() - reports.len());
    CampaignResult { outcomes, curve, summary }
}

pub fn run_campaign(cfg: &CampaignConfig) -> Result<CampaignResult> {
    cfg.validate()?;
    let series = simulate_ensemble(cfg.scenario, cfg.beta, cfg.length, cfg.replicates, cfg.seed)?;
    Ok(run_ensemble(series, cfg.kind, &cfg.nstep))
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    match x.len() {
        0 => (f64::NAN, f64::NAN),
        1 => (x[0], f64::NAN),
        _ => (crate::stats::mean(x), crate::stats::std_dev(x)),
    }
}

/// Per-step mean and standard deviation of the functional and stochastic
/// variation curves, skipping windows that did not converge.
pub fn variation_curve(reports: &[&ClassificationReport], steps_days: &[f64]) -> Vec<CurvePoint> {
    steps_days
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let pick = |f: fn(&ClassificationReport) -> &Vec<Option<f64>>| -> Vec<f64> {
                reports.iter().filter_map(|r| f(r).get(i).copied().flatten()).collect()
            };
            let fv = pick(|r| &r.variations.functional_curve);
            let sv = pick(|r| &r.variations.stochastic_curve);
            let (fm, fs) = mean_std(&fv);
            let (sm, ss) = mean_std(&sv);
            CurvePoint {
                step_offset_yr: d / DAYS_PER_YEAR,
                functional_pct_mean: fm,
                functional_pct_std: fs,
                stochastic_pct_mean: sm,
                stochastic_pct_std: ss,
                n_functional: fv.len(),
                n_stochastic: sv.len(),
            }
        })
        .collect()
}

fn mean_of(v: Vec<f64>) -> Option<f64> {
    (!v.is_empty()).then(|| crate::stats::mean(&v))
}

/// Ensemble means over successful reports; `failed` counts runs that
/// produced none.
pub fn summarize(reports: &[&ClassificationReport], failed: usize) -> EnsembleSummary {
    let mut class_counts = BTreeMap::new();
    for c in [LevyClass::GaussianLevy, LevyClass::FractionalLevy, LevyClass::StableLevy] {
        class_counts.insert(c.to_string(), 0);
    }
    let mut unclassified = 0;
    for r in reports {
        match r.levy_class {
            Some(c) => *class_counts.entry(c.to_string()).or_insert(0) += 1,
            None => unclassified += 1,
        }
    }
    let mem = |f: fn(&crate::memory::BicSelection) -> f64| {
        mean_of(reports.iter().filter_map(|r| r.memory_model.as_ref()).map(f).filter(|v| v.is_finite()).collect())
    };
    let corr = |f: fn(&crate::nstep::Correlations) -> f64| {
        mean_of(reports.iter().filter_map(|r| r.distribution.correlations.as_ref()).map(f).collect())
    };
    EnsembleSummary {
        replicates: reports.len() + failed,
        failed,
        mean_arma_fit_error: mem(|m| m.arma.fit_error),
        mean_farima_fit_error: mem(|m| m.farima.fit_error),
        mean_corr_normal: corr(|c| c.normal),
        mean_corr_levy: corr(|c| c.levy),
        class_counts,
        unclassified,
    }
}
