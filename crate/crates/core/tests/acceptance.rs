//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.
//!
//! Ensemble sizes can be raised with `ACCEPTANCE_REPLICATES` (scenario
//! ensembles) and `ACCEPTANCE_SEEDS` (per-seed checks).

use std::f64::consts::PI;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use mixspec::campaign::{replicate_seed, run_campaign, CampaignConfig, CampaignResult};
use mixspec::memory::{exact_log_likelihood, fit_arma, fit_farima, pacf_to_coeffs, select_bic, state_space_log_likelihood};
use mixspec::mle::{fit_stochastic, FitConfig};
use mixspec::noise::{gen_noise, gen_scenario, pl_filter, NoiseKind, NoiseModelSpec, Scenario};
use mixspec::nstep::{classify, run_nstep, ClassifyInputs, LevyClass, NStepConfig, Scope, Thresholds};
use mixspec::oracles::{compare, default_grid, ResidualSignalSpec};
use mixspec::series::{parse_offsets, parse_series};
use mixspec::stable::{fit_stable_ml, sample_stable, stable_pdf, StableParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{num_complex::Complex, FftPlanner};

const MASTER_SEED: u64 = 20_240_611;

struct Outcome {
    pass: bool,
    detail: String,
}

fn env_count(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0).unwrap_or(default)
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn median(x: &[f64]) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn campaign(scenario: Scenario, beta: f64, replicates: usize, steps_days: Option<Vec<f64>>, dist: Scope) -> CampaignResult {
    let mut nstep = NStepConfig { memory: Scope::First, distributions: dist, ..NStepConfig::default() };
    if let Some(s) = steps_days {
        nstep.steps_days = s;
    }
    let cfg = CampaignConfig {
        scenario,
        beta,
        replicates,
        length: 3650,
        seed: MASTER_SEED ^ (beta * 1000.0) as u64 ^ scenario as u64,
        kind: NoiseKind::PowerLawWhite,
        nstep,
    };
    run_campaign(&cfg).expect("campaign config is valid")
}

struct Ensembles {
    a: CampaignResult,
    c: CampaignResult,
    c15: CampaignResult,
    a_seconds_per_replicate: f64,
}

fn criterion_1(e: &Ensembles) -> Outcome {
    let a_ok = e.a.curve.iter().all(|p| p.functional_pct_mean <= 6.0 && p.stochastic_pct_mean <= 6.0);
    let last = e.c.curve.last().unwrap();
    let c_ok = last.functional_pct_mean >= 15.0;
    let minutes_50 = e.a_seconds_per_replicate * 50.0 / 60.0;
    let fmt = |r: &CampaignResult, f: fn(&mixspec::campaign::CurvePoint) -> f64| {
        r.curve.iter().map(|p| format!("{:.2}", f(p))).collect::<Vec<_>>().join(" ")
    };
    Outcome {
        pass: a_ok && c_ok && minutes_50 <= 30.0,
        detail: format!(
            "A V_F [{}] V_G [{}] (<= 6); C V_F at 1 yr {:.2} (>= 15), C V_G at 1 yr {:.2}; {} replicates each; \
             50-replicate runtime estimate {:.1} min on one core (<= 30)",
            fmt(&e.a, |p| p.functional_pct_mean),
            fmt(&e.a, |p| p.stochastic_pct_mean),
            last.functional_pct_mean,
            last.stochastic_pct_mean,
            e.a.summary.replicates,
            minutes_50
        ),
    }
}

fn criterion_2(e: &Ensembles) -> Outcome {
    let errs = |r: &CampaignResult| {
        (r.summary.mean_arma_fit_error.unwrap_or(f64::NAN), r.summary.mean_farima_fit_error.unwrap_or(f64::NAN))
    };
    let (aa, af) = errs(&e.a);
    let (ca, cf) = errs(&e.c);
    let (da, df) = errs(&e.c15);
    let pass = aa < af && cf < ca && df < da && (1.2..=1.7).contains(&aa);
    Outcome {
        pass,
        detail: format!(
            "A arma {aa:.4} farima {af:.4}; C(1.1) arma {ca:.4} farima {cf:.4}; C(1.5) arma {da:.4} farima {df:.4} \
             ({} replicates)",
            e.c15.summary.replicates
        ),
    }
}

fn criterion_3(e: &Ensembles) -> Outcome {
    let corr = |r: &CampaignResult| {
        (r.summary.mean_corr_levy.unwrap_or(f64::NAN), r.summary.mean_corr_normal.unwrap_or(f64::NAN))
    };
    let (cl, cn) = corr(&e.c);
    let (al, an) = corr(&e.a);
    Outcome {
        pass: cl >= cn + 0.03 && (al - an).abs() <= 0.05,
        detail: format!("C levy {cl:.4} normal {cn:.4} (need +0.03); A levy {al:.4} normal {an:.4} (need |diff| <= 0.05)"),
    }
}

fn criterion_4(seeds: usize) -> Outcome {
    let scale = 1.7;
    let xs: Vec<f64> = (0..=1200).map(|i| -6.0 * scale + 12.0 * scale * i as f64 / 1200.0).collect();
    let gauss = stable_pdf(&xs, &StableParams::new(2.0, 0.0, scale, 0.0).unwrap()).unwrap();
    let var = 2.0 * scale * scale;
    let g_err = xs
        .iter()
        .zip(&gauss)
        .map(|(x, p)| (p - (-x * x / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()).abs())
        .fold(0.0, f64::max);
    let cauchy = stable_pdf(&xs, &StableParams::new(1.0, 0.0, scale, 0.0).unwrap()).unwrap();
    let c_err = xs
        .iter()
        .zip(&cauchy)
        .map(|(x, p)| (p - 1.0 / (PI * scale * (1.0 + (x / scale).powi(2)))).abs())
        .fold(0.0, f64::max);

    let mut hits = Vec::new();
    for (ai, alpha) in [1.2, 1.5, 1.8].into_iter().enumerate() {
        let mut ok = 0;
        for s in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(replicate_seed(MASTER_SEED + ai as u64, s));
            let x: Vec<f64> = (0..5000).map(|_| sample_stable(alpha, 0.0, &mut rng)).collect();
            if let Ok(f) = fit_stable_ml(&x) {
                ok += usize::from((f.params.alpha - alpha).abs() <= 0.1);
            }
        }
        hits.push((alpha, ok));
    }
    let majority = hits.iter().all(|&(_, ok)| 2 * ok > seeds);
    Outcome {
        pass: g_err <= 1e-6 && c_err <= 1e-6 && majority,
        detail: format!(
            "alpha=2 sup err {g_err:.2e}; cauchy sup err {c_err:.2e}; round trip within 0.1: {} of {seeds} seeds",
            hits.iter().map(|(a, k)| format!("alpha {a}: {k}")).collect::<Vec<_>>().join(", ")
        ),
    }
}

/// Least-squares slope of log periodogram against log(2 sin(w/2)) over the
/// positive Fourier frequencies below a quarter of the sampling rate.
fn periodogram_slope(x: &[f64], planner: &mut FftPlanner<f64>) -> f64 {
    let n = x.len();
    let m = mean(x);
    let mut buf: Vec<Complex<f64>> = x.iter().map(|v| Complex::new(v - m, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    let (mut lx, mut ly) = (Vec::new(), Vec::new());
    for (j, c) in buf.iter().enumerate().take(n / 4).skip(1) {
        let w = 2.0 * PI * j as f64 / n as f64;
        lx.push((2.0 * (w / 2.0).sin()).ln());
        ly.push(c.norm_sqr().ln());
    }
    let (mx, my) = (mean(&lx), mean(&ly));
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

fn criterion_5(seeds: usize) -> Outcome {
    let n = 1 << 14;
    let mut planner = FftPlanner::new();
    let mut ok = true;
    let mut parts = Vec::new();
    for (bi, beta) in [0.5, 1.0, 1.5, 2.0].into_iter().enumerate() {
        let spec = NoiseModelSpec::power_law(0.0, 1.0, beta).unwrap();
        let slopes: Vec<f64> = (0..seeds)
            .map(|s| {
                let ts = gen_noise(&spec, n, replicate_seed(MASTER_SEED + 100 + bi as u64, s)).unwrap();
                periodogram_slope(ts.values(), &mut planner)
            })
            .collect();
        let m = mean(&slopes);
        ok &= (m + beta).abs() <= 0.1;
        parts.push(format!("beta {beta}: {m:.3}"));
    }

    // filter coefficients against a direct product of the recursion factors
    let mut filter_ok = true;
    for beta in [0.0, 0.5, 1.0, 1.1, 1.5, 2.0, 2.7] {
        let h = pl_filter(beta, 2000);
        let d = beta / 2.0;
        let mut expect = 1.0;
        for (k, hk) in h.iter().enumerate() {
            if k > 0 {
                expect = expect * (d + k as f64 - 1.0) / k as f64;
            }
            filter_ok &= *hk == expect;
        }
    }
    Outcome {
        pass: ok && filter_ok,
        detail: format!("mean slopes over {seeds} seeds [{}] (need -beta +- 0.1); filter recursion exact: {filter_ok}", parts.join(", ")),
    }
}

fn criterion_6(replicates: usize) -> Outcome {
    let mut betas = Vec::new();
    let mut whites = Vec::new();
    let mut identified = Vec::new();
    let mut failed = 0;
    for i in 0..replicates {
        let sim = gen_scenario(Scenario::B, 1.1, 3650, replicate_seed(MASTER_SEED + 200, i)).unwrap();
        match fit_stochastic(&sim.series, NoiseKind::PowerLawWhite, &FitConfig::default()) {
            Ok(r) => {
                betas.push(r.fit.beta);
                whites.push(r.fit.a_wh);
                if r.fit.beta_identified {
                    identified.push(r.fit.beta);
                }
            }
            Err(_) => failed += 1,
        }
    }
    let mb = median(&betas);
    let mw = median(&whites);
    Outcome {
        pass: failed == 0 && (mb - 1.1).abs() <= 0.2 && (mw - 1.6).abs() <= 0.16,
        detail: format!(
            "{replicates} replicates, {failed} failed; median beta {mb:.3} (truth 1.1); median a_wh {mw:.4} (truth 1.6); \
             beta identified in {} fits, their median {:.3}",
            identified.len(),
            if identified.is_empty() { f64::NAN } else { median(&identified) }
        ),
    }
}

fn criterion_7(seeds: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(MASTER_SEED + 300);
    let x: Vec<f64> = (0..600).map(|_| 2.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
    let mut ll_err: f64 = 0.0;
    for (ar_r, ma_r) in [(vec![0.6], vec![]), (vec![0.3, -0.4], vec![0.5]), (vec![], vec![-0.7, 0.2])] {
        let ar = pacf_to_coeffs(&ar_r);
        let ma: Vec<f64> = pacf_to_coeffs(&ma_r).iter().map(|c| -c).collect();
        let a = exact_log_likelihood(&x, &ar, &ma, 0.0).unwrap();
        let b = state_space_log_likelihood(&x, &ar, &ma).unwrap();
        ll_err = ll_err.max((a - b).abs() / a.abs().max(1.0));
    }
    let fa = fit_arma(&x, 1, 1, 0.0).unwrap();
    let ff = fit_farima(&x, 1, 1, 0.0).unwrap();
    let fit_err = (fa.log_likelihood - ff.log_likelihood).abs() / fa.log_likelihood.abs().max(1.0);

    let mut phi = 0.0;
    let mut e = vec![0.0f64; 4096];
    for i in 0..e.len() {
        let w: f64 = StandardNormal.sample(&mut rng);
        phi = 0.5 * phi + w;
        e[i] = phi;
    }
    let ar1 = fit_arma(&e, 1, 0, 0.0).unwrap();
    let phi_hat = ar1.ar[0];

    let mut zero = 0;
    for s in 0..seeds {
        let mut r = ChaCha8Rng::seed_from_u64(replicate_seed(MASTER_SEED + 301, s));
        let w: Vec<f64> = (0..1000).map(|_| StandardNormal.sample(&mut r)).collect();
        if let Ok(sel) = select_bic(&w, 0.25) {
            zero += usize::from(sel.arma.p == 0 && sel.arma.q == 0);
        }
    }
    let pass = ll_err <= 1e-8 && fit_err <= 1e-8 && (0.45..=0.55).contains(&phi_hat) && zero * 10 >= seeds * 9;
    Outcome {
        pass,
        detail: format!(
            "d=0 likelihood rel diff {ll_err:.2e}, fitted (1,1) rel diff {fit_err:.2e}; AR(1) phi {phi_hat:.4}; \
             white noise picked (0,0) in {zero} of {seeds} seeds"
        ),
    }
}

fn criterion_8() -> Outcome {
    let rows = default_grid(&[10, 100, 1000]).unwrap();
    let worst = rows
        .iter()
        .map(|r| r.exact_mean_rel_err.max(r.exact_variance_rel_err))
        .fold(0.0, f64::max);
    let big = compare(&ResidualSignalSpec::trend(1.0, 0.5, 0.2, 1.6), 100_000).unwrap();
    let growth = big.variance_growth_2x;
    let approx: Vec<String> = rows
        .iter()
        .map(|r| format!("{}@{} {:.1e}", r.kind, r.length, r.approx_variance_rel_err))
        .collect();
    Outcome {
        pass: worst <= 1e-10 && (3.6..=4.4).contains(&growth),
        detail: format!(
            "worst exact rel err {worst:.2e}; trend growth per doubling at L=1e5 {growth:.4}; \
             approx-form variance rel err [{}]",
            approx.join(", ")
        ),
    }
}

fn criterion_9() -> Outcome {
    let th = Thresholds::default();
    let case = |vg: f64, vf: f64, alpha: f64, cl: f64, cn: f64| {
        classify(
            &ClassifyInputs {
                stochastic_pct: Some(vg),
                functional_pct: Some(vf),
                alpha: Some(alpha),
                corr_levy: Some(cl),
                corr_normal: Some(cn),
            },
            &th,
        )
        .unwrap()
    };
    let table = [
        (case(1.0, 2.0, 1.98, 0.92, 0.93), LevyClass::GaussianLevy),
        (case(8.0, 15.0, 1.95, 0.92, 0.93), LevyClass::FractionalLevy),
        (case(30.0, 5.0, 1.95, 0.92, 0.93), LevyClass::StableLevy),
        (case(2.0, 2.0, 1.4, 0.96, 0.89), LevyClass::StableLevy),
    ];
    let table_ok = table.iter().all(|(got, want)| got == want);

    let sim = gen_scenario(Scenario::B, 1.1, 1200, MASTER_SEED + 400).unwrap();
    let cfg = NStepConfig {
        steps_days: vec![0.0, 182.5, 365.0],
        memory: Scope::First,
        distributions: Scope::First,
        ..NStepConfig::default()
    };
    let run = || serde_json::to_string(&run_nstep(&sim.series, NoiseKind::PowerLawWhite, &cfg).unwrap()).unwrap();
    let first = run();
    let second = run();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let pooled = pool.install(run);
    let det = first == second && first == pooled;
    Outcome {
        pass: table_ok && det,
        detail: format!(
            "table columns {:?}; reports identical across reruns and a 3-thread pool: {det}",
            table.iter().map(|t| t.0).collect::<Vec<_>>()
        ),
    }
}

fn criterion_10() -> Outcome {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data");
    let result = (|| -> Result<String, Box<dyn std::error::Error>> {
        let ts = parse_series(BufReader::new(File::open(dir.join("synthetic_station.txt"))?))?;
        let offsets = parse_offsets(BufReader::new(File::open(dir.join("synthetic_station.offsets"))?))?;
        let fit_cfg = FitConfig { offsets, ..FitConfig::default() };
        let fit = fit_stochastic(&ts, NoiseKind::PowerLawWhite, &fit_cfg)?;
        let cfg = NStepConfig { fit: fit_cfg, memory: Scope::First, distributions: Scope::First, ..NStepConfig::default() };
        let rep = run_nstep(&ts, NoiseKind::PowerLawWhite, &cfg)?;
        Ok(format!(
            "{} epochs, {} gaps; rate {:.3} mm/yr, offset {:?}; a_wh {:.3} b_cl {:.3} beta {:.3}; class {:?}",
            rep.series_meta.n_epochs,
            rep.series_meta.gaps,
            fit.functional.rate,
            fit.functional.offsets,
            fit.fit.a_wh,
            fit.fit.b_cl,
            fit.fit.beta,
            rep.levy_class
        ))
    })();
    match result {
        Ok(detail) => Outcome { pass: true, detail },
        Err(e) => Outcome { pass: false, detail: format!("error: {e}") },
    }
}

fn main() -> ExitCode {
    let replicates = env_count("ACCEPTANCE_REPLICATES", 20);
    let seeds = env_count("ACCEPTANCE_SEEDS", 50);
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |n: usize, o: Outcome, t: Instant| {
        println!("criterion {n}: {} {} [{:.0}s]", if o.pass { "PASS" } else { "FAIL" }, o.detail, t.elapsed().as_secs_f64());
        results.push((n, o));
    };

    let t = Instant::now();
    let a = campaign(Scenario::A, 1.1, replicates, None, Scope::First);
    let a_seconds_per_replicate = t.elapsed().as_secs_f64() / replicates as f64;
    let c = campaign(Scenario::C, 1.1, replicates, None, Scope::First);
    // the beta = 1.5 ordering only needs the memory fit on the first window
    let c15 = campaign(Scenario::C, 1.5, replicates.div_ceil(2), Some(vec![0.0]), Scope::None);
    let e = Ensembles { a, c, c15, a_seconds_per_replicate };
    report(1, criterion_1(&e), t);
    report(2, criterion_2(&e), t);
    report(3, criterion_3(&e), t);

    let t = Instant::now();
    report(4, criterion_4(seeds), t);
    let t = Instant::now();
    report(5, criterion_5(20), t);
    let t = Instant::now();
    report(6, criterion_6(seeds), t);
    let t = Instant::now();
    report(7, criterion_7(seeds.min(30)), t);
    let t = Instant::now();
    report(8, criterion_8(), t);
    let t = Instant::now();
    report(9, criterion_9(), t);
    let t = Instant::now();
    report(10, criterion_10(), t);

    let failed: Vec<usize> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    println!("acceptance: {} of {} passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
