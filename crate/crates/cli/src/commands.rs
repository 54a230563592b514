use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mixspec::campaign::{run_ensemble, simulate_ensemble, summarize, variation_curve};
use mixspec::mle::{fit_stochastic, FitConfig};
use mixspec::noise::SimulatedSeries;
use mixspec::nstep::{run_nstep, ClassificationReport};
use mixspec::oracles::default_grid;
use mixspec::series::{parse_series, TimeSeries};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::Opts;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = std::io::BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush().with_context(|| format!("writing {}", path.display()))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))
}

fn read_series(path: &Path) -> Result<TimeSeries> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    parse_series(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))
}

fn series_file(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("series_{index:04}.txt"))
}

fn write_series(path: &Path, ts: &TimeSeries) -> Result<()> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = std::io::BufWriter::new(f);
    ts.write_to(&mut w)?;
    w.flush().with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct TruthEntry<'a> {
    index: usize,
    file: String,
    seed: u64,
    scenario: String,
    beta: f64,
    functional: &'a mixspec::functional::FunctionalParams,
    noise: &'a mixspec::noise::NoiseModelSpec,
}

fn write_ensemble(dir: &Path, ensemble: &[SimulatedSeries], beta: f64) -> Result<()> {
    let mut truth = Vec::with_capacity(ensemble.len());
    for (i, s) in ensemble.iter().enumerate() {
        let path = series_file(dir, i);
        write_series(&path, &s.series)?;
        truth.push(TruthEntry {
            index: i,
            file: path.file_name().unwrap().to_string_lossy().into_owned(),
            seed: s.seed,
            scenario: s.scenario.to_string(),
            beta,
            functional: &s.functional,
            noise: &s.noise,
        });
    }
    write_json(&dir.join("truth.json"), &truth)
}

pub fn simulate(o: &Opts) -> Result<()> {
    let dir = o.output_dir();
    create_dir(&dir)?;
    let ensemble = simulate_ensemble(o.scenario(), o.beta(), o.length(), o.replicates()?, o.seed())?;
    write_ensemble(&dir, &ensemble, o.beta())?;
    eprintln!("wrote {} series to {}", ensemble.len(), dir.display());
    Ok(())
}

fn require_input(o: &Opts) -> Result<&Path> {
    match &o.input {
        Some(p) => Ok(p),
        None => bail!("--input is required"),
    }
}

pub fn fit(o: &Opts) -> Result<()> {
    let input = require_input(o)?;
    let ts = read_series(input)?;
    let nstep = o.nstep()?;
    let cfg = FitConfig { n_harmonics: nstep.fit.n_harmonics, offsets: nstep.fit.offsets, ..FitConfig::default() };
    let dir = o.output_dir();
    create_dir(&dir)?;
    let kind = o.noise_model();
    let out = match fit_stochastic(&ts, kind, &cfg) {
        Ok(r) => {
            write_series(&dir.join("residuals.txt"), &r.residuals)?;
            let mut flags = Vec::new();
            if !r.fit.converged {
                flags.push("stochastic fit did not converge".to_string());
            }
            json!({
                "input": input.display().to_string(),
                "n_epochs": ts.len(),
                "gaps": ts.gap_count(),
                "noise_model": kind,
                "stochastic": r.fit,
                "functional_names": r.names,
                "functional": r.functional.to_vec(),
                "functional_sigma": r.functional_sigma,
                "residual_std": mixspec::stats::std_dev(r.residuals.values()),
                "flags": flags,
            })
        }
        Err(e) => json!({
            "input": input.display().to_string(),
            "n_epochs": ts.len(),
            "noise_model": kind,
            "flags": [format!("fit failed: {e}")],
        }),
    };
    write_json(&dir.join("fit.json"), &out)
}

/// Report for a failed run: the schema's keys with empty contents.
fn failed_report(ts: &TimeSeries, err: &mixspec::Error) -> Value {
    json!({
        "series_meta": {
            "n_epochs": ts.len(),
            "first_epoch": ts.first_epoch(),
            "last_epoch": ts.last_epoch(),
            "dt_days": ts.dt(),
            "gaps": ts.gap_count(),
            "header": ts.header(),
        },
        "steps": [],
        "variations": {"functional_pct": null, "stochastic_pct": null},
        "distribution": {"normal": null, "stable": null, "correlations": null},
        "memory_model": null,
        "levy_class": null,
        "flags": [format!("classification failed: {err}")],
    })
}

fn series_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    Ok(files)
}

pub fn classify(o: &Opts) -> Result<()> {
    let cfg = o.nstep()?;
    let kind = o.noise_model();
    let dir = o.output_dir();
    create_dir(&dir)?;
    match &o.input {
        Some(p) if p.is_file() => {
            let ts = read_series(p)?;
            match run_nstep(&ts, kind, &cfg) {
                Ok(r) => {
                    write_json(&dir.join("report.json"), &r)?;
                    write_csv(&dir.join("variations.csv"), &variation_curve(&[&r], &cfg.steps_days))?;
                    eprintln!("{}: {}", p.display(), class_label(&r));
                }
                Err(e) => {
                    write_json(&dir.join("report.json"), &failed_report(&ts, &e))?;
                    eprintln!("{}: classification failed: {e}", p.display());
                }
            }
            Ok(())
        }
        Some(p) if p.is_dir() => {
            let files = series_in(p)?;
            if files.is_empty() {
                bail!("no .txt series files in {}", p.display());
            }
            let series: Vec<TimeSeries> = files.iter().map(|f| read_series(f)).collect::<Result<_>>()?;
            let results: Vec<mixspec::Result<ClassificationReport>> =
                series.par_iter().map(|ts| run_nstep(ts, kind, &cfg)).collect();
            let names: Vec<String> =
                files.iter().map(|f| f.file_stem().unwrap().to_string_lossy().into_owned()).collect();
            write_reports(&dir, &names, &series, &results, &cfg.steps_days)
        }
        Some(p) => bail!("input {} does not exist", p.display()),
        None => {
            let ensemble = simulate_ensemble(o.scenario(), o.beta(), o.length(), o.replicates()?, o.seed())?;
            write_ensemble(&dir, &ensemble, o.beta())?;
            let series: Vec<TimeSeries> = ensemble.iter().map(|s| s.series.clone()).collect();
            let names: Vec<String> = (0..ensemble.len()).map(|i| format!("series_{i:04}")).collect();
            let campaign = run_ensemble(ensemble, kind, &cfg);
            let results: Vec<mixspec::Result<ClassificationReport>> = campaign
                .outcomes
                .into_iter()
                .map(|oc| oc.report.ok_or_else(|| mixspec::Error::Degenerate(oc.error.unwrap_or_default())))
                .collect();
            write_reports(&dir, &names, &series, &results, &cfg.steps_days)
        }
    }
}

fn class_label(r: &ClassificationReport) -> String {
    r.levy_class.map_or_else(|| "unclassified".to_string(), |c| c.to_string())
}

fn write_reports(
    dir: &Path,
    names: &[String],
    series: &[TimeSeries],
    results: &[mixspec::Result<ClassificationReport>],
    steps_days: &[f64],
) -> Result<()> {
    let rdir = dir.join("reports");
    create_dir(&rdir)?;
    for ((name, ts), res) in names.iter().zip(series).zip(results) {
        let path = rdir.join(format!("{name}.json"));
        match res {
            Ok(r) => write_json(&path, r)?,
            Err(e) => write_json(&path, &failed_report(ts, e))?,
        }
    }
    let ok: Vec<&ClassificationReport> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
    write_csv(&dir.join("variations.csv"), &variation_curve(&ok, steps_days))?;
    let summary = summarize(&ok, results.len() - ok.len());
    write_json(&dir.join("summary.json"), &summary)?;
    eprintln!("classified {} series: {:?}", results.len(), summary.class_counts);
    Ok(())
}

pub fn oracle_check(o: &Opts) -> Result<()> {
    let rows = default_grid(&o.lengths()?)?;
    match &o.output_dir {
        Some(dir) => {
            create_dir(dir)?;
            write_csv(&dir.join("oracle_check.csv"), &rows)
        }
        None => {
            let mut w = csv::Writer::from_writer(std::io::stdout());
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct SummaryRow {
    file: String,
    levy_class: String,
    functional_pct: Option<f64>,
    stochastic_pct: Option<f64>,
    alpha: Option<f64>,
    corr_normal: Option<f64>,
    corr_levy: Option<f64>,
    memory_winner: Option<String>,
    arma_fit_error: Option<f64>,
    farima_fit_error: Option<f64>,
    flags: String,
}

#[derive(Serialize)]
struct CurveRow {
    step_offset_yr: f64,
    functional_pct_mean: f64,
    functional_pct_std: f64,
    stochastic_pct_mean: f64,
    stochastic_pct_std: f64,
    n: usize,
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    match x.len() {
        0 => (f64::NAN, f64::NAN),
        1 => (x[0], f64::NAN),
        _ => (mixspec::stats::mean(x), mixspec::stats::std_dev(x)),
    }
}

/// Reads report JSON loosely so that failed runs, whose reports lack most
/// fields, are still summarised.
pub fn report(o: &Opts) -> Result<()> {
    let input = require_input(o)?;
    let base = if input.join("reports").is_dir() { input.join("reports") } else { input.to_path_buf() };
    let mut files: Vec<PathBuf> = fs::read_dir(&base)
        .with_context(|| format!("reading {}", base.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let mut rows = Vec::new();
    let mut curves: Vec<(Vec<f64>, Vec<Option<f64>>, Vec<Option<f64>>)> = Vec::new();
    for f in &files {
        let text = fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
        let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", f.display()))?;
        if v.get("levy_class").is_none() {
            continue;
        }
        let num = |p: &str| v.pointer(p).and_then(Value::as_f64);
        let flags: Vec<String> = v["flags"]
            .as_array()
            .map(|a| a.iter().filter_map(|x| x.as_str().map(str::to_string)).collect())
            .unwrap_or_default();
        rows.push(SummaryRow {
            file: f.file_name().unwrap().to_string_lossy().into_owned(),
            levy_class: v["levy_class"].as_str().unwrap_or("unclassified").to_string(),
            functional_pct: num("/variations/functional_pct"),
            stochastic_pct: num("/variations/stochastic_pct"),
            alpha: num("/distribution/stable/alpha"),
            corr_normal: num("/distribution/correlations/normal"),
            corr_levy: num("/distribution/correlations/levy"),
            memory_winner: v.pointer("/memory_model/winner").and_then(Value::as_str).map(str::to_string),
            arma_fit_error: num("/memory_model/arma/fit_error"),
            farima_fit_error: num("/memory_model/farima/fit_error"),
            flags: flags.join("; "),
        });
        let offsets: Vec<f64> = v["steps"]
            .as_array()
            .map(|a| a.iter().filter_map(|s| s["end_offset_days"].as_f64()).collect())
            .unwrap_or_default();
        let curve = |k: &str| -> Vec<Option<f64>> {
            v.pointer(&format!("/variations/{k}"))
                .and_then(Value::as_array)
                .map(|a| a.iter().map(Value::as_f64).collect())
                .unwrap_or_default()
        };
        if !offsets.is_empty() {
            curves.push((offsets, curve("functional_curve"), curve("stochastic_curve")));
        }
    }
    if rows.is_empty() {
        bail!("no classification reports found in {}", base.display());
    }
    let dir = o.output_dir();
    create_dir(&dir)?;
    write_csv(&dir.join("summary.csv"), &rows)?;

    let n_steps = curves.iter().map(|c| c.0.len()).max().unwrap_or(0);
    let mut curve_rows = Vec::new();
    for i in 0..n_steps {
        let offset = curves.iter().find_map(|c| c.0.get(i).copied()).unwrap_or(f64::NAN);
        if curves.iter().any(|c| c.0.get(i).is_some_and(|d| (d - offset).abs() > 1e-9)) {
            bail!("reports use different step offsets; summarise them separately");
        }
        let pick = |sel: fn(&(Vec<f64>, Vec<Option<f64>>, Vec<Option<f64>>)) -> &Vec<Option<f64>>| -> Vec<f64> {
            curves.iter().filter_map(|c| sel(c).get(i).copied().flatten()).collect()
        };
        let fv = pick(|c| &c.1);
        let sv = pick(|c| &c.2);
        let (fm, fs) = mean_std(&fv);
        let (sm, ss) = mean_std(&sv);
        curve_rows.push(CurveRow {
            step_offset_yr: offset / mixspec::noise::DAYS_PER_YEAR,
            functional_pct_mean: fm,
            functional_pct_std: fs,
            stochastic_pct_mean: sm,
            stochastic_pct_std: ss,
            n: fv.len().min(sv.len()),
        });
    }
    write_csv(&dir.join("variations.csv"), &curve_rows)?;
    eprintln!("summarised {} reports", rows.len());
    Ok(())
}
