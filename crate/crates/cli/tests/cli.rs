use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mixspec(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixspec")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

/// White noise on a 2 mm/yr trend with a 2.2 mm annual term.
fn white_series(path: &Path, len: usize, seed: u64) {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 1.6).unwrap();
    let w = 2.0 * std::f64::consts::PI / 365.25;
    let mut text = String::from("# white noise test series\n");
    for i in 0..len {
        let t = i as f64;
        let signal = 2.0 * t / 365.25 + 2.0 * (w * t).cos() + (w * t).sin();
        text.push_str(&format!("{} {}\n", 51544 + i, signal + n.sample(&mut rng)));
    }
    fs::write(path, text).unwrap();
}

#[test]
fn simulate_writes_files_and_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        ok(&mixspec(
            &["simulate", "--scenario", "A", "--beta", "1.1", "--replicates", "3", "--seed", "7", "--length", "800", "--output-dir", out],
            d.path(),
        ));
    }
    let names: Vec<String> = {
        let mut v: Vec<String> =
            fs::read_dir(d.path().join("a")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        v.sort();
        v
    };
    assert_eq!(names, ["series_0000.txt", "series_0001.txt", "series_0002.txt", "truth.json"]);
    for n in &names {
        assert_eq!(fs::read(d.path().join("a").join(n)).unwrap(), fs::read(d.path().join("b").join(n)).unwrap());
    }
    let truth: serde_json::Value = serde_json::from_slice(&fs::read(d.path().join("a/truth.json")).unwrap()).unwrap();
    assert_eq!(truth.as_array().unwrap().len(), 3);
    let lines = fs::read_to_string(d.path().join("a/series_0000.txt")).unwrap();
    assert_eq!(lines.lines().filter(|l| !l.starts_with('#')).count(), 800);
}

#[test]
fn oracle_check_default_grid() {
    let d = tempfile::tempdir().unwrap();
    ok(&mixspec(&["oracle-check", "--output-dir", "o"], d.path()));
    let mut rdr = csv::Reader::from_path(d.path().join("o/oracle_check.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 9);
    for r in &rows {
        let e: f64 = r[col("exact_variance_rel_err")].parse().unwrap();
        assert!(e < 1e-10);
    }
    let seasonal: Vec<f64> = rows
        .iter()
        .filter(|r| &r[col("kind")] == "Seasonal")
        .map(|r| r[col("exact_variance")].parse().unwrap())
        .collect();
    assert!(seasonal.iter().all(|v| *v < 3.0));
}

#[test]
fn oracle_check_trend_growth() {
    let d = tempfile::tempdir().unwrap();
    let out = mixspec(&["oracle-check", "--lengths", "100000"], d.path());
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    let trend = text.lines().find(|l| l.starts_with("Trend")).unwrap();
    let growth: f64 = trend.rsplit(',').next().unwrap().parse().unwrap();
    assert!((3.6..=4.4).contains(&growth), "{growth}");
}

#[test]
fn config_file_and_flag_precedence() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("run.cfg"), "# test\nreplicates = 2\nlength = 800\nseed = 1\noutput_dir = fromfile\n").unwrap();
    ok(&mixspec(&["simulate", "--config", "run.cfg", "--replicates", "1"], d.path()));
    let n = fs::read_dir(d.path().join("fromfile")).unwrap().count();
    assert_eq!(n, 2, "one series plus the manifest");

    fs::write(d.path().join("bad.cfg"), "replicates = 2\ncolour = red\n").unwrap();
    let out = mixspec(&["simulate", "--config", "bad.cfg"], d.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown config key"));
}

#[test]
fn io_errors_exit_nonzero() {
    let d = tempfile::tempdir().unwrap();
    assert!(!mixspec(&["fit", "--input", "missing.txt"], d.path()).status.success());
    assert!(!mixspec(&["classify", "--input", "missing.txt"], d.path()).status.success());
    fs::write(d.path().join("garbage.txt"), "51544 1.0\nnot a number\n").unwrap();
    assert!(!mixspec(&["fit", "--input", "garbage.txt"], d.path()).status.success());
    assert!(!mixspec(&["simulate", "--replicates", "0"], d.path()).status.success());
}

#[test]
fn analysis_failures_become_flags() {
    let d = tempfile::tempdir().unwrap();
    white_series(&d.path().join("short.txt"), 400, 1);
    ok(&mixspec(&["fit", "--input", "short.txt", "--output-dir", "f"], d.path()));
    let fit: serde_json::Value = serde_json::from_slice(&fs::read(d.path().join("f/fit.json")).unwrap()).unwrap();
    assert!(fit["flags"][0].as_str().unwrap().contains("fit failed"));

    ok(&mixspec(&["classify", "--input", "short.txt", "--output-dir", "c"], d.path()));
    let rep: serde_json::Value = serde_json::from_slice(&fs::read(d.path().join("c/report.json")).unwrap()).unwrap();
    assert!(rep["levy_class"].is_null());
    assert!(rep["flags"][0].as_str().unwrap().contains("classification failed"));
}

#[test]
fn white_noise_series_is_gaussian_levy() {
    let d = tempfile::tempdir().unwrap();
    let mut gaussian = 0;
    let mut seen = Vec::new();
    for seed in 1..=5u64 {
        let name = format!("white{seed}.txt");
        let out = format!("c{seed}");
        white_series(&d.path().join(&name), 3650, seed);
        ok(&mixspec(&["classify", "--input", &name, "--output-dir", &out, "--memory", "none", "--steps", "0,1"], d.path()));
        let rep: serde_json::Value =
            serde_json::from_slice(&fs::read(d.path().join(&out).join("report.json")).unwrap()).unwrap();
        for key in ["series_meta", "steps", "variations", "distribution", "memory_model", "levy_class", "flags"] {
            assert!(rep.get(key).is_some(), "missing {key}");
        }
        gaussian += usize::from(rep["levy_class"] == "GaussianLevy");
        seen.push(format!("{} {} {}", rep["levy_class"], rep["variations"]["functional_pct"], rep["variations"]["stochastic_pct"]));
        let csv = fs::read_to_string(d.path().join(&out).join("variations.csv")).unwrap();
        assert!(csv.starts_with("step_offset_yr,functional_pct_mean,functional_pct_std,stochastic_pct_mean,stochastic_pct_std"));
        assert_eq!(csv.lines().count(), 3);
    }
    assert!(gaussian >= 3, "{gaussian} of 5: {seen:?}");
}

#[test]
fn directory_classify_then_report() {
    let d = tempfile::tempdir().unwrap();
    ok(&mixspec(&["simulate", "--replicates", "2", "--length", "1200", "--seed", "3", "--output-dir", "sim"], d.path()));
    let args = ["classify", "--input", "sim", "--output-dir", "cls", "--memory", "none", "--steps", "0,1", "--jobs", "1"];
    ok(&mixspec(&args, d.path()));
    assert!(d.path().join("cls/reports/series_0000.json").is_file());
    assert!(d.path().join("cls/summary.json").is_file());
    ok(&mixspec(&["report", "--input", "cls", "--output-dir", "rep"], d.path()));
    let summary = fs::read_to_string(d.path().join("rep/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    let curve = fs::read_to_string(d.path().join("rep/variations.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);

    // reports are byte-identical on a rerun
    let again = ["classify", "--input", "sim", "--output-dir", "cls2", "--memory", "none", "--steps", "0,1"];
    ok(&mixspec(&again, d.path()));
    assert_eq!(
        fs::read(d.path().join("cls/reports/series_0001.json")).unwrap(),
        fs::read(d.path().join("cls2/reports/series_0001.json")).unwrap()
    );
}
