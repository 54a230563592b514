use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use mixspec::noise::{NoiseKind, Scenario, SCENARIO_LENGTH};
use mixspec::nstep::{NStepConfig, Scope, Thresholds, DEFAULT_STEP_FRACTIONS};
use mixspec::series::WINDOW_YEAR_DAYS;

/// Options shared by every subcommand. Each may also be given as
/// `key = value` in the file passed to `--config`; flags win.
#[derive(Args, Debug, Clone, Default)]
pub struct Opts {
    /// Series file, or a directory of series / report files.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Flat `key = value` file with '#' comments.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// pl+wn or fn+wn.
    #[arg(long)]
    pub noise_model: Option<NoiseKind>,
    /// Window end offsets as fractions of a year, e.g. "0,0.3,0.5,0.7,0.8,1".
    #[arg(long)]
    pub steps: Option<String>,
    #[arg(long)]
    pub harmonics: Option<usize>,
    /// Offset epochs file (MJD per line, optional magnitude).
    #[arg(long)]
    pub offsets: Option<PathBuf>,
    #[arg(long)]
    pub scenario: Option<Scenario>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub length: Option<usize>,
    /// Windows that get memory-model selection: none, first, all.
    #[arg(long)]
    pub memory: Option<Scope>,
    /// Windows that get distribution fits: none, first, all.
    #[arg(long)]
    pub distributions: Option<Scope>,
    #[arg(long)]
    pub gaussian_pct: Option<f64>,
    #[arg(long)]
    pub stable_pct: Option<f64>,
    #[arg(long)]
    pub heavy_alpha: Option<f64>,
    #[arg(long)]
    pub corr_margin: Option<f64>,
    /// Series lengths for oracle-check, e.g. "10,100,1000".
    #[arg(long)]
    pub lengths: Option<String>,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| anyhow!("config key '{key}': {e}"))
}

fn fill<T>(slot: &mut Option<T>, v: T) {
    if slot.is_none() {
        *slot = Some(v);
    }
}

impl Opts {
    /// Reads `--config` if given; values only fill options the flags left
    /// unset.
    pub fn merge_config_file(mut self) -> Result<Self> {
        let Some(path) = self.config.clone() else { return Ok(self) };
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading config {}", path.display()))?;
        self.merge_config_text(&text)?;
        Ok(self)
    }

    pub fn merge_config_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("config line {}: expected key = value", i + 1))?;
            let key = k.trim().replace('_', "-");
            let v = v.trim();
            self.set(&key, v).with_context(|| format!("config line {}", i + 1))?;
        }
        Ok(())
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "input" => fill(&mut self.input, PathBuf::from(v)),
            "output-dir" => fill(&mut self.output_dir, PathBuf::from(v)),
            "seed" => fill(&mut self.seed, parse(key, v)?),
            "jobs" => fill(&mut self.jobs, parse(key, v)?),
            "noise-model" => fill(&mut self.noise_model, parse(key, v)?),
            "steps" => fill(&mut self.steps, v.to_string()),
            "harmonics" => fill(&mut self.harmonics, parse(key, v)?),
            "offsets" => fill(&mut self.offsets, PathBuf::from(v)),
            "scenario" => fill(&mut self.scenario, parse(key, v)?),
            "beta" => fill(&mut self.beta, parse(key, v)?),
            "replicates" => fill(&mut self.replicates, parse(key, v)?),
            "length" => fill(&mut self.length, parse(key, v)?),
            "memory" => fill(&mut self.memory, parse(key, v)?),
            "distributions" => fill(&mut self.distributions, parse(key, v)?),
            "gaussian-pct" => fill(&mut self.gaussian_pct, parse(key, v)?),
            "stable-pct" => fill(&mut self.stable_pct, parse(key, v)?),
            "heavy-alpha" => fill(&mut self.heavy_alpha, parse(key, v)?),
            "corr-margin" => fill(&mut self.corr_margin, parse(key, v)?),
            "lengths" => fill(&mut self.lengths, v.to_string()),
            "config" => bail!("config files cannot include other config files"),
            other => bail!("unknown config key '{other}'"),
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn scenario(&self) -> Scenario {
        self.scenario.unwrap_or(Scenario::A)
    }

    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or(1.1)
    }

    pub fn replicates(&self) -> Result<usize> {
        let r = self.replicates.unwrap_or(1);
        if r == 0 {
            bail!("--replicates must be at least 1");
        }
        Ok(r)
    }

    pub fn length(&self) -> usize {
        self.length.unwrap_or(SCENARIO_LENGTH)
    }

    pub fn noise_model(&self) -> NoiseKind {
        self.noise_model.unwrap_or(NoiseKind::PowerLawWhite)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn thresholds(&self) -> Result<Thresholds> {
        let d = Thresholds::default();
        let th = Thresholds {
            gaussian_pct: self.gaussian_pct.unwrap_or(d.gaussian_pct),
            stable_pct: self.stable_pct.unwrap_or(d.stable_pct),
            heavy_alpha: self.heavy_alpha.unwrap_or(d.heavy_alpha),
            corr_margin: self.corr_margin.unwrap_or(d.corr_margin),
        };
        th.validate()?;
        Ok(th)
    }

    pub fn step_days(&self) -> Result<Vec<f64>> {
        let fractions = match &self.steps {
            None => DEFAULT_STEP_FRACTIONS.to_vec(),
            Some(s) => parse_list::<f64>(s).context("--steps")?,
        };
        if fractions.is_empty() {
            bail!("--steps needs at least one value");
        }
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            bail!("--steps values must lie in [0, 1] (fractions of a year)");
        }
        Ok(fractions.iter().map(|f| f * WINDOW_YEAR_DAYS).collect())
    }

    pub fn lengths(&self) -> Result<Vec<usize>> {
        let l = match &self.lengths {
            None => vec![10, 100, 1000],
            Some(s) => parse_list::<usize>(s).context("--lengths")?,
        };
        if l.is_empty() || l.contains(&0) {
            bail!("--lengths must list positive integers");
        }
        Ok(l)
    }

    pub fn nstep(&self) -> Result<NStepConfig> {
        let mut cfg = NStepConfig {
            steps_days: self.step_days()?,
            thresholds: self.thresholds()?,
            distributions: self.distributions.unwrap_or(Scope::First),
            memory: self.memory.unwrap_or(Scope::First),
            ..NStepConfig::default()
        };
        if let Some(h) = self.harmonics {
            cfg.fit.n_harmonics = h;
        }
        if let Some(path) = &self.offsets {
            let f = std::fs::File::open(path).with_context(|| format!("opening offsets {}", path.display()))?;
            cfg.fit.offsets = mixspec::series::parse_offsets(std::io::BufReader::new(f))
                .with_context(|| format!("parsing offsets {}", path.display()))?;
        }
        Ok(cfg)
    }
}

fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<T>().map_err(|e| anyhow!("'{t}': {e}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_fills_unset_only() {
        let mut o = Opts { seed: Some(3), ..Opts::default() };
        o.merge_config_text("# campaign\nseed = 9\nbeta=1.5 # trailing\nnoise_model = fn+wn\n").unwrap();
        assert_eq!(o.seed, Some(3));
        assert_eq!(o.beta, Some(1.5));
        assert_eq!(o.noise_model, Some(NoiseKind::FlickerWhite));
    }

    #[test]
    fn unknown_key_rejected() {
        let mut o = Opts::default();
        let e = o.merge_config_text("colour = blue\n").unwrap_err();
        assert!(format!("{e:#}").contains("unknown config key"));
    }

    #[test]
    fn bad_value_rejected() {
        let mut o = Opts::default();
        assert!(o.merge_config_text("replicates = many").is_err());
        assert!(o.merge_config_text("just words").is_err());
    }

    #[test]
    fn steps_are_year_fractions() {
        let o = Opts { steps: Some("0, 0.5,1".into()), ..Opts::default() };
        assert_eq!(o.step_days().unwrap(), vec![0.0, 182.5, 365.0]);
        let o = Opts { steps: Some("0,2".into()), ..Opts::default() };
        assert!(o.step_days().is_err());
    }

    #[test]
    fn thresholds_checked() {
        let o = Opts { gaussian_pct: Some(30.0), ..Opts::default() };
        assert!(o.thresholds().is_err());
        let o = Opts { replicates: Some(0), ..Opts::default() };
        assert!(o.replicates().is_err());
    }
}
