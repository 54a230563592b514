//! Time-series container, text I/O and window slicing.
//!
//! Series files are UTF-8 text. Lines starting with `#` are header/comment
//! lines and are retained verbatim; every other non-blank line is
//! `MJD value [sigma]` with the value in millimetres. The optional sigma
//! column is accepted and ignored.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Days per year used for window lengths.
pub const WINDOW_YEAR_DAYS: f64 = 365.0;

/// Minimum number of observed epochs a window must hold to be fitted.
pub const MIN_FIT_EPOCHS: usize = 730;

/// Relative tolerance when snapping epochs onto the sampling grid.
const GRID_TOL: f64 = 1e-6;

/// A displacement series sampled on a uniform grid, possibly with gaps.
///
/// Only observed epochs are stored. Missing grid epochs are gaps and are
/// never interpolated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    epochs: Vec<f64>,
    values: Vec<f64>,
    dt: f64,
    header: Vec<String>,
}

impl TimeSeries {
    /// Builds a series with the default daily sampling.
    pub fn new(epochs: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        Self::with_dt(epochs, values, 1.0)
    }

    pub fn with_dt(epochs: Vec<f64>, values: Vec<f64>, dt: f64) -> Result<Self> {
        if epochs.len() != values.len() {
            return Err(Error::Validation(format!(
                "{} epochs but {} values",
                epochs.len(),
                values.len()
            )));
        }
        if epochs.len() < 2 {
            return Err(Error::Validation("a series needs at least 2 epochs".into()));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Validation(format!("sampling interval {dt} must be > 0")));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("value at index {i} is not finite")));
        }
        if let Some(i) = epochs.iter().position(|t| !t.is_finite()) {
            return Err(Error::Validation(format!("epoch at index {i} is not finite")));
        }
        if let Some(w) = epochs.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Validation(format!(
                "epochs not strictly increasing at index {} ({} -> {})",
                w + 1,
                epochs[w],
                epochs[w + 1]
            )));
        }
        Ok(Self { epochs, values, dt, header: Vec::new() })
    }

    /// Regularly sampled series starting at `start` with no gaps.
    pub fn regular(start: f64, dt: f64, values: Vec<f64>) -> Result<Self> {
        let epochs = (0..values.len()).map(|i| start + i as f64 * dt).collect();
        Self::with_dt(epochs, values, dt)
    }

    pub fn with_header(mut self, header: Vec<String>) -> Self {
        self.header = header;
        self
    }

    pub fn epochs(&self) -> &[f64] {
        &self.epochs
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    /// Number of observed epochs.
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn first_epoch(&self) -> f64 {
        self.epochs[0]
    }

    pub fn last_epoch(&self) -> f64 {
        self.epochs[self.epochs.len() - 1]
    }

    /// Span of the series in days.
    pub fn span_days(&self) -> f64 {
        self.last_epoch() - self.first_epoch()
    }

    /// Replaces the values, keeping epochs and metadata.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        let mut out = Self::with_dt(self.epochs.clone(), values, self.dt)?;
        out.header = self.header.clone();
        Ok(out)
    }

    /// Grid index of every observed epoch, or `None` when some epoch does
    /// not fall on the uniform grid anchored at the first epoch.
    pub fn grid_indices(&self) -> Option<Vec<usize>> {
        let t0 = self.first_epoch();
        let mut out = Vec::with_capacity(self.len());
        for &t in &self.epochs {
            let x = (t - t0) / self.dt;
            let k = x.round();
            if (x - k).abs() > GRID_TOL * x.abs().max(1.0) {
                return None;
            }
            out.push(k as usize);
        }
        Some(out)
    }

    /// Length of the full grid from the first to the last epoch.
    pub fn grid_len(&self) -> usize {
        ((self.span_days() / self.dt).round() as usize) + 1
    }

    /// Epochs missing from the uniform grid.
    pub fn gaps(&self) -> Vec<f64> {
        let Some(idx) = self.grid_indices() else {
            return Vec::new();
        };
        let t0 = self.first_epoch();
        let mut out = Vec::new();
        for w in idx.windows(2) {
            for k in w[0] + 1..w[1] {
                out.push(t0 + k as f64 * self.dt);
            }
        }
        out
    }

    pub fn gap_count(&self) -> usize {
        self.grid_len().saturating_sub(self.len())
    }

    /// Prefix window ending `end_offset_days` after the base cutoff
    /// `last_epoch - 365`.
    ///
    /// Offset 0 drops the final year, offset 365 returns the full series.
    pub fn slice_window(&self, end_offset_days: f64) -> Result<Self> {
        if !(0.0..=WINDOW_YEAR_DAYS).contains(&end_offset_days) {
            return Err(Error::Domain(format!(
                "window end offset {end_offset_days} outside [0, {WINDOW_YEAR_DAYS}] days"
            )));
        }
        let cutoff = self.last_epoch() - WINDOW_YEAR_DAYS + end_offset_days;
        let eps = GRID_TOL * self.dt;
        let n = self.epochs.partition_point(|&t| t <= cutoff + eps);
        if n < MIN_FIT_EPOCHS {
            return Err(Error::WindowTooShort { len: n, min: MIN_FIT_EPOCHS });
        }
        Ok(Self {
            epochs: self.epochs[..n].to_vec(),
            values: self.values[..n].to_vec(),
            dt: self.dt,
            header: self.header.clone(),
        })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for h in &self.header {
            writeln!(w, "#{h}")?;
        }
        for (t, v) in self.epochs.iter().zip(&self.values) {
            writeln!(w, "{t:?} {v:?}")?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("series text is ASCII")
    }
}

/// Parses the series text format.
///
/// The sampling interval is taken as the smallest epoch difference, which
/// is exact for gapped daily series.
pub fn parse_series<R: BufRead>(reader: R) -> Result<TimeSeries> {
    let mut header = Vec::new();
    let mut epochs = Vec::new();
    let mut values = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('#') {
            header.push(rest.to_string());
            continue;
        }
        let mut fields = trimmed.split_whitespace();
        let mut next = |what: &str| -> Result<f64> {
            let tok = fields.next().ok_or_else(|| Error::Parse {
                line: lineno,
                msg: format!("missing {what} field"),
            })?;
            tok.parse::<f64>().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("cannot parse {what} '{tok}'"),
            })
        };
        let t = next("epoch")?;
        let v = next("value")?;
        if let Some(extra) = fields.next() {
            // third column is a per-epoch sigma, accepted and ignored
            if extra.parse::<f64>().is_err() {
                return Err(Error::Parse { line: lineno, msg: format!("cannot parse sigma '{extra}'") });
            }
            if fields.next().is_some() {
                return Err(Error::Parse { line: lineno, msg: "too many fields".into() });
            }
        }
        if !t.is_finite() || !v.is_finite() {
            return Err(Error::Parse { line: lineno, msg: "non-finite number".into() });
        }
        if let Some(&prev) = epochs.last() {
            if t <= prev {
                return Err(Error::Validation(format!(
                    "line {lineno}: epoch {t} does not increase (previous {prev})"
                )));
            }
        }
        epochs.push(t);
        values.push(v);
    }
    let dt = epochs
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    let dt = if dt.is_finite() { dt } else { 1.0 };
    Ok(TimeSeries::with_dt(epochs, values, dt)?.with_header(header))
}

pub fn parse_series_str(text: &str) -> Result<TimeSeries> {
    parse_series(text.as_bytes())
}

/// Offset (step) epochs with optional known magnitudes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OffsetCatalog {
    epochs: Vec<f64>,
    magnitudes: Option<Vec<f64>>,
}

impl OffsetCatalog {
    pub fn new(epochs: Vec<f64>) -> Result<Self> {
        check_increasing(&epochs)?;
        Ok(Self { epochs, magnitudes: None })
    }

    pub fn with_magnitudes(epochs: Vec<f64>, magnitudes: Vec<f64>) -> Result<Self> {
        check_increasing(&epochs)?;
        if magnitudes.len() != epochs.len() {
            return Err(Error::Validation("one magnitude per offset epoch required".into()));
        }
        Ok(Self { epochs, magnitudes: Some(magnitudes) })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn epochs(&self) -> &[f64] {
        &self.epochs
    }

    pub fn magnitudes(&self) -> Option<&[f64]> {
        self.magnitudes.as_deref()
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// Offsets that fall inside `[start, end]` (used when slicing windows).
    pub fn restricted_to(&self, start: f64, end: f64) -> Self {
        let keep: Vec<usize> = (0..self.epochs.len())
            .filter(|&i| self.epochs[i] > start && self.epochs[i] <= end)
            .collect();
        Self {
            epochs: keep.iter().map(|&i| self.epochs[i]).collect(),
            magnitudes: self.magnitudes.as_ref().map(|m| keep.iter().map(|&i| m[i]).collect()),
        }
    }
}

fn check_increasing(epochs: &[f64]) -> Result<()> {
    if epochs.iter().any(|t| !t.is_finite()) {
        return Err(Error::Validation("offset epochs must be finite".into()));
    }
    if epochs.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Validation("offset epochs must be strictly increasing".into()));
    }
    Ok(())
}

/// Parses an offset file: one MJD per line, optional magnitude (mm) as a
/// second field, `#` comments.
pub fn parse_offsets<R: BufRead>(reader: R) -> Result<OffsetCatalog> {
    let mut epochs = Vec::new();
    let mut mags = Vec::new();
    let mut n_with_mag = 0;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let mut fields = body.split_whitespace();
        let t: f64 = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse { line: lineno, msg: format!("bad offset epoch '{body}'") })?;
        epochs.push(t);
        match fields.next() {
            Some(s) => {
                let g: f64 = s
                    .parse()
                    .map_err(|_| Error::Parse { line: lineno, msg: format!("bad magnitude '{s}'") })?;
                mags.push(g);
                n_with_mag += 1;
            }
            None => mags.push(0.0),
        }
    }
    if n_with_mag > 0 && n_with_mag != epochs.len() {
        return Err(Error::Validation("magnitudes must be given for all offsets or none".into()));
    }
    if n_with_mag > 0 {
        OffsetCatalog::with_magnitudes(epochs, mags)
    } else {
        OffsetCatalog::new(epochs)
    }
}
