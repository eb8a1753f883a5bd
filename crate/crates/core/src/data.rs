//! Load series: synthetic generation, CSV ingestion, windowing, instance
//! normalization, patching and chronological splits.

use std::fmt;
use std::ops::Range;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sampling interval in minutes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution(pub u32);

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            m if m > 0 && m % 1440 == 0 => write!(f, "{} day", m / 1440),
            m if m > 0 && m % 60 == 0 => write!(f, "{} hour", m / 60),
            m => write!(f, "{m} min"),
        }
    }
}

/// Time × channel load matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadSeries {
    values: Vec<f64>,
    n_channels: usize,
    pub timestamps: Vec<i64>,
    pub resolution: Resolution,
    pub channel_names: Vec<String>,
}

impl LoadSeries {
    pub fn new(
        values: Vec<f64>,
        channel_names: Vec<String>,
        timestamps: Vec<i64>,
        resolution: Resolution,
    ) -> Result<Self> {
        let d = channel_names.len();
        if d == 0 || values.len() % d != 0 || values.len() / d != timestamps.len() {
            return Err(Error::Contract(format!(
                "{} values for {d} channels and {} timestamps",
                values.len(),
                timestamps.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Ingest {
                row: i / d + 1,
                column: channel_names[i % d].clone(),
                message: "non-finite value".into(),
            });
        }
        Ok(Self { values, n_channels: d, timestamps, resolution, channel_names })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn get(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.n_channels + c]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        (0..self.len()).map(|t| self.get(t, c)).collect()
    }

    /// Rows `range` as an `len × d` tensor.
    pub fn slice_rows(&self, range: Range<usize>) -> Tensor {
        let d = self.n_channels;
        let shape = vec![range.len(), d];
        Tensor::new(shape, self.values[range.start * d..range.end * d].to_vec())
            .expect("row slice of a valid series")
    }

    /// Writes `time,<channels...>` with integer timestamps.
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["time".to_string()];
        header.extend(self.channel_names.iter().cloned());
        w.write_record(&header)?;
        for t in 0..self.len() {
            let mut rec = vec![self.timestamps[t].to_string()];
            rec.extend((0..self.n_channels).map(|c| self.get(t, c).to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_steps: usize,
    pub n_channels: usize,
    pub daily_period: usize,
    /// Zero disables the weekly component.
    pub weekly_period: usize,
    pub trend_slope: f64,
    pub noise_std: f64,
    pub resolution_minutes: u32,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_steps: 8000,
            n_channels: 4,
            daily_period: 24,
            weekly_period: 168,
            trend_slope: 1e-4,
            noise_std: 0.1,
            resolution_minutes: 60,
            seed: 0,
        }
    }
}

/// Daily and weekly sinusoids per channel plus a linear trend and seeded
/// Gaussian noise. Amplitudes and phases are drawn per channel from the seed.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<LoadSeries> {
    if cfg.daily_period == 0 {
        return Err(Error::Config("periods must be positive".into()));
    }
    if cfg.n_channels == 0 || cfg.n_steps == 0 {
        return Err(Error::Config("synthetic series needs steps and channels".into()));
    }
    if cfg.noise_std < 0.0 || !cfg.noise_std.is_finite() {
        return Err(Error::Config(format!("noise_std = {}", cfg.noise_std)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tau = std::f64::consts::TAU;
    let shapes: Vec<(f64, f64, f64, f64, f64)> = (0..cfg.n_channels)
        .map(|_| {
            (
                rng.gen_range(0.5..1.5),
                rng.gen_range(0.0..tau),
                rng.gen_range(0.2..0.6),
                rng.gen_range(0.0..tau),
                rng.gen_range(-0.5..0.5),
            )
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut values = Vec::with_capacity(cfg.n_steps * cfg.n_channels);
    for t in 0..cfg.n_steps {
        let tf = t as f64;
        for &(amp_d, ph_d, amp_w, ph_w, level) in &shapes {
            let mut v = level + amp_d * (tau * tf / cfg.daily_period as f64 + ph_d).sin();
            if cfg.weekly_period > 0 {
                v += amp_w * (tau * tf / cfg.weekly_period as f64 + ph_w).sin();
            }
            v += cfg.trend_slope * tf;
            if cfg.noise_std > 0.0 {
                v += noise.sample(&mut rng);
            }
            values.push(v);
        }
    }
    let step = i64::from(cfg.resolution_minutes) * 60;
    LoadSeries::new(
        values,
        (0..cfg.n_channels).map(|c| format!("load_{c}")).collect(),
        (0..cfg.n_steps as i64).map(|t| t * step).collect(),
        Resolution(cfg.resolution_minutes),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub time_column: String,
    /// Empty means every column other than the time column.
    pub value_columns: Vec<String>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self { time_column: "time".into(), value_columns: Vec::new() }
    }
}

fn parse_timestamp(raw: &str) -> Option<i64> {
    let raw = raw.trim();
    if let Ok(v) = raw.parse::<i64>() {
        return Some(v);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Some(dt.timestamp());
    }
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(raw, f).ok())
        .map(|dt| dt.and_utc().timestamp())
}

/// Reads a comma-separated file with a header row. Row numbers in errors
/// count data rows from 1.
pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<LoadSeries> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let time_idx = find(&schema.time_column).ok_or_else(|| Error::Ingest {
        row: 0,
        column: schema.time_column.clone(),
        message: "missing column".into(),
    })?;
    let value_cols: Vec<(usize, String)> = if schema.value_columns.is_empty() {
        headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != time_idx)
            .map(|(i, h)| (i, h.trim().to_string()))
            .collect()
    } else {
        schema
            .value_columns
            .iter()
            .map(|c| {
                find(c).map(|i| (i, c.clone())).ok_or_else(|| Error::Ingest {
                    row: 0,
                    column: c.clone(),
                    message: "missing column".into(),
                })
            })
            .collect::<Result<_>>()?
    };
    if value_cols.is_empty() {
        return Err(Error::Ingest { row: 0, column: String::new(), message: "no value columns".into() });
    }

    let mut values = Vec::new();
    let mut timestamps: Vec<i64> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record?;
        let field = |i: usize, col: &str| {
            record.get(i).ok_or_else(|| Error::Ingest {
                row,
                column: col.to_string(),
                message: "missing field".into(),
            })
        };
        let raw_t = field(time_idx, &schema.time_column)?;
        let t = parse_timestamp(raw_t).ok_or_else(|| Error::Ingest {
            row,
            column: schema.time_column.clone(),
            message: format!("unparseable timestamp '{raw_t}'"),
        })?;
        if let Some(&prev) = timestamps.last() {
            if t <= prev {
                return Err(Error::Ingest {
                    row,
                    column: schema.time_column.clone(),
                    message: "timestamps not strictly increasing".into(),
                });
            }
        }
        timestamps.push(t);
        for (i, name) in &value_cols {
            let raw = field(*i, name)?.trim();
            let v: f64 = raw.parse().map_err(|_| Error::Ingest {
                row,
                column: name.clone(),
                message: format!("unparseable number '{raw}'"),
            })?;
            if !v.is_finite() {
                return Err(Error::Ingest { row, column: name.clone(), message: format!("missing value '{raw}'") });
            }
            values.push(v);
        }
    }
    let resolution = match timestamps.as_slice() {
        [a, b, ..] => Resolution(((b - a) / 60).max(0) as u32),
        _ => Resolution(0),
    };
    LoadSeries::new(values, value_cols.into_iter().map(|(_, n)| n).collect(), timestamps, resolution)
}

/// Per-channel affine standardization fitted on a row range.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(series: &LoadSeries, rows: Range<usize>) -> Self {
        let d = series.n_channels();
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for t in rows.clone() {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += series.get(t, c) / n;
            }
        }
        let mut std = vec![0.0; d];
        for t in rows {
            for (c, s) in std.iter_mut().enumerate() {
                *s += (series.get(t, c) - mean[c]).powi(2) / n;
            }
        }
        let std = std.into_iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
        Self { mean, std }
    }

    pub fn apply(&self, series: &LoadSeries) -> LoadSeries {
        let d = series.n_channels();
        let values = series
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % d]) / self.std[i % d])
            .collect();
        LoadSeries { values, ..series.clone() }
    }
}

/// Per-channel statistics of a history window.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Channels whose history is constant; they normalize to zero.
    pub constant: Vec<bool>,
}

impl NormStats {
    pub fn scale(&self, c: usize) -> f64 {
        if self.constant[c] {
            1.0
        } else {
            self.std[c]
        }
    }

    /// Maps a normalized `rows × d` tensor back to load units.
    pub fn denormalize(&self, x: &Tensor) -> Tensor {
        let d = self.mean.len();
        let data = x.data().iter().enumerate().map(|(i, v)| v * self.scale(i % d) + self.mean[i % d]).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn normalize(&self, x: &Tensor) -> Tensor {
        let d = self.mean.len();
        let data = x.data().iter().enumerate().map(|(i, v)| (v - self.mean[i % d]) / self.scale(i % d)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }
}

/// History of `l` steps and the `h` steps that follow it.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadWindow {
    /// `l × d`
    pub history: Tensor,
    /// `h × d`
    pub target: Tensor,
    pub start: usize,
    pub norm_stats: Option<NormStats>,
}

impl LoadWindow {
    pub fn len(&self) -> usize {
        self.history.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn horizon(&self) -> usize {
        self.target.rows()
    }

    pub fn n_channels(&self) -> usize {
        self.history.cols()
    }
}

pub fn window_count(len: usize, l: usize, h: usize, stride: usize) -> usize {
    if stride == 0 || l + h > len {
        0
    } else {
        (len - l - h) / stride + 1
    }
}

/// Sliding windows over the series; `floor((T − l − h) / stride) + 1` of them.
pub fn make_windows(series: &LoadSeries, l: usize, h: usize, stride: usize) -> Result<Vec<LoadWindow>> {
    if l == 0 || h == 0 || stride == 0 {
        return Err(Error::Contract(format!("l={l}, h={h}, stride={stride} must be positive")));
    }
    if l + h > series.len() {
        return Err(Error::Contract(format!("l + h = {} exceeds series length {}", l + h, series.len())));
    }
    Ok((0..window_count(series.len(), l, h, stride))
        .map(|i| {
            let s = i * stride;
            LoadWindow {
                history: series.slice_rows(s..s + l),
                target: series.slice_rows(s + l..s + l + h),
                start: s,
                norm_stats: None,
            }
        })
        .collect())
}

/// Standardizes each history channel, storing the statistics.
pub fn instance_normalize(window: &LoadWindow) -> Result<LoadWindow> {
    if window.norm_stats.is_some() {
        return Err(Error::Contract("window is already normalized".into()));
    }
    let (l, d) = (window.history.rows(), window.history.cols());
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for c in 0..d {
        let col: Vec<f64> = (0..l).map(|t| window.history.at(t, c)).collect();
        mean[c] = col.iter().sum::<f64>() / l as f64;
        std[c] = (col.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>() / l as f64).sqrt();
    }
    let constant: Vec<bool> = std.iter().zip(&mean).map(|(s, m)| *s <= 1e-12 * m.abs().max(1.0)).collect();
    let stats = NormStats { mean, std, constant };
    Ok(LoadWindow {
        history: stats.normalize(&window.history),
        target: window.target.clone(),
        start: window.start,
        norm_stats: Some(stats),
    })
}

/// Undoes [`instance_normalize`].
pub fn denormalize(window: &LoadWindow) -> Result<LoadWindow> {
    let stats = window
        .norm_stats
        .as_ref()
        .ok_or_else(|| Error::Contract("window is not normalized".into()))?;
    Ok(LoadWindow {
        history: stats.denormalize(&window.history),
        target: window.target.clone(),
        start: window.start,
        norm_stats: None,
    })
}

/// Patches of a history, left to right.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    /// `num_patches × patch_len × d`
    pub patches: Tensor,
    pub patch_len: usize,
    pub stride: usize,
    /// Trailing positions filled by repeating the last history value.
    pub pad: usize,
}

impl PatchSet {
    pub fn num_patches(&self) -> usize {
        self.patches.shape()[0]
    }

    /// Patches as `num_patches × (patch_len · d)` token rows.
    pub fn tokens(&self) -> Tensor {
        let s = self.patches.shape();
        self.patches.clone().reshape(&[s[0], s[1] * s[2]]).expect("same size")
    }
}

pub fn patch_count(l: usize, patch_len: usize, stride: usize) -> usize {
    (l.saturating_sub(patch_len)).div_ceil(stride) + 1
}

pub fn patchify(history: &Tensor, patch_len: usize, stride: usize) -> Result<PatchSet> {
    let (l, d) = (history.rows(), history.cols());
    if patch_len == 0 || stride == 0 {
        return Err(Error::Contract("patch_len and stride must be positive".into()));
    }
    if patch_len > l {
        return Err(Error::Contract(format!("patch_len {patch_len} exceeds window length {l}")));
    }
    let n = patch_count(l, patch_len, stride);
    let pad = (n - 1) * stride + patch_len - l;
    let mut data = Vec::with_capacity(n * patch_len * d);
    for p in 0..n {
        for k in 0..patch_len {
            let t = (p * stride + k).min(l - 1);
            data.extend_from_slice(history.row(t));
        }
    }
    Ok(PatchSet { patches: Tensor::new(vec![n, patch_len, d], data)?, patch_len, stride, pad })
}

/// Chronological index ranges of a window list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// 70/10/20 chronological split, then the training range is cut to its first
/// `ceil(train_fraction × len)` windows. Validation and test are untouched.
pub fn few_shot_split(n_windows: usize, train_fraction: f64) -> Result<SplitIndices> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::Config(format!("train fraction {train_fraction} not in (0, 1]")));
    }
    let n_train = n_windows * 7 / 10;
    let n_val = n_windows / 10;
    let kept = ((train_fraction * n_train as f64) - 1e-9).ceil().max(0.0) as usize;
    let kept = kept.min(n_train);
    if kept == 0 {
        return Err(Error::Config(format!(
            "train fraction {train_fraction} of {n_windows} windows leaves no training data"
        )));
    }
    Ok(SplitIndices { train: 0..kept, val: n_train..n_train + n_val, test: n_train + n_val..n_windows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn series_from(values: Vec<Vec<f64>>) -> LoadSeries {
        let d = values[0].len();
        let n = values.len();
        LoadSeries::new(
            values.concat(),
            (0..d).map(|c| format!("c{c}")).collect(),
            (0..n as i64).collect(),
            Resolution(60),
        )
        .unwrap()
    }

    #[test]
    fn synthetic_is_periodic_without_noise_or_trend() {
        let cfg = SyntheticConfig {
            n_steps: 400,
            n_channels: 2,
            daily_period: 24,
            weekly_period: 0,
            trend_slope: 0.0,
            noise_std: 0.0,
            ..Default::default()
        };
        let s = generate_synthetic(&cfg).unwrap();
        for t in 0..s.len() - 24 {
            for c in 0..2 {
                assert!((s.get(t, c) - s.get(t + 24, c)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn synthetic_is_deterministic_per_seed() {
        let cfg = SyntheticConfig { n_steps: 2000, seed: 9, ..Default::default() };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.values(), b.values());
        let c = generate_synthetic(&SyntheticConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn synthetic_daily_autocorrelation() {
        let cfg = SyntheticConfig { n_steps: 4000, n_channels: 3, noise_std: 0.1, seed: 1, ..Default::default() };
        let s = generate_synthetic(&cfg).unwrap();
        for c in 0..3 {
            let x = s.channel(c);
            let n = x.len();
            let m = x.iter().sum::<f64>() / n as f64;
            let var: f64 = x.iter().map(|v| (v - m).powi(2)).sum();
            let cov: f64 = (0..n - 24).map(|t| (x[t] - m) * (x[t + 24] - m)).sum();
            assert!(cov / var > 0.9, "channel {c}: {}", cov / var);
        }
    }

    #[test]
    fn synthetic_rejects_bad_periods() {
        let cfg = SyntheticConfig { daily_period: 0, ..Default::default() };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }

    fn write_file(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn ingest_small_file() {
        let f = write_file("time,a,b\n2024-01-01T00:00:00,1.0,2\n2024-01-01T01:00:00,1.5,2.5\n2024-01-01T02:00:00,2,3\n");
        let s = ingest_csv(f.path(), &CsvSchema::default()).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.n_channels(), 2);
        assert_eq!(s.resolution, Resolution(60));
        assert_eq!(s.get(1, 0), 1.5);
    }

    #[test]
    fn ingest_reports_missing_value_row() {
        let mut body = String::from("time,load\n");
        for t in 1..=10 {
            let v = if t == 7 { "NaN".to_string() } else { format!("{t}.5") };
            body.push_str(&format!("{t},{v}\n"));
        }
        let f = write_file(&body);
        match ingest_csv(f.path(), &CsvSchema::default()) {
            Err(Error::Ingest { row, column, .. }) => {
                assert_eq!(row, 7);
                assert_eq!(column, "load");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ingest_error_paths() {
        let f = write_file("stamp,load\n1,2\n");
        assert!(matches!(ingest_csv(f.path(), &CsvSchema::default()), Err(Error::Ingest { row: 0, .. })));
        let f = write_file("time,load\n1,2\n3,4\n2,5\n");
        assert!(matches!(ingest_csv(f.path(), &CsvSchema::default()), Err(Error::Ingest { row: 3, .. })));
        let f = write_file("time,load\n1,2\n3,x\n");
        assert!(matches!(ingest_csv(f.path(), &CsvSchema::default()), Err(Error::Ingest { row: 2, .. })));
        let f = write_file("time,load\n1,2\n3,\n");
        assert!(matches!(ingest_csv(f.path(), &CsvSchema::default()), Err(Error::Ingest { row: 2, .. })));
        let schema = CsvSchema { time_column: "time".into(), value_columns: vec!["other".into()] };
        let f = write_file("time,load\n1,2\n");
        assert!(matches!(ingest_csv(f.path(), &schema), Err(Error::Ingest { .. })));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let cfg = SyntheticConfig { n_steps: 200, n_channels: 3, seed: 4, ..Default::default() };
        let s = generate_synthetic(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("series.csv");
        s.export_csv(&path).unwrap();
        let back = ingest_csv(&path, &CsvSchema::default()).unwrap();
        assert_eq!(back.values(), s.values());
        assert_eq!(back.timestamps, s.timestamps);
        assert_eq!(back.channel_names, s.channel_names);
    }

    #[test]
    fn window_counts() {
        let s = series_from((0..10).map(|t| vec![t as f64]).collect());
        assert_eq!(make_windows(&s, 4, 2, 1).unwrap().len(), 5);
        let s6 = series_from((0..6).map(|t| vec![t as f64]).collect());
        assert_eq!(make_windows(&s6, 4, 2, 3).unwrap().len(), 1);
        assert!(matches!(make_windows(&s6, 5, 2, 1), Err(Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn windows_match_direct_indexing(t in 3usize..60, l in 1usize..20, h in 1usize..10, stride in 1usize..7) {
            prop_assume!(l + h <= t);
            let s = series_from((0..t).map(|i| vec![i as f64, -(i as f64)]).collect());
            let ws = make_windows(&s, l, h, stride).unwrap();
            prop_assert_eq!(ws.len(), (t - l - h) / stride + 1);
            for (i, w) in ws.iter().enumerate() {
                prop_assert_eq!(w.start, i * stride);
                for k in 0..l {
                    prop_assert_eq!(w.history.at(k, 0), s.get(w.start + k, 0));
                }
                for k in 0..h {
                    prop_assert_eq!(w.target.at(k, 1), s.get(w.start + l + k, 1));
                }
            }
        }

        #[test]
        fn normalization_round_trip(vals in proptest::collection::vec(-1e3f64..1e3, 8..40)) {
            let s = series_from(vals.iter().map(|v| vec![*v, v * 0.5 + 3.0]).collect());
            let w = make_windows(&s, vals.len() - 1, 1, 1).unwrap().remove(0);
            let n = instance_normalize(&w).unwrap();
            let back = denormalize(&n).unwrap();
            for (a, b) in back.history.data().iter().zip(w.history.data()) {
                prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }

        #[test]
        fn few_shot_splits_are_nested(n in 20usize..2000) {
            let fr: Vec<SplitIndices> = [0.05, 0.1, 0.5, 1.0].iter().map(|&f| few_shot_split(n, f).unwrap()).collect();
            for pair in fr.windows(2) {
                prop_assert!(pair[0].train.end <= pair[1].train.end);
                prop_assert_eq!(pair[0].train.start, 0);
                prop_assert_eq!(&pair[0].test, &pair[1].test);
                prop_assert_eq!(&pair[0].val, &pair[1].val);
            }
        }
    }

    #[test]
    fn normalization_statistics() {
        let s = series_from((0..50).map(|t| vec![(t as f64).sin() * 4.0 + 2.0, 7.0]).collect());
        let w = make_windows(&s, 48, 2, 1).unwrap().remove(0);
        let n = instance_normalize(&w).unwrap();
        let stats = n.norm_stats.as_ref().unwrap();
        assert_eq!(stats.constant, vec![false, true]);
        let c0: Vec<f64> = (0..48).map(|t| n.history.at(t, 0)).collect();
        let mean = c0.iter().sum::<f64>() / 48.0;
        let std = (c0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 48.0).sqrt();
        assert!(mean.abs() < 1e-9);
        assert!((std - 1.0).abs() < 1e-6);
        assert!((0..48).all(|t| n.history.at(t, 1) == 0.0));
        assert!(instance_normalize(&n).is_err());
        let back = denormalize(&n).unwrap();
        assert!((0..48).all(|t| back.history.at(t, 1) == 7.0));

        let again = instance_normalize(&LoadWindow { norm_stats: None, ..n.clone() }).unwrap();
        for (a, b) in again.history.data().iter().zip(n.history.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn patch_counts_and_padding() {
        let hist = Tensor::new(vec![8, 1], (0..8).map(f64::from).collect()).unwrap();
        let p = patchify(&hist, 4, 4).unwrap();
        assert_eq!((p.num_patches(), p.pad), (2, 0));
        let p = patchify(&hist, 4, 3).unwrap();
        assert_eq!(p.num_patches(), 3);
        // last patch starts at 6 and covers positions 6..10
        assert_eq!(p.pad, 2);
        assert_eq!(&p.patches.data()[8..12], &[6.0, 7.0, 7.0, 7.0]);
        assert!(patchify(&hist, 9, 1).is_err());
    }

    proptest! {
        #[test]
        fn patches_reconstruct_history(l in 1usize..64, pl in 1usize..16, stride in 1usize..16, d in 1usize..3) {
            prop_assume!(pl <= l);
            let hist = Tensor::new(vec![l, d], (0..l * d).map(|v| v as f64).collect()).unwrap();
            let p = patchify(&hist, pl, stride).unwrap();
            prop_assert!((p.num_patches() - 1) * stride + pl >= l);
            let mut seen = vec![false; l];
            for i in 0..p.num_patches() {
                for k in 0..pl {
                    let t = (i * stride + k).min(l - 1);
                    seen[t] = true;
                    for c in 0..d {
                        prop_assert_eq!(p.patches.data()[(i * pl + k) * d + c], hist.at(t, c));
                    }
                }
            }
            prop_assert!(seen[l - 1]);
            if stride <= pl {
                prop_assert!(seen.iter().all(|&s| s));
            }
        }
    }

    #[test]
    fn few_shot_truncation() {
        let full = few_shot_split(1000, 1.0).unwrap();
        assert_eq!(full.train, 0..700);
        assert_eq!(full.val, 700..800);
        assert_eq!(full.test, 800..1000);
        let s = few_shot_split(1429, 0.1).unwrap();
        assert_eq!(s.train, 0..100);
        assert!(few_shot_split(1000, 0.0).is_err());
        assert!(few_shot_split(1000, 1.5).is_err());
        assert!(matches!(few_shot_split(1, 0.5), Err(Error::Config(_))));
    }
}
