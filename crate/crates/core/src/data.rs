//! Series containers, M5-format ingestion, the synthetic generator, splits,
//! and sliding windows.
//!
//! Context windows are exactly `C` steps ending at the anchor day `t`
//! (inclusive); targets are the `P` days after it. The representation window
//! is the `W` days ending at the same anchor, zero-padded (and marked
//! non-sale) where it reaches before day 0.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("config error: {0}")]
    Config(String),
}

impl DataError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// One product's daily history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesInstance {
    pub id: String,
    pub sales: Vec<u32>,
    /// `true` on sale days, `false` on non-sale days.
    pub availability: Vec<bool>,
    /// Extra real-valued channels, each of the series' length.
    pub features: Vec<Vec<f64>>,
    /// Opaque categorical columns carried through from the source file.
    pub metadata: BTreeMap<String, String>,
}

impl SeriesInstance {
    pub fn new(id: impl Into<String>, sales: Vec<u32>) -> Self {
        let n = sales.len();
        Self {
            id: id.into(),
            sales,
            availability: vec![true; n],
            features: Vec::new(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.sales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sales.is_empty()
    }

    fn validate(&self) -> Result<(), DataError> {
        let n = self.sales.len();
        if self.availability.len() != n || self.features.iter().any(|f| f.len() != n) {
            return Err(DataError::Config(format!(
                "instance {} has channels of unequal length",
                self.id
            )));
        }
        Ok(())
    }

    /// Prepends `n` zero-sales, non-sale days.
    fn left_pad(&mut self, n: usize) {
        if n == 0 {
            return;
        }
        let mut sales = vec![0; n];
        sales.extend_from_slice(&self.sales);
        self.sales = sales;
        let mut avail = vec![false; n];
        avail.extend_from_slice(&self.availability);
        self.availability = avail;
        for f in &mut self.features {
            let mut padded = vec![0.0; n];
            padded.extend_from_slice(f);
            *f = padded;
        }
    }

    /// Keeps only the most recent `days` days.
    fn keep_suffix(&mut self, days: usize) {
        let n = self.len();
        if days >= n {
            return;
        }
        let cut = n - days;
        self.sales.drain(..cut);
        self.availability.drain(..cut);
        for f in &mut self.features {
            f.drain(..cut);
        }
    }
}

/// Window lengths shared by every model reading a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub prediction_length: usize,
    pub context_length: usize,
    pub representation_window: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            prediction_length: 7,
            context_length: 28,
            representation_window: 56,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.prediction_length == 0 || self.context_length == 0 || self.representation_window == 0 {
            return Err(DataError::Config(format!(
                "window lengths must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// A set of equally long series plus the window lengths models use on them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub instances: Vec<SeriesInstance>,
    pub windows: WindowConfig,
}

impl Dataset {
    /// Builds a dataset, left-padding shorter series to the longest length.
    pub fn from_instances(
        mut instances: Vec<SeriesInstance>,
        windows: WindowConfig,
    ) -> Result<Self, DataError> {
        windows.validate()?;
        for inst in &instances {
            inst.validate()?;
        }
        let t = instances.iter().map(SeriesInstance::len).max().unwrap_or(0);
        let f = instances.first().map_or(0, |i| i.features.len());
        if instances.iter().any(|i| i.features.len() != f) {
            return Err(DataError::Config("instances disagree on feature count".into()));
        }
        for inst in &mut instances {
            let pad = t - inst.len();
            inst.left_pad(pad);
        }
        Ok(Self { instances, windows })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Calendar length `T`.
    pub fn days(&self) -> usize {
        self.instances.first().map_or(0, SeriesInstance::len)
    }

    /// Model input width: sales, availability, and extra features.
    pub fn input_dim(&self) -> usize {
        2 + self.instances.first().map_or(0, |i| i.features.len())
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.instances.iter().position(|i| i.id == id)
    }

    /// Restricts every instance to its most recent `days` days.
    pub fn keep_recent_days(&mut self, days: usize) {
        for inst in &mut self.instances {
            inst.keep_suffix(days);
        }
    }
}

/// Half-open day range `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub start: usize,
    pub end: usize,
}

impl Region {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, day: usize) -> bool {
        (self.start..self.end).contains(&day)
    }
}

// ---------------------------------------------------------------------------
// M5 CSV
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default)]
pub struct M5Options {
    pub availability_path: Option<PathBuf>,
    pub row_limit: Option<usize>,
    /// Keep only the most recent `day_limit` days.
    pub day_limit: Option<usize>,
    pub windows: WindowConfig,
}

struct CsvTable {
    id_col: usize,
    day_cols: Vec<usize>,
    meta_cols: Vec<(usize, String)>,
    rows: Vec<csv::StringRecord>,
}

fn read_table(path: &Path, row_limit: Option<usize>) -> Result<CsvTable, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_reader(BufReader::new(file));
    let headers = reader
        .headers()
        .map_err(|e| DataError::Parse {
            row: 0,
            message: e.to_string(),
        })?
        .clone();
    let id_col = headers
        .iter()
        .position(|h| h == "id")
        .ok_or_else(|| DataError::Parse {
            row: 0,
            message: "header has no `id` column".into(),
        })?;
    let mut days: Vec<(usize, usize)> = Vec::new();
    let mut meta_cols = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        if i == id_col {
            continue;
        }
        match h.strip_prefix("d_").and_then(|d| d.parse::<usize>().ok()) {
            Some(d) => days.push((d, i)),
            None => meta_cols.push((i, h.to_string())),
        }
    }
    if days.is_empty() {
        return Err(DataError::Parse {
            row: 0,
            message: "header has no d_<n> day columns".into(),
        });
    }
    days.sort_unstable();
    let day_cols = days.into_iter().map(|(_, i)| i).collect();
    let mut rows = Vec::new();
    for (n, rec) in reader.records().enumerate() {
        if row_limit.is_some_and(|lim| rows.len() >= lim) {
            break;
        }
        let rec = rec.map_err(|e| DataError::Parse {
            row: n + 1,
            message: e.to_string(),
        })?;
        if rec.len() != headers.len() {
            return Err(DataError::Parse {
                row: n + 1,
                message: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        rows.push(rec);
    }
    Ok(CsvTable {
        id_col,
        day_cols,
        meta_cols,
        rows,
    })
}

/// Reads an M5-style wide CSV: an `id` column, `d_1..d_T` day columns, and
/// any other columns kept as opaque metadata.
pub fn load_m5_csv(path: &Path, options: &M5Options) -> Result<Dataset, DataError> {
    let table = read_table(path, options.row_limit)?;
    let mut instances = Vec::with_capacity(table.rows.len());
    for (n, rec) in table.rows.iter().enumerate() {
        let mut sales = Vec::with_capacity(table.day_cols.len());
        for &c in &table.day_cols {
            let cell = rec[c].trim();
            let v: u32 = cell.parse().map_err(|_| DataError::Parse {
                row: n + 1,
                message: format!("sales value `{cell}` is not a non-negative integer"),
            })?;
            sales.push(v);
        }
        let mut inst = SeriesInstance::new(rec[table.id_col].to_string(), sales);
        for (c, name) in &table.meta_cols {
            inst.metadata.insert(name.clone(), rec[*c].to_string());
        }
        instances.push(inst);
    }

    if let Some(avail_path) = &options.availability_path {
        let avail = read_table(avail_path, options.row_limit)?;
        let by_id: BTreeMap<&str, &csv::StringRecord> =
            avail.rows.iter().map(|r| (&r[avail.id_col], r)).collect();
        for (n, inst) in instances.iter_mut().enumerate() {
            let rec = by_id.get(inst.id.as_str()).ok_or_else(|| DataError::Parse {
                row: n + 1,
                message: format!("availability file has no row for `{}`", inst.id),
            })?;
            if avail.day_cols.len() != inst.len() {
                return Err(DataError::Parse {
                    row: n + 1,
                    message: "availability file has a different number of day columns".into(),
                });
            }
            for (k, &c) in avail.day_cols.iter().enumerate() {
                inst.availability[k] = match rec[c].trim() {
                    "1" => true,
                    "0" => false,
                    other => {
                        return Err(DataError::Parse {
                            row: n + 1,
                            message: format!("availability value `{other}` is not 0 or 1"),
                        })
                    }
                };
            }
        }
    }

    if let Some(days) = options.day_limit {
        for inst in &mut instances {
            inst.keep_suffix(days);
        }
    }
    Dataset::from_instances(instances, options.windows)
}

/// Writes sales and availability as two M5-shaped CSV files.
pub fn write_m5_csv(dataset: &Dataset, sales_path: &Path, availability_path: &Path) -> Result<(), DataError> {
    let meta_names: Vec<String> = dataset
        .instances
        .first()
        .map(|i| i.metadata.keys().cloned().collect())
        .unwrap_or_default();
    let t = dataset.days();
    let header = |buf: &mut String| {
        buf.push_str("id");
        for m in &meta_names {
            buf.push(',');
            buf.push_str(m);
        }
        for d in 1..=t {
            buf.push_str(&format!(",d_{d}"));
        }
        buf.push('\n');
    };
    let mut sales = String::new();
    let mut avail = String::new();
    header(&mut sales);
    header(&mut avail);
    for inst in &dataset.instances {
        let mut prefix = inst.id.clone();
        for m in &meta_names {
            prefix.push(',');
            prefix.push_str(inst.metadata.get(m).map_or("", String::as_str));
        }
        sales.push_str(&prefix);
        avail.push_str(&prefix);
        for (s, a) in inst.sales.iter().zip(&inst.availability) {
            sales.push_str(&format!(",{s}"));
            avail.push_str(if *a { ",1" } else { ",0" });
        }
        sales.push('\n');
        avail.push('\n');
    }
    for (path, body) in [(sales_path, sales), (availability_path, avail)] {
        let mut f = File::create(path).map_err(|e| DataError::io(path, e))?;
        f.write_all(body.as_bytes()).map_err(|e| DataError::io(path, e))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Generating process of one regime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub level: f64,
    /// Relative amplitude of the weekly sinusoid.
    pub weekly_amplitude: f64,
    pub weekly_phase: f64,
    /// Daily slope as a fraction of the level, centred on the middle day.
    pub trend: f64,
    /// Lag-one autocorrelation of the noise; the marginal spread stays
    /// `noise_level` for any value in `[0, 1)`.
    #[serde(default)]
    pub noise_persistence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_instances: usize,
    pub n_days: usize,
    pub n_regimes: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise_level: f64,
    pub seed: u64,
    /// Upper bound on the share of non-sale days per instance.
    #[serde(default = "default_non_sale_fraction")]
    pub max_non_sale_fraction: f64,
    /// Explicit regimes; drawn from the seed when absent.
    #[serde(default)]
    pub regimes: Option<Vec<Regime>>,
    #[serde(default)]
    pub windows: WindowConfig,
}

fn default_non_sale_fraction() -> f64 {
    0.1
}

impl SyntheticSpec {
    pub fn new(n_instances: usize, n_days: usize, n_regimes: usize, noise_level: f64, seed: u64) -> Self {
        Self {
            n_instances,
            n_days,
            n_regimes,
            noise_level,
            seed,
            max_non_sale_fraction: default_non_sale_fraction(),
            regimes: None,
            windows: WindowConfig::default(),
        }
    }
}

/// Metadata key holding the generating regime of a synthetic instance.
pub const REGIME_KEY: &str = "regime";

fn draw_regimes(n: usize, rng: &mut ChaCha8Rng) -> Vec<Regime> {
    (0..n)
        .map(|r| {
            // Levels spread over a decade so regimes differ in scale as well
            // as in shape.
            let base = 3.0 * 10f64.powf(r as f64 / n.max(1) as f64);
            Regime {
                level: base * rng.random_range(0.9..1.1),
                weekly_amplitude: rng.random_range(0.1..0.8),
                weekly_phase: rng.random_range(0.0..std::f64::consts::TAU),
                trend: rng.random_range(-0.002..0.002),
                noise_persistence: rng.random_range(0.0..0.9),
            }
        })
        .collect()
}

/// Regimes `generate_synthetic` uses for `spec`.
pub fn synthetic_regimes(spec: &SyntheticSpec) -> Result<Vec<Regime>, DataError> {
    resolve_regimes(spec, &mut ChaCha8Rng::seed_from_u64(spec.seed))
}

fn resolve_regimes(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Regime>, DataError> {
    Ok(match &spec.regimes {
        Some(r) if r.len() == spec.n_regimes => r.clone(),
        Some(r) => {
            return Err(DataError::Config(format!(
                "{} regimes given but n_regimes is {}",
                r.len(),
                spec.n_regimes
            )))
        }
        None => draw_regimes(spec.n_regimes, rng),
    })
}

/// Generates regime-structured daily sales. Deterministic in `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    if spec.n_regimes == 0 {
        return Err(DataError::Config("n_regimes must be at least 1".into()));
    }
    if !(spec.noise_level >= 0.0) {
        return Err(DataError::Config("noise_level must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let regimes = resolve_regimes(spec, &mut rng)?;
    let noise = Normal::new(0.0, spec.noise_level.max(0.0)).map_err(|e| DataError::Config(e.to_string()))?;
    let mid = spec.n_days as f64 / 2.0;
    let budget = (spec.max_non_sale_fraction * spec.n_days as f64).floor() as usize;

    let mut instances = Vec::with_capacity(spec.n_instances);
    for i in 0..spec.n_instances {
        let r = i % spec.n_regimes;
        let reg = &regimes[r];
        let rho = reg.noise_persistence.clamp(0.0, 0.999);
        let innovation = (1.0 - rho * rho).sqrt();
        let mut eps = 0.0;
        let mut sales = Vec::with_capacity(spec.n_days);
        for t in 0..spec.n_days {
            let season = 1.0
                + reg.weekly_amplitude
                    * (std::f64::consts::TAU * t as f64 / 7.0 + reg.weekly_phase).sin();
            let base = reg.level * (season + reg.trend * (t as f64 - mid));
            if spec.noise_level > 0.0 {
                let z = noise.sample(&mut rng);
                eps = if t == 0 { z } else { rho * eps + innovation * z };
            }
            sales.push((base + eps).max(0.0).round() as u32);
        }
        let mut availability = vec![true; spec.n_days];
        let mut remaining = budget;
        let stretches = rng.random_range(0..=3usize);
        for _ in 0..stretches {
            if remaining == 0 {
                break;
            }
            let len = rng.random_range(1..=remaining.min(14));
            let start = rng.random_range(0..spec.n_days.saturating_sub(len).max(1));
            let mut newly = 0;
            for a in availability.iter_mut().skip(start).take(len) {
                if *a {
                    newly += 1;
                }
                *a = false;
            }
            remaining -= newly.min(remaining);
        }
        for (s, a) in sales.iter_mut().zip(&availability) {
            if !a {
                *s = 0;
            }
        }
        let mut inst = SeriesInstance::new(format!("series_{i:05}"), sales);
        inst.availability = availability;
        inst.metadata.insert(REGIME_KEY.into(), r.to_string());
        instances.push(inst);
    }
    Dataset::from_instances(instances, spec.windows)
}

/// Regime labels of a synthetic dataset, if every instance carries one.
pub fn regime_labels(dataset: &Dataset) -> Option<Vec<usize>> {
    dataset
        .instances
        .iter()
        .map(|i| i.metadata.get(REGIME_KEY)?.parse().ok())
        .collect()
}

// ---------------------------------------------------------------------------
// Splits and windows
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub test_days: usize,
    pub validation_days: usize,
    pub holdout_fraction: f64,
    pub backtest_periods: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            test_days: 28,
            validation_days: 28,
            holdout_fraction: 0.05,
            backtest_periods: 1,
        }
    }
}

impl SplitSpec {
    /// Length of one backtest period.
    pub fn period_length(&self) -> usize {
        self.test_days / self.backtest_periods.max(1)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(DataError::Config(format!(
                "holdout_fraction must lie in [0, 1), got {}",
                self.holdout_fraction
            )));
        }
        if self.backtest_periods == 0 || !self.test_days.is_multiple_of(self.backtest_periods) {
            return Err(DataError::Config(format!(
                "{} backtest periods do not tile {} test days",
                self.backtest_periods, self.test_days
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Region,
    pub validation: Region,
    pub test: Region,
    /// Indices of instances excluded from all training.
    pub holdout: Vec<usize>,
    /// Indices of the remaining instances, ascending.
    pub train_instances: Vec<usize>,
}

/// Suffix time split plus a seeded uniform hold-out of instances.
///
/// The hold-out size is `floor(N · holdout_fraction)`.
pub fn split(dataset: &Dataset, spec: &SplitSpec, seed: u64) -> Result<Split, DataError> {
    spec.validate()?;
    let t = dataset.days();
    let w = dataset.windows;
    let minimum = spec.test_days + spec.validation_days + w.context_length + w.prediction_length;
    if t <= minimum {
        return Err(DataError::Config(format!(
            "series of {t} days are too short: need more than {minimum} \
             (test {} + validation {} + context {} + prediction {})",
            spec.test_days, spec.validation_days, w.context_length, w.prediction_length
        )));
    }
    let test = Region::new(t - spec.test_days, t);
    let validation = Region::new(test.start - spec.validation_days, test.start);
    let train = Region::new(0, validation.start);

    let n = dataset.len();
    let n_hold = (n as f64 * spec.holdout_fraction).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut holdout: Vec<usize> = sample(&mut rng, n, n_hold).into_vec();
    holdout.sort_unstable();
    let train_instances = (0..n).filter(|i| holdout.binary_search(i).is_err()).collect();
    Ok(Split {
        train,
        validation,
        test,
        holdout,
        train_instances,
    })
}

/// A training or forecasting example anchored at day `anchor`, the last day
/// of its context window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSample {
    pub instance: usize,
    pub anchor: usize,
}

impl WindowSample {
    pub fn context_range(&self, w: &WindowConfig) -> std::ops::Range<usize> {
        self.anchor + 1 - w.context_length..self.anchor + 1
    }

    /// First day of the representation window; negative when it reaches
    /// before the start of the data.
    pub fn rep_start(&self, w: &WindowConfig) -> isize {
        self.anchor as isize + 1 - w.representation_window as isize
    }

    pub fn target_range(&self, w: &WindowConfig) -> std::ops::Range<usize> {
        self.anchor + 1..self.anchor + 1 + w.prediction_length
    }
}

/// Every window of the given instances whose context and target lie inside
/// `region`, with anchors advancing by `stride`.
pub fn make_windows(
    dataset: &Dataset,
    instances: &[usize],
    region: Region,
    stride: usize,
) -> Vec<WindowSample> {
    let w = dataset.windows;
    let span = w.context_length + w.prediction_length;
    if region.len() < span || stride == 0 {
        return Vec::new();
    }
    let first = region.start + w.context_length - 1;
    let last = region.end - w.prediction_length - 1;
    let mut out = Vec::new();
    for &instance in instances {
        let mut anchor = first;
        while anchor <= last {
            out.push(WindowSample { instance, anchor });
            anchor += stride;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BacktestPeriod {
    /// Last context day before the period's targets.
    pub anchor: usize,
    pub target: Region,
}

/// Consecutive non-overlapping prediction periods tiling `region`.
pub fn backtest_periods(region: Region, period_length: usize) -> Result<Vec<BacktestPeriod>, DataError> {
    if period_length == 0 || !region.len().is_multiple_of(period_length) {
        return Err(DataError::Config(format!(
            "period length {period_length} does not divide a {}-day region",
            region.len()
        )));
    }
    if region.start == 0 {
        return Err(DataError::Config("backtest region needs preceding history".into()));
    }
    Ok((0..region.len() / period_length)
        .map(|k| {
            let start = region.start + k * period_length;
            BacktestPeriod {
                anchor: start - 1,
                target: Region::new(start, start + period_length),
            }
        })
        .collect())
}

/// Model-ready tensors for a batch of windows.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[batch × C × input_dim]`, sales divided by `scale`.
    pub context: Tensor,
    /// `[batch × W × input_dim]`, same scaling.
    pub rep_context: Tensor,
    /// `[batch × P]` scaled targets (zeros past the end of the data).
    pub target: Tensor,
    /// Per-sample divisor: one plus the mean sale-day sales of the context,
    /// or of the representation window when the context has no sale day.
    pub scale: Vec<f64>,
}

fn fill_day(dst: &mut [f64], inst: &SeriesInstance, day: isize, scale: f64) {
    if day < 0 || day as usize >= inst.len() {
        dst.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let d = day as usize;
    dst[0] = inst.sales[d] as f64 / scale;
    dst[1] = if inst.availability[d] { 1.0 } else { 0.0 };
    for (k, f) in inst.features.iter().enumerate() {
        dst[2 + k] = f[d];
    }
}

fn sale_day_mean(inst: &SeriesInstance, days: std::ops::Range<usize>) -> Option<f64> {
    let (sum, n) = days
        .filter(|&d| inst.availability[d])
        .fold((0.0, 0usize), |(s, n), d| (s + inst.sales[d] as f64, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Assembles scaled model inputs for `samples`.
pub fn assemble_batch(dataset: &Dataset, samples: &[WindowSample]) -> Batch {
    let w = dataset.windows;
    let (c, rw, p, f) = (
        w.context_length,
        w.representation_window,
        w.prediction_length,
        dataset.input_dim(),
    );
    let b = samples.len();
    let mut context = Tensor::zeros(&[b, c, f]);
    let mut rep = Tensor::zeros(&[b, rw, f]);
    let mut target = Tensor::zeros(&[b, p]);
    let mut scale = Vec::with_capacity(b);
    for (i, s) in samples.iter().enumerate() {
        let inst = &dataset.instances[s.instance];
        let ctx = s.context_range(&w);
        let r0 = s.rep_start(&w);
        let rep_days = r0.max(0) as usize..(r0 + rw as isize).clamp(0, inst.len() as isize) as usize;
        let sc = 1.0
            + sale_day_mean(inst, ctx.clone())
                .or_else(|| sale_day_mean(inst, rep_days))
                .unwrap_or(0.0);
        scale.push(sc);
        for (k, day) in ctx.enumerate() {
            let off = (i * c + k) * f;
            fill_day(&mut context.data_mut()[off..off + f], inst, day as isize, sc);
        }
        for k in 0..rw {
            let off = (i * rw + k) * f;
            fill_day(&mut rep.data_mut()[off..off + f], inst, r0 + k as isize, sc);
        }
        for (k, day) in s.target_range(&w).enumerate() {
            if day < inst.len() {
                target.data_mut()[i * p + k] = inst.sales[day] as f64 / sc;
            }
        }
    }
    Batch {
        context,
        rep_context: rep,
        target,
        scale,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, t: usize, windows: WindowConfig) -> Dataset {
        let instances = (0..n)
            .map(|i| SeriesInstance::new(format!("s{i}"), (0..t as u32).collect()))
            .collect();
        Dataset::from_instances(instances, windows).unwrap()
    }

    fn win(c: usize, p: usize) -> WindowConfig {
        WindowConfig {
            prediction_length: p,
            context_length: c,
            representation_window: c,
        }
    }

    #[test]
    fn window_counts_follow_anchor_enumeration() {
        let (c, p) = (5, 3);
        let ds = toy(1, 40, win(c, p));
        let count = |len: usize, stride: usize| make_windows(&ds, &[0], Region::new(2, 2 + len), stride).len();
        assert_eq!(count(c + p, 1), 1);
        assert_eq!(count(c + p + 2, 1), 3);
        assert_eq!(count(c + p + 10, 5), 3);
        assert_eq!(count(c + p - 1, 1), 0);
    }

    #[test]
    fn train_windows_never_read_past_region() {
        let ds = toy(3, 120, win(10, 4));
        let region = Region::new(0, 70);
        for s in make_windows(&ds, &[0, 1, 2], region, 1) {
            let w = ds.windows;
            assert!(region.contains(s.context_range(&w).start));
            assert!(s.target_range(&w).end <= region.end);
        }
    }

    #[test]
    fn split_regions_and_holdout_size() {
        let ds = toy(100, 1035, WindowConfig { prediction_length: 7, context_length: 84, representation_window: 200 });
        let s = split(&ds, &SplitSpec::default(), 1).unwrap();
        assert_eq!(s.train.len(), 979);
        assert_eq!(s.validation, Region::new(979, 1007));
        assert_eq!(s.test, Region::new(1007, 1035));
        assert_eq!(s.holdout.len(), 5);
        assert!(s.holdout.iter().all(|h| !s.train_instances.contains(h)));
        assert_eq!(s.holdout.len() + s.train_instances.len(), 100);

        let none = split(&ds, &SplitSpec { holdout_fraction: 0.0, ..SplitSpec::default() }, 1).unwrap();
        assert!(none.holdout.is_empty());
    }

    #[test]
    fn split_rejects_short_series() {
        let ds = toy(2, 91, win(28, 7));
        let err = split(&ds, &SplitSpec::default(), 0).unwrap_err();
        assert!(err.to_string().contains("need more than 91"), "{err}");
    }

    #[test]
    fn backtest_period_tiling() {
        let region = Region::new(100, 128);
        assert_eq!(backtest_periods(region, 28).unwrap().len(), 1);
        let four = backtest_periods(region, 7).unwrap();
        assert_eq!(four.len(), 4);
        for (k, p) in four.iter().enumerate() {
            assert_eq!(p.target, Region::new(100 + 7 * k, 107 + 7 * k));
            assert_eq!(p.anchor + 1, p.target.start);
        }
        assert_eq!(backtest_periods(region, 14).unwrap().len(), 2);
        assert!(backtest_periods(region, 5).is_err());
    }

    #[test]
    fn short_series_are_left_padded_as_non_sale() {
        let a = SeriesInstance::new("a", vec![1, 2, 3, 4]);
        let b = SeriesInstance::new("b", vec![7, 8]);
        let ds = Dataset::from_instances(vec![a, b], win(1, 1)).unwrap();
        assert_eq!(ds.instances[1].sales, vec![0, 0, 7, 8]);
        assert_eq!(ds.instances[1].availability, vec![false, false, true, true]);
    }

    #[test]
    fn batch_scaling_and_padding() {
        let ds = toy(1, 30, WindowConfig { prediction_length: 2, context_length: 3, representation_window: 5 });
        let s = WindowSample { instance: 0, anchor: 2 };
        let b = assemble_batch(&ds, &[s]);
        // context sales 0,1,2 → mean 1 → scale 2
        assert_eq!(b.scale, vec![2.0]);
        assert_eq!(b.context.data(), &[0.0, 1.0, 0.5, 1.0, 1.0, 1.0]);
        // rep window starts two days before day 0
        assert_eq!(&b.rep_context.data()[..4], &[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(b.target.data(), &[1.5, 2.0]);
    }

    #[test]
    fn synthetic_is_deterministic_and_masks_non_sale_days() {
        let spec = SyntheticSpec::new(20, 200, 3, 1.5, 42);
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        for inst in &a.instances {
            let off = inst.availability.iter().filter(|x| !**x).count();
            assert!(off <= 20);
            for (s, av) in inst.sales.iter().zip(&inst.availability) {
                if !av {
                    assert_eq!(*s, 0);
                }
            }
        }
        assert_eq!(regime_labels(&a).unwrap()[..4], [0, 1, 2, 0]);
    }

    #[test]
    fn synthetic_noiseless_constant_regime() {
        let mut spec = SyntheticSpec::new(5, 60, 1, 0.0, 3);
        spec.regimes = Some(vec![Regime { level: 5.0, weekly_amplitude: 0.0, weekly_phase: 0.0, trend: 0.0, noise_persistence: 0.0 }]);
        let ds = generate_synthetic(&spec).unwrap();
        for inst in &ds.instances {
            for (s, a) in inst.sales.iter().zip(&inst.availability) {
                if *a {
                    assert_eq!(*s, 5);
                }
            }
        }
    }

    #[test]
    fn synthetic_rejects_zero_regimes() {
        assert!(generate_synthetic(&SyntheticSpec::new(5, 60, 0, 1.0, 3)).is_err());
    }

    #[test]
    fn synthetic_regime_means_follow_levels() {
        let levels = [20.0, 40.0];
        let noise = 3.0;
        let days = 400;
        let mut spec = SyntheticSpec::new(10, days, 2, noise, 9);
        spec.regimes = Some(
            levels
                .iter()
                .map(|&level| Regime { level, weekly_amplitude: 0.0, weekly_phase: 0.0, trend: 0.0, noise_persistence: 0.0 })
                .collect(),
        );
        let ds = generate_synthetic(&spec).unwrap();
        let labels = regime_labels(&ds).unwrap();
        for (inst, &r) in ds.instances.iter().zip(&labels) {
            let on: Vec<f64> = inst
                .sales
                .iter()
                .zip(&inst.availability)
                .filter(|(_, a)| **a)
                .map(|(&s, _)| s as f64)
                .collect();
            let mean = on.iter().sum::<f64>() / on.len() as f64;
            // Rounding adds at most ±0.5 of bias on top of the sampling error.
            let bound = 3.0 * noise / (on.len() as f64).sqrt() + 0.5;
            assert!((mean - levels[r]).abs() < bound, "{mean} vs {}", levels[r]);
        }
    }
}
