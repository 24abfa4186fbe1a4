//! Masked point-forecast metrics, backtested evaluation, and rank-biased
//! overlap.
//!
//! Non-sale days never enter a metric. The MASE denominator is the mean
//! absolute one-step difference over consecutive sale-day pairs of the
//! history preceding the evaluated region.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{backtest_periods, BacktestPeriod, DataError, Dataset, Region, WindowSample};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("missing forecast for instance {instance} period {period}")]
    Coverage { instance: String, period: usize },
    #[error("hold-out instance {0} was seen during training")]
    Leak(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("forecaster failed: {0}")]
    Forecast(String),
}

/// Mean absolute error over sale days; `None` when there are none.
pub fn masked_mae(y: &[f64], y_hat: &[f64], availability: &[bool]) -> Option<f64> {
    let (sum, n) = y
        .iter()
        .zip(y_hat)
        .zip(availability)
        .filter(|(_, a)| **a)
        .fold((0.0, 0usize), |(s, n), ((y, f), _)| (s + (y - f).abs(), n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn masked_rmse(y: &[f64], y_hat: &[f64], availability: &[bool]) -> Option<f64> {
    let (sum, n) = y
        .iter()
        .zip(y_hat)
        .zip(availability)
        .filter(|(_, a)| **a)
        .fold((0.0, 0usize), |(s, n), ((y, f), _)| (s + (y - f).powi(2), n + 1));
    (n > 0).then(|| (sum / n as f64).sqrt())
}

/// In-sample naive MAE over consecutive sale-day pairs of `history`.
/// `None` when no pair exists or the mean difference is zero.
pub fn naive_scale(history: &[f64], availability: &[bool]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in 1..history.len() {
        if availability[t] && availability[t - 1] {
            sum += (history[t] - history[t - 1]).abs();
            n += 1;
        }
    }
    (n > 0 && sum > 0.0).then(|| sum / n as f64)
}

pub fn masked_mase(
    y: &[f64],
    y_hat: &[f64],
    availability: &[bool],
    history: &[f64],
    history_availability: &[bool],
) -> Option<f64> {
    let mae = masked_mae(y, y_hat, availability)?;
    Some(mae / naive_scale(history, history_availability)?)
}

/// Point forecasts for every (instance, backtest period).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastSet {
    pub instances: Vec<usize>,
    pub periods: Vec<BacktestPeriod>,
    /// `values[i][p]` holds the forecast of `instances[i]` for `periods[p]`.
    pub values: Vec<Vec<Vec<f64>>>,
}

impl ForecastSet {
    pub fn window_samples(&self) -> Vec<WindowSample> {
        self.instances
            .iter()
            .flat_map(|&instance| {
                self.periods.iter().map(move |p| WindowSample {
                    instance,
                    anchor: p.anchor,
                })
            })
            .collect()
    }
}

/// Anything producing unscaled `P`-step forecasts for a batch of windows.
pub trait Forecaster {
    fn forecast(&self, dataset: &Dataset, samples: &[WindowSample]) -> Result<Vec<Vec<f64>>, EvalError>;
}

/// Batches larger than this are split before reaching a forecaster.
const FORECAST_CHUNK: usize = 256;

/// Runs `model` over every backtest period of `region` for `instances`.
pub fn backtest<F: Forecaster + ?Sized>(
    model: &F,
    dataset: &Dataset,
    instances: &[usize],
    region: Region,
) -> Result<ForecastSet, EvalError> {
    let periods = backtest_periods(region, dataset.windows.prediction_length)?;
    let mut set = ForecastSet {
        instances: instances.to_vec(),
        periods,
        values: Vec::new(),
    };
    let samples = set.window_samples();
    let mut flat = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(FORECAST_CHUNK) {
        flat.extend(model.forecast(dataset, chunk)?);
    }
    let per = set.periods.len();
    set.values = flat.chunks(per.max(1)).map(<[Vec<f64>]>::to_vec).collect();
    set.values.resize(instances.len(), Vec::new());
    Ok(set)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalFilters {
    /// A backtest period counts only with at least this many sale days.
    pub min_sale_days: usize,
}

impl Default for EvalFilters {
    fn default() -> Self {
        Self { min_sale_days: 7 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    ZeroMaseDenominator,
    InsufficientSaleDays,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skip {
    pub id: String,
    pub reason: SkipReason,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub id: String,
    pub mase: Option<f64>,
    pub mae: f64,
    pub rmse: f64,
    pub sale_days: usize,
}

/// Mean and population standard deviation over the instances where the
/// metric is defined.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            count: values.len(),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub instances: Vec<InstanceMetrics>,
    pub mase: Option<Aggregate>,
    pub mae: Option<Aggregate>,
    pub rmse: Option<Aggregate>,
    pub skipped: Vec<Skip>,
}

impl MetricReport {
    fn finish(instances: Vec<InstanceMetrics>, skipped: Vec<Skip>) -> Self {
        let mase: Vec<f64> = instances.iter().filter_map(|m| m.mase).collect();
        let mae: Vec<f64> = instances.iter().map(|m| m.mae).collect();
        let rmse: Vec<f64> = instances.iter().map(|m| m.rmse).collect();
        Self {
            mase: Aggregate::of(&mase),
            mae: Aggregate::of(&mae),
            rmse: Aggregate::of(&rmse),
            instances,
            skipped,
        }
    }

    /// Mean MASE, or infinity when undefined everywhere.
    pub fn mean_mase(&self) -> f64 {
        self.mase.map_or(f64::INFINITY, |a| a.mean)
    }

    /// Per-instance rows: `id,mase,mae,rmse,sale_days`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,mase,mae,rmse,sale_days\n");
        for m in &self.instances {
            let mase = m.mase.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{}", m.id, mase, m.mae, m.rmse, m.sale_days);
        }
        out
    }

    /// Aggregates and skip counts.
    pub fn summary_json(&self) -> serde_json::Value {
        let count = |r: SkipReason| self.skipped.iter().filter(|s| s.reason == r).count();
        serde_json::json!({
            "mase": self.mase,
            "mae": self.mae,
            "rmse": self.rmse,
            "evaluated": self.instances.len(),
            "skipped": {
                "zero_mase_denominator": count(SkipReason::ZeroMaseDenominator),
                "insufficient_sale_days": count(SkipReason::InsufficientSaleDays),
            },
            "skipped_ids": self.skipped,
        })
    }
}

/// Scores `forecasts` against the data. Each instance pools the days of its
/// qualifying periods; MASE uses the history before the first period.
pub fn evaluate(forecasts: &ForecastSet, dataset: &Dataset, filters: &EvalFilters) -> Result<MetricReport, EvalError> {
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    let history_end = forecasts.periods.iter().map(|p| p.target.start).min().unwrap_or(0);
    for (i, &idx) in forecasts.instances.iter().enumerate() {
        let inst = &dataset.instances[idx];
        let mut y = Vec::new();
        let mut y_hat = Vec::new();
        let mut avail = Vec::new();
        for (p, period) in forecasts.periods.iter().enumerate() {
            let pred = forecasts
                .values
                .get(i)
                .and_then(|v| v.get(p))
                .filter(|v| v.len() == period.target.len())
                .ok_or_else(|| EvalError::Coverage {
                    instance: inst.id.clone(),
                    period: p,
                })?;
            let range = period.target.start..period.target.end;
            let sale_days = inst.availability[range.clone()].iter().filter(|a| **a).count();
            if sale_days == 0 || sale_days < filters.min_sale_days {
                continue;
            }
            y.extend(inst.sales[range.clone()].iter().map(|&s| s as f64));
            avail.extend_from_slice(&inst.availability[range]);
            y_hat.extend_from_slice(pred);
        }
        let (Some(mae), Some(rmse)) = (masked_mae(&y, &y_hat, &avail), masked_rmse(&y, &y_hat, &avail)) else {
            skipped.push(Skip {
                id: inst.id.clone(),
                reason: SkipReason::InsufficientSaleDays,
            });
            continue;
        };
        let history: Vec<f64> = inst.sales[..history_end].iter().map(|&s| s as f64).collect();
        let mase = naive_scale(&history, &inst.availability[..history_end]).map(|d| mae / d);
        if mase.is_none() {
            skipped.push(Skip {
                id: inst.id.clone(),
                reason: SkipReason::ZeroMaseDenominator,
            });
        }
        rows.push(InstanceMetrics {
            id: inst.id.clone(),
            mase,
            mae,
            rmse,
            sale_days: avail.iter().filter(|a| **a).count(),
        });
    }
    Ok(MetricReport::finish(rows, skipped))
}

/// Evaluates on hold-out instances after checking none of them appears in
/// `trained_ids`.
pub fn transfer_evaluate<F: Forecaster + ?Sized>(
    model: &F,
    dataset: &Dataset,
    holdout: &[usize],
    trained_ids: &[String],
    region: Region,
    filters: &EvalFilters,
) -> Result<MetricReport, EvalError> {
    let seen: BTreeSet<&str> = trained_ids.iter().map(String::as_str).collect();
    for &h in holdout {
        let id = &dataset.instances[h].id;
        if seen.contains(id.as_str()) {
            return Err(EvalError::Leak(id.clone()));
        }
    }
    if holdout.is_empty() {
        return Ok(MetricReport::default());
    }
    let forecasts = backtest(model, dataset, holdout, region)?;
    evaluate(&forecasts, dataset, filters)
}

/// Default persistence of [`rbo`].
pub const RBO_PERSISTENCE: f64 = 0.9;

/// Truncated rank-biased overlap normalized so identical prefixes score 1:
/// `Σ_{d≤depth} p^{d−1}·|A:d ∩ B:d|/d  /  Σ_{d≤depth} p^{d−1}`.
/// `depth` is clamped to the ranking length.
pub fn rbo(a: &[usize], b: &[usize], depth: usize, persistence: f64) -> Result<f64, EvalError> {
    let mut sa: Vec<usize> = a.to_vec();
    let mut sb: Vec<usize> = b.to_vec();
    sa.sort_unstable();
    sb.sort_unstable();
    if sa != sb || sa.windows(2).any(|w| w[0] == w[1]) {
        return Err(EvalError::Contract("rbo needs two permutations of one index set".into()));
    }
    if depth == 0 || !(persistence > 0.0 && persistence < 1.0) {
        return Err(EvalError::Contract("rbo needs depth ≥ 1 and persistence in (0, 1)".into()));
    }
    let depth = depth.min(a.len());
    if depth == 0 {
        return Ok(1.0);
    }
    let mut seen_a = BTreeSet::new();
    let mut seen_b = BTreeSet::new();
    let mut overlap = 0usize;
    let (mut num, mut den, mut w) = (0.0, 0.0, 1.0);
    for d in 0..depth {
        let (x, y) = (a[d], b[d]);
        if x == y {
            overlap += 1;
        } else {
            if seen_b.contains(&x) {
                overlap += 1;
            }
            if seen_a.contains(&y) {
                overlap += 1;
            }
        }
        seen_a.insert(x);
        seen_b.insert(y);
        num += w * overlap as f64 / (d + 1) as f64;
        den += w;
        w *= persistence;
    }
    Ok(num / den)
}

/// Indices ordered by ascending score; ties broken by index.
pub fn rank_ascending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]).then(i.cmp(&j)));
    idx
}
