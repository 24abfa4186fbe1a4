//! Baselines and classical combiners: simple moving average, Top-K and
//! score-weighted ensembles, deep ensembles, and divide-and-conquer experts
//! routed by k-means over instance representations.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::base_predictor::{pretrain_bp, spawn_bps, BasePredictor, BasePredictorConfig};
use crate::conductor::RepresentationModule;
use crate::data::{assemble_batch, Dataset, WindowSample};
use crate::eval::{evaluate, EvalError, EvalFilters, ForecastSet, Forecaster, MetricReport};
use crate::nn::{Module, NnError};
use crate::train::{fit, TrainConfig, TrainError, Validation};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric error: score {score} gives a non-finite weight")]
    Numeric { score: f64 },
    #[error("ensemble member with seed {seed} failed: {source}")]
    Member {
        seed: u64,
        #[source]
        source: TrainError,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

// ---------------------------------------------------------------------------
// Simple moving average
// ---------------------------------------------------------------------------

/// Flat forecast at the mean of the last `look_back` sale-day values of
/// `history`. The flag is set (and the forecast is 0) when no sale day exists.
pub fn sma_forecast(history: &[f64], availability: &[bool], look_back: usize, p: usize) -> (Vec<f64>, bool) {
    let vals: Vec<f64> = history
        .iter()
        .zip(availability)
        .rev()
        .filter(|(_, a)| **a)
        .take(look_back.max(1))
        .map(|(v, _)| *v)
        .collect();
    if vals.is_empty() {
        return (vec![0.0; p], true);
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    (vec![mean; p], false)
}

/// Simple-moving-average forecaster over the days up to each anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sma {
    pub look_back: usize,
}

/// Look-back grid searched by [`select_sma`].
pub const SMA_LOOK_BACKS: [usize; 10] = [7, 14, 21, 28, 35, 42, 49, 56, 63, 70];

impl Forecaster for Sma {
    fn forecast(&self, dataset: &Dataset, samples: &[WindowSample]) -> Result<Vec<Vec<f64>>, EvalError> {
        let p = dataset.windows.prediction_length;
        Ok(samples
            .iter()
            .map(|s| {
                let inst = &dataset.instances[s.instance];
                let end = s.anchor + 1;
                let hist: Vec<f64> = inst.sales[..end].iter().map(|&v| v as f64).collect();
                sma_forecast(&hist, &inst.availability[..end], self.look_back, p).0
            })
            .collect())
    }
}

/// The look-back with the best validation MASE (first on ties).
pub fn select_sma(dataset: &Dataset, validation: &Validation) -> Result<Sma, EvalError> {
    let mut best = (f64::INFINITY, Sma { look_back: SMA_LOOK_BACKS[0] });
    for lb in SMA_LOOK_BACKS {
        let sma = Sma { look_back: lb };
        let score = validation.mase(&sma, dataset)?;
        if score < best.0 {
            best = (score, sma);
        }
    }
    Ok(best.1)
}

// ---------------------------------------------------------------------------
// Weighting strategies
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Average,
    TopK,
    WInv,
    WSqr,
    WExp,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [Strategy::Average, Strategy::TopK, Strategy::WInv, Strategy::WSqr, Strategy::WExp];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Average => "average",
            Strategy::TopK => "top_k",
            Strategy::WInv => "w_inv",
            Strategy::WSqr => "w_sqr",
            Strategy::WExp => "w_exp",
        })
    }
}

impl std::str::FromStr for Strategy {
    type Err = EnsembleError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.to_string() == s)
            .ok_or_else(|| EnsembleError::Config(format!("unknown strategy `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Global,
    InstanceWise,
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Global => "global",
            Scope::InstanceWise => "instance_wise",
        })
    }
}

impl std::str::FromStr for Scope {
    type Err = EnsembleError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "global" => Ok(Scope::Global),
            "instance_wise" => Ok(Scope::InstanceWise),
            _ => Err(EnsembleError::Config(format!("unknown scope `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub strategy: Strategy,
    pub k: Option<usize>,
    pub scope: Scope,
    pub epsilon: f64,
}

impl EnsembleSpec {
    pub fn new(strategy: Strategy, scope: Scope) -> Self {
        Self {
            strategy,
            k: None,
            scope,
            epsilon: 1e-10,
        }
    }

    pub fn top_k(k: usize, scope: Scope) -> Self {
        Self {
            k: Some(k),
            ..Self::new(Strategy::TopK, scope)
        }
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        if self.strategy == Strategy::TopK && self.k.is_none_or(|k| k == 0) {
            return Err(EnsembleError::Config("top_k requires k ≥ 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(EnsembleError::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

fn normalize_log(logw: &[f64], scores: &[f64]) -> Result<Vec<f64>, EnsembleError> {
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = w.iter().sum();
    if !sum.is_finite() || sum <= 0.0 {
        let bad = scores.iter().zip(logw).find(|(_, l)| !l.is_finite()).map_or(scores[0], |(s, _)| *s);
        return Err(EnsembleError::Numeric { score: bad });
    }
    Ok(w.into_iter().map(|x| x / sum).collect())
}

/// Combination weights from per-model validation scores (lower is better).
pub fn ensemble_weights(scores: &[f64], spec: &EnsembleSpec) -> Result<Vec<f64>, EnsembleError> {
    spec.validate()?;
    if scores.is_empty() {
        return Err(EnsembleError::Config("no models to weigh".into()));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(EnsembleError::Numeric { score: *bad });
    }
    let n = scores.len();
    let eps = spec.epsilon;
    match spec.strategy {
        Strategy::Average => Ok(vec![1.0 / n as f64; n]),
        Strategy::TopK => {
            let k = spec.k.unwrap_or(1).min(n);
            let mut w = vec![0.0; n];
            for i in crate::eval::rank_ascending(scores).into_iter().take(k) {
                w[i] = 1.0 / k as f64;
            }
            Ok(w)
        }
        Strategy::WInv | Strategy::WSqr | Strategy::WExp => {
            if let Some(bad) = scores.iter().find(|s| **s < 0.0) {
                return Err(EnsembleError::Numeric { score: *bad });
            }
            let logw: Vec<f64> = scores
                .iter()
                .map(|s| {
                    let inv = 1.0 / (s + eps);
                    match spec.strategy {
                        Strategy::WInv => inv.ln(),
                        Strategy::WSqr => 2.0 * inv.ln(),
                        _ => inv,
                    }
                })
                .collect();
            normalize_log(&logw, scores)
        }
    }
}

/// Weighted sum of `predictions[k]` rows.
pub fn combine(predictions: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>, EnsembleError> {
    if predictions.len() != weights.len() || predictions.is_empty() {
        return Err(EnsembleError::Contract(format!(
            "{} predictions for {} weights",
            predictions.len(),
            weights.len()
        )));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || weights.iter().any(|w| *w < 0.0) {
        return Err(EnsembleError::Contract(format!("weights sum to {sum}, not 1")));
    }
    let p = predictions[0].len();
    let mut out = vec![0.0; p];
    for (row, w) in predictions.iter().zip(weights) {
        if row.len() != p {
            return Err(EnsembleError::Contract("predictions differ in length".into()));
        }
        for (o, v) in out.iter_mut().zip(row) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Per-instance weights from `scores[instance][model]`. Instances with any
/// undefined score fall back to `global` and are flagged.
pub fn instance_wise_weights(
    scores: &[Vec<Option<f64>>],
    global: &[f64],
    spec: &EnsembleSpec,
) -> Result<(Vec<Vec<f64>>, Vec<bool>), EnsembleError> {
    let mut weights = Vec::with_capacity(scores.len());
    let mut fallback = Vec::with_capacity(scores.len());
    for row in scores {
        match row.iter().copied().collect::<Option<Vec<f64>>>() {
            Some(s) => {
                weights.push(ensemble_weights(&s, spec)?);
                fallback.push(false);
            }
            None => {
                weights.push(global.to_vec());
                fallback.push(true);
            }
        }
    }
    Ok((weights, fallback))
}

// ---------------------------------------------------------------------------
// Pool scoring and ensemble reports
// ---------------------------------------------------------------------------

/// Validation and test forecasts of every pool member over the same
/// instances and periods.
#[derive(Clone, Debug)]
pub struct PoolForecasts {
    pub validation: Vec<ForecastSet>,
    pub test: Vec<ForecastSet>,
}

/// Validation MASE per model (global) and per (instance, model).
#[derive(Clone, Debug, PartialEq)]
pub struct PoolScores {
    pub global: Vec<f64>,
    pub per_instance: Vec<Vec<Option<f64>>>,
}

pub fn score_pool(pool: &PoolForecasts, dataset: &Dataset, filters: &EvalFilters) -> Result<PoolScores, EnsembleError> {
    let reports: Vec<MetricReport> = pool
        .validation
        .iter()
        .map(|f| evaluate(f, dataset, filters))
        .collect::<Result<_, _>>()?;
    let global = reports.iter().map(MetricReport::mean_mase).collect();
    let instances = &pool.validation[0].instances;
    let per_instance = instances
        .iter()
        .map(|&i| {
            let id = &dataset.instances[i].id;
            reports
                .iter()
                .map(|r| r.instances.iter().find(|m| &m.id == id).and_then(|m| m.mase))
                .collect()
        })
        .collect();
    Ok(PoolScores { global, per_instance })
}

/// Combines member forecasts with one weight vector per instance.
pub fn combine_sets(sets: &[ForecastSet], weights: &[Vec<f64>]) -> Result<ForecastSet, EnsembleError> {
    let first = sets.first().ok_or_else(|| EnsembleError::Config("empty pool".into()))?;
    let mut out = first.clone();
    for (i, w) in weights.iter().enumerate() {
        for p in 0..first.periods.len() {
            let rows: Vec<Vec<f64>> = sets.iter().map(|s| s.values[i][p].clone()).collect();
            out.values[i][p] = combine(&rows, w)?;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct EnsembleResult {
    pub spec: EnsembleSpec,
    pub report: MetricReport,
    /// Instances that fell back to global weights.
    pub fallbacks: usize,
}

/// Scores each spec on the test forecasts of `pool`.
pub fn run_ensembles(
    pool: &PoolForecasts,
    dataset: &Dataset,
    specs: &[EnsembleSpec],
    filters: &EvalFilters,
) -> Result<Vec<EnsembleResult>, EnsembleError> {
    if pool.test.is_empty() {
        return Err(EnsembleError::Config("empty pool".into()));
    }
    let scores = score_pool(pool, dataset, filters)?;
    let n_inst = pool.test[0].instances.len();
    let finite_global: Vec<f64> = scores
        .global
        .iter()
        .map(|s| if s.is_finite() { *s } else { f64::MAX / 4.0 })
        .collect();
    specs
        .iter()
        .map(|spec| {
            let global = ensemble_weights(&finite_global, spec)?;
            let (weights, fallback) = match spec.scope {
                Scope::Global => (vec![global; n_inst], vec![false; n_inst]),
                Scope::InstanceWise => instance_wise_weights(&scores.per_instance, &global, spec)?,
            };
            let combined = combine_sets(&pool.test, &weights)?;
            Ok(EnsembleResult {
                spec: *spec,
                report: evaluate(&combined, dataset, filters)?,
                fallbacks: fallback.iter().filter(|f| **f).count(),
            })
        })
        .collect()
}

/// CSV comparison table; the row with the lowest test MASE is tagged best.
pub fn ensemble_table(results: &[EnsembleResult]) -> String {
    let best = results
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.report.mean_mase().total_cmp(&b.1.report.mean_mase()))
        .map(|(i, _)| i);
    let mut out = String::from("strategy,scope,k,mase,mase_std,mae,mae_std,rmse,rmse_std,fallbacks,best\n");
    let fmt = |a: Option<crate::eval::Aggregate>| a.map_or((String::new(), String::new()), |a| (a.mean.to_string(), a.std.to_string()));
    for (i, r) in results.iter().enumerate() {
        let (mase, mase_sd) = fmt(r.report.mase);
        let (mae, mae_sd) = fmt(r.report.mae);
        let (rmse, rmse_sd) = fmt(r.report.rmse);
        out.push_str(&format!(
            "{},{},{},{mase},{mase_sd},{mae},{mae_sd},{rmse},{rmse_sd},{},{}\n",
            r.spec.strategy,
            r.spec.scope,
            r.spec.k.map(|k| k.to_string()).unwrap_or_default(),
            r.fallbacks,
            best == Some(i)
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Deep ensembles
// ---------------------------------------------------------------------------

/// Independently seeded predictors averaged without weights.
#[derive(Clone, Debug)]
pub struct DeepEnsemble {
    pub members: Vec<BasePredictor>,
}

pub fn deep_ensembles(
    config: BasePredictorConfig,
    dataset: &Dataset,
    windows: &[WindowSample],
    validation: Option<&Validation>,
    train: &TrainConfig,
    seeds: &[u64],
) -> Result<DeepEnsemble, EnsembleError> {
    if seeds.is_empty() {
        return Err(EnsembleError::Config("deep ensemble needs M ≥ 1 seeds".into()));
    }
    let members = seeds
        .iter()
        .map(|&seed| {
            let cfg = TrainConfig { seed, ..train.clone() };
            pretrain_bp(config, dataset, windows, validation, &cfg)
                .map(|(bp, _)| bp)
                .map_err(|source| EnsembleError::Member { seed, source })
        })
        .collect::<Result<_, _>>()?;
    Ok(DeepEnsemble { members })
}

impl Forecaster for DeepEnsemble {
    fn forecast(&self, dataset: &Dataset, samples: &[WindowSample]) -> Result<Vec<Vec<f64>>, EvalError> {
        let outs = self
            .members
            .iter()
            .map(|m| m.forecast(dataset, samples))
            .collect::<Result<Vec<_>, _>>()?;
        let m = outs.len() as f64;
        let mut mean = outs[0].clone();
        for o in &outs[1..] {
            for (row, other) in mean.iter_mut().zip(o) {
                for (a, b) in row.iter_mut().zip(other) {
                    *a += b;
                }
            }
        }
        for row in &mut mean {
            row.iter_mut().for_each(|v| *v /= m);
        }
        Ok(mean)
    }
}

// ---------------------------------------------------------------------------
// k-means and divide-and-conquer
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Inertia after each Lloyd iteration.
    pub inertia: Vec<f64>,
    /// Clusters that were re-seeded because they emptied.
    pub reseeded: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_dist(point, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ restarts run by [`kmeans`].
pub const KMEANS_RESTARTS: usize = 10;

/// Lloyd's algorithm with k-means++ seeding, keeping the lowest-inertia run
/// of [`KMEANS_RESTARTS`]. An emptied cluster is re-seeded at the point
/// farthest from its centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, max_iters: usize, seed: u64) -> Result<KMeans, EnsembleError> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(EnsembleError::Config(format!("k-means needs 1 ≤ K ≤ N, got K={k}, N={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeans> = None;
    for _ in 0..KMEANS_RESTARTS {
        let run = lloyd(points, k, max_iters, &mut rng);
        let cost = |m: &KMeans| m.inertia.last().copied().unwrap_or(f64::INFINITY);
        if best.as_ref().is_none_or(|b| cost(&run) < cost(b)) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn lloyd(points: &[Vec<f64>], k: usize, max_iters: usize, rng: &mut ChaCha8Rng) -> KMeans {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, d) in dist.iter().enumerate() {
                if target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            // All remaining points coincide with a centroid; take the first
            // point not yet chosen as one.
            (0..n).find(|&i| !centroids.contains(&points[i])).unwrap_or(0)
        };
        centroids.push(points[next].clone());
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }

    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    let mut inertia = Vec::new();
    let mut reseeded = 0;
    for _ in 0..max_iters.max(1) {
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                let far = (0..n)
                    .max_by(|&i, &j| {
                        let di = sq_dist(&points[i], &centroids[assignments[i]]);
                        let dj = sq_dist(&points[j], &centroids[assignments[j]]);
                        di.total_cmp(&dj).then(j.cmp(&i))
                    })
                    .unwrap_or(0);
                centroids[c] = points[far].clone();
                reseeded += 1;
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        let cost = points.iter().zip(&next).map(|(p, &a)| sq_dist(p, &centroids[a])).sum();
        inertia.push(cost);
        let stable = next == assignments;
        assignments = next;
        if stable {
            break;
        }
    }
    KMeans {
        centroids,
        assignments,
        inertia,
        reseeded,
    }
}

/// Share of points whose cluster maps to their label under the best
/// one-to-one matching of clusters to labels.
pub fn cluster_agreement(assignments: &[usize], labels: &[usize]) -> f64 {
    let k = assignments.iter().chain(labels).copied().max().map_or(0, |m| m + 1);
    let mut counts = vec![vec![0usize; k]; k];
    for (&a, &l) in assignments.iter().zip(labels) {
        counts[a][l] += 1;
    }
    fn best(counts: &[Vec<usize>], row: usize, used: &mut Vec<bool>) -> usize {
        if row == counts.len() {
            return 0;
        }
        let mut top = 0;
        for c in 0..counts.len() {
            if !used[c] {
                used[c] = true;
                top = top.max(counts[row][c] + best(counts, row + 1, used));
                used[c] = false;
            }
        }
        top
    }
    let matched = best(&counts, 0, &mut vec![false; k]);
    matched as f64 / assignments.len().max(1) as f64
}

/// One expert per cluster of instance representations.
#[derive(Clone, Debug)]
pub struct DnCModel {
    pub kmeans: KMeans,
    pub bps: Vec<BasePredictor>,
    /// Cluster of every dataset instance, by index.
    pub routes: Vec<usize>,
    /// Clusters without training windows; their experts stay at initialization.
    pub untrained: Vec<usize>,
}

/// Instance representations from the representation window ending at `anchor`.
pub fn instance_representations(
    rm: &RepresentationModule,
    dataset: &Dataset,
    instances: &[usize],
    anchor: usize,
) -> Result<Vec<Vec<f64>>, NnError> {
    let mut out = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(256) {
        let samples: Vec<WindowSample> = chunk.iter().map(|&instance| WindowSample { instance, anchor }).collect();
        let batch = assemble_batch(dataset, &samples);
        out.extend(rm.instance_representation(&batch.rep_context)?.to_rows());
    }
    Ok(out)
}

/// Mean of [`instance_representations`] over non-overlapping windows tiled
/// back from `anchor`; windows reaching before day 0 are dropped unless
/// none would remain.
pub fn history_representations(
    rm: &RepresentationModule,
    dataset: &Dataset,
    instances: &[usize],
    anchor: usize,
) -> Result<Vec<Vec<f64>>, NnError> {
    let w = dataset.windows.representation_window.max(1);
    let tiles = ((anchor + 1) / w).max(1);
    let mut out: Vec<Vec<f64>> = Vec::new();
    for t in 0..tiles {
        let reps = instance_representations(rm, dataset, instances, anchor - t * w)?;
        if out.is_empty() {
            out = reps;
        } else {
            for (acc, r) in out.iter_mut().zip(&reps) {
                acc.iter_mut().zip(r).for_each(|(a, v)| *a += v);
            }
        }
    }
    for row in &mut out {
        row.iter_mut().for_each(|v| *v /= tiles as f64);
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub fn dnc_train(
    dataset: &Dataset,
    train_instances: &[usize],
    windows: &[WindowSample],
    representation_anchor: usize,
    pretrained_rm: &RepresentationModule,
    initial_bp: &BasePredictor,
    k: usize,
    train: &TrainConfig,
) -> Result<DnCModel, EnsembleError> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    let reps = history_representations(pretrained_rm, dataset, &all, representation_anchor)?;
    let train_points: Vec<Vec<f64>> = train_instances.iter().map(|&i| reps[i].clone()).collect();
    let km = kmeans(&train_points, k, 100, train.seed)?;
    let routes: Vec<usize> = reps.iter().map(|r| nearest(r, &km.centroids).0).collect();
    let mut bps = spawn_bps(initial_bp, k, 0.0, train.seed);
    let mut untrained = Vec::new();
    for (c, bp) in bps.iter_mut().enumerate() {
        let cluster: Vec<WindowSample> = windows.iter().copied().filter(|w| routes[w.instance] == c).collect();
        if cluster.is_empty() {
            log::warn!("cluster {c} has no training windows; its expert stays at initialization");
            untrained.push(c);
            continue;
        }
        fit(bp, dataset, &cluster, None, train)?;
    }
    Ok(DnCModel {
        kmeans: km,
        bps,
        routes,
        untrained,
    })
}

impl Forecaster for DnCModel {
    fn forecast(&self, dataset: &Dataset, samples: &[WindowSample]) -> Result<Vec<Vec<f64>>, EvalError> {
        let mut out = vec![Vec::new(); samples.len()];
        for (c, bp) in self.bps.iter().enumerate() {
            let idx: Vec<usize> = (0..samples.len()).filter(|&i| self.routes[samples[i].instance] == c).collect();
            if idx.is_empty() {
                continue;
            }
            let sub: Vec<WindowSample> = idx.iter().map(|&i| samples[i]).collect();
            for (i, row) in idx.into_iter().zip(bp.forecast(dataset, &sub)?) {
                out[i] = row;
            }
        }
        Ok(out)
    }
}

impl DnCModel {
    pub fn parameter_count(&self) -> usize {
        self.bps.iter().map(Module::parameter_count).sum()
    }
}
