//! Rank analysis of a trained model's base predictors: how well conductor
//! weights and validation scores recover each series' test-time ordering.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conductor::ForchestraModel;
use crate::data::{Dataset, Split, WindowSample};
use crate::eval::{backtest, evaluate, rank_ascending, rbo, EvalError, EvalFilters, ForecastSet, RBO_PERSISTENCE};
use crate::nn::NnError;

/// Truncation depths reported by [`rank_analysis`].
pub const RBO_DEPTHS: [usize; 3] = [5, 10, 50];

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// A candidate ranking compared against the test-time ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    ConductorWeights,
    GlobalValidation,
    InstanceValidation,
}

impl Comparison {
    pub const ALL: [Comparison; 3] = [Self::ConductorWeights, Self::GlobalValidation, Self::InstanceValidation];
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ConductorWeights => "conductor_weights",
            Self::GlobalValidation => "global_validation",
            Self::InstanceValidation => "instance_validation",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RboRow {
    pub comparison: Comparison,
    pub depth: usize,
    /// `depth` clamped to the number of predictors.
    pub effective_depth: usize,
    /// Mean over analysed instances.
    pub rbo: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingAnalysis {
    /// Instances with a defined test MASE for every predictor.
    pub instances: Vec<String>,
    /// Predictors by ascending test MASE, per instance.
    pub ground_truth: Vec<Vec<usize>>,
    /// Predictors by descending mean conductor weight, per instance.
    pub conductor: Vec<Vec<usize>>,
    pub global_validation: Vec<usize>,
    pub instance_validation: Vec<Vec<usize>>,
    pub rows: Vec<RboRow>,
    pub notes: Vec<String>,
}

impl RankingAnalysis {
    pub fn rbo(&self, comparison: Comparison, depth: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.comparison == comparison && r.depth == depth)
            .map(|r| r.rbo)
    }

    /// `comparison,depth,effective_depth,rbo` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("comparison,depth,effective_depth,rbo\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.comparison, r.depth, r.effective_depth, r.rbo);
        }
        out
    }
}

/// Scores every candidate ranking against the per-instance test ranking.
///
/// `test[i][k]` and `validation[i][k]` are MASE values of predictor `k` on
/// instance `i`; `weights[i]` are the conductor's mean weights. Instances
/// with an undefined test score are left out; instances with an undefined
/// validation score use the global validation ranking.
pub fn analyze_rankings(
    ids: &[String],
    test: &[Vec<Option<f64>>],
    validation: &[Vec<Option<f64>>],
    global_validation: &[f64],
    weights: &[Vec<f64>],
    depths: &[usize],
) -> Result<RankingAnalysis, AnalysisError> {
    let n = ids.len();
    if test.len() != n || validation.len() != n || weights.len() != n {
        return Err(AnalysisError::Contract("one score row per instance required".into()));
    }
    let k = global_validation.len();
    if k == 0 {
        return Err(AnalysisError::Contract("no predictors to rank".into()));
    }
    let rows_ok = test.iter().chain(validation).all(|r| r.len() == k) && weights.iter().all(|r| r.len() == k);
    if !rows_ok {
        return Err(AnalysisError::Contract(format!("every row must cover {k} predictors")));
    }

    let global = rank_ascending(global_validation);
    let mut out = RankingAnalysis {
        instances: Vec::new(),
        ground_truth: Vec::new(),
        conductor: Vec::new(),
        global_validation: global.clone(),
        instance_validation: Vec::new(),
        rows: Vec::new(),
        notes: Vec::new(),
    };
    let mut fallback = 0;
    for i in 0..n {
        let Some(scores) = test[i].iter().copied().collect::<Option<Vec<f64>>>() else {
            continue;
        };
        out.instances.push(ids[i].clone());
        out.ground_truth.push(rank_ascending(&scores));
        let negated: Vec<f64> = weights[i].iter().map(|w| -w).collect();
        out.conductor.push(rank_ascending(&negated));
        match validation[i].iter().copied().collect::<Option<Vec<f64>>>() {
            Some(v) => out.instance_validation.push(rank_ascending(&v)),
            None => {
                fallback += 1;
                out.instance_validation.push(global.clone());
            }
        }
    }
    let skipped = n - out.instances.len();
    if skipped > 0 {
        out.notes.push(format!("{skipped} instances without a defined test MASE for every predictor were left out"));
    }
    if fallback > 0 {
        out.notes.push(format!("{fallback} instances used the global validation ranking"));
    }
    for &depth in depths {
        if depth > k {
            out.notes.push(format!("depth {depth} clamped to K={k}"));
        }
    }
    if out.instances.is_empty() {
        out.notes.push("no instance could be analysed".into());
        return Ok(out);
    }

    for c in Comparison::ALL {
        for &depth in depths {
            let mut total = 0.0;
            for (i, truth) in out.ground_truth.iter().enumerate() {
                let candidate = match c {
                    Comparison::ConductorWeights => &out.conductor[i],
                    Comparison::GlobalValidation => &out.global_validation,
                    Comparison::InstanceValidation => &out.instance_validation[i],
                };
                total += rbo(candidate, truth, depth, RBO_PERSISTENCE)?;
            }
            out.rows.push(RboRow {
                comparison: c,
                depth,
                effective_depth: depth.min(k),
                rbo: total / out.ground_truth.len() as f64,
            });
        }
    }
    Ok(out)
}

fn per_instance_mase(
    sets: &[ForecastSet],
    dataset: &Dataset,
    filters: &EvalFilters,
) -> Result<(Vec<Vec<Option<f64>>>, Vec<f64>), AnalysisError> {
    let mut per = vec![Vec::with_capacity(sets.len()); sets[0].instances.len()];
    let mut global = Vec::with_capacity(sets.len());
    for set in sets {
        let report = evaluate(set, dataset, filters)?;
        global.push(report.mean_mase());
        for (row, &i) in per.iter_mut().zip(&set.instances) {
            let id = &dataset.instances[i].id;
            row.push(report.instances.iter().find(|m| &m.id == id).and_then(|m| m.mase));
        }
    }
    Ok((per, global))
}

/// Rank analysis of `model`'s base predictors over the training instances of
/// `split`, at [`RBO_DEPTHS`].
pub fn rank_analysis(
    model: &ForchestraModel,
    dataset: &Dataset,
    split: &Split,
    filters: &EvalFilters,
) -> Result<RankingAnalysis, AnalysisError> {
    let instances = &split.train_instances;
    let mut val_sets = Vec::with_capacity(model.bps.len());
    let mut test_sets = Vec::with_capacity(model.bps.len());
    for bp in &model.bps {
        val_sets.push(backtest(bp, dataset, instances, split.validation)?);
        test_sets.push(backtest(bp, dataset, instances, split.test)?);
    }
    let (validation, global) = per_instance_mase(&val_sets, dataset, filters)?;
    let (test, _) = per_instance_mase(&test_sets, dataset, filters)?;

    let anchors: Vec<usize> = test_sets[0].periods.iter().map(|p| p.anchor).collect();
    let k = model.bps.len();
    let mut weights = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(256) {
        let samples: Vec<WindowSample> = chunk
            .iter()
            .flat_map(|&instance| anchors.iter().map(move |&anchor| WindowSample { instance, anchor }))
            .collect();
        let w = model.weights_for(dataset, &samples)?;
        for rows in w.data().chunks(k * anchors.len()) {
            let mut mean = vec![0.0; k];
            for row in rows.chunks(k) {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / anchors.len() as f64);
            }
            weights.push(mean);
        }
    }
    let ids: Vec<String> = instances.iter().map(|&i| dataset.instances[i].id.clone()).collect();
    analyze_rankings(&ids, &test, &validation, &global, &weights, &RBO_DEPTHS)
}
