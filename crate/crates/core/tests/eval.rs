use forchestra::data::*;
use forchestra::eval::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[test]
fn masked_mae_examples() {
    assert_eq!(masked_mae(&[3.0, 5.0], &[4.0, 4.0], &[true, false]), Some(1.0));
    assert_eq!(masked_mae(&[3.0, 5.0], &[4.0, 4.0], &[false, false]), None);
    assert_eq!(masked_mae(&[3.0, 5.0], &[3.0, 5.0], &[true, true]), Some(0.0));
}

#[test]
fn masked_rmse_examples() {
    assert_eq!(masked_rmse(&[3.0, 5.0], &[4.0, 4.0], &[true, true]), Some(1.0));
    assert_eq!(masked_rmse(&[3.0, 5.0], &[3.0, 5.0], &[true, true]), Some(0.0));
    assert_eq!(masked_rmse(&[1.0], &[2.0], &[false]), None);
}

#[test]
fn masked_mase_examples() {
    let hist = [2.0, 4.0, 2.0, 4.0];
    assert_eq!(naive_scale(&hist, &[true; 4]), Some(2.0));
    assert_eq!(masked_mase(&[3.0, 5.0], &[4.0, 4.0], &[true, true], &hist, &[true; 4]), Some(0.5));
    assert_eq!(masked_mase(&[3.0], &[4.0], &[true], &[5.0; 6], &[true; 6]), None);
    // Only consecutive sale-day pairs enter the denominator.
    assert_eq!(naive_scale(&[1.0, 9.0, 2.0, 4.0], &[true, false, true, true]), Some(2.0));
    assert_eq!(naive_scale(&[1.0, 9.0], &[true, false]), None);
}

#[test]
fn naive_forecast_on_random_walks_scores_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let step = Normal::new(0.0, 1.0).unwrap();
    let mut total = 0.0;
    let walks = 1000;
    for _ in 0..walks {
        let mut x = vec![0.0f64];
        for _ in 1..128 {
            let last = *x.last().unwrap();
            x.push(last + step.sample(&mut rng));
        }
        let (history, future) = x.split_at(100);
        // One-step naive forecasts: each day predicted by the day before it.
        let y_hat: Vec<f64> = x[99..127].to_vec();
        total += masked_mase(future, &y_hat, &[true; 28], history, &[true; 100]).unwrap();
    }
    let mean = total / walks as f64;
    assert!((mean - 1.0).abs() <= 0.1, "mean MASE {mean}");
}

fn dataset(series: Vec<(Vec<u32>, Vec<bool>)>) -> Dataset {
    let windows = WindowConfig {
        prediction_length: 7,
        context_length: 7,
        representation_window: 7,
    };
    let instances = series
        .into_iter()
        .enumerate()
        .map(|(i, (sales, avail))| {
            let mut inst = SeriesInstance::new(format!("s{i}"), sales);
            inst.availability = avail;
            inst
        })
        .collect();
    Dataset::from_instances(instances, windows).unwrap()
}

fn wavy(n: usize, phase: u32) -> Vec<u32> {
    (0..n as u32).map(|t| 3 + (t + phase) % 5).collect()
}

struct Perfect;

impl Forecaster for Perfect {
    fn forecast(&self, d: &Dataset, s: &[WindowSample]) -> Result<Vec<Vec<f64>>, EvalError> {
        Ok(s.iter()
            .map(|w| d.instances[w.instance].sales[w.target_range(&d.windows)].iter().map(|&v| v as f64).collect())
            .collect())
    }
}

struct Flat(f64);

impl Forecaster for Flat {
    fn forecast(&self, d: &Dataset, s: &[WindowSample]) -> Result<Vec<Vec<f64>>, EvalError> {
        Ok(vec![vec![self.0; d.windows.prediction_length]; s.len()])
    }
}

#[test]
fn perfect_predictions_score_zero() {
    let ds = dataset((0..4).map(|i| (wavy(70, i), vec![true; 70])).collect());
    let set = backtest(&Perfect, &ds, &[0, 1, 2, 3], Region::new(42, 70)).unwrap();
    let r = evaluate(&set, &ds, &EvalFilters::default()).unwrap();
    assert!(r.skipped.is_empty());
    assert_eq!(r.instances.len(), 4);
    for agg in [r.mase, r.mae, r.rmse] {
        assert_eq!(agg.unwrap().mean, 0.0);
    }
}

#[test]
fn short_sale_periods_are_skipped() {
    let mut avail = vec![true; 70];
    for a in &mut avail[63..70] {
        *a = false;
    }
    avail[63] = true;
    avail[64] = true;
    avail[65] = true;
    let ds = dataset(vec![(wavy(70, 0), avail), (wavy(70, 1), vec![true; 70])]);
    let set = backtest(&Flat(4.0), &ds, &[0, 1], Region::new(63, 70)).unwrap();
    let r = evaluate(&set, &ds, &EvalFilters { min_sale_days: 7 }).unwrap();
    assert_eq!(r.skipped, vec![Skip { id: "s0".into(), reason: SkipReason::InsufficientSaleDays }]);
    assert_eq!(r.instances.len(), 1);
    let lenient = evaluate(&set, &ds, &EvalFilters { min_sale_days: 0 }).unwrap();
    assert_eq!(lenient.instances.len(), 2);
    assert_eq!(lenient.instances[0].sale_days, 3);
}

#[test]
fn constant_history_skips_mase_only() {
    let mut sales = vec![5u32; 70];
    sales[65] = 9;
    let ds = dataset(vec![(sales, vec![true; 70])]);
    let set = backtest(&Flat(5.0), &ds, &[0], Region::new(63, 70)).unwrap();
    let r = evaluate(&set, &ds, &EvalFilters::default()).unwrap();
    assert_eq!(r.skipped[0].reason, SkipReason::ZeroMaseDenominator);
    assert!(r.mase.is_none());
    assert_eq!(r.mean_mase(), f64::INFINITY);
    assert!((r.mae.unwrap().mean - 4.0 / 7.0).abs() < 1e-12);
}

#[test]
fn aggregates_match_an_independent_recomputation() {
    let ds = generate_synthetic(&SyntheticSpec::new(30, 150, 3, 2.0, 8)).unwrap();
    let ids: Vec<usize> = (0..30).collect();
    let region = Region::new(122, 150);
    let set = backtest(&Flat(6.0), &ds, &ids, region).unwrap();
    let r = evaluate(&set, &ds, &EvalFilters::default()).unwrap();
    let mut maes = Vec::new();
    for inst in &ds.instances {
        let mut sum = 0.0;
        let mut n = 0;
        for start in (122..150).step_by(7) {
            let days = start..start + 7;
            if inst.availability[days.clone()].iter().filter(|a| **a).count() < 7 {
                continue;
            }
            for d in days {
                sum += (inst.sales[d] as f64 - 6.0).abs();
                n += 1;
            }
        }
        if n > 0 {
            maes.push(sum / n as f64);
        }
    }
    let mean = maes.iter().sum::<f64>() / maes.len() as f64;
    let std = (maes.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / maes.len() as f64).sqrt();
    let agg = r.mae.unwrap();
    assert_eq!(agg.count, maes.len());
    assert!((agg.mean - mean).abs() < 1e-12);
    assert!((agg.std - std).abs() < 1e-12);
    // The CSV carries the same per-instance values.
    let from_csv: Vec<f64> = r.to_csv().lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert!((from_csv.iter().sum::<f64>() / from_csv.len() as f64 - agg.mean).abs() < 1e-12);
    let json = r.summary_json();
    assert_eq!(json["mae"]["count"], maes.len());
}

#[test]
fn missing_forecasts_name_the_instance_and_period() {
    let ds = dataset(vec![(wavy(70, 0), vec![true; 70])]);
    let mut set = backtest(&Flat(1.0), &ds, &[0], Region::new(56, 70)).unwrap();
    set.values[0].pop();
    match evaluate(&set, &ds, &EvalFilters::default()) {
        Err(EvalError::Coverage { instance, period }) => {
            assert_eq!(instance, "s0");
            assert_eq!(period, 1);
        }
        other => panic!("expected a coverage error, got {other:?}"),
    }
}

#[test]
fn evaluation_reads_only_history_and_targets() {
    let base = dataset(vec![(wavy(90, 2), vec![true; 90])]);
    let region = Region::new(56, 70);
    let set = backtest(&Flat(4.0), &base, &[0], region).unwrap();
    let r = evaluate(&set, &base, &EvalFilters::default()).unwrap();
    let mut touched = base.clone();
    for d in 70..90 {
        touched.instances[0].sales[d] = 1000;
    }
    assert_eq!(evaluate(&set, &touched, &EvalFilters::default()).unwrap(), r);
    let mut history = base.clone();
    history.instances[0].sales[3] = 1000;
    assert_ne!(evaluate(&set, &history, &EvalFilters::default()).unwrap(), r);
}

#[test]
fn transfer_evaluation_contracts() {
    let ds = dataset((0..4).map(|i| (wavy(70, i), vec![true; 70])).collect());
    let region = Region::new(56, 70);
    let f = EvalFilters::default();
    let trained = vec!["s0".to_string(), "s1".to_string()];
    let empty = transfer_evaluate(&Flat(3.0), &ds, &[], &trained, region, &f).unwrap();
    assert!(empty.instances.is_empty() && empty.mase.is_none());
    let r = transfer_evaluate(&Flat(3.0), &ds, &[2, 3], &trained, region, &f).unwrap();
    let direct = evaluate(&backtest(&Flat(3.0), &ds, &[2, 3], region).unwrap(), &ds, &f).unwrap();
    assert_eq!(r, direct);
    assert!(matches!(
        transfer_evaluate(&Flat(3.0), &ds, &[1, 2], &trained, region, &f),
        Err(EvalError::Leak(id)) if id == "s1"
    ));
}

#[test]
fn rbo_examples() {
    let a = [3, 1, 4, 0, 2];
    for depth in 1..=5 {
        assert_eq!(rbo(&a, &a, depth, RBO_PERSISTENCE).unwrap(), 1.0);
    }
    let b = [0, 2, 4, 3, 1];
    assert_eq!(rbo(&[0, 1, 2, 3], &[2, 3, 0, 1], 2, RBO_PERSISTENCE).unwrap(), 0.0);
    assert!(rbo(&a, &b, 5, RBO_PERSISTENCE).unwrap() < 1.0);
    assert_eq!(rbo(&[0], &[0], 50, RBO_PERSISTENCE).unwrap(), 1.0);
    // Depth beyond the ranking length is clamped.
    assert_eq!(rbo(&a, &b, 50, 0.9).unwrap(), rbo(&a, &b, 5, 0.9).unwrap());
    assert!(rbo(&a, &b, 0, 0.9).is_err());
    assert!(rbo(&a, &b, 3, 1.0).is_err());
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

proptest! {
    #[test]
    fn rmse_bounds_mae(values in prop::collection::vec((0.0f64..50.0, 0.0f64..50.0, any::<bool>()), 1..40)) {
        let y: Vec<f64> = values.iter().map(|v| v.0).collect();
        let f: Vec<f64> = values.iter().map(|v| v.1).collect();
        let a: Vec<bool> = values.iter().map(|v| v.2).collect();
        if let (Some(mae), Some(rmse)) = (masked_mae(&y, &f, &a), masked_rmse(&y, &f, &a)) {
            prop_assert!(rmse >= mae - 1e-12);
        }
    }

    #[test]
    fn mase_is_scale_free(
        hist in prop::collection::vec(0.0f64..20.0, 3..30),
        y in prop::collection::vec((0.0f64..20.0, 0.0f64..20.0), 1..10),
        power in -6i32..6,
        c in 0.01f64..100.0,
    ) {
        let ha = vec![true; hist.len()];
        let ya = vec![true; y.len()];
        let (yy, ff): (Vec<f64>, Vec<f64>) = y.iter().copied().unzip();
        let Some(base) = masked_mase(&yy, &ff, &ya, &hist, &ha) else { return Ok(()) };
        // Powers of two rescale exactly in floating point.
        let k = 2f64.powi(power);
        let s = |v: &[f64], k: f64| v.iter().map(|x| x * k).collect::<Vec<_>>();
        prop_assert_eq!(masked_mase(&s(&yy, k), &s(&ff, k), &ya, &s(&hist, k), &ha), Some(base));
        let scaled = masked_mase(&s(&yy, c), &s(&ff, c), &ya, &s(&hist, c), &ha).unwrap();
        prop_assert!((scaled - base).abs() <= 1e-12 * base.max(1.0));
    }

    #[test]
    fn rbo_is_symmetric_and_bounded(n in 1usize..30, s1 in 0u64..1000, s2 in 0u64..1000, depth in 1usize..40) {
        let a = permutation(n, s1);
        let b = permutation(n, s2);
        let ab = rbo(&a, &b, depth, RBO_PERSISTENCE).unwrap();
        let ba = rbo(&b, &a, depth, RBO_PERSISTENCE).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        let d = depth.min(n);
        let prefixes_match = (1..=d).all(|k| {
            let mut x = a[..k].to_vec();
            let mut y = b[..k].to_vec();
            x.sort_unstable();
            y.sort_unstable();
            x == y
        });
        prop_assert_eq!(ab == 1.0, prefixes_match);
    }
}
