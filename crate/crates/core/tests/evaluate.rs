use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use spectra_core::data::TimeSeriesBatch;
use spectra_core::evaluate::{crps_entry, crps_samples, mae, mape, reference_impute, rmse, MetricReport, ReferenceImputer};
use spectra_tensor::Tensor;

fn t(v: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(v.to_vec(), &[v.len()]).unwrap()
}

fn ones(n: usize) -> Tensor<f64> {
    Tensor::ones(&[n])
}

/// Direct double sum over all sample pairs.
fn crps_brute(xs: &[f64], y: f64) -> f64 {
    let k = xs.len() as f64;
    let a: f64 = xs.iter().map(|x| (x - y).abs()).sum::<f64>() / k;
    let b: f64 = xs.iter().flat_map(|x| xs.iter().map(move |z| (x - z).abs())).sum::<f64>();
    a - b / (2.0 * k * k)
}

#[test]
fn mae_examples() {
    let truth = t(&[1.0, 2.0, 3.0]);
    assert_eq!(mae(&truth, &truth, &ones(3)).unwrap(), 0.0);
    assert_eq!(mae(&t(&[2.0, 3.0, 4.0]), &truth, &ones(3)).unwrap(), 1.0);
    assert_eq!(mae(&t(&[1.0, 5.0]), &t(&[0.0, 0.0]), &ones(2)).unwrap(), 3.0);
    assert!(mae(&truth, &truth, &Tensor::zeros(&[3])).is_err());
    assert!(mae(&truth, &t(&[1.0]), &ones(3)).is_err());
}

#[test]
fn rmse_examples() {
    let truth = t(&[1.0, -2.0, 0.5]);
    let shifted = t(&[-1.5, -4.5, -2.0]);
    assert!((rmse(&shifted, &truth, &ones(3)).unwrap() - 2.5).abs() < 1e-15);
    assert!((rmse(&t(&[0.0, 0.0, 3.0]), &t(&[0.0; 3]), &ones(3)).unwrap() - 3f64.sqrt()).abs() < 1e-15);
}

#[test]
fn mape_examples() {
    assert!((mape(&t(&[110.0]), &t(&[100.0]), &ones(1)).unwrap().0 - 10.0).abs() < 1e-12);
    assert_eq!(mape(&t(&[4.0]), &t(&[4.0]), &ones(1)).unwrap(), (0.0, 0));
    let (v, skipped) = mape(&t(&[1.0, 55.0]), &t(&[0.0, 50.0]), &ones(2)).unwrap();
    assert_eq!(skipped, 1);
    assert!((v - 10.0).abs() < 1e-12);
    assert!(mape(&t(&[1.0]), &t(&[0.0]), &ones(1)).is_err());
}

#[test]
fn crps_of_two_point_ensemble() {
    let samples = Tensor::from_vec(vec![0.0, 1.0], &[2, 1]).unwrap();
    let c = crps_samples(&samples, &t(&[0.0]), &ones(1)).unwrap();
    assert!((c - 0.25).abs() < 1e-15);
    assert!((crps_brute(&[0.0, 1.0], 0.0) - 0.25).abs() < 1e-15);
}

#[test]
fn crps_of_standard_normal_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut xs: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
    let closed = (2.0 / std::f64::consts::PI).sqrt() - 1.0 / std::f64::consts::PI.sqrt();
    let c = crps_entry(&mut xs, 0.0);
    assert!((c - closed).abs() < 0.01, "{c} vs {closed}");
}

#[test]
fn single_sample_crps_is_mae() {
    let pred = t(&[0.3, -1.7, 2.2, 9.0]);
    let truth = t(&[0.0, 1.0, 2.0, -3.0]);
    let mask = t(&[1.0, 1.0, 0.0, 1.0]);
    let samples = pred.reshape(&[1, 4]).unwrap();
    assert_eq!(crps_samples(&samples, &truth, &mask).unwrap(), mae(&pred, &truth, &mask).unwrap());
}

#[test]
fn identical_samples_give_exact_mae() {
    let pred = [0.3, -1.7, 2.2];
    let truth = t(&[0.0, 1.0, 2.0]);
    let samples = Tensor::from_vec(pred.repeat(5), &[5, 3]).unwrap();
    assert_eq!(crps_samples(&samples, &truth, &ones(3)).unwrap(), mae(&t(&pred), &truth, &ones(3)).unwrap());
}

fn batch(rows: &[Vec<Option<f64>>]) -> TimeSeriesBatch {
    let d = rows[0].len();
    let values = rows.iter().flatten().map(|v| v.unwrap_or(0.0)).collect();
    let mask = rows.iter().flatten().map(|v| if v.is_some() { 1.0 } else { 0.0 }).collect();
    let shape = [1, rows.len(), d];
    TimeSeriesBatch::new(
        Tensor::from_vec(values, &shape).unwrap(),
        Tensor::from_vec(mask, &shape).unwrap(),
        (0..rows.len()).map(|i| i.to_string()).collect(),
        vec![0],
        (0..d).map(|f| format!("f{f}")).collect(),
    )
    .unwrap()
}

#[test]
fn reference_imputers_fill_gaps() {
    let b = batch(&[vec![Some(1.0)], vec![None], vec![Some(3.0)]]);
    assert_eq!(reference_impute(&b, ReferenceImputer::Mean).unwrap().to_vec(), vec![1.0, 2.0, 3.0]);
    let b = batch(&[vec![Some(1.0)], vec![Some(2.0)], vec![None], vec![Some(100.0)]]);
    assert_eq!(reference_impute(&b, ReferenceImputer::Median).unwrap().data()[2], 2.0);
    let b = batch(&[vec![Some(0.0)], vec![None], vec![Some(2.0)], vec![None]]);
    assert_eq!(reference_impute(&b, ReferenceImputer::LinearInterp).unwrap().to_vec(), vec![0.0, 1.0, 2.0, 2.0]);
}

#[test]
fn reference_imputers_need_observations() {
    let b = batch(&[vec![Some(1.0), None], vec![Some(2.0), None]]);
    assert!(reference_impute(&b, ReferenceImputer::Mean).is_err());
    let b = batch(&[vec![Some(1.0)], vec![None]]);
    assert!(reference_impute(&b, ReferenceImputer::LinearInterp).is_err());
    assert_eq!(reference_impute(&b, ReferenceImputer::Median).unwrap().to_vec(), vec![1.0, 1.0]);
}

#[test]
fn report_counts_and_formats() {
    let pred = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 2, 2]).unwrap();
    let truth = Tensor::from_vec(vec![1.0, 0.0, 2.0, 5.0], &[1, 2, 2]).unwrap();
    let mask = Tensor::from_vec(vec![1.0, 1.0, 0.0, 1.0], &[1, 2, 2]).unwrap();
    let names = vec!["a".to_string(), "b".to_string()];
    let r = MetricReport::compute(&pred, &truth, &mask, None, &names).unwrap();
    assert_eq!(r.n_eval, 3);
    assert_eq!(r.mae, 1.0);
    assert_eq!(r.mape_skipped, 1);
    assert_eq!(r.per_feature[0].n_eval, 1);
    assert_eq!(r.per_feature[0].mae, Some(0.0));
    assert_eq!(r.per_feature[1].mae, Some(1.5));
    assert!(r.crps.is_none());
    let json = r.to_json().unwrap();
    let back: MetricReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
    let table = r.to_string();
    let lines: Vec<&str> = table.lines().collect();
    assert!(lines[0].starts_with("feature"));
    assert!(lines[3].starts_with("all"));
    assert_eq!(lines.len(), 5, "{table}");
    // Right-aligned columns end at the same offset.
    assert!(lines[..4].iter().all(|l| l.len() == lines[0].len()), "{table}");
}

proptest! {
    #[test]
    fn sorted_crps_matches_pair_enumeration(xs in prop::collection::vec(-10.0f64..10.0, 1..40), y in -10.0f64..10.0) {
        let brute = crps_brute(&xs, y);
        let mut work = xs.clone();
        prop_assert!((crps_entry(&mut work, y) - brute).abs() < 1e-10);
        prop_assert!(brute >= -1e-12);
    }

    #[test]
    fn rmse_dominates_mae(pairs in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..30)) {
        let p = t(&pairs.iter().map(|x| x.0).collect::<Vec<_>>());
        let q = t(&pairs.iter().map(|x| x.1).collect::<Vec<_>>());
        let m = ones(pairs.len());
        prop_assert!(rmse(&p, &q, &m).unwrap() >= mae(&p, &q, &m).unwrap() - 1e-12);
    }

    #[test]
    fn metrics_ignore_entry_order(
        rows in prop::collection::vec((-5.0f64..5.0, 0.5f64..5.0, any::<bool>()), 2..25),
        seed in 0u64..1000,
    ) {
        use rand::seq::SliceRandom;
        let mut rows = rows;
        rows[0].2 = true;
        let score = |rows: &[(f64, f64, bool)]| {
            let p = t(&rows.iter().map(|r| r.0).collect::<Vec<_>>());
            let q = t(&rows.iter().map(|r| r.1).collect::<Vec<_>>());
            let m = t(&rows.iter().map(|r| if r.2 { 1.0 } else { 0.0 }).collect::<Vec<_>>());
            let s = Tensor::from_vec(rows.iter().map(|r| r.0).chain(rows.iter().map(|r| r.0 + 1.0)).collect(), &[2, rows.len()]).unwrap();
            [mae(&p, &q, &m).unwrap(), rmse(&p, &q, &m).unwrap(), mape(&p, &q, &m).unwrap().0, crps_samples(&s, &q, &m).unwrap()]
        };
        let before = score(&rows);
        rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let after = score(&rows);
        for (a, b) in before.iter().zip(&after) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}
