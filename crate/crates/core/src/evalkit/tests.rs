use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::synthgen::{generate_with_states, make_task, Month, Profile, Split};

fn key(x: &str) -> String {
    x.split(':').next().unwrap().to_string()
}

#[test]
fn mse_examples() {
    assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
    assert_eq!(mse(&[0.0, 0.0], &[1.0, 3.0]).unwrap(), 5.0);
    assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
    assert!(mse(&[], &[]).is_err());
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let a: Vec<f64> = (0..1000).map(|_| r.random::<f64>() * 10.0).collect();
    let b: Vec<f64> = (0..1000).map(|_| r.random::<f64>() * 10.0).collect();
    let mut acc = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        acc += d * d;
    }
    assert!((mse(&a, &b).unwrap() - acc / 1000.0).abs() < 1e-12);
}

#[test]
fn spearman_examples() {
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
    // ranks (1, 2.5, 2.5) vs (1, 2, 3): cov 1, var 0.5 and 0.6667 -> sqrt(3)/2
    let rho = spearman(&[1.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
    assert!((rho - 3f64.sqrt() / 2.0).abs() < 1e-12, "{rho}");
    assert!(matches!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::Metric(_))));
    assert!(spearman(&[1.0], &[1.0]).is_err());
    assert_eq!(average_ranks(&[5.0, 1.0, 5.0, 3.0]), vec![3.5, 1.0, 3.5, 2.0]);
}

proptest! {
    #[test]
    fn spearman_is_rank_invariant(v in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 3..40)) {
        let a: Vec<f64> = v.iter().map(|p| p.0).collect();
        let b: Vec<f64> = v.iter().map(|p| p.1).collect();
        if let Ok(r) = spearman(&a, &b) {
            let ta: Vec<f64> = a.iter().map(|x| (x / 100.0).exp()).collect();
            let tb: Vec<f64> = b.iter().map(|x| x * 3.0 + 7.0).collect();
            prop_assert_eq!(average_ranks(&a), average_ranks(&ta));
            prop_assert!((spearman(&ta, &tb).unwrap() - r).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn refining_classes_never_raises_record_weighted_variance(
        v in prop::collection::vec((0u8..4, 0u8..3, -100f64..100.0), 1..60)
    ) {
        // exact for record weighting: within-class variance of a refinement
        // is a weighted average of sub-class variances, each ≤ its parent's
        let xs: Vec<String> = v.iter().map(|(a, b, _)| format!("{a}:{b}")).collect();
        let xr: Vec<&str> = xs.iter().map(String::as_str).collect();
        let ys: Vec<f64> = v.iter().map(|t| t.2).collect();
        let coarse = total_variance_with(&xr, &ys, &key, Weighting::RecordWeighted).unwrap();
        let fine = total_variance_with(&xr, &ys, &|x: &str| x.to_string(), Weighting::RecordWeighted).unwrap();
        prop_assert!(fine <= coarse + 1e-9);
    }
}

#[test]
fn total_variance_examples() {
    let xs = ["a", "a", "b", "b"];
    let ys = [1.0, 3.0, 5.0, 5.0];
    assert_eq!(total_variance(&xs, &ys, &|x: &str| x.to_string()).unwrap(), 0.5);
    let distinct = ["p", "q", "r"];
    assert_eq!(total_variance(&distinct, &[1.0, 5.0, 9.0], &|x: &str| x.to_string()).unwrap(), 0.0);
    let null = total_variance(&xs, &ys, &|_: &str| String::new()).unwrap();
    assert_eq!(null, pop_var(&ys));
    // record weighting: (2·1 + 2·0)/4
    assert_eq!(total_variance_with(&xs, &ys, &|x: &str| x.to_string(), Weighting::RecordWeighted).unwrap(), 0.5);
    let xs3 = ["a", "b", "b", "b"];
    let ys3 = [1.0, 0.0, 3.0, 6.0];
    assert_eq!(total_variance(&xs3, &ys3, &|x: &str| x.to_string()).unwrap(), 3.0);
    assert_eq!(total_variance_with(&xs3, &ys3, &|x: &str| x.to_string(), Weighting::RecordWeighted).unwrap(), 4.5);
    assert!(total_variance(&[], &[], &|x: &str| x.to_string()).is_err());
}

#[test]
fn r2_examples() {
    assert_eq!(r2_ev(0.0, 4.0).unwrap(), 1.0);
    assert_eq!(r2_ev(4.0, 4.0).unwrap(), 0.0);
    assert_eq!(r2_ev(8.0, 4.0).unwrap(), -1.0);
    assert!(r2_ev(1.0, 0.0).is_err());
    assert_eq!(r2_nll(3.0, 3.0).unwrap(), 0.0);
    assert_eq!(r2_nll(1.5, 3.0).unwrap(), 0.5);
    assert!(r2_nll(1.0, -1.0).is_err());
}

#[test]
fn residual_histogram_examples() {
    let h = residual_histogram(&[1.0, 2.0], &[1.0, 2.0], 4).unwrap();
    assert_eq!(h.len(), 1);
    assert_eq!(h[0].count, 2);

    // squared errors 0, 1, 10, 100, 1000, 1000 over 3 decades
    let ys = [0.0; 6];
    let preds = [0.0, 1.0, 10f64.sqrt(), 10.0, 1000f64.sqrt(), 1000f64.sqrt()];
    let h = residual_histogram(&preds, &ys, 3).unwrap();
    let counts: Vec<usize> = h.iter().map(|b| b.count).collect();
    assert_eq!(counts, vec![1, 1, 1, 3]);
    assert_eq!(h[0].bin_low, 0.0);
    assert!((h[1].bin_low - 1.0).abs() < 1e-12 && (h[1].bin_high - 10.0).abs() < 1e-9);
    assert!((h[3].bin_high - 1000.0).abs() < 1e-9);
    assert_eq!(counts.iter().sum::<usize>(), 6);
    assert!(residual_histogram(&[1.0], &[1.0, 2.0], 3).is_err());
    assert!(residual_histogram(&[1.0], &[1.0], 0).is_err());
}

fn result(mean: f64, var: f64) -> PredictionResult {
    PredictionResult {
        samples: vec![mean],
        raw_sample_count: 1,
        point_mean: mean,
        point_median: mean,
        sample_variance: var,
        filtered_count: 0,
    }
}

#[test]
fn uncertainty_correlation_examples() {
    let ys = [0.0; 5];
    let res: Vec<PredictionResult> = (1..=5).map(|i| result(i as f64, 2.0 * (i * i) as f64)).collect();
    assert_eq!(uncertainty_correlation(&res, &ys).unwrap(), 1.0);
    let shuffled: Vec<PredictionResult> =
        [3, 1, 5, 2, 4].iter().zip(1..=5).map(|(&v, m)| result(m as f64, v as f64)).collect();
    assert!(uncertainty_correlation(&shuffled, &ys).unwrap().abs() < 1.0);
    let flat: Vec<PredictionResult> = (1..=5).map(|i| result(i as f64, 1.0)).collect();
    assert!(uncertainty_correlation(&flat, &ys).is_err());
    assert!(uncertainty_correlation(&res[..2], &ys[..2]).is_err());
}

#[test]
fn decomposition_limits() {
    let t = make_task(1, Month::Jun, Profile::Noisy, 4).unwrap();
    let (d, states) = generate_with_states(&t, 400, 1).unwrap();
    let oracle = Oracle::new(&t, &d, &states);
    let xs: Vec<&str> = d.records.iter().map(|r| r.x.as_str()).collect();
    let ys: Vec<f64> = d.records.iter().map(|r| r.y).collect();
    let full = variance_decomposition(&oracle, &xs, &ys, &|x: &str| x.to_string()).unwrap();
    assert_eq!(full.epistemic, 0.0);
    assert_eq!(full.total, 0.0);
    assert!((full.aleatoric - t.noise_sigma.powi(2)).abs() < 1e-6 * full.aleatoric);

    let mut quiet = t.clone();
    quiet.noise_sigma = 0.0;
    let (d, states) = generate_with_states(&quiet, 200, 1).unwrap();
    let oracle = Oracle::new(&quiet, &d, &states);
    let xs: Vec<&str> = d.records.iter().map(|r| r.x.as_str()).collect();
    let ys: Vec<f64> = d.records.iter().map(|r| r.y).collect();
    let dec = variance_decomposition(&oracle, &xs, &ys, &mask_projector(FeatureMask::NULL)).unwrap();
    assert_eq!(dec.aleatoric, 0.0);
    assert!((dec.total - dec.epistemic).abs() < 1e-6 * dec.total);
    assert!(variance_decomposition(&oracle, &["nope"], &[1.0], &key).is_err());
}

#[test]
fn report_from_perfect_predictions() {
    let t = make_task(3, Month::Nov, Profile::LowNoise, 2).unwrap();
    let d = crate::synthgen::generate_dataset(&t, 200, 5).unwrap();
    let test = d.split(Split::Test);
    let rows: Vec<PredictionRow> = test
        .iter()
        .enumerate()
        .map(|(i, r)| PredictionRow {
            task_id: r.task_id.clone(),
            example_id: i,
            y_true: r.y,
            point_mean: r.y,
            point_median: r.y,
            sample_variance: 0.0,
            nll: 2.0,
            filtered_count: 0,
        })
        .collect();
    let xs: Vec<&str> = test.iter().map(|r| r.x.as_str()).collect();
    let rep = evaluate_predictions(&rows, &xs, Some(4.0)).unwrap();
    assert_eq!((rep.mse, rep.r2_ev, rep.spearman_rho), (0.0, 1.0, 1.0));
    let ys: Vec<f64> = test.iter().map(|r| r.y).collect();
    assert_eq!(rep.tv_null, pop_var(&ys));
    assert_eq!(rep.tv_full, 0.0);
    assert!(rep.tv_hyperparams <= rep.tv_null * 1.5);
    assert_eq!(rep.r2_nll, 0.5);
    assert_eq!(rep.n_test, 20);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("report.csv");
    write_reports(&p, std::slice::from_ref(&rep)).unwrap();
    assert!(std::fs::read_to_string(&p)
        .unwrap()
        .starts_with("task_id,n_test,mse,spearman_rho,tv_null,tv_hyperparams,tv_full,r2_ev,r2_nll,mean_nll\n"));
    assert_eq!(read_reports(&p).unwrap(), vec![rep]);

    let no_null = evaluate_predictions(&rows, &xs, None).unwrap();
    assert!(no_null.r2_nll.is_nan());
    assert!(evaluate_predictions(&rows[..2], &xs, None).is_err());
}
