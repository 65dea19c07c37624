use nalgebra::DMatrix;
use skewcross::simulation::{generate_dataset, run_monte_carlo, McSummary, SimConfig};
use skewcross::{fit, FitOptions, Scenario};

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(f)
}

fn as_json(s: &McSummary) -> String {
    serde_json::to_string(s).unwrap()
}

#[test]
fn summary_does_not_depend_on_worker_count() {
    let cfg = SimConfig::standard(Scenario::EffectSn, 10, 6, 3);
    let one = in_pool(1, || run_monte_carlo(&cfg).unwrap());
    let four = in_pool(4, || run_monte_carlo(&cfg).unwrap());
    assert_eq!(as_json(&one), as_json(&four));
}

#[test]
fn single_replicate_summary_is_that_fit() {
    // first seed whose single replicate has an interior optimum
    let (cfg, f) = (8..40)
        .map(|seed| {
            let cfg = SimConfig::standard(Scenario::ErrorSn, 10, 1, seed);
            let data = generate_dataset(&cfg, 0).unwrap();
            let f = fit(&data, Scenario::ErrorSn, &FitOptions::default()).unwrap();
            (cfg, f)
        })
        .find(|(_, f)| f.converged)
        .unwrap();
    let s = run_monte_carlo(&cfg).unwrap();
    for (k, name) in f.param_names.iter().enumerate() {
        let row = s.row("sn", name).unwrap();
        assert_eq!(row.mean_estimate, f.estimates()[k]);
        assert_eq!(row.mean_se, f.se[k]);
        assert_eq!(row.sd_estimate, 0.0);
    }
    assert_eq!(s.replicates_converged, 1);
}

fn skewness(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let m2 = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    let m3 = x.iter().map(|v| (v - m).powi(3)).sum::<f64>() / n;
    m3 / m2.powf(1.5)
}

#[test]
fn error_skewness_sits_on_the_first_coordinate() {
    let cfg = SimConfig::standard(Scenario::ErrorSn, 3334, 1, 12);
    let data = generate_dataset(&cfg, 0).unwrap();
    let resid: Vec<_> = data
        .subjects
        .iter()
        .map(|s| &s.y - &s.x * &cfg.true_theta.beta)
        .collect();
    let n = resid.len() as f64;
    let coord = |j: usize| resid.iter().map(|r| r[j]).collect::<Vec<_>>();
    assert!(skewness(&coord(0)) > 0.2, "{}", skewness(&coord(0)));
    for j in 1..12 {
        assert!(
            skewness(&coord(j)).abs() < 0.1,
            "coordinate {j}: {}",
            skewness(&coord(j))
        );
    }

    // covariance of the additive construction b 1 + e
    let t = &cfg.true_theta;
    let delta2 = t.lambda * t.lambda / (1.0 + t.lambda * t.lambda);
    let mut expected =
        DMatrix::from_element(12, 12, t.sigma_s2) + DMatrix::identity(12, 12) * t.sigma_e2;
    expected[(0, 0)] -= t.sigma_e2 * delta2 * 2.0 / std::f64::consts::PI;
    let mean = resid
        .iter()
        .fold(nalgebra::DVector::zeros(12), |a, r| a + r)
        / n;
    let mut cov = DMatrix::zeros(12, 12);
    for r in &resid {
        let c = r - &mean;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    // each entry within 5 normal-theory standard errors
    for j in 0..12 {
        for k in 0..12 {
            let se = ((expected[(j, j)] * expected[(k, k)] + expected[(j, k)].powi(2)) / n).sqrt();
            let z = (cov[(j, k)] - expected[(j, k)]) / se;
            assert!(
                z.abs() < 5.0,
                "({j},{k}): {} vs {}",
                cov[(j, k)],
                expected[(j, k)]
            );
        }
    }
    // and the first coordinate's mean is the skew offset
    assert!(
        (mean[0] - t.mean_offset()).abs() < 0.05,
        "{} vs {}",
        mean[0],
        t.mean_offset()
    );
}

#[test]
fn bias_shrinks_with_sample_size() {
    let small = run_monte_carlo(&SimConfig::standard(Scenario::ErrorSn, 30, 50, 21)).unwrap();
    let large = run_monte_carlo(&SimConfig::standard(Scenario::ErrorSn, 50, 50, 21)).unwrap();
    let improved = small
        .rows
        .iter()
        .filter(|r| r.model == "sn")
        .filter(|r| large.row("sn", &r.parameter).unwrap().mean_abs_bias <= r.mean_abs_bias)
        .count();
    assert!(improved >= 8, "{improved} of 12");
}

#[test]
fn summary_invariants() {
    let s = run_monte_carlo(&SimConfig::standard(Scenario::EffectSn, 15, 8, 33)).unwrap();
    assert!((0.0..=1.0).contains(&s.sn_selected_rate));
    assert!(s.replicates_converged <= 8 && s.normal_converged <= 8);
    assert_eq!(s.rows.iter().filter(|r| r.model == "sn").count(), 12);
    assert_eq!(s.rows.iter().filter(|r| r.model == "normal").count(), 11);
    for r in &s.rows {
        assert!(
            r.mean_abs_bias >= (r.mean_estimate - r.true_value).abs() - 1e-12,
            "{r:?}"
        );
        assert!(r.sd_estimate >= 0.0);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = SimConfig::standard(Scenario::ErrorSn, 10, 0, 1);
    assert!(run_monte_carlo(&cfg).is_err());
    cfg.replicates = 1;
    cfg.true_theta.sigma_s2 = 0.0;
    assert!(run_monte_carlo(&cfg).is_err());
}
