use proptest::prelude::*;
use robopt::data_synth::*;
use robopt::{Matrix, Vector};

fn ones(p: usize) -> Vector {
    Vector::from_element(p, 1.0)
}

#[test]
fn same_seed_same_bytes() {
    let make = || {
        gen_linear_heavy_tailed(300, 7, &ones(7), &CovariateLaw::Identity, NoiseSpec::StudentT { nu: 3.0 }, 11)
            .unwrap()
    };
    assert_eq!(make(), make());
    let other = gen_linear_heavy_tailed(300, 7, &ones(7), &CovariateLaw::Identity, NoiseSpec::StudentT { nu: 3.0 }, 12)
        .unwrap();
    assert_ne!(make().y, other.y);
}

#[test]
fn rows_do_not_depend_on_sample_count() {
    let small = gen_logistic_glm(50, 4, &ones(4), 0.5, 3).unwrap();
    let large = gen_logistic_glm(500, 4, &ones(4), 0.5, 3).unwrap();
    assert_eq!(small.x, large.x.rows(0, 50).into_owned());
    assert_eq!(small.y, large.y.rows(0, 50).into_owned());
}

#[test]
fn csv_round_trip_keeps_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    let ds = gen_logistic_glm(40, 3, &Vector::from_vec(vec![0.5, -1.0, 2.0]), 0.7, 5).unwrap();
    write_csv(&ds, &path).unwrap();
    assert!(sidecar_path(&path).exists());
    let back = read_csv(&path).unwrap();
    assert_eq!(back, ds);

    let header = std::fs::read_to_string(&path).unwrap();
    assert!(header.starts_with("x_1,x_2,x_3,y\n"));
}

#[test]
fn csv_without_sidecar_is_linear() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bare.csv");
    std::fs::write(&path, "x_1,y\n1.5,2\n-0.5,0\n").unwrap();
    let ds = read_csv(&path).unwrap();
    assert_eq!(ds.model_tag, ModelTag::Linear);
    assert_eq!(ds.x, Matrix::from_row_slice(2, 1, &[1.5, -0.5]));
    assert!(ds.theta_star.is_none());
    std::fs::write(&path, "x_1,y\n1.5,oops\n").unwrap();
    assert!(read_csv(&path).is_err());
}

#[test]
fn truncated_normal_sample_variance() {
    for (sigma2, bound) in [(1.0, 1.0), (0.5, 2.0), (4.0, 1.5)] {
        let draws = sample_truncated_normal(sigma2, bound, 40_000, 21).unwrap();
        assert!(draws.iter().all(|d| d.abs() <= bound));
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let want = truncated_normal_variance(sigma2, bound);
        // Fourth moment is at most bound^4, so the standard error is at most bound^2 / sqrt(n).
        assert!((var - want).abs() < 5.0 * bound * bound / n.sqrt(), "{sigma2} {bound}: {var} vs {want}");
    }
}

#[test]
fn truncated_variance_closed_form_at_unit_bound() {
    // sigma = 1, a = 1: 1 - 2 phi(1) / (2 Phi(1) - 1).
    let want = 1.0 - 2.0 * 0.24197072451914337 / 0.6826894921370859;
    let got = truncated_normal_variance(1.0, 1.0);
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn uniform_box_covariates_stay_inside() {
    let a = 0.3;
    let ds = gen_linear_heavy_tailed(200, 6, &ones(6), &CovariateLaw::UniformBox { half_width: a }, NoiseSpec::None, 2)
        .unwrap();
    assert!(ds.x.iter().all(|v| v.abs() <= a));
    assert!((ds.max_row_norm() - ds.x.row_iter().map(|r| r.norm()).fold(0.0, f64::max)).abs() == 0.0);
}

#[test]
fn logistic_labels_are_binary() {
    let ds = gen_logistic_glm(500, 5, &ones(5), 1.0 / 5f64.sqrt(), 8).unwrap();
    assert!(ds.y.iter().all(|&v| v == 0.0 || v == 1.0));
    let frac = ds.y.sum() / 500.0;
    // Symmetric covariates and a symmetric link give balanced labels.
    assert!((frac - 0.5).abs() < 0.1);
}

#[test]
fn separable_points_respect_margin() {
    let p = 4;
    let ds = gen_separable(300, p, 13).unwrap();
    let dir = ones(p) / (p as f64).sqrt();
    for i in 0..ds.n() {
        let proj = ds.row(i).dot(&dir);
        assert!(proj.abs() >= (p as f64).sqrt() / 2.0 - 1e-12);
        assert_eq!(ds.y[i], proj.signum());
    }
}

#[test]
fn covariance_of_laws() {
    assert_eq!(CovariateLaw::Identity.covariance(3), Matrix::identity(3, 3));
    let c = CovariateLaw::RankM { m: 2 }.covariance(4);
    assert_eq!(c.trace(), 2.0);
    let c = CovariateLaw::UniformBox { half_width: 0.6 }.covariance(2);
    assert!((c[(0, 0)] - 0.12).abs() < 1e-15);
    assert_eq!(NoiseSpec::StudentT { nu: 3.0 }.variance(), Some(3.0));
    assert_eq!(NoiseSpec::StudentT { nu: 2.0 }.variance(), None);
}

#[test]
fn diagonal_second_moment_matches_law() {
    let values = vec![0.5, 1.0, 2.0];
    let law = CovariateLaw::Diagonal { values: values.clone() };
    let ds = gen_linear_heavy_tailed(20_000, 3, &ones(3), &law, NoiseSpec::None, 4).unwrap();
    let m = ds.x.tr_mul(&ds.x) / 20_000.0;
    for j in 0..3 {
        assert!((m[(j, j)] - values[j]).abs() < 0.05 * values[j]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn shapes_and_finiteness(n in 1usize..80, p in 1usize..12, seed in any::<u64>(), nu in 1.0f64..6.0) {
        let ds = gen_linear_heavy_tailed(n, p, &ones(p), &CovariateLaw::Identity, NoiseSpec::StudentT { nu }, seed)
            .unwrap();
        prop_assert_eq!(ds.n(), n);
        prop_assert_eq!(ds.p(), p);
        prop_assert!(ds.x.iter().chain(ds.y.iter()).all(|v| v.is_finite()));
        prop_assert_eq!(ds.seed, seed);
    }

    #[test]
    fn noiseless_responses_are_exact(n in 1usize..50, p in 1usize..8, seed in any::<u64>()) {
        let theta: Vector = Vector::from_fn(p, |i, _| i as f64 - 1.5);
        let ds = gen_linear_heavy_tailed(n, p, &theta, &CovariateLaw::Identity, NoiseSpec::None, seed).unwrap();
        let resid = &ds.y - &ds.x * &theta;
        prop_assert!(resid.amax() < 1e-12);
    }

    #[test]
    fn truncated_draws_within_bound(sigma2 in 0.01f64..10.0, bound in 0.05f64..3.0, seed in any::<u64>()) {
        let draws = sample_truncated_normal(sigma2, bound, 50, seed).unwrap();
        prop_assert!(draws.iter().all(|d| d.abs() <= bound));
        let v = truncated_normal_variance(sigma2, bound);
        prop_assert!(v > 0.0 && v <= sigma2.min(bound * bound / 3.0 + 1e-12));
    }
}
