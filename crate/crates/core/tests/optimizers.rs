use proptest::prelude::*;
use robopt::data_synth::{gen_linear_heavy_tailed, CovariateLaw, Dataset, NoiseSpec};
use robopt::losses::LossModel;
use robopt::optimizers::*;
use robopt::privacy_accountant::{noise_variance, NoiseVariant};
use robopt::{Matrix, Vector};

fn vec_in(p: usize, r: f64) -> impl Strategy<Value = Vector> {
    prop::collection::vec(-r..r, p).prop_map(Vector::from_vec)
}

/// Symmetric positive definite matrix with eigenvalues in [lo, hi].
fn spd(p: usize, lo: f64, hi: f64) -> impl Strategy<Value = Matrix> {
    (prop::collection::vec(-1.0f64..1.0, p * p), prop::collection::vec(lo..hi, p)).prop_map(move |(raw, eig)| {
        let q = Matrix::from_row_slice(p, p, &raw).qr().q();
        &q * Matrix::from_diagonal(&Vector::from_vec(eig)) * q.transpose()
    })
}

fn linear_data(n: usize, p: usize, seed: u64) -> Dataset {
    gen_linear_heavy_tailed(n, p, &Vector::from_element(p, 0.5), &CovariateLaw::Identity, NoiseSpec::Gaussian { sigma2: 0.25 }, seed)
        .unwrap()
}

#[test]
fn chunks_cover_floor_of_ratio() {
    let c = split_chunks(103, 10).unwrap();
    assert_eq!(c.len(), 10);
    assert!(c.iter().all(|r| r.len() == 10));
    assert_eq!(c[9], 90..100);
    assert!(split_chunks(5, 6).is_err());
    assert!(split_chunks(5, 0).is_err());
}

#[test]
fn private_fw_is_seed_deterministic() {
    let ds = linear_data(400, 5, 1);
    let model = LossModel::squared();
    let ball = ConstraintSet::ball(2.0).unwrap();
    let mut cfg = OptimizerConfig::new(Algorithm::FwClassicPrivate, 12);
    cfg.seed = 77;
    let src = GradSource::Private { epsilon: 0.5, delta: 0.1, lipschitz: 1.0 };
    let a = run(&ds, &model, &ball, &cfg, &src).unwrap();
    let b = run(&ds, &model, &ball, &cfg, &src).unwrap();
    assert_eq!(a.iterates, b.iterates);
    cfg.seed = 78;
    let c = run(&ds, &model, &ball, &cfg, &src).unwrap();
    assert_ne!(a.iterates, c.iterates);
}

#[test]
fn private_runs_draw_once_per_step_with_accountant_variance() {
    let ds = linear_data(600, 4, 2);
    let model = LossModel::squared();
    let ball = ConstraintSet::ball(1.5).unwrap();
    let (eps, delta, l) = (0.7, 0.05, 2.0);
    let src = GradSource::Private { epsilon: eps, delta, lipschitz: l };

    let cfg = OptimizerConfig::new(Algorithm::FwClassicPrivate, 9);
    let tr = run(&ds, &model, &ball, &cfg, &src).unwrap();
    assert_eq!(tr.noise_draws, 9);
    assert_eq!(tr.noise_variance, Some(noise_variance(l, 600, 9, eps, delta, NoiseVariant::Classic).unwrap()));

    let mut cfg = OptimizerConfig::new(Algorithm::FwAccelPrivate, 7);
    cfg.step_size = Some(0.25);
    let tr = run(&ds, &model, &ball, &cfg, &src).unwrap();
    assert_eq!(tr.noise_draws, 7);
    assert_eq!(tr.noise_variance, Some(noise_variance(l, 600, 7, eps, delta, NoiseVariant::Accelerated).unwrap()));

    let mut cfg = OptimizerConfig::new(Algorithm::Pgd, 8);
    cfg.step_size = Some(0.5);
    let tr = run(&ds, &model, &ConstraintSet::AllSpace, &cfg, &src).unwrap();
    assert_eq!(tr.noise_draws, 8);
    assert_eq!(tr.noise_variance, Some(noise_variance(l, 75, 8, eps, delta, NoiseVariant::ChunkedGd).unwrap()));
}

#[test]
fn injected_noise_has_the_reported_variance() {
    // One private step against one exact step from the same start on the
    // same chunk: the difference divided by the step is the noise vector.
    let p = 800;
    let ds = gen_linear_heavy_tailed(1600, p, &Vector::zeros(p), &CovariateLaw::Identity, NoiseSpec::None, 3).unwrap();
    let model = LossModel::squared();
    let mut cfg = OptimizerConfig::new(Algorithm::Pgd, 2);
    cfg.step_size = Some(1.0);
    cfg.seed = 5;
    let src = GradSource::Private { epsilon: 0.5, delta: 0.1, lipschitz: 0.01 };
    let noisy = run(&ds, &model, &ConstraintSet::AllSpace, &cfg, &src).unwrap();
    let var = noisy.noise_variance.unwrap();
    // Zero start and zero responses: the exact gradient at the origin is zero.
    let z = &noisy.iterates[1] * -1.0;
    let sample = z.norm_squared() / p as f64;
    assert!((sample / var - 1.0).abs() < 0.2, "{sample} vs {var}");
}

#[test]
fn dp_sgd_runs_n_squared_steps() {
    let ds = linear_data(12, 3, 4);
    let model = LossModel::squared();
    let ball = ConstraintSet::ball(1.0).unwrap();
    let mut cfg = DpSgdConfig::new(0.8, 0.1, 9);
    cfg.lipschitz = Some(1.0);
    let tr = run_dp_sgd(&ds, &model, &ball, &cfg).unwrap();
    assert_eq!(tr.iterates.len(), 145);
    assert_eq!(tr.noise_draws, 144);
    assert_eq!(tr.noise_variance, Some(noise_variance(1.0, 12, 144, 0.8, 0.1, NoiseVariant::Sgd).unwrap()));
    assert!(tr.iterates.iter().all(|t| t.norm() <= 1.0 + 1e-12));
    cfg.max_n = 10;
    assert!(run_dp_sgd(&ds, &model, &ball, &cfg).is_err());
    let plain = OptimizerConfig::new(Algorithm::DpSgd, 1);
    assert!(run(&ds, &model, &ball, &plain, &GradSource::Exact).is_err());
}

#[test]
fn nesterov_refuses_constraints() {
    let ds = linear_data(50, 2, 5);
    let mut cfg = OptimizerConfig::new(Algorithm::NesterovSmooth, 3);
    cfg.smoothness = Some(2.0);
    let ball = ConstraintSet::ball(1.0).unwrap();
    assert!(run(&ds, &LossModel::squared(), &ball, &cfg, &GradSource::Exact).is_err());
    assert!(run(&ds, &LossModel::squared(), &ConstraintSet::AllSpace, &cfg, &GradSource::Exact).is_ok());
}

#[test]
fn robust_split_needs_enough_samples_per_chunk() {
    let ds = linear_data(100, 2, 6);
    let mut cfg = OptimizerConfig::new(Algorithm::Pgd, 10);
    cfg.step_size = Some(0.5);
    let src = GradSource::Robust { failure_prob: 0.1 };
    assert!(run(&ds, &LossModel::squared(), &ConstraintSet::AllSpace, &cfg, &src).is_err());
    cfg.chunking = Chunking::Reuse;
    let tr = run(&ds, &LossModel::squared(), &ConstraintSet::AllSpace, &cfg, &src).unwrap();
    assert!(tr.final_metrics().l2_err.unwrap() < 0.5);
}

#[test]
fn trajectory_csv_columns() {
    let ds = linear_data(50, 2, 7);
    let mut cfg = OptimizerConfig::new(Algorithm::Pgd, 2);
    cfg.smoothness = Some(2.0);
    cfg.reference_loss = Some(0.0);
    let tr = run(&ds, &LossModel::squared(), &ConstraintSet::AllSpace, &cfg, &GradSource::Exact).unwrap();
    let mut buf = Vec::new();
    tr.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t,loss,excess_loss,l2_err,eta_t");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].ends_with(','));
}

#[test]
fn reference_minimum_inside_and_on_boundary() {
    let ds = linear_data(500, 3, 8);
    let model = LossModel::squared();
    let (_, free) = reference_minimum(&ds, &model, &ConstraintSet::AllSpace).unwrap();
    let normal = (ds.x.transpose() * &ds.x).cholesky().unwrap().solve(&(ds.x.transpose() * &ds.y));
    assert!((free - normal).norm() < 1e-10);
    let (_, capped) = reference_minimum(&ds, &model, &ConstraintSet::ball(0.2).unwrap()).unwrap();
    assert!((capped.norm() - 0.2).abs() < 1e-10);
}

#[test]
fn nesterov_window_edges_cross_once() {
    // The window closes where its edges meet; bisect for the crossing.
    let gap = |x: f64| nesterov_window_upper(x) - nesterov_window_lower(x);
    let (mut lo, mut hi) = (1.5, 2.0);
    assert!(gap(lo) > 0.0 && gap(hi) < 0.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if gap(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    assert!((lo - 1.76759).abs() < 1e-4, "{lo}");
}

#[test]
fn noiseless_estimator_is_stable() {
    let r = stability_constants(1.5, 1.0, 0.0).unwrap();
    assert!((r.k_gd - 0.2).abs() < 1e-15);
    assert!(r.stable_gd);
    assert!(!r.nesterov_window_ok);
    let r = stability_constants(1.5, 1.0, 0.6).unwrap();
    assert!(!r.stable_gd);
    assert!(stability_constants(1.0, 0.0, 0.1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lmo_beats_sampled_sphere_points(g in vec_in(5, 3.0), probes in prop::collection::vec(vec_in(5, 1.0), 20), r in 0.1f64..5.0) {
        let v = lmo_l2_ball(&g, r);
        prop_assert!(v.norm() <= r * (1.0 + 1e-12));
        for u in probes {
            let n = u.norm();
            prop_assume!(n > 1e-9);
            let on_sphere = u * (r / n);
            prop_assert!(g.dot(&v) <= g.dot(&on_sphere) + 1e-12);
        }
    }

    #[test]
    fn projection_is_idempotent_and_feasible(v in vec_in(6, 10.0), r in 0.1f64..5.0) {
        let once = project_l2_ball(&v, r);
        prop_assert!(once.norm() <= r + 1e-12);
        prop_assert!((project_l2_ball(&once, r) - &once).norm() <= 1e-15 * (1.0 + r));
        // Nonexpansive towards any feasible point.
        let inside = &once * 0.5;
        prop_assert!((&once - &inside).norm() <= (&v - &inside).norm() + 1e-12);
    }

    #[test]
    fn frank_wolfe_iterates_are_feasible_convex_combinations(
        h in spd(4, 0.1, 3.0), c in vec_in(4, 4.0), r in 0.2f64..3.0, fixed in prop::option::of(0.01f64..1.0)
    ) {
        let mut oracle = QuadraticOracle { hessian: h.clone(), center: c.clone() };
        let schedule = fixed.map(FwStep::Fixed).unwrap_or(FwStep::Classic);
        let path = frank_wolfe(&mut oracle, r, schedule, 30, &Vector::zeros(4)).unwrap();
        for (t, w) in path.iterates.windows(2).enumerate() {
            prop_assert!(w[1].norm() <= r + 1e-12);
            let s = path.step_sizes[t];
            let g = &h * (&w[0] - &c);
            let want = &w[0] * (1.0 - s) + lmo_l2_ball(&g, r) * s;
            prop_assert!((&w[1] - want).norm() < 1e-12 * (1.0 + r));
        }
    }

    #[test]
    fn nesterov_without_momentum_is_gradient_descent(h in spd(3, 0.2, 2.0), c in vec_in(3, 3.0), x0 in vec_in(3, 3.0), step in 0.05f64..0.5) {
        let mut a = QuadraticOracle { hessian: h.clone(), center: c.clone() };
        let mut b = a.clone();
        let nes = nesterov(&mut a, step, Momentum::Constant { value: 0.0 }, 15, &x0, &x0).unwrap();
        let gd = projected_gd(&mut b, &ConstraintSet::AllSpace, step, 15, &x0).unwrap();
        prop_assert_eq!(nes.iterates.len(), gd.iterates.len() + 1);
        for k in 0..gd.iterates.len() {
            prop_assert_eq!(&nes.iterates[k + 1], &gd.iterates[k]);
        }
    }

    #[test]
    fn optimum_is_a_fixed_point(h in spd(3, 0.2, 2.0), c in vec_in(3, 3.0), step in 0.05f64..0.5, m in 0.0f64..0.9) {
        let mut o = QuadraticOracle { hessian: h, center: c.clone() };
        let gd = projected_gd(&mut o, &ConstraintSet::AllSpace, step, 5, &c).unwrap();
        prop_assert!(gd.iterates.iter().all(|x| (x - &c).norm() < 1e-12));
        let nes = nesterov(&mut o, step, Momentum::Constant { value: m }, 5, &c, &c).unwrap();
        prop_assert!(nes.iterates.iter().all(|x| (x - &c).norm() < 1e-12));
    }

    #[test]
    fn ball_minimizer_satisfies_optimality(h in spd(4, 0.0, 2.0), b in vec_in(4, 3.0), r in 0.1f64..3.0) {
        let x = ball_quadratic_minimizer(&h, &b, r).unwrap();
        prop_assert!(x.norm() <= r * (1.0 + 1e-9));
        let f = |v: &Vector| 0.5 * v.dot(&(&h * v)) - b.dot(v);
        // Compare against projected gradient descent run to convergence.
        let mut v = Vector::zeros(4);
        let step = 1.0 / 2.5;
        for _ in 0..20_000 {
            v = project_l2_ball(&(&v - (&h * &v - &b) * step), r);
        }
        prop_assert!(f(&x) <= f(&v) + 1e-8);
    }
}
