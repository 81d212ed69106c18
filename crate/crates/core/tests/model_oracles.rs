mod common;

use comlearn::linalg::{lu_solve, DenseMatrix};
use comlearn::models::{difference_gram, ModelFamily, PredictSettings, Problem, Theta};
use comlearn::rng::Rng;
use comlearn::sep::softmax;
use common::{max_abs_diff, pava, pullback_fd_error, random_instance, FAMILY_NAMES};

#[test]
fn pullback_matches_finite_differences_for_every_family() {
    let mut rng = Rng::seed_from_u64(31);
    for name in FAMILY_NAMES {
        let mut checked = 0;
        let mut attempts = 0;
        while checked < 5 {
            attempts += 1;
            assert!(attempts < 50, "{name}: too many instances near kinks");
            let (fam, x, theta) = random_instance(name, &mut rng);
            let ybar: Vec<f64> = (0..fam.output_dim()).map(|_| rng.normal()).collect();
            if let Some(err) = pullback_fd_error(&fam, &x, &theta, &ybar, &mut rng) {
                assert!(err <= 1e-4, "{name}: relative error {err}");
                checked += 1;
            }
        }
    }
}

#[test]
fn predictions_lie_in_output_sets() {
    let mut rng = Rng::seed_from_u64(32);
    let s = PredictSettings::default();
    for name in FAMILY_NAMES {
        for _ in 0..20 {
            let (fam, x, theta) = random_instance(name, &mut rng);
            let y = fam.predict(&x, &theta, &s).unwrap().y_hat;
            assert_eq!(y.len(), fam.output_dim());
            match &fam {
                ModelFamily::MonotoneRegression { .. } => assert!(y.windows(2).all(|w| w[0] <= w[1] + 1e-9)),
                ModelFamily::NonnegRegression { .. } => assert!(y.iter().all(|&v| v >= -1e-9)),
                ModelFamily::BoxLogistic { alpha, beta, .. } => {
                    assert!((y.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                    for i in 0..y.len() {
                        assert!(y[i] >= alpha[i] - 1e-12 && y[i] <= beta[i] + 1e-12);
                    }
                }
                ModelFamily::SoftmaxClassifier { .. } => {
                    assert!((y.iter().sum::<f64>() - 1.0).abs() <= 1e-12 && y.iter().all(|&v| v > 0.0))
                }
                ModelFamily::ResourceAllocation { .. } => {
                    assert!((y.iter().sum::<f64>() - x[0]).abs() <= 1e-9 && y.iter().all(|&v| v >= 0.0))
                }
                ModelFamily::MpcPolicy { radius, .. } => assert!(y.iter().all(|v| v.abs() <= radius + 1e-9)),
                _ => assert!(y.iter().all(|v| v.is_finite())),
            }
        }
    }
}

#[test]
fn box_logistic_on_plain_simplex_is_softmax() {
    let mut rng = Rng::seed_from_u64(33);
    let (n, m) = (4, 6);
    let boxed = ModelFamily::BoxLogistic { n, m, alpha: vec![0.0; m], beta: vec![1.0; m] };
    let plain = ModelFamily::SoftmaxClassifier { n, m };
    let s = PredictSettings::default();
    for _ in 0..50 {
        let theta = Theta((0..n * m).map(|_| rng.normal()).collect());
        let x: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let a = boxed.predict(&x, &theta, &s).unwrap().y_hat;
        let b = plain.predict(&x, &theta, &s).unwrap().y_hat;
        assert!(max_abs_diff(&a, &b) <= 1e-7);
    }
}

#[test]
fn monotone_regression_is_pava() {
    let mut rng = Rng::seed_from_u64(34);
    let (n, m) = (20, 10);
    let fam = ModelFamily::MonotoneRegression { n, m };
    for _ in 0..20 {
        let theta = Theta((0..n * m).map(|_| rng.normal()).collect());
        let x: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let y = fam.predict(&x, &theta, &PredictSettings::default()).unwrap().y_hat;
        let t = DenseMatrix::from_vec(n, m, theta.0.clone()).unwrap();
        assert!(max_abs_diff(&y, &pava(&t.tr_matvec(&x))) <= 1e-6);
    }
}

#[test]
fn monotone_regression_is_idempotent_on_sorted_targets() {
    let mut rng = Rng::seed_from_u64(35);
    let m = 8;
    let fam = ModelFamily::MonotoneRegression { n: m, m };
    let theta = Theta(DenseMatrix::identity(m).into_vec());
    for _ in 0..20 {
        let mut x: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
        x.sort_by(f64::total_cmp);
        let y = fam.predict(&x, &theta, &PredictSettings::default()).unwrap().y_hat;
        assert!(max_abs_diff(&y, &x) <= 1e-7);
    }
}

#[test]
fn denoiser_matches_direct_solve() {
    let mut rng = Rng::seed_from_u64(36);
    let n = 30;
    let fam = ModelFamily::MrfDenoiser { n };
    for _ in 0..10 {
        let m = DenseMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } + 0.2 * rng.normal());
        let lambda = rng.uniform_range(0.01, 10.0);
        let mut t = m.clone().into_vec();
        t.push(lambda);
        let x: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let y = fam.predict(&x, &Theta(t), &PredictSettings::default()).unwrap().y_hat;
        let mtm = m.transpose().matmul(&m);
        let k = mtm.add(&difference_gram(n).scaled(lambda));
        let direct = lu_solve(&k, &mtm.matvec(&x)).unwrap();
        assert!(max_abs_diff(&y, &direct) <= 1e-9);
    }
}

#[test]
fn softmax_pullback_matches_jacobian() {
    let mut rng = Rng::seed_from_u64(37);
    let (n, m) = (3, 5);
    let fam = ModelFamily::SoftmaxClassifier { n, m };
    let theta = Theta((0..n * m).map(|_| rng.normal()).collect());
    let x: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let ybar: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
    let pred = fam.predict(&x, &theta, &PredictSettings::default()).unwrap();
    let g = fam.pullback(&x, &theta, &pred, &ybar).unwrap();
    let t = DenseMatrix::from_vec(n, m, theta.0.clone()).unwrap();
    let s = softmax(&t.tr_matvec(&x));
    // J = diag(s) − s sᵀ; dθ = x (J ȳ)ᵀ
    let jy: Vec<f64> = (0..m).map(|a| (0..m).map(|b| (if a == b { s[a] } else { 0.0 } - s[a] * s[b]) * ybar[b]).sum()).collect();
    let expected: Vec<f64> = x.iter().flat_map(|xi| jy.iter().map(move |v| xi * v)).collect();
    assert!(max_abs_diff(&g.dtheta, &expected) <= 1e-12);
}

#[test]
fn scaling_the_energy_leaves_the_argmin_unchanged() {
    let mut rng = Rng::seed_from_u64(38);
    let s = PredictSettings::with_tol(1e-10);
    for name in ["monotone_regression", "nonneg_regression", "quadratic_mrf", "mpc_policy"] {
        for _ in 0..5 {
            let (fam, x, theta) = random_instance(name, &mut rng);
            let Problem::Qp(prob) = fam.build_problem(&x, &theta).unwrap() else { panic!("{name} is a QP") };
            let c = rng.uniform_range(0.1, 10.0);
            let mut scaled = prob.clone();
            scaled.p = prob.p.scaled(c);
            scaled.q = prob.q.iter().map(|v| v * c).collect();
            let a = Problem::Qp(prob).solve(&s).unwrap();
            let b = Problem::Qp(scaled).solve(&s).unwrap();
            assert!(max_abs_diff(&a, &b) <= 1e-7, "{name}");
        }
    }
}

#[test]
fn mpc_replanning_is_time_consistent() {
    let mut rng = Rng::seed_from_u64(39);
    let (n, m) = (4, 2);
    let a = comlearn::linalg::spectral_scale(&DenseMatrix::from_fn(n, n, |_, _| rng.normal()), 0.95).unwrap();
    let b = DenseMatrix::from_fn(n, m, |_, _| rng.normal() / (n as f64).sqrt());
    let theta = Theta((0..n).map(|_| rng.uniform_range(0.2, 2.0)).collect());
    let x0: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let s = PredictSettings::with_tol(1e-10);
    let long = ModelFamily::MpcPolicy { n, m, horizon: 20, a: a.clone(), b: b.clone(), radius: 0.5 };
    let short = ModelFamily::MpcPolicy { n, m, horizon: 19, a: a.clone(), b: b.clone(), radius: 0.5 };
    let Problem::Qp(prob) = long.build_problem(&x0, &theta).unwrap() else { unreachable!() };
    let plan = Problem::Qp(prob).solve(&s).unwrap();
    // (x₁..x₂₀, y₀..y₁₉)
    let y0 = &plan[20 * n..20 * n + m];
    let y1 = &plan[20 * n + m..20 * n + 2 * m];
    let mut x1 = a.matvec(&x0);
    for (xi, bi) in x1.iter_mut().zip(b.matvec(y0)) {
        *xi += bi;
    }
    let replanned = short.predict(&x1, &theta, &s).unwrap().y_hat;
    assert!(max_abs_diff(&replanned, y1) <= 1e-5);
}
