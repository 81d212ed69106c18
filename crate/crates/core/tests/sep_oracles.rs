mod common;

use comlearn::rng::Rng;
use comlearn::sep::{separable_vjp, softmax, solve_separable, BudgetKind, Profile, SepProblem};
use common::{central_diff, max_abs_diff, rel_err};

fn exp_utility(theta: Vec<f64>, p: Vec<f64>, budget: f64) -> SepProblem {
    let m = theta.len();
    SepProblem {
        profile: Profile::ExpUtility { theta, p },
        c: vec![0.0; m],
        lower: vec![0.0; m],
        upper: vec![f64::INFINITY; m],
        budget,
        budget_kind: BudgetKind::AtMost,
    }
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let r = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
        if b - a < 1e-13 {
            break;
        }
    }
    0.5 * (a + b)
}

/// Minimizes the 3-coordinate exponential utility over {y ≥ 0, 1ᵀy = B}:
/// a coarse grid locates the basin, nested golden sections refine it.
fn simplex_slice_oracle(prob: &SepProblem) -> Vec<f64> {
    let b = prob.budget;
    let obj = |y1: f64, y2: f64| prob.objective(&[y1, y2, b - y1 - y2]);
    let inner = |y1: f64| -> (f64, f64) {
        let y2 = golden_section(|y2| obj(y1, y2), 0.0, b - y1);
        (y2, obj(y1, y2))
    };
    // 1000 x 1000 grid (10⁶ points) for the starting bracket.
    let steps = 1000;
    let mut best = (0.0, f64::INFINITY);
    for i in 0..=steps {
        let y1 = b * i as f64 / steps as f64;
        for j in 0..=(steps - i) {
            let y2 = b * j as f64 / steps as f64;
            let v = obj(y1, y2);
            if v < best.1 {
                best = (y1, v);
            }
        }
    }
    let h = b / steps as f64;
    let y1 = golden_section(|y1| inner(y1).1, (best.0 - 2.0 * h).max(0.0), (best.0 + 2.0 * h).min(b));
    let y2 = inner(y1).0;
    vec![y1, y2, b - y1 - y2]
}

#[test]
fn exp_utility_matches_grid_oracle() {
    let prob = exp_utility(vec![0.2, 0.5, 0.9], vec![0.3, 0.6, 0.8], 0.7);
    let sol = solve_separable(&prob, 1e-12).unwrap();
    let oracle = simplex_slice_oracle(&prob);
    assert!(max_abs_diff(&sol.y, &oracle) <= 1e-4, "{:?} vs {:?}", sol.y, oracle);
}

#[test]
fn exp_utility_vjp_matches_finite_differences() {
    let mut rng = Rng::seed_from_u64(21);
    let step = 1e-6;
    for _ in 0..5 {
        let theta: Vec<f64> = (0..3).map(|_| rng.uniform_range(0.2, 1.0)).collect();
        let p: Vec<f64> = (0..3).map(|_| rng.uniform_range(0.2, 1.0)).collect();
        let budget = rng.uniform_range(0.3, 1.0);
        let prob = exp_utility(theta.clone(), p.clone(), budget);
        let sol = solve_separable(&prob, 1e-12).unwrap();
        if !sol.clipped_low.is_empty() {
            // a zero allocation near the kink would make the FD stencil straddle it
            let near_kink = sol.clipped_low.iter().any(|&i| {
                let mut q = prob.clone();
                q.budget += 1e-3;
                solve_separable(&q, 1e-12).unwrap().y[i] > 0.0
            });
            if near_kink {
                continue;
            }
        }
        let ybar: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let g = separable_vjp(&prob, &sol, &ybar).unwrap();
        let loss = |q: &SepProblem| -> f64 {
            let s = solve_separable(q, 1e-14).unwrap();
            s.y.iter().zip(&ybar).map(|(a, b)| a * b).sum()
        };
        let fd_theta = central_diff(
            |t| {
                let mut q = prob.clone();
                q.profile = Profile::ExpUtility { theta: t.to_vec(), p: p.clone() };
                loss(&q)
            },
            &theta,
            step,
        );
        assert!(rel_err(&g.dtheta, &fd_theta, 1e-8) <= 1e-4, "{:?} vs {:?}", g.dtheta, fd_theta);
        let fd_p = central_diff(
            |pp| {
                let mut q = prob.clone();
                q.profile = Profile::ExpUtility { theta: theta.clone(), p: pp.to_vec() };
                loss(&q)
            },
            &p,
            step,
        );
        assert!(rel_err(&g.dp, &fd_p, 1e-8) <= 1e-4);
        let fd_c = central_diff(
            |c| {
                let mut q = prob.clone();
                q.c = c.to_vec();
                loss(&q)
            },
            &prob.c,
            step,
        );
        assert!(rel_err(&g.dc, &fd_c, 1e-8) <= 1e-4);
        let fd_s = central_diff(
            |s| {
                let mut q = prob.clone();
                q.budget = s[0];
                loss(&q)
            },
            &[budget],
            step,
        );
        assert!(rel_err(&[g.dbudget], &fd_s, 1e-8) <= 1e-4);
    }
}

#[test]
fn box_entropy_vjp_matches_finite_differences() {
    let mut rng = Rng::seed_from_u64(22);
    let m = 5;
    let prob = SepProblem {
        lower: vec![0.05; m],
        upper: vec![0.6; m],
        ..SepProblem::simplex_entropy((0..m).map(|_| rng.normal()).collect())
    };
    let sol = solve_separable(&prob, 1e-13).unwrap();
    let ybar: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
    let g = separable_vjp(&prob, &sol, &ybar).unwrap();
    let fd = central_diff(
        |c| {
            let mut q = prob.clone();
            q.c = c.to_vec();
            let s = solve_separable(&q, 1e-14).unwrap();
            s.y.iter().zip(&ybar).map(|(a, b)| a * b).sum()
        },
        &prob.c,
        1e-6,
    );
    assert!(rel_err(&g.dc, &fd, 1e-8) <= 1e-4);
}

#[test]
fn softmax_agrees_with_entropy_solver() {
    let mut rng = Rng::seed_from_u64(23);
    for _ in 0..50 {
        let m = 2 + rng.below(10);
        let logits: Vec<f64> = (0..m).map(|_| 3.0 * rng.normal()).collect();
        let prob = SepProblem::simplex_entropy(logits.iter().map(|v| -v).collect());
        let sol = solve_separable(&prob, 1e-14).unwrap();
        assert!(max_abs_diff(&sol.y, &softmax(&logits)) <= 1e-9);
    }
}

#[test]
fn softmax_of_log_is_identity_on_interior() {
    let mut rng = Rng::seed_from_u64(24);
    for _ in 0..100 {
        let m = 2 + rng.below(10);
        let raw: Vec<f64> = (0..m).map(|_| rng.uniform_range(0.01, 1.0)).collect();
        let z: f64 = raw.iter().sum();
        let y: Vec<f64> = raw.iter().map(|v| v / z).collect();
        let logs: Vec<f64> = y.iter().map(|v| v.ln()).collect();
        assert!(max_abs_diff(&softmax(&logs), &y) <= 1e-9);
    }
}

fn random_instance(rng: &mut Rng) -> SepProblem {
    let m = 1 + rng.below(20);
    let c: Vec<f64> = (0..m).map(|_| 2.0 * rng.normal()).collect();
    if rng.uniform() < 0.5 {
        let lower: Vec<f64> = (0..m).map(|_| rng.uniform_range(0.0, 0.5 / m as f64)).collect();
        let upper: Vec<f64> = lower.iter().map(|l| l + rng.uniform_range(0.0, 3.0 / m as f64)).collect();
        let lo: f64 = lower.iter().sum();
        let hi: f64 = upper.iter().sum();
        SepProblem {
            profile: Profile::NegEntropy,
            c,
            budget: lo + rng.uniform() * (hi - lo),
            lower,
            upper,
            budget_kind: BudgetKind::Equality,
        }
    } else {
        let theta = (0..m).map(|_| rng.uniform_range(0.05, 1.0)).collect();
        let p = (0..m).map(|_| rng.uniform_range(0.05, 1.0)).collect();
        SepProblem {
            c,
            ..exp_utility(theta, p, rng.uniform_range(0.01, 2.0))
        }
    }
}

#[test]
fn random_instances_are_feasible_and_stationary() {
    let mut rng = Rng::seed_from_u64(25);
    let tol = 1e-10;
    for _ in 0..1000 {
        let prob = random_instance(&mut rng);
        let sol = solve_separable(&prob, tol).unwrap();
        for i in 0..prob.dim() {
            assert!(sol.y[i] >= prob.lower[i] && sol.y[i] <= prob.upper[i]);
        }
        let total: f64 = sol.y.iter().sum();
        if sol.budget_active {
            assert!((total - prob.budget).abs() <= tol * (1.0 + prob.budget.abs()));
        } else {
            assert!(total <= prob.budget);
        }
        for i in 0..prob.dim() {
            if sol.clipped_low.contains(&i) || sol.clipped_high.contains(&i) {
                continue;
            }
            let r = prob.profile.derivative(i, sol.y[i]) + prob.c[i] + sol.nu;
            assert!(r.abs() <= 1e-8 * (1.0 + prob.c[i].abs() + sol.nu.abs()), "{r}");
        }
    }
}

#[test]
fn budget_residual_is_nonincreasing_in_dual() {
    let mut rng = Rng::seed_from_u64(26);
    for _ in 0..100 {
        let prob = random_instance(&mut rng);
        let mut prev = f64::INFINITY;
        for k in 0..400 {
            let nu = -20.0 + 0.1 * k as f64;
            let total: f64 = prob.response(nu).iter().sum();
            assert!(total <= prev || (total.is_infinite() && prev.is_infinite()));
            prev = total;
        }
    }
}

#[test]
fn separable_vjp_is_linear() {
    let mut rng = Rng::seed_from_u64(27);
    for _ in 0..20 {
        let prob = random_instance(&mut rng);
        let sol = solve_separable(&prob, 1e-12).unwrap();
        let m = prob.dim();
        let u: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
        let v: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
        let w: Vec<f64> = u.iter().zip(&v).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
        let (gu, gv, gw) = (
            separable_vjp(&prob, &sol, &u).unwrap(),
            separable_vjp(&prob, &sol, &v).unwrap(),
            separable_vjp(&prob, &sol, &w).unwrap(),
        );
        let combo: Vec<f64> = gu.dc.iter().zip(&gv.dc).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
        assert!(max_abs_diff(&gw.dc, &combo) <= 1e-9 * (1.0 + combo.iter().fold(0.0_f64, |m, v| m.max(v.abs()))));
        assert!((gw.dbudget - (2.0 * gu.dbudget - 0.5 * gv.dbudget)).abs() <= 1e-9);
    }
}
