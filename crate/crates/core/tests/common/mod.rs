//! Independent oracles shared by the integration tests. Nothing here calls
//! the interior-point solver or any VJP.
#![allow(dead_code)]

use comlearn::linalg::{lu_solve, DenseMatrix};
use comlearn::qp::ProblemData;
use comlearn::rng::Rng;

/// Central finite differences of `f` at `x`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + step;
            let fp = f(&xp);
            xp[i] = orig - step;
            let fm = f(&xp);
            xp[i] = orig;
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

/// ‖a − b‖₂ / max(‖b‖₂, floor).
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / nb.max(floor)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Random strictly convex QP with `n_eq` equalities and box constraints on
/// `n_box` distinct variables; feasible by construction.
pub fn random_qp(rng: &mut Rng, n: usize, n_eq: usize, n_box: usize) -> ProblemData {
    let r = DenseMatrix::from_fn(n, n, |_, _| rng.normal());
    let p = r.gram().scaled(1.0 / n as f64).add(&DenseMatrix::identity(n).scaled(0.1));
    let q: Vec<f64> = (0..n).map(|_| 2.0 * rng.normal()).collect();

    let mut vars: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut vars);
    let boxed = &vars[..n_box.min(n)];
    let y0: Vec<f64> = (0..n).map(|_| rng.uniform_range(-0.3, 0.3)).collect();
    let mut g = DenseMatrix::zeros(2 * boxed.len(), n);
    let mut h = Vec::with_capacity(2 * boxed.len());
    for (k, &j) in boxed.iter().enumerate() {
        let lo = y0[j] - rng.uniform_range(0.1, 1.0);
        let hi = y0[j] + rng.uniform_range(0.1, 1.0);
        g[(2 * k, j)] = 1.0;
        h.push(hi);
        g[(2 * k + 1, j)] = -1.0;
        h.push(-lo);
    }
    let a = DenseMatrix::from_fn(n_eq, n, |_, _| rng.normal());
    let b = a.matvec(&y0);
    ProblemData::new(p, q, g, h, a, b).unwrap()
}

/// Exact solution by enumerating every subset of inequalities as the active
/// set, solving the equality-constrained KKT system, and keeping the feasible
/// point with nonnegative multipliers. Exponential in the number of
/// inequalities; masks holding both rows of an opposite pair (gᵢ = −gⱼ,
/// hᵢ + hⱼ > 0, e.g. the two sides of a box) cannot be active together and
/// are skipped.
pub fn active_set_oracle(prob: &ProblemData) -> Vec<f64> {
    let n = prob.n_var();
    let mi = prob.n_ineq();
    let me = prob.n_eq();
    assert!(mi <= 16, "enumeration oracle is exponential");
    let mut exclusive: Vec<u32> = Vec::new();
    for i in 0..mi {
        for j in i + 1..mi {
            if (0..n).all(|c| prob.g[(i, c)] == -prob.g[(j, c)]) && prob.h[i] + prob.h[j] > 0.0 {
                exclusive.push((1 << i) | (1 << j));
            }
        }
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0u32..(1 << mi) {
        if exclusive.iter().any(|&pair| mask & pair == pair) {
            continue;
        }
        let act: Vec<usize> = (0..mi).filter(|i| mask & (1 << i) != 0).collect();
        let k = act.len();
        if k + me > n {
            continue;
        }
        let dim = n + k + me;
        let mut kkt = DenseMatrix::zeros(dim, dim);
        let mut rhs = vec![0.0; dim];
        for i in 0..n {
            for j in 0..n {
                kkt[(i, j)] = prob.p[(i, j)];
            }
            rhs[i] = -prob.q[i];
        }
        for (r, &row) in act.iter().enumerate() {
            for j in 0..n {
                kkt[(n + r, j)] = prob.g[(row, j)];
                kkt[(j, n + r)] = prob.g[(row, j)];
            }
            rhs[n + r] = prob.h[row];
        }
        for r in 0..me {
            for j in 0..n {
                kkt[(n + k + r, j)] = prob.a[(r, j)];
                kkt[(j, n + k + r)] = prob.a[(r, j)];
            }
            rhs[n + k + r] = prob.b[r];
        }
        let Ok(z) = lu_solve(&kkt, &rhs) else { continue };
        let y = &z[..n];
        let lam = &z[n..n + k];
        if lam.iter().any(|&l| l < -1e-10) {
            continue;
        }
        let gy = prob.g.matvec(y);
        if gy.iter().zip(&prob.h).any(|(a, b)| a - b > 1e-10) {
            continue;
        }
        let obj = prob.objective(y);
        if best.as_ref().is_none_or(|(o, _)| obj < *o) {
            best = Some((obj, y.to_vec()));
        }
    }
    best.expect("no KKT point found").1
}

/// Sorted-order PAVA (pool adjacent violators), the exact L2 projection onto
/// the monotone cone.
pub fn pava(v: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::new();
    for &x in v {
        blocks.push((x, 1));
        while blocks.len() > 1 {
            let (m2, c2) = blocks[blocks.len() - 1];
            let (m1, c1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            let last = blocks.last_mut().unwrap();
            *last = ((m1 * c1 as f64 + m2 * c2 as f64) / (c1 + c2) as f64, c1 + c2);
        }
    }
    blocks.into_iter().flat_map(|(m, c)| std::iter::repeat_n(m, c)).collect()
}

#[allow(unused_imports)]
pub use families::*;

mod families {
    use super::central_diff;
    use comlearn::linalg::{spectral_scale, DenseMatrix};
    use comlearn::models::{ModelFamily, PredictSettings, Theta};
    use comlearn::rng::Rng;

    pub const FAMILY_NAMES: [&str; 8] = [
        "monotone_regression",
        "nonneg_regression",
        "box_logistic",
        "softmax_classifier",
        "quadratic_mrf",
        "mrf_denoiser",
        "resource_allocation",
        "mpc_policy",
    ];

    /// A small random (family, x, θ) in the family's domain.
    pub fn random_instance(name: &str, rng: &mut Rng) -> (ModelFamily, Vec<f64>, Theta) {
        let normals = |rng: &mut Rng, k: usize| -> Vec<f64> { (0..k).map(|_| rng.normal()).collect() };
        match name {
            "monotone_regression" | "nonneg_regression" => {
                let (n, m) = (5, 4);
                let fam = if name == "monotone_regression" {
                    ModelFamily::MonotoneRegression { n, m }
                } else {
                    ModelFamily::NonnegRegression { n, m }
                };
                let theta = Theta(normals(rng, n * m));
                (fam, normals(rng, n), theta)
            }
            "box_logistic" => {
                let (n, m) = (3, 4);
                let fam = ModelFamily::BoxLogistic { n, m, alpha: vec![0.05; m], beta: vec![0.6; m] };
                let theta = Theta(normals(rng, n * m));
                (fam, normals(rng, n), theta)
            }
            "softmax_classifier" => {
                let (n, m) = (3, 4);
                let theta = Theta(normals(rng, n * m));
                (ModelFamily::SoftmaxClassifier { n, m }, normals(rng, n), theta)
            }
            "quadratic_mrf" => {
                let (n, m) = (3, 3);
                let z = n + m;
                let r = DenseMatrix::from_fn(z, z, |_, _| rng.normal());
                let mut t = r.gram().scaled(1.0 / z as f64).add(&DenseMatrix::identity(z).scaled(0.5));
                // an asymmetric perturbation exercises both off-diagonal blocks
                for v in t.as_mut_slice() {
                    *v += 0.05 * rng.normal();
                }
                (ModelFamily::QuadraticMrf { n, m }, normals(rng, n), Theta(t.into_vec()))
            }
            "mrf_denoiser" => {
                let n = 6;
                let mut t: Vec<f64> = DenseMatrix::identity(n)
                    .into_vec()
                    .into_iter()
                    .map(|v| v + 0.3 * rng.normal())
                    .collect();
                t.push(rng.uniform_range(0.5, 2.0));
                (ModelFamily::MrfDenoiser { n }, normals(rng, n), Theta(t))
            }
            "resource_allocation" => {
                let m = 4;
                let theta = Theta((0..m).map(|_| rng.uniform_range(0.2, 1.0)).collect());
                let mut x = vec![rng.uniform_range(0.3, 1.0)];
                x.extend((0..m).map(|_| rng.uniform_range(0.2, 1.0)));
                (ModelFamily::ResourceAllocation { m }, x, theta)
            }
            "mpc_policy" => {
                let (n, m, horizon) = (3, 2, 4);
                let a = spectral_scale(&DenseMatrix::from_fn(n, n, |_, _| rng.normal()), 0.95).unwrap();
                let sd = 1.0 / (n as f64).sqrt();
                let b = DenseMatrix::from_fn(n, m, |_, _| sd * rng.normal());
                let theta = Theta((0..n).map(|_| rng.uniform_range(0.2, 2.0)).collect());
                let x = (0..n).map(|_| 2.0 * rng.normal()).collect();
                (ModelFamily::MpcPolicy { n, m, horizon, a, b, radius: 0.5 }, x, theta)
            }
            other => panic!("unknown family {other}"),
        }
    }

    /// Relative error of the analytic pullback against central differences
    /// of ⟨ȳ, predict(x, θ)⟩, or `None` when the instance sits within the
    /// stencil of a kink (one-sided slopes along a random direction disagree),
    /// where finite differences are not a valid oracle. The denominator floor
    /// of 1e-6 covers exactly-zero gradients (e.g. every first control at
    /// its bound), where the differences are pure solver roundoff.
    pub fn pullback_fd_error(
        fam: &ModelFamily,
        x: &[f64],
        theta: &Theta,
        ybar: &[f64],
        rng: &mut Rng,
    ) -> Option<f64> {
        let settings = PredictSettings::with_tol(1e-10);
        let step = 1e-5;
        let loss = |t: &[f64]| -> f64 {
            let p = fam.predict(x, &Theta(t.to_vec()), &settings).unwrap();
            p.y_hat.iter().zip(ybar).map(|(a, b)| a * b).sum()
        };
        let base = theta.as_slice();
        let dir: Vec<f64> = (0..base.len()).map(|_| rng.normal()).collect();
        let shifted = |s: f64| -> Vec<f64> { base.iter().zip(&dir).map(|(t, d)| t + s * d).collect() };
        let f0 = loss(base);
        let fwd = (loss(&shifted(1e-4)) - f0) / 1e-4;
        let bwd = (f0 - loss(&shifted(-1e-4))) / 1e-4;
        if (fwd - bwd).abs() > 1e-3 * (1.0 + fwd.abs()) {
            return None;
        }
        let pred = fam.predict(x, theta, &settings).unwrap();
        let g = fam.pullback(x, theta, &pred, ybar).unwrap();
        let fd = central_diff(loss, base, step);
        Some(super::rel_err(&g.dtheta, &fd, 1e-6))
    }
}
