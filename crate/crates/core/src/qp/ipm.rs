use crate::linalg::{dot, norm_inf, DenseMatrix, LinalgError, Lu};

use super::{kkt_residuals_at, ProblemData, QpError, QpSolution, QpStatus, Result, SolveSettings};

const FRACTION_TO_BOUNDARY: f64 = 0.99;
const STALL_LIMIT: usize = 10;
const KKT_REGULARIZATION: f64 = 1e-10;
const UNBOUNDED_NORM: f64 = 1e12;
const POLISH_FALLBACK_TIGHTENING: f64 = 1e-3;

/// Solves the QP with a Mehrotra predictor-corrector interior-point method.
///
/// Problems without inequalities are solved directly from the equality KKT
/// system. `status` reports why the iteration stopped; only `Optimal`
/// carries the residual guarantee of `settings.tol`.
pub fn solve_qp(prob: &ProblemData, settings: &SolveSettings) -> Result<QpSolution> {
    prob.validate()?;
    if prob.n_ineq() == 0 {
        return solve_equality_qp(prob, settings);
    }

    let mi = prob.n_ineq();
    let scale = 1.0 + norm_inf(&prob.q);

    let (mut y, mut nu, mut s, mut lam) = initial_point(prob);

    let mut best_primal = f64::INFINITY;
    let mut stall = 0;

    for iter in 0..settings.max_iters {
        let kkt = kkt_residuals_at(prob, &y, &nu, &lam);
        if kkt.within(settings.tol, prob) {
            if let Some(polished) = polish(prob, &s, &y, &nu, &lam, iter, settings) {
                return Ok(polished);
            }
            // An ambiguous active-set guess: tighten before trusting the
            // interior point on its own.
            if kkt.within(POLISH_FALLBACK_TIGHTENING * settings.tol, prob) {
                return Ok(QpSolution { y, nu, lam, status: QpStatus::Optimal, iterations: iter });
            }
        }
        if norm_inf(&y) > UNBOUNDED_NORM * scale {
            return Ok(QpSolution {
                y,
                nu,
                lam,
                status: QpStatus::Unbounded,
                iterations: iter,
            });
        }

        let r_d = dual_residual(prob, &y, &nu, &lam);
        let r_e = eq_residual(prob, &y);
        let gy = prob.g.matvec(&y);
        let r_i: Vec<f64> = (0..mi).map(|i| gy[i] + s[i] - prob.h[i]).collect();

        let primal = norm_inf(&r_e).max(norm_inf(&r_i));
        if primal < 0.999 * best_primal {
            best_primal = primal;
            stall = 0;
        } else {
            stall += 1;
            if stall >= STALL_LIMIT && primal > settings.tol * scale {
                return Ok(QpSolution {
                    y,
                    nu,
                    lam,
                    status: QpStatus::Infeasible,
                    iterations: iter,
                });
            }
        }

        let mu = dot(&s, &lam) / mi as f64;
        let inv_w: Vec<f64> = s.iter().zip(&lam).map(|(s, l)| s / l).collect();
        let system = NewtonSystem::factor(prob, &inv_w)?;

        // Predictor.
        let rc_aff: Vec<f64> = s.iter().zip(&lam).map(|(s, l)| s * l).collect();
        let aff = system.direction(prob, &r_d, &r_e, &r_i, &s, &lam, &rc_aff);
        let alpha_aff = max_step(&s, &aff.ds).min(max_step(&lam, &aff.dlam)).min(1.0);
        let mu_aff = (0..mi)
            .map(|i| (s[i] + alpha_aff * aff.ds[i]) * (lam[i] + alpha_aff * aff.dlam[i]))
            .sum::<f64>()
            / mi as f64;
        let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);

        // Corrector.
        let rc: Vec<f64> = (0..mi)
            .map(|i| s[i] * lam[i] + aff.ds[i] * aff.dlam[i] - sigma * mu)
            .collect();
        let mut dir = system.direction(prob, &r_d, &r_e, &r_i, &s, &lam, &rc);
        let mut alpha = step_length(&s, &lam, &dir);
        // The second-order correction can cycle around degenerate vertices
        // (μ rising again); fall back to a plain centered step then.
        if complementarity_after(&s, &lam, &dir, alpha) > (1.0 - 0.01 * alpha) * mu {
            let sigma = sigma.max(0.5);
            let rc: Vec<f64> = (0..mi).map(|i| s[i] * lam[i] - sigma * mu).collect();
            dir = system.direction(prob, &r_d, &r_e, &r_i, &s, &lam, &rc);
            alpha = step_length(&s, &lam, &dir);
            // μ(α) is quadratic with a dyᵀP dy curvature term; off-center
            // iterates need a shorter step to make progress.
            for _ in 0..30 {
                if complementarity_after(&s, &lam, &dir, alpha) <= (1.0 - 0.01 * alpha) * mu {
                    break;
                }
                alpha *= 0.5;
            }
        }

        crate::linalg::axpy(&mut y, alpha, &dir.dy);
        crate::linalg::axpy(&mut nu, alpha, &dir.dnu);
        crate::linalg::axpy(&mut s, alpha, &dir.ds);
        crate::linalg::axpy(&mut lam, alpha, &dir.dlam);
    }

    let kkt = kkt_residuals_at(prob, &y, &nu, &lam);
    let status = if kkt.within(settings.tol, prob) {
        QpStatus::Optimal
    } else {
        QpStatus::MaxIters
    };
    Ok(QpSolution {
        y,
        nu,
        lam,
        status,
        iterations: settings.max_iters,
    })
}

/// Least-squares start: (y, ν) solve [[P + GᵀG, Aᵀ], [A, 0]] = [Gᵀh − q, b];
/// s = h − Gy and λ = −s, each shifted into the positive orthant.
fn initial_point(prob: &ProblemData) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = prob.n_var();
    let me = prob.n_eq();
    let mut h = prob.p.add(&prob.g.gram());
    let mut rhs = prob.g.tr_matvec(&prob.h);
    crate::linalg::axpy(&mut rhs, -1.0, &prob.q);
    rhs.extend_from_slice(&prob.b);
    for i in 0..n {
        h[(i, i)] += KKT_REGULARIZATION;
    }
    let z = Lu::factor(&equality_kkt_matrix(&h, &prob.a, KKT_REGULARIZATION))
        .map(|lu| lu.solve(&rhs))
        .ok()
        .filter(|z| z.iter().all(|v| v.is_finite()));
    let Some(z) = z else {
        return (vec![0.0; n], vec![0.0; me], vec![1.0; prob.n_ineq()], vec![1.0; prob.n_ineq()]);
    };
    let y = z[..n].to_vec();
    let gy = prob.g.matvec(&y);
    let r: Vec<f64> = prob.h.iter().zip(&gy).map(|(h, g)| h - g).collect();
    let shift = |v: Vec<f64>| -> Vec<f64> {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let spread = norm_inf(&v).max(1.0);
        // keep every entry at least a small fraction of the vector's scale
        let c = if lo >= 1e-2 * spread { 0.0 } else { 1e-2 * spread - lo };
        v.into_iter().map(|x| x + c).collect()
    };
    let lam = shift(r.iter().map(|v| -v).collect());
    (y, z[n..].to_vec(), shift(r), lam)
}

fn solve_equality_qp(prob: &ProblemData, settings: &SolveSettings) -> Result<QpSolution> {
    let n = prob.n_var();
    let me = prob.n_eq();
    let k = equality_kkt_matrix(&prob.p, &prob.a, 0.0);
    let mut rhs: Vec<f64> = prob.q.iter().map(|v| -v).collect();
    rhs.extend_from_slice(&prob.b);
    let z = match Lu::factor(&k) {
        Ok(lu) => lu.solve(&rhs),
        Err(LinalgError::Singular(_)) => {
            // Singular P on the nullspace of A: the problem is unbounded or
            // has a non-unique minimizer.
            return Ok(QpSolution {
                y: vec![0.0; n],
                nu: vec![0.0; me],
                lam: vec![],
                status: QpStatus::Unbounded,
                iterations: 0,
            });
        }
        Err(e) => return Err(e.into()),
    };
    let y = z[..n].to_vec();
    let nu = z[n..].to_vec();
    let kkt = kkt_residuals_at(prob, &y, &nu, &[]);
    let status = if kkt.within(settings.tol, prob) {
        QpStatus::Optimal
    } else {
        QpStatus::MaxIters
    };
    Ok(QpSolution {
        y,
        nu,
        lam: vec![],
        status,
        iterations: 1,
    })
}

/// Re-solves the equality KKT system on the active set guessed from the
/// interior point (λᵢ > sᵢ). The polished point has exact complementarity and
/// is returned only when it is feasible, dual feasible, and at least as
/// accurate.
fn polish(
    prob: &ProblemData,
    slack: &[f64],
    y0: &[f64],
    nu0: &[f64],
    lam0: &[f64],
    iterations: usize,
    settings: &SolveSettings,
) -> Option<QpSolution> {
    let n = prob.n_var();
    let me = prob.n_eq();
    let active: Vec<usize> = (0..prob.n_ineq()).filter(|&i| lam0[i] > slack[i]).collect();
    let k = active.len();
    if k + me > n {
        return None;
    }
    let mut c = DenseMatrix::zeros(k + me, n);
    let mut rhs: Vec<f64> = prob.q.iter().map(|v| -v).collect();
    for (r, &i) in active.iter().enumerate() {
        c.row_mut(r).copy_from_slice(prob.g.row(i));
        rhs.push(prob.h[i]);
    }
    for r in 0..me {
        c.row_mut(k + r).copy_from_slice(prob.a.row(r));
    }
    rhs.extend_from_slice(&prob.b);
    let lu = Lu::factor(&equality_kkt_matrix(&prob.p, &c, 0.0)).ok()?;
    let z = lu.solve(&rhs);
    if z.iter().any(|v| !v.is_finite()) || z[n..n + k].iter().any(|&l| l < 0.0) {
        return None;
    }
    let y = z[..n].to_vec();
    let mut lam = vec![0.0; prob.n_ineq()];
    for (r, &i) in active.iter().enumerate() {
        lam[i] = z[n + r];
    }
    let nu = z[n + k..].to_vec();
    let before = kkt_residuals_at(prob, y0, nu0, lam0).max();
    let after = kkt_residuals_at(prob, &y, &nu, &lam);
    if !after.within(settings.tol, prob) || after.max() > before {
        return None;
    }
    Some(QpSolution { y, nu, lam, status: QpStatus::Optimal, iterations })
}

/// [[H + δI, Aᵀ], [A, -δI]]
pub(super) fn equality_kkt_matrix(h: &DenseMatrix, a: &DenseMatrix, delta: f64) -> DenseMatrix {
    let n = h.rows();
    let me = a.rows();
    let mut k = DenseMatrix::zeros(n + me, n + me);
    for i in 0..n {
        for j in 0..n {
            k[(i, j)] = h[(i, j)];
        }
        k[(i, i)] += delta;
    }
    for r in 0..me {
        for j in 0..n {
            k[(n + r, j)] = a[(r, j)];
            k[(j, n + r)] = a[(r, j)];
        }
        k[(n + r, n + r)] = -delta;
    }
    k
}

fn dual_residual(prob: &ProblemData, y: &[f64], nu: &[f64], lam: &[f64]) -> Vec<f64> {
    let mut r = prob.p.matvec(y);
    crate::linalg::axpy(&mut r, 1.0, &prob.q);
    if prob.n_eq() > 0 {
        crate::linalg::axpy(&mut r, 1.0, &prob.a.tr_matvec(nu));
    }
    crate::linalg::axpy(&mut r, 1.0, &prob.g.tr_matvec(lam));
    r
}

fn eq_residual(prob: &ProblemData, y: &[f64]) -> Vec<f64> {
    if prob.n_eq() == 0 {
        return vec![];
    }
    prob.a.matvec(y).iter().zip(&prob.b).map(|(a, b)| a - b).collect()
}

/// Largest α ≤ ∞ with v + α dv ≥ 0.
fn max_step(v: &[f64], dv: &[f64]) -> f64 {
    v.iter()
        .zip(dv)
        .filter(|(_, d)| **d < 0.0)
        .map(|(v, d)| -v / d)
        .fold(f64::INFINITY, f64::min)
}

fn step_length(s: &[f64], lam: &[f64], dir: &Direction) -> f64 {
    (FRACTION_TO_BOUNDARY * max_step(s, &dir.ds).min(max_step(lam, &dir.dlam))).min(1.0)
}

fn complementarity_after(s: &[f64], lam: &[f64], dir: &Direction, alpha: f64) -> f64 {
    (0..s.len())
        .map(|i| (s[i] + alpha * dir.ds[i]) * (lam[i] + alpha * dir.dlam[i]))
        .sum::<f64>()
        / s.len() as f64
}

struct Direction {
    dy: Vec<f64>,
    dnu: Vec<f64>,
    ds: Vec<f64>,
    dlam: Vec<f64>,
}

/// Newton system in (dy, dν, dλ):
/// [[P, Aᵀ, Gᵀ], [A, 0, 0], [G, 0, −S/Λ]].
/// Keeping dλ explicit avoids forming GᵀWG, whose λ/s weights reach 1e16
/// near convergence and swamp P on the directions of pooled active sets.
struct NewtonSystem {
    lu: Lu,
    n: usize,
    me: usize,
    /// Equilibration: the factored matrix is DKD.
    d: Vec<f64>,
}

/// Scales `k` to DKD with Dᵢ = 1/√max|Kᵢⱼ| and returns D.
fn equilibrate(k: &mut DenseMatrix) -> Vec<f64> {
    let d: Vec<f64> = (0..k.rows())
        .map(|i| {
            let m = k.row(i).iter().fold(0.0_f64, |a, v| a.max(v.abs()));
            if m > 0.0 { 1.0 / m.sqrt() } else { 1.0 }
        })
        .collect();
    scale_symmetric(k, &d);
    d
}

fn scale_symmetric(k: &mut DenseMatrix, d: &[f64]) {
    for i in 0..k.rows() {
        for (j, v) in k.row_mut(i).iter_mut().enumerate() {
            *v *= d[i] * d[j];
        }
    }
}

fn full_kkt_matrix(prob: &ProblemData, inv_w: &[f64], delta: f64) -> DenseMatrix {
    let n = prob.n_var();
    let me = prob.n_eq();
    let size = n + me + inv_w.len();
    let mut k = DenseMatrix::zeros(size, size);
    for i in 0..n {
        k.row_mut(i)[..n].copy_from_slice(prob.p.row(i));
        k[(i, i)] += delta;
    }
    for r in 0..me {
        for (j, &a) in prob.a.row(r).iter().enumerate() {
            k[(n + r, j)] = a;
            k[(j, n + r)] = a;
        }
        k[(n + r, n + r)] = -delta;
    }
    for (r, &iw) in inv_w.iter().enumerate() {
        let row = n + me + r;
        for (j, &g) in prob.g.row(r).iter().enumerate() {
            k[(row, j)] = g;
            k[(j, row)] = g;
        }
        k[(row, row)] = -iw - delta;
    }
    k
}

impl NewtonSystem {
    /// `inv_w` = s/λ.
    fn factor(prob: &ProblemData, inv_w: &[f64]) -> Result<Self> {
        let mut k = full_kkt_matrix(prob, inv_w, 0.0);
        let d = equilibrate(&mut k);
        let lu = match Lu::factor_owned(k) {
            Ok(lu) => lu,
            Err(LinalgError::Singular(_)) => {
                let mut k = full_kkt_matrix(prob, inv_w, KKT_REGULARIZATION);
                scale_symmetric(&mut k, &d);
                Lu::factor_owned(k).map_err(QpError::from)?
            }
            Err(e) => return Err(e.into()),
        };
        Ok(Self { lu, n: prob.n_var(), me: prob.n_eq(), d })
    }

    #[allow(clippy::too_many_arguments)]
    fn direction(
        &self,
        prob: &ProblemData,
        r_d: &[f64],
        r_e: &[f64],
        r_i: &[f64],
        s: &[f64],
        lam: &[f64],
        rc: &[f64],
    ) -> Direction {
        let (n, me) = (self.n, self.me);
        // G dy − (s/λ) dλ = −r_i + r_c/λ
        let mut rhs: Vec<f64> = r_d.iter().map(|v| -v).collect();
        rhs.extend(r_e.iter().map(|v| -v));
        rhs.extend((0..s.len()).map(|i| -r_i[i] + rc[i] / lam[i]));
        let scaled: Vec<f64> = rhs.iter().zip(&self.d).map(|(r, d)| r * d).collect();
        let z: Vec<f64> = self.lu.solve(&scaled).iter().zip(&self.d).map(|(z, d)| z * d).collect();
        let dy = z[..n].to_vec();
        let dnu = z[n..n + me].to_vec();
        let dlam = z[n + me..].to_vec();
        let gdy = prob.g.matvec(&dy);
        let ds = (0..s.len()).map(|i| -r_i[i] - gdy[i]).collect();
        Direction { dy, dnu, ds, dlam }
    }
}
