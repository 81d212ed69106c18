use crate::linalg::{DenseMatrix, LinalgError, Lu};

use super::ipm::equality_kkt_matrix;
use super::{ProblemData, QpError, QpSolution, QpStatus, Result};

/// Gradient of a scalar loss with respect to each field of [`ProblemData`].
#[derive(Debug, Clone, PartialEq)]
pub struct DataGrad {
    /// Symmetrized.
    pub dp: DenseMatrix,
    pub dq: Vec<f64>,
    pub dg: DenseMatrix,
    pub dh: Vec<f64>,
    pub da: DenseMatrix,
    pub db: Vec<f64>,
    /// Set when the linearized KKT system needed diagonal damping.
    pub damped: bool,
}

impl DataGrad {
    pub fn zeros_like(prob: &ProblemData) -> Self {
        let n = prob.n_var();
        Self {
            dp: DenseMatrix::zeros(n, n),
            dq: vec![0.0; n],
            dg: DenseMatrix::zeros(prob.n_ineq(), n),
            dh: vec![0.0; prob.n_ineq()],
            da: DenseMatrix::zeros(prob.n_eq(), n),
            db: vec![0.0; prob.n_eq()],
            damped: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VjpOptions {
    /// A constraint is active when λᵢ exceeds this and |Gy − h|ᵢ is below it.
    pub active_tol: f64,
    /// Diagonal damping applied when the reduced KKT matrix is singular;
    /// `None` turns singularity into [`QpError::SingularKkt`].
    pub damping: Option<f64>,
}

impl Default for VjpOptions {
    fn default() -> Self {
        Self {
            active_tol: 1e-7,
            damping: Some(1e-8),
        }
    }
}

/// Vector-Jacobian product of the QP solution map, with the default options.
pub fn qp_vjp(prob: &ProblemData, sol: &QpSolution, ybar: &[f64]) -> Result<DataGrad> {
    qp_vjp_with(prob, sol, ybar, &VjpOptions::default())
}

/// Pulls `ybar = ∂L/∂y` back to the problem data.
///
/// With the active set 𝒜 held fixed, the solution solves the linear system
///
/// ```txt
///   [ P    G_𝒜ᵀ  Aᵀ ] [ y   ]   [ -q  ]
///   [ G_𝒜  0     0  ] [ λ_𝒜 ] = [ h_𝒜 ]
///   [ A    0     0  ] [ ν   ]   [ b   ]
/// ```
///
/// so a single solve K (a, β, γ) = (ȳ, 0, 0) gives every data gradient:
/// ∂q = −a, ∂P = −sym(a yᵀ), ∂G_𝒜 = −λ aᵀ − β yᵀ, ∂h_𝒜 = β,
/// ∂A = −ν aᵀ − γ yᵀ, ∂b = γ. Inactive rows of G and h get zero.
pub fn qp_vjp_with(prob: &ProblemData, sol: &QpSolution, ybar: &[f64], opts: &VjpOptions) -> Result<DataGrad> {
    if sol.status != QpStatus::Optimal {
        return Err(QpError::NotOptimal(sol.status));
    }
    let n = prob.n_var();
    if ybar.len() != n || sol.y.len() != n {
        return Err(QpError::InvalidData(format!(
            "ybar has length {}, problem has {n} variables",
            ybar.len()
        )));
    }
    let me = prob.n_eq();
    let y = &sol.y;

    let gy = prob.g.matvec(y);
    let active: Vec<usize> = (0..prob.n_ineq())
        .filter(|&i| sol.lam[i] > opts.active_tol && (gy[i] - prob.h[i]).abs() < opts.active_tol)
        .collect();
    let k = active.len();

    // Equality-type constraints: active inequality rows stacked over A.
    let mut c = DenseMatrix::zeros(k + me, n);
    for (r, &i) in active.iter().enumerate() {
        c.row_mut(r).copy_from_slice(prob.g.row(i));
    }
    for r in 0..me {
        c.row_mut(k + r).copy_from_slice(prob.a.row(r));
    }

    let mut rhs = ybar.to_vec();
    rhs.resize(n + k + me, 0.0);

    let (sol_vec, damped) = match Lu::factor(&equality_kkt_matrix(&prob.p, &c, 0.0)) {
        Ok(lu) => (lu.solve(&rhs), false),
        Err(LinalgError::Singular(_)) => match opts.damping {
            Some(delta) => {
                let lu = Lu::factor(&equality_kkt_matrix(&prob.p, &c, delta)).map_err(|_| QpError::SingularKkt)?;
                (lu.solve(&rhs), true)
            }
            None => return Err(QpError::SingularKkt),
        },
        Err(e) => return Err(e.into()),
    };

    let a_vec = &sol_vec[..n];
    let beta = &sol_vec[n..n + k];
    let gamma = &sol_vec[n + k..];

    let mut grad = DataGrad::zeros_like(prob);
    grad.damped = damped;
    grad.dq = a_vec.iter().map(|v| -v).collect();
    grad.dp.add_outer(-0.5, a_vec, y);
    grad.dp.add_outer(-0.5, y, a_vec);
    for (r, &i) in active.iter().enumerate() {
        let row = grad.dg.row_mut(i);
        for j in 0..n {
            row[j] = -sol.lam[i] * a_vec[j] - beta[r] * y[j];
        }
        grad.dh[i] = beta[r];
    }
    for r in 0..me {
        let row = grad.da.row_mut(r);
        for j in 0..n {
            row[j] = -sol.nu[r] * a_vec[j] - gamma[r] * y[j];
        }
        grad.db[r] = gamma[r];
    }
    Ok(grad)
}
