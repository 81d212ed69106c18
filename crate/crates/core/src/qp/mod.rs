//! Convex quadratic programs
//!
//! ```txt
//!     minimize    ½ yᵀP y + qᵀy
//!     subject to  G y ≤ h
//!                 A y = b
//! ```
//!
//! solved by a dense primal-dual interior-point method, plus the
//! vector-Jacobian product of the solution map with respect to the data.

mod ipm;
mod vjp;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{norm_inf, DenseMatrix, LinalgError};

pub use ipm::solve_qp;
pub use vjp::{qp_vjp, qp_vjp_with, DataGrad, VjpOptions};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("problem data: {0}")]
    InvalidData(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("solver stopped with status {0:?}")]
    NotOptimal(QpStatus),
    #[error("linearized KKT system is singular")]
    SingularKkt,
    #[error("problem data i/o: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, QpError>;

/// Data of a QP. `g`/`h` and `a`/`b` may have zero rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemData {
    pub p: DenseMatrix,
    pub q: Vec<f64>,
    pub g: DenseMatrix,
    pub h: Vec<f64>,
    pub a: DenseMatrix,
    pub b: Vec<f64>,
}

impl ProblemData {
    pub fn new(
        p: DenseMatrix,
        q: Vec<f64>,
        g: DenseMatrix,
        h: Vec<f64>,
        a: DenseMatrix,
        b: Vec<f64>,
    ) -> Result<Self> {
        let prob = Self { p, q, g, h, a, b };
        prob.validate()?;
        Ok(prob)
    }

    /// min ½ yᵀPy + qᵀy with no constraints.
    pub fn unconstrained(p: DenseMatrix, q: Vec<f64>) -> Result<Self> {
        let n = q.len();
        Self::new(p, q, DenseMatrix::zeros(0, n), vec![], DenseMatrix::zeros(0, n), vec![])
    }

    pub fn with_inequalities(mut self, g: DenseMatrix, h: Vec<f64>) -> Result<Self> {
        self.g = g;
        self.h = h;
        self.validate()?;
        Ok(self)
    }

    pub fn with_equalities(mut self, a: DenseMatrix, b: Vec<f64>) -> Result<Self> {
        self.a = a;
        self.b = b;
        self.validate()?;
        Ok(self)
    }

    pub fn n_var(&self) -> usize {
        self.q.len()
    }

    pub fn n_ineq(&self) -> usize {
        self.h.len()
    }

    pub fn n_eq(&self) -> usize {
        self.b.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.q.len();
        let bad = |msg: String| Err(QpError::InvalidData(msg));
        if self.p.rows() != n || self.p.cols() != n {
            return bad(format!("P is {}x{}, expected {n}x{n}", self.p.rows(), self.p.cols()));
        }
        if self.p.asymmetry() > 1e-10 {
            return bad("P is not symmetric".into());
        }
        if self.g.rows() != self.h.len() || (self.g.rows() > 0 && self.g.cols() != n) {
            return bad(format!(
                "G is {}x{} with {} entries in h",
                self.g.rows(),
                self.g.cols(),
                self.h.len()
            ));
        }
        if self.a.rows() != self.b.len() || (self.a.rows() > 0 && self.a.cols() != n) {
            return bad(format!(
                "A is {}x{} with {} entries in b",
                self.a.rows(),
                self.a.cols(),
                self.b.len()
            ));
        }
        let finite = self.p.is_finite()
            && self.g.is_finite()
            && self.a.is_finite()
            && self.q.iter().chain(&self.h).chain(&self.b).all(|v| v.is_finite());
        if !finite {
            return bad("non-finite entry".into());
        }
        Ok(())
    }

    /// ½ yᵀPy + qᵀy.
    pub fn objective(&self, y: &[f64]) -> f64 {
        0.5 * crate::linalg::dot(y, &self.p.matvec(y)) + crate::linalg::dot(&self.q, y)
    }

    /// Writes P.csv, q.csv, G.csv, h.csv, A.csv, b.csv and dims.json into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| QpError::Io(e.to_string()))?;
        let dims = Dims {
            n_var: self.n_var(),
            n_ineq: self.n_ineq(),
            n_eq: self.n_eq(),
        };
        let json = serde_json::to_string_pretty(&dims).map_err(|e| QpError::Io(e.to_string()))?;
        std::fs::write(dir.join("dims.json"), json).map_err(|e| QpError::Io(e.to_string()))?;
        self.p.write_csv(&dir.join("P.csv"))?;
        DenseMatrix::column_vector(&self.q).write_csv(&dir.join("q.csv"))?;
        self.g.write_csv(&dir.join("G.csv"))?;
        DenseMatrix::column_vector(&self.h).write_csv(&dir.join("h.csv"))?;
        self.a.write_csv(&dir.join("A.csv"))?;
        DenseMatrix::column_vector(&self.b).write_csv(&dir.join("b.csv"))?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("dims.json")).map_err(|e| QpError::Io(e.to_string()))?;
        let dims: Dims = serde_json::from_str(&text).map_err(|e| QpError::Io(e.to_string()))?;
        let read = |name: &str, r: usize, c: usize| -> Result<DenseMatrix> {
            if r == 0 {
                return Ok(DenseMatrix::zeros(0, c));
            }
            let m = DenseMatrix::read_csv(&dir.join(name))?;
            if m.rows() != r || m.cols() != c {
                return Err(QpError::Io(format!("{name}: expected {r}x{c}, found {}x{}", m.rows(), m.cols())));
            }
            Ok(m)
        };
        let n = dims.n_var;
        Self::new(
            read("P.csv", n, n)?,
            read("q.csv", n, 1)?.into_vec(),
            read("G.csv", dims.n_ineq, n)?,
            read("h.csv", dims.n_ineq, 1)?.into_vec(),
            read("A.csv", dims.n_eq, n)?,
            read("b.csv", dims.n_eq, 1)?.into_vec(),
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Dims {
    n_var: usize,
    n_ineq: usize,
    n_eq: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Optimal,
    MaxIters,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub y: Vec<f64>,
    /// Equality duals.
    pub nu: Vec<f64>,
    /// Inequality duals, nonnegative.
    pub lam: Vec<f64>,
    pub status: QpStatus,
    pub iterations: usize,
}

impl QpSolution {
    pub fn into_optimal(self) -> Result<Self> {
        match self.status {
            QpStatus::Optimal => Ok(self),
            s => Err(QpError::NotOptimal(s)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveSettings {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for SolveSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iters: 100,
        }
    }
}

impl SolveSettings {
    pub fn with_tol(tol: f64) -> Self {
        assert!(tol > 0.0, "tolerance must be positive");
        Self { tol, ..Self::default() }
    }
}

/// ∞-norms of the four KKT residual blocks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal_eq: f64,
    pub primal_ineq: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_eq)
            .max(self.primal_ineq)
            .max(self.complementarity)
    }

    /// All four within `tol · (1 + ‖q‖∞)`.
    pub fn within(&self, tol: f64, prob: &ProblemData) -> bool {
        self.max() <= tol * (1.0 + norm_inf(&prob.q))
    }
}

pub fn kkt_residuals(prob: &ProblemData, sol: &QpSolution) -> KktResiduals {
    kkt_residuals_at(prob, &sol.y, &sol.nu, &sol.lam)
}

pub(crate) fn kkt_residuals_at(prob: &ProblemData, y: &[f64], nu: &[f64], lam: &[f64]) -> KktResiduals {
    let mut stat = prob.p.matvec(y);
    for (s, q) in stat.iter_mut().zip(&prob.q) {
        *s += q;
    }
    if prob.n_eq() > 0 {
        crate::linalg::axpy(&mut stat, 1.0, &prob.a.tr_matvec(nu));
    }
    let mut primal_ineq = 0.0_f64;
    let mut comp = 0.0_f64;
    if prob.n_ineq() > 0 {
        crate::linalg::axpy(&mut stat, 1.0, &prob.g.tr_matvec(lam));
        let gy = prob.g.matvec(y);
        for ((gyi, hi), li) in gy.iter().zip(&prob.h).zip(lam) {
            let r = gyi - hi;
            primal_ineq = primal_ineq.max(r.max(0.0));
            comp = comp.max((li * r).abs());
        }
    }
    let primal_eq = if prob.n_eq() > 0 {
        prob.a
            .matvec(y)
            .iter()
            .zip(&prob.b)
            .fold(0.0_f64, |m, (ay, b)| m.max((ay - b).abs()))
    } else {
        0.0
    };
    KktResiduals {
        stationarity: norm_inf(&stat),
        primal_eq,
        primal_ineq,
        complementarity: comp,
    }
}
