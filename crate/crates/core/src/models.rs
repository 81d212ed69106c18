//! Parametrized convex optimization models.
//!
//! Each [`ModelFamily`] maps an input `x` and parameters θ to a convex
//! problem whose argmin is the prediction, and pulls output gradients back to
//! θ by chaining the solver's VJP with the Jacobian of the problem data.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dot, Cholesky, DenseMatrix, LinalgError};
use crate::qp::{qp_vjp, solve_qp, ProblemData, QpError, QpSolution, SolveSettings};
use crate::rng::Rng;
use crate::sep::{separable_vjp, softmax, solve_separable, BudgetKind, Profile, SepError, SepProblem, SepSolution};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Sep(#[from] SepError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Added to θ_yy in the quadratic MRF so a singular PSD θ still has a unique
/// argmin.
pub const MRF_RIDGE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelFamily {
    /// Least-squares fit of θᵀx projected onto the monotone cone.
    MonotoneRegression { n: usize, m: usize },
    /// Least-squares fit of θᵀx projected onto the nonnegative orthant.
    NonnegRegression { n: usize, m: usize },
    /// Entropy-regularized linear model on {α ≤ y ≤ β, 1ᵀy = 1}.
    BoxLogistic { n: usize, m: usize, alpha: Vec<f64>, beta: Vec<f64> },
    SoftmaxClassifier { n: usize, m: usize },
    /// Energy zᵀθz over z = (x, y), θ an (n+m)×(n+m) matrix.
    QuadraticMrf { n: usize, m: usize },
    /// ŷ = argmin ‖M(x − y)‖² + λ‖Dy‖², θ = (M, λ).
    MrfDenoiser { n: usize },
    /// x = (B, p); maximum exponential utility under the budget B.
    ResourceAllocation { m: usize },
    /// Horizon-T linear-quadratic MPC with state costs θ and box |y| ≤ radius.
    MpcPolicy { n: usize, m: usize, horizon: usize, a: DenseMatrix, b: DenseMatrix, radius: f64 },
}

/// Flat parameter vector; layout per family:
/// linear maps are n×m row-major, the MRF is (n+m)×(n+m) row-major, the
/// denoiser is M (n×n row-major) followed by λ, the rest are plain vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Theta(pub Vec<f64>);

impl Theta {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnalyticLinear {
    Softmax { logits: Vec<f64> },
    /// Solve `k ŷ = rhs`.
    Denoiser { k: DenseMatrix, rhs: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Problem {
    Qp(ProblemData),
    Separable(SepProblem),
    AnalyticLinear(AnalyticLinear),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictSettings {
    pub qp: SolveSettings,
    pub sep_tol: f64,
}

impl Default for PredictSettings {
    fn default() -> Self {
        Self { qp: SolveSettings::default(), sep_tol: 1e-12 }
    }
}

impl PredictSettings {
    pub fn with_tol(tol: f64) -> Self {
        Self { qp: SolveSettings::with_tol(tol), sep_tol: tol.min(1e-12) }
    }
}

#[derive(Debug, Clone)]
enum Internal {
    Qp(ProblemData, QpSolution),
    Sep(SepProblem, SepSolution),
    Softmax,
    Denoiser,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub y_hat: Vec<f64>,
    internal: Internal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThetaGrad {
    pub dtheta: Vec<f64>,
    /// The solver VJP needed damping or hit a fully clipped point.
    pub damped: bool,
}

/// First-order difference matrix D, (n−1)×n.
pub fn difference_matrix(n: usize) -> DenseMatrix {
    DenseMatrix::from_fn(n.saturating_sub(1), n, |i, j| {
        if j == i {
            -1.0
        } else if j == i + 1 {
            1.0
        } else {
            0.0
        }
    })
}

/// DᵀD, the path-graph Laplacian.
pub fn difference_gram(n: usize) -> DenseMatrix {
    let mut l = DenseMatrix::zeros(n, n);
    for i in 0..n.saturating_sub(1) {
        l[(i, i)] += 1.0;
        l[(i + 1, i + 1)] += 1.0;
        l[(i, i + 1)] -= 1.0;
        l[(i + 1, i)] -= 1.0;
    }
    l
}

fn diff(v: &[f64]) -> Vec<f64> {
    v.windows(2).map(|w| w[1] - w[0]).collect()
}

/// θᵀx for an n×m row-major θ.
fn linear_map(theta: &[f64], x: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m];
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            crate::linalg::axpy(&mut out, xi, &theta[i * m..(i + 1) * m]);
        }
    }
    out
}

/// Gradient of ⟨g, θᵀx⟩ in θ: x gᵀ, flattened.
fn outer_flat(x: &[f64], g: &[f64]) -> Vec<f64> {
    x.iter().flat_map(|&xi| g.iter().map(move |&gj| xi * gj)).collect()
}

impl ModelFamily {
    pub fn name(&self) -> &'static str {
        match self {
            ModelFamily::MonotoneRegression { .. } => "monotone_regression",
            ModelFamily::NonnegRegression { .. } => "nonneg_regression",
            ModelFamily::BoxLogistic { .. } => "box_logistic",
            ModelFamily::SoftmaxClassifier { .. } => "softmax_classifier",
            ModelFamily::QuadraticMrf { .. } => "quadratic_mrf",
            ModelFamily::MrfDenoiser { .. } => "mrf_denoiser",
            ModelFamily::ResourceAllocation { .. } => "resource_allocation",
            ModelFamily::MpcPolicy { .. } => "mpc_policy",
        }
    }

    pub fn input_dim(&self) -> usize {
        match *self {
            ModelFamily::MonotoneRegression { n, .. }
            | ModelFamily::NonnegRegression { n, .. }
            | ModelFamily::BoxLogistic { n, .. }
            | ModelFamily::SoftmaxClassifier { n, .. }
            | ModelFamily::QuadraticMrf { n, .. }
            | ModelFamily::MrfDenoiser { n }
            | ModelFamily::MpcPolicy { n, .. } => n,
            ModelFamily::ResourceAllocation { m } => m + 1,
        }
    }

    pub fn output_dim(&self) -> usize {
        match *self {
            ModelFamily::MonotoneRegression { m, .. }
            | ModelFamily::NonnegRegression { m, .. }
            | ModelFamily::BoxLogistic { m, .. }
            | ModelFamily::SoftmaxClassifier { m, .. }
            | ModelFamily::QuadraticMrf { m, .. }
            | ModelFamily::ResourceAllocation { m }
            | ModelFamily::MpcPolicy { m, .. } => m,
            ModelFamily::MrfDenoiser { n } => n,
        }
    }

    pub fn theta_len(&self) -> usize {
        match *self {
            ModelFamily::MonotoneRegression { n, m }
            | ModelFamily::NonnegRegression { n, m }
            | ModelFamily::BoxLogistic { n, m, .. }
            | ModelFamily::SoftmaxClassifier { n, m } => n * m,
            ModelFamily::QuadraticMrf { n, m } => (n + m) * (n + m),
            ModelFamily::MrfDenoiser { n } => n * n + 1,
            ModelFamily::ResourceAllocation { m } => m,
            ModelFamily::MpcPolicy { n, .. } => n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim() == 0 || self.output_dim() == 0 {
            return Err(ModelError::Invalid("dimensions must be positive".into()));
        }
        match self {
            ModelFamily::BoxLogistic { m, alpha, beta, .. } => {
                if alpha.len() != *m || beta.len() != *m {
                    return Err(ModelError::DimensionMismatch("box bounds must have length m".into()));
                }
                if alpha.iter().zip(beta).any(|(a, b)| !(0.0 <= *a && a <= b)) {
                    return Err(ModelError::Invalid("need 0 ≤ α ≤ β".into()));
                }
                if alpha.iter().sum::<f64>() > 1.0 || beta.iter().sum::<f64>() < 1.0 {
                    return Err(ModelError::Invalid("need 1ᵀα ≤ 1 ≤ 1ᵀβ".into()));
                }
            }
            ModelFamily::MpcPolicy { n, m, horizon, a, b, radius } => {
                if *horizon == 0 {
                    return Err(ModelError::Invalid("horizon must be positive".into()));
                }
                if a.rows() != *n || a.cols() != *n || b.rows() != *n || b.cols() != *m {
                    return Err(ModelError::DimensionMismatch(format!(
                        "A is {}x{}, B is {}x{}, expected {n}x{n} and {n}x{m}",
                        a.rows(),
                        a.cols(),
                        b.rows(),
                        b.cols()
                    )));
                }
                if !(*radius > 0.0) {
                    return Err(ModelError::Invalid("box radius must be positive".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// θ¹: Normal(0, 1/n) for linear maps, I for the MRF, (I, 1) for the
    /// denoiser, 0.5 for allocation utilities, 1 for MPC state costs.
    pub fn initial_theta(&self, seed: u64) -> Theta {
        let mut rng = Rng::seed_from_u64(seed);
        let theta = match *self {
            ModelFamily::MonotoneRegression { n, m }
            | ModelFamily::NonnegRegression { n, m }
            | ModelFamily::BoxLogistic { n, m, .. }
            | ModelFamily::SoftmaxClassifier { n, m } => {
                let sd = 1.0 / (n as f64).sqrt();
                (0..n * m).map(|_| sd * rng.normal()).collect()
            }
            ModelFamily::QuadraticMrf { n, m } => DenseMatrix::identity(n + m).into_vec(),
            ModelFamily::MrfDenoiser { n } => {
                let mut v = DenseMatrix::identity(n).into_vec();
                v.push(1.0);
                v
            }
            ModelFamily::ResourceAllocation { m } => vec![0.5; m],
            ModelFamily::MpcPolicy { n, .. } => vec![1.0; n],
        };
        Theta(theta)
    }

    fn check(&self, x: &[f64], theta: &Theta) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(ModelError::DimensionMismatch(format!(
                "{}: x has length {}, expected {}",
                self.name(),
                x.len(),
                self.input_dim()
            )));
        }
        self.check_theta(theta)
    }

    fn check_theta(&self, theta: &Theta) -> Result<()> {
        if theta.len() != self.theta_len() {
            return Err(ModelError::DimensionMismatch(format!(
                "{}: θ has length {}, expected {}",
                self.name(),
                theta.len(),
                self.theta_len()
            )));
        }
        if !theta.0.iter().all(|v| v.is_finite()) {
            return Err(ModelError::Invalid(format!("{}: non-finite θ", self.name())));
        }
        Ok(())
    }

    pub fn build_problem(&self, x: &[f64], theta: &Theta) -> Result<Problem> {
        self.check(x, theta)?;
        let t = theta.as_slice();
        Ok(match self {
            &ModelFamily::MonotoneRegression { m, .. } => {
                let g = DenseMatrix::from_fn(m - 1, m, |i, j| {
                    if j == i {
                        1.0
                    } else if j == i + 1 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                Problem::Qp(least_squares_qp(linear_map(t, x, m))?.with_inequalities(g, vec![0.0; m - 1])?)
            }
            &ModelFamily::NonnegRegression { m, .. } => Problem::Qp(
                least_squares_qp(linear_map(t, x, m))?
                    .with_inequalities(DenseMatrix::identity(m).scaled(-1.0), vec![0.0; m])?,
            ),
            ModelFamily::BoxLogistic { m, alpha, beta, .. } => Problem::Separable(SepProblem {
                profile: Profile::NegEntropy,
                c: linear_map(t, x, *m).into_iter().map(|v| -v).collect(),
                lower: alpha.clone(),
                upper: beta.clone(),
                budget: 1.0,
                budget_kind: BudgetKind::Equality,
            }),
            &ModelFamily::SoftmaxClassifier { m, .. } => {
                Problem::AnalyticLinear(AnalyticLinear::Softmax { logits: linear_map(t, x, m) })
            }
            &ModelFamily::QuadraticMrf { n, m } => {
                let z = n + m;
                let p = DenseMatrix::from_fn(m, m, |a, b| {
                    t[(n + a) * z + n + b] + t[(n + b) * z + n + a] + if a == b { 2.0 * MRF_RIDGE } else { 0.0 }
                });
                let q = (0..m)
                    .map(|a| (0..n).map(|i| (t[i * z + n + a] + t[(n + a) * z + i]) * x[i]).sum())
                    .collect();
                Problem::Qp(ProblemData::unconstrained(p, q)?)
            }
            &ModelFamily::MrfDenoiser { n } => {
                let (mm, lambda) = denoiser_parts(t, n);
                let mtm = mm.gram();
                let rhs = mtm.matvec(x);
                let mut k = mtm;
                k.axpy(lambda, &difference_gram(n));
                Problem::AnalyticLinear(AnalyticLinear::Denoiser { k, rhs })
            }
            &ModelFamily::ResourceAllocation { m } => {
                let (budget, p) = (x[0], &x[1..]);
                if !(budget > 0.0) || p.iter().any(|&v| !(v > 0.0)) {
                    return Err(ModelError::Invalid("allocation needs B > 0 and p > 0".into()));
                }
                Problem::Separable(SepProblem {
                    profile: Profile::ExpUtility { theta: t.to_vec(), p: p.to_vec() },
                    c: vec![0.0; m],
                    lower: vec![0.0; m],
                    upper: vec![f64::INFINITY; m],
                    budget,
                    budget_kind: BudgetKind::AtMost,
                })
            }
            ModelFamily::MpcPolicy { n, m, horizon, a, b, radius } => {
                Problem::Qp(mpc_qp(*n, *m, *horizon, a, b, *radius, x, t)?)
            }
        })
    }

    /// Per-θ precomputation shared by every input.
    pub fn prepare<'a>(&'a self, theta: &'a Theta) -> Result<Model<'a>> {
        self.check_theta(theta)?;
        let denoiser = match *self {
            ModelFamily::MrfDenoiser { n } => {
                let (mm, lambda) = denoiser_parts(theta.as_slice(), n);
                let mtm = mm.gram();
                let mut k = mtm.clone();
                k.axpy(lambda, &difference_gram(n));
                Some(DenoiserCache { m: mm, mtm, chol: Cholesky::factor(&k)? })
            }
            _ => None,
        };
        Ok(Model { family: self, theta, denoiser })
    }

    pub fn predict(&self, x: &[f64], theta: &Theta, settings: &PredictSettings) -> Result<Prediction> {
        self.prepare(theta)?.predict(x, settings)
    }

    pub fn pullback(&self, x: &[f64], theta: &Theta, pred: &Prediction, ybar: &[f64]) -> Result<ThetaGrad> {
        self.prepare(theta)?.pullback(x, pred, ybar)
    }
}

/// Fails only on non-finite targets (e.g. x with inf entries).
fn least_squares_qp(target: Vec<f64>) -> std::result::Result<ProblemData, QpError> {
    let m = target.len();
    let q = target.iter().map(|v| -2.0 * v).collect();
    ProblemData::unconstrained(DenseMatrix::identity(m).scaled(2.0), q)
}

fn denoiser_parts(t: &[f64], n: usize) -> (DenseMatrix, f64) {
    (DenseMatrix::from_vec(n, n, t[..n * n].to_vec()).expect("length checked"), t[n * n])
}

fn mpc_state(n: usize, t: usize, i: usize) -> usize {
    (t - 1) * n + i
}

fn mpc_control(n: usize, m: usize, horizon: usize, t: usize, j: usize) -> usize {
    horizon * n + t * m + j
}

/// Variables (x₁..x_T, y₀..y_{T−1}); stage costs θᵀxₜ² for t = 1..T−1 and
/// ‖yₜ‖² for every t, so x_T is cost-free.
#[allow(clippy::too_many_arguments)]
fn mpc_qp(
    n: usize,
    m: usize,
    horizon: usize,
    a: &DenseMatrix,
    b: &DenseMatrix,
    radius: f64,
    x0: &[f64],
    theta: &[f64],
) -> Result<ProblemData> {
    let nv = horizon * (n + m);
    let mut p = DenseMatrix::zeros(nv, nv);
    for t in 1..horizon {
        for i in 0..n {
            let k = mpc_state(n, t, i);
            p[(k, k)] = 2.0 * theta[i];
        }
    }
    for t in 0..horizon {
        for j in 0..m {
            let k = mpc_control(n, m, horizon, t, j);
            p[(k, k)] = 2.0;
        }
    }
    let mut eq = DenseMatrix::zeros(horizon * n, nv);
    let mut rhs = vec![0.0; horizon * n];
    let ax0 = a.matvec(x0);
    for t in 0..horizon {
        for i in 0..n {
            let row = t * n + i;
            eq[(row, mpc_state(n, t + 1, i))] = 1.0;
            for j in 0..m {
                eq[(row, mpc_control(n, m, horizon, t, j))] = -b[(i, j)];
            }
            if t == 0 {
                rhs[row] = ax0[i];
            } else {
                for k in 0..n {
                    eq[(row, mpc_state(n, t, k))] = -a[(i, k)];
                }
            }
        }
    }
    let mut g = DenseMatrix::zeros(2 * horizon * m, nv);
    for t in 0..horizon {
        for j in 0..m {
            let k = mpc_control(n, m, horizon, t, j);
            let r = 2 * (t * m + j);
            g[(r, k)] = 1.0;
            g[(r + 1, k)] = -1.0;
        }
    }
    Ok(ProblemData::unconstrained(p, vec![0.0; nv])?
        .with_inequalities(g, vec![radius; 2 * horizon * m])?
        .with_equalities(eq, rhs)?)
}

impl Problem {
    pub fn solve(&self, settings: &PredictSettings) -> Result<Vec<f64>> {
        Ok(match self {
            Problem::Qp(p) => solve_qp(p, &settings.qp)?.into_optimal()?.y,
            Problem::Separable(s) => solve_separable(s, settings.sep_tol)?.y,
            Problem::AnalyticLinear(AnalyticLinear::Softmax { logits }) => softmax(logits),
            Problem::AnalyticLinear(AnalyticLinear::Denoiser { k, rhs }) => Cholesky::factor(k)?.solve(rhs),
        })
    }
}

#[derive(Debug)]
struct DenoiserCache {
    m: DenseMatrix,
    mtm: DenseMatrix,
    chol: Cholesky,
}

/// A family bound to one θ, with per-θ work done once.
#[derive(Debug)]
pub struct Model<'a> {
    pub family: &'a ModelFamily,
    pub theta: &'a Theta,
    denoiser: Option<DenoiserCache>,
}

impl Model<'_> {
    pub fn predict(&self, x: &[f64], settings: &PredictSettings) -> Result<Prediction> {
        self.family.check(x, self.theta)?;
        if let Some(d) = &self.denoiser {
            let y_hat = d.chol.solve(&d.mtm.matvec(x));
            return Ok(Prediction { y_hat, internal: Internal::Denoiser });
        }
        let pred = match self.family.build_problem(x, self.theta)? {
            Problem::Qp(prob) => {
                let sol = solve_qp(&prob, &settings.qp)?.into_optimal()?;
                let y_hat = match self.family {
                    &ModelFamily::MpcPolicy { n, m, horizon, .. } => {
                        let k = mpc_control(n, m, horizon, 0, 0);
                        sol.y[k..k + m].to_vec()
                    }
                    _ => sol.y.clone(),
                };
                Prediction { y_hat, internal: Internal::Qp(prob, sol) }
            }
            Problem::Separable(prob) => {
                let sol = solve_separable(&prob, settings.sep_tol)?;
                Prediction { y_hat: sol.y.clone(), internal: Internal::Sep(prob, sol) }
            }
            Problem::AnalyticLinear(AnalyticLinear::Softmax { logits }) => {
                Prediction { y_hat: softmax(&logits), internal: Internal::Softmax }
            }
            Problem::AnalyticLinear(AnalyticLinear::Denoiser { .. }) => unreachable!("denoiser is prepared"),
        };
        Ok(pred)
    }

    /// ∂⟨ȳ, ŷ⟩/∂θ at the given prediction.
    pub fn pullback(&self, x: &[f64], pred: &Prediction, ybar: &[f64]) -> Result<ThetaGrad> {
        self.family.check(x, self.theta)?;
        if ybar.len() != pred.y_hat.len() {
            return Err(ModelError::DimensionMismatch(format!(
                "ybar has length {}, prediction has {}",
                ybar.len(),
                pred.y_hat.len()
            )));
        }
        match (&pred.internal, self.family) {
            (Internal::Qp(prob, sol), fam) => {
                let padded;
                let ybar_full = match *fam {
                    ModelFamily::MpcPolicy { n, m, horizon, .. } => {
                        let mut v = vec![0.0; prob.n_var()];
                        let k = mpc_control(n, m, horizon, 0, 0);
                        v[k..k + m].copy_from_slice(ybar);
                        padded = v;
                        &padded[..]
                    }
                    _ => ybar,
                };
                let g = qp_vjp(prob, sol, ybar_full)?;
                let dtheta = match *fam {
                    ModelFamily::MonotoneRegression { .. } | ModelFamily::NonnegRegression { .. } => {
                        // q = −2θᵀx
                        let dq: Vec<f64> = g.dq.iter().map(|v| -2.0 * v).collect();
                        outer_flat(x, &dq)
                    }
                    ModelFamily::QuadraticMrf { n, m } => {
                        let z = n + m;
                        let mut d = vec![0.0; z * z];
                        for a in 0..m {
                            for b in 0..m {
                                // P = θ_yy + θ_yyᵀ with dP symmetric
                                d[(n + a) * z + n + b] = 2.0 * g.dp[(a, b)];
                            }
                            for i in 0..n {
                                d[i * z + n + a] = x[i] * g.dq[a];
                                d[(n + a) * z + i] = g.dq[a] * x[i];
                            }
                        }
                        d
                    }
                    ModelFamily::MpcPolicy { n, horizon, .. } => (0..n)
                        .map(|i| {
                            (1..horizon)
                                .map(|s| {
                                    let k = mpc_state(n, s, i);
                                    2.0 * g.dp[(k, k)]
                                })
                                .sum()
                        })
                        .collect(),
                    _ => unreachable!("family does not build a QP"),
                };
                Ok(ThetaGrad { dtheta, damped: g.damped })
            }
            (Internal::Sep(prob, sol), fam) => {
                let g = separable_vjp(prob, sol, ybar)?;
                let dtheta = match fam {
                    ModelFamily::BoxLogistic { .. } => {
                        // c = −θᵀx
                        let dc: Vec<f64> = g.dc.iter().map(|v| -v).collect();
                        outer_flat(x, &dc)
                    }
                    ModelFamily::ResourceAllocation { .. } => g.dtheta.clone(),
                    _ => unreachable!("family does not build a separable problem"),
                };
                Ok(ThetaGrad { dtheta, damped: g.degenerate })
            }
            (Internal::Softmax, _) => {
                let s = &pred.y_hat;
                let sy = dot(s, ybar);
                let dl: Vec<f64> = s.iter().zip(ybar).map(|(si, yi)| si * (yi - sy)).collect();
                Ok(ThetaGrad { dtheta: outer_flat(x, &dl), damped: false })
            }
            (Internal::Denoiser, &ModelFamily::MrfDenoiser { n }) => {
                let d = self.denoiser.as_ref().expect("prepared denoiser");
                let y_hat = &pred.y_hat;
                // ŷ = K⁻¹MᵀMx, K = MᵀM + λDᵀD, w = K⁻¹ȳ, r = x − ŷ:
                // dM = M(r wᵀ + w rᵀ), dλ = −(Dw)ᵀ(Dŷ).
                let w = d.chol.solve(ybar);
                let r: Vec<f64> = x.iter().zip(y_hat).map(|(a, b)| a - b).collect();
                let mr = d.m.matvec(&r);
                let mw = d.m.matvec(&w);
                let mut dm = DenseMatrix::zeros(n, n);
                dm.add_outer(1.0, &mr, &w);
                dm.add_outer(1.0, &mw, &r);
                let mut dtheta = dm.into_vec();
                dtheta.push(-dot(&diff(&w), &diff(y_hat)));
                Ok(ThetaGrad { dtheta, damped: false })
            }
            (Internal::Denoiser, _) => unreachable!("denoiser prediction from another family"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn monotone_example() {
        let fam = ModelFamily::MonotoneRegression { n: 2, m: 2 };
        let theta = Theta(vec![1.0, 0.0, 0.0, 1.0]);
        let p = fam.predict(&[2.0, 1.0], &theta, &PredictSettings::with_tol(1e-10)).unwrap();
        assert!(close(&p.y_hat, &[1.5, 1.5], 1e-8));
    }

    #[test]
    fn denoiser_identity_when_unregularized() {
        let fam = ModelFamily::MrfDenoiser { n: 4 };
        let mut t = DenseMatrix::identity(4).into_vec();
        t.push(0.0);
        let theta = Theta(t);
        let x = [0.3, -1.0, 2.0, 0.5];
        let p = fam.predict(&x, &theta, &PredictSettings::default()).unwrap();
        assert!(close(&p.y_hat, &x, 1e-12));
        let ybar = [1.0, 0.5, -0.2, 0.1];
        let g = fam.pullback(&x, &theta, &p, &ybar).unwrap();
        let expected = -dot(&diff(&ybar), &diff(&x));
        assert!((g.dtheta[16] - expected).abs() <= 1e-12);
    }

    #[test]
    fn mpc_without_control_authority_is_idle() {
        let fam = ModelFamily::MpcPolicy {
            n: 3,
            m: 2,
            horizon: 4,
            a: DenseMatrix::identity(3).scaled(0.9),
            b: DenseMatrix::zeros(3, 2),
            radius: 0.5,
        };
        let p = fam.predict(&[1.0, -1.0, 0.5], &Theta(vec![1.0; 3]), &PredictSettings::default()).unwrap();
        assert!(close(&p.y_hat, &[0.0, 0.0], 1e-8));
    }

    #[test]
    fn softmax_examples() {
        let fam = ModelFamily::SoftmaxClassifier { n: 2, m: 2 };
        let theta = Theta(vec![0.0; 4]);
        let x = [1.0, 2.0];
        let p = fam.predict(&x, &theta, &PredictSettings::default()).unwrap();
        assert!(close(&p.y_hat, &[0.5, 0.5], 1e-15));
        let g = fam.pullback(&x, &theta, &p, &[1.0, 0.0]).unwrap();
        assert!(close(&g.dtheta, &[0.25, -0.25, 0.5, -0.5], 1e-15));
    }

    #[test]
    fn symmetric_allocation() {
        let fam = ModelFamily::ResourceAllocation { m: 2 };
        let p = fam.predict(&[1.0, 1.0, 1.0], &Theta(vec![1.0, 1.0]), &PredictSettings::default()).unwrap();
        assert!(close(&p.y_hat, &[0.5, 0.5], 1e-10));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let fam = ModelFamily::NonnegRegression { n: 3, m: 2 };
        let err = fam.build_problem(&[1.0], &Theta(vec![0.0; 6])).unwrap_err();
        assert!(matches!(err, ModelError::DimensionMismatch(_)));
        let err = fam.build_problem(&[1.0, 2.0, 3.0], &Theta(vec![0.0; 5])).unwrap_err();
        assert!(matches!(err, ModelError::DimensionMismatch(_)));
    }

    #[test]
    fn box_logistic_rejects_bad_bounds() {
        let fam = ModelFamily::BoxLogistic { n: 1, m: 2, alpha: vec![0.6, 0.6], beta: vec![1.0, 1.0] };
        assert!(fam.validate().is_err());
    }
}
