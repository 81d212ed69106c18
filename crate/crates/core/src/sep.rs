//! Separable convex minimization over a box with one budget constraint:
//!
//! ```txt
//!     minimize    Σᵢ gᵢ(yᵢ) + cᵢ yᵢ
//!     subject to  lower ≤ y ≤ upper,   1ᵀy = s   (or 1ᵀy ≤ s)
//! ```
//!
//! Stationarity gives yᵢ(ν) = clip((gᵢ′)⁻¹(−cᵢ − ν), lowerᵢ, upperᵢ) for the
//! budget dual ν, and 1ᵀy(ν) is nonincreasing in ν, so ν is found by
//! bisection.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SepError {
    #[error("budget {budget} outside the attainable range [{min}, {max}]")]
    InfeasibleBudget { budget: f64, min: f64, max: f64 },
    #[error("could not bracket the budget dual after {0} doublings")]
    BracketFailure(usize),
    #[error("invalid separable problem: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, SepError>;

/// The per-coordinate convex function gᵢ.
#[derive(Debug, Clone, PartialEq)]
pub enum Profile {
    /// gᵢ(y) = y log y
    NegEntropy,
    /// gᵢ(y) = exp(−θᵢ y / pᵢ) / θᵢ
    ExpUtility { theta: Vec<f64>, p: Vec<f64> },
}

impl Profile {
    /// Solves gᵢ′(y) = t, returning +∞ when t is outside the range of gᵢ′.
    fn inverse_derivative(&self, i: usize, t: f64) -> f64 {
        match self {
            Profile::NegEntropy => (t - 1.0).exp(),
            Profile::ExpUtility { theta, p } => {
                // −(1/p) exp(−θy/p) = t  ⇒  y = −(p/θ) log(−t p)
                if t >= 0.0 {
                    f64::INFINITY
                } else {
                    -(p[i] / theta[i]) * ((-t).ln() + p[i].ln())
                }
            }
        }
    }

    fn value(&self, i: usize, y: f64) -> f64 {
        match self {
            Profile::NegEntropy => {
                if y == 0.0 {
                    0.0
                } else {
                    y * y.ln()
                }
            }
            Profile::ExpUtility { theta, p } => (-theta[i] * y / p[i]).exp() / theta[i],
        }
    }

    pub fn derivative(&self, i: usize, y: f64) -> f64 {
        match self {
            Profile::NegEntropy => y.ln() + 1.0,
            Profile::ExpUtility { theta, p } => -(-theta[i] * y / p[i]).exp() / p[i],
        }
    }

    fn second_derivative(&self, i: usize, y: f64) -> f64 {
        match self {
            Profile::NegEntropy => 1.0 / y,
            Profile::ExpUtility { theta, p } => theta[i] / (p[i] * p[i]) * (-theta[i] * y / p[i]).exp(),
        }
    }

    /// (∂gᵢ′/∂θᵢ, ∂gᵢ′/∂pᵢ) at y; empty for parameter-free profiles.
    fn derivative_param_sensitivity(&self, i: usize, y: f64) -> Option<(f64, f64)> {
        match self {
            Profile::NegEntropy => None,
            Profile::ExpUtility { theta, p } => {
                let e = (-theta[i] * y / p[i]).exp();
                let p2 = p[i] * p[i];
                Some((y * e / p2, e / p2 * (1.0 - theta[i] * y / p[i])))
            }
        }
    }

    fn n_params(&self) -> usize {
        match self {
            Profile::NegEntropy => 0,
            Profile::ExpUtility { theta, .. } => theta.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BudgetKind {
    Equality,
    AtMost,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SepProblem {
    pub profile: Profile,
    pub c: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub budget: f64,
    pub budget_kind: BudgetKind,
}

impl SepProblem {
    /// Entropy over the probability simplex with linear cost c.
    pub fn simplex_entropy(c: Vec<f64>) -> Self {
        let m = c.len();
        Self {
            profile: Profile::NegEntropy,
            c,
            lower: vec![0.0; m],
            upper: vec![1.0; m],
            budget: 1.0,
            budget_kind: BudgetKind::Equality,
        }
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.c.len();
        let invalid = |s: &str| Err(SepError::Invalid(s.into()));
        if self.lower.len() != m || self.upper.len() != m {
            return invalid("bound lengths differ from cost length");
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| !(l <= u)) {
            return invalid("lower bound exceeds upper bound");
        }
        if self.c.iter().any(|v| !v.is_finite()) || !self.budget.is_finite() {
            return invalid("non-finite cost or budget");
        }
        if let Profile::ExpUtility { theta, p } = &self.profile {
            if theta.len() != m || p.len() != m {
                return invalid("profile parameter lengths differ from cost length");
            }
            if theta.iter().chain(p).any(|v| !(*v > 0.0) || !v.is_finite()) {
                return invalid("profile parameters must be positive");
            }
        }
        Ok(())
    }

    /// y(ν): the coordinatewise minimizer for a fixed budget dual.
    pub fn response(&self, nu: f64) -> Vec<f64> {
        (0..self.dim()).map(|i| self.response_coord(i, nu).0).collect()
    }

    /// (yᵢ, clipped-low, clipped-high)
    fn response_coord(&self, i: usize, nu: f64) -> (f64, bool, bool) {
        let raw = self.profile.inverse_derivative(i, -self.c[i] - nu);
        if raw.is_nan() || raw >= self.upper[i] {
            (self.upper[i], false, true)
        } else if raw <= self.lower[i] {
            (self.lower[i], true, false)
        } else {
            (raw, false, false)
        }
    }

    fn budget_residual(&self, nu: f64) -> f64 {
        self.response(nu).iter().sum::<f64>() - self.budget
    }

    pub fn objective(&self, y: &[f64]) -> f64 {
        y.iter()
            .enumerate()
            .map(|(i, &yi)| self.profile.value(i, yi) + self.c[i] * yi)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SepSolution {
    pub y: Vec<f64>,
    /// Budget dual; zero when an `AtMost` budget is slack.
    pub nu: f64,
    pub clipped_low: Vec<usize>,
    pub clipped_high: Vec<usize>,
    pub budget_active: bool,
    pub iterations: usize,
}

impl SepSolution {
    fn is_clipped(&self, i: usize) -> bool {
        self.clipped_low.contains(&i) || self.clipped_high.contains(&i)
    }
}

const MAX_BRACKET_DOUBLINGS: usize = 200;
const MAX_BISECTIONS: usize = 200;

pub fn solve_separable(prob: &SepProblem, tol: f64) -> Result<SepSolution> {
    prob.validate()?;
    let lo_sum: f64 = prob.lower.iter().sum();
    let hi_sum: f64 = prob.upper.iter().sum();
    let s = prob.budget;
    let infeasible = match prob.budget_kind {
        BudgetKind::Equality => s < lo_sum || s > hi_sum,
        BudgetKind::AtMost => s < lo_sum,
    };
    if infeasible {
        return Err(SepError::InfeasibleBudget {
            budget: s,
            min: lo_sum,
            max: hi_sum,
        });
    }

    if prob.budget_kind == BudgetKind::AtMost && prob.budget_residual(0.0) <= 0.0 {
        return Ok(finish(prob, 0.0, false, 0));
    }

    // Bracket ν: residual(lo) ≥ 0 ≥ residual(hi).
    let cmax = prob.c.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut width = 1.0;
    let mut lo = -cmax - width;
    let mut hi = cmax + width;
    let mut doublings = 0;
    while prob.budget_residual(lo) < 0.0 {
        doublings += 1;
        if doublings > MAX_BRACKET_DOUBLINGS {
            return Err(SepError::BracketFailure(MAX_BRACKET_DOUBLINGS));
        }
        width *= 2.0;
        lo -= width;
    }
    width = 1.0;
    while prob.budget_residual(hi) > 0.0 {
        doublings += 1;
        if doublings > MAX_BRACKET_DOUBLINGS {
            return Err(SepError::BracketFailure(MAX_BRACKET_DOUBLINGS));
        }
        width *= 2.0;
        hi += width;
    }

    let target = tol * (1.0 + s.abs());
    let mut nu = 0.5 * (lo + hi);
    let mut iterations = 0;
    for _ in 0..MAX_BISECTIONS {
        iterations += 1;
        nu = 0.5 * (lo + hi);
        let r = prob.budget_residual(nu);
        if r.abs() <= target {
            break;
        }
        if r > 0.0 {
            lo = nu;
        } else {
            hi = nu;
        }
        if hi - lo <= f64::EPSILON * nu.abs().max(1e-300) {
            break;
        }
    }
    Ok(finish(prob, nu, true, iterations))
}

fn finish(prob: &SepProblem, nu: f64, budget_active: bool, iterations: usize) -> SepSolution {
    let mut y = Vec::with_capacity(prob.dim());
    let mut clipped_low = Vec::new();
    let mut clipped_high = Vec::new();
    for i in 0..prob.dim() {
        let (v, low, high) = prob.response_coord(i, nu);
        y.push(v);
        if low {
            clipped_low.push(i);
        }
        if high {
            clipped_high.push(i);
        }
    }
    if budget_active {
        // Bisection stops within tol of the budget; hand the leftover to the
        // free coordinates so Σy = budget to roundoff.
        let free: Vec<usize> = (0..y.len()).filter(|i| !clipped_low.contains(i) && !clipped_high.contains(i)).collect();
        if !free.is_empty() {
            let share = (prob.budget - y.iter().sum::<f64>()) / free.len() as f64;
            if free.iter().all(|&i| (prob.lower[i]..=prob.upper[i]).contains(&(y[i] + share))) {
                for &i in &free {
                    y[i] += share;
                }
            }
        }
    }
    SepSolution {
        y,
        nu,
        clipped_low,
        clipped_high,
        budget_active,
        iterations,
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Gradients of a scalar loss with respect to the separable problem's data.
#[derive(Debug, Clone, PartialEq)]
pub struct SepGrad {
    pub dc: Vec<f64>,
    /// ∂/∂θ for `ExpUtility`, empty otherwise.
    pub dtheta: Vec<f64>,
    /// ∂/∂p for `ExpUtility`, empty otherwise.
    pub dp: Vec<f64>,
    pub dbudget: f64,
    /// Every coordinate was clipped; the local derivative is zero.
    pub degenerate: bool,
}

/// Implicit-function VJP of the separable solution map.
///
/// For unclipped coordinates, gᵢ″ dyᵢ + dcᵢ + (∂gᵢ′/∂ψ) dψ + dν = 0, and an
/// active budget adds Σ dyᵢ = ds. With dᵢ = 1/gᵢ″ and ȳ_w = Σ dᵢȳᵢ / Σ dᵢ this
/// gives ∂cᵢ = dᵢ(ȳ_w − ȳᵢ) and ∂s = ȳ_w. Clipped coordinates contribute
/// nothing.
pub fn separable_vjp(prob: &SepProblem, sol: &SepSolution, ybar: &[f64]) -> Result<SepGrad> {
    let m = prob.dim();
    if ybar.len() != m || sol.y.len() != m {
        return Err(SepError::Invalid(format!("ybar has length {}, problem has {m}", ybar.len())));
    }
    let np = prob.profile.n_params();
    let mut grad = SepGrad {
        dc: vec![0.0; m],
        dtheta: vec![0.0; np],
        dp: vec![0.0; np],
        dbudget: 0.0,
        degenerate: false,
    };

    let free: Vec<usize> = (0..m).filter(|&i| !sol.is_clipped(i)).collect();
    let d: Vec<f64> = free
        .iter()
        .map(|&i| 1.0 / prob.profile.second_derivative(i, sol.y[i]))
        .collect();
    let dsum: f64 = d.iter().sum();
    if free.is_empty() || dsum < 1e-12 {
        grad.degenerate = true;
        return Ok(grad);
    }

    let ybar_w = if sol.budget_active {
        free.iter().zip(&d).map(|(&i, di)| di * ybar[i]).sum::<f64>() / dsum
    } else {
        0.0
    };
    for (&i, di) in free.iter().zip(&d) {
        let u = di * (ybar_w - ybar[i]);
        grad.dc[i] = u;
        if let Some((dtheta, dp)) = prob.profile.derivative_param_sensitivity(i, sol.y[i]) {
            grad.dtheta[i] = u * dtheta;
            grad.dp[i] = u * dp;
        }
    }
    grad.dbudget = ybar_w;
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn uniform_simplex() {
        let sol = solve_separable(&SepProblem::simplex_entropy(vec![0.0, 0.0]), 1e-12).unwrap();
        assert!(close(&sol.y, &[0.5, 0.5], 1e-12));
    }

    #[test]
    fn analytic_softmax_two_coords() {
        let sol = solve_separable(&SepProblem::simplex_entropy(vec![-(2.0_f64).ln(), 0.0]), 1e-12).unwrap();
        assert!(close(&sol.y, &[2.0 / 3.0, 1.0 / 3.0], 1e-11));
    }

    #[test]
    fn symmetric_exp_utility() {
        let prob = SepProblem {
            profile: Profile::ExpUtility {
                theta: vec![1.0, 1.0],
                p: vec![1.0, 1.0],
            },
            c: vec![0.0, 0.0],
            lower: vec![0.0, 0.0],
            upper: vec![f64::INFINITY; 2],
            budget: 1.0,
            budget_kind: BudgetKind::AtMost,
        };
        let sol = solve_separable(&prob, 1e-12).unwrap();
        assert!(sol.budget_active);
        assert!(close(&sol.y, &[0.5, 0.5], 1e-11));
    }

    #[test]
    fn fully_clipped_box() {
        let alpha = vec![0.2, 0.3, 0.5];
        let prob = SepProblem {
            lower: alpha.clone(),
            upper: alpha.clone(),
            ..SepProblem::simplex_entropy(vec![0.4, -1.0, 2.0])
        };
        let sol = solve_separable(&prob, 1e-12).unwrap();
        assert_eq!(sol.y, alpha);
        let g = separable_vjp(&prob, &sol, &[1.0, -2.0, 0.5]).unwrap();
        assert!(g.degenerate);
        assert!(g.dc.iter().all(|&v| v == 0.0) && g.dbudget == 0.0);
    }

    #[test]
    fn infeasible_budget() {
        let prob = SepProblem {
            budget: 4.0,
            ..SepProblem::simplex_entropy(vec![0.0; 3])
        };
        assert!(matches!(
            solve_separable(&prob, 1e-10),
            Err(SepError::InfeasibleBudget { .. })
        ));
    }

    #[test]
    fn slack_at_most_budget() {
        // Box-limited entropy whose unconstrained minimizer uses less than the budget.
        let prob = SepProblem {
            c: vec![3.0, 3.0],
            budget: 1.0,
            budget_kind: BudgetKind::AtMost,
            ..SepProblem::simplex_entropy(vec![3.0, 3.0])
        };
        let sol = solve_separable(&prob, 1e-12).unwrap();
        assert!(!sol.budget_active);
        assert_eq!(sol.nu, 0.0);
        let e = (-4.0_f64).exp();
        assert!(close(&sol.y, &[e, e], 1e-15));
        let g = separable_vjp(&prob, &sol, &[1.0, 0.0]).unwrap();
        // y = exp(-c - 1), dy/dc = -y
        assert!((g.dc[0] + e).abs() < 1e-15 && g.dc[1] == 0.0);
    }

    #[test]
    fn softmax_cases() {
        assert!(close(&softmax(&[0.0, 0.0, 0.0]), &[1.0 / 3.0; 3], 1e-15));
        assert!(close(&softmax(&[(2.0_f64).ln(), 0.0]), &[2.0 / 3.0, 1.0 / 3.0], 1e-15));
        let l = [0.3, -1.2, 2.0];
        let shifted: Vec<f64> = l.iter().map(|v| v + 17.5).collect();
        assert!(close(&softmax(&l), &softmax(&shifted), 1e-15));
        assert!(softmax(&[1000.0, 0.0]).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_jacobian_at_uniform() {
        let prob = SepProblem::simplex_entropy(vec![0.0, 0.0]);
        let sol = solve_separable(&prob, 1e-13).unwrap();
        let g = separable_vjp(&prob, &sol, &[1.0, 0.0]).unwrap();
        assert!(close(&g.dc, &[-0.25, 0.25], 1e-12));
    }
}
