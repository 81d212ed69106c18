//! Comparison models: least squares, softmax regression, Laplacian denoising
//! and a clamped two-layer ReLU network.

use serde::{Deserialize, Serialize};

use crate::linalg::{Cholesky, DenseMatrix, LinalgError};
use crate::models::difference_gram;
use crate::rng::Rng;
use crate::sep::softmax;
use crate::trainer::{BatchCycler, Example};

/// θ = (XᵀX)⁻¹XᵀY, n×m.
pub fn ols_fit(x: &DenseMatrix, y: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    if x.rows() != y.rows() {
        return Err(LinalgError::DimensionMismatch(format!("X has {} rows, Y has {}", x.rows(), y.rows())));
    }
    let chol = Cholesky::factor(&x.gram())?;
    let (n, m) = (x.cols(), y.cols());
    let mut theta = DenseMatrix::zeros(n, m);
    for j in 0..m {
        let col = chol.solve(&x.tr_matvec(&y.column(j)));
        for i in 0..n {
            theta[(i, j)] = col[i];
        }
    }
    Ok(theta)
}

/// Mean cross-entropy −(1/N) Σ yᵀ log softmax(θᵀx) and its gradient
/// (1/N) Σ x (ŷ − y)ᵀ.
pub fn softmax_regression_loss_grad(theta: &DenseMatrix, x: &DenseMatrix, y: &DenseMatrix) -> (f64, DenseMatrix) {
    let big_n = x.rows();
    let mut grad = DenseMatrix::zeros(theta.rows(), theta.cols());
    let mut loss = 0.0;
    for r in 0..big_n {
        let xr = x.row(r);
        let p = softmax(&theta.tr_matvec(xr));
        let yr = y.row(r);
        loss -= yr.iter().zip(&p).filter(|(yi, _)| **yi > 0.0).map(|(yi, pi)| yi * pi.ln()).sum::<f64>();
        let resid: Vec<f64> = p.iter().zip(yr).map(|(a, b)| a - b).collect();
        grad.add_outer(1.0, xr, &resid);
    }
    let inv = 1.0 / big_n as f64;
    (loss * inv, grad.scaled(inv))
}

/// Gradient descent on the cross-entropy from θ = 0.
pub fn softmax_regression_fit(x: &DenseMatrix, y: &DenseMatrix, iters: usize, step: f64) -> DenseMatrix {
    let mut theta = DenseMatrix::zeros(x.cols(), y.cols());
    for _ in 0..iters {
        let (_, g) = softmax_regression_loss_grad(&theta, x, y);
        theta.axpy(-step, &g);
    }
    theta
}

/// 30 points log-spaced in [1e-3, 1e3].
pub fn default_lambda_grid() -> Vec<f64> {
    (0..30).map(|k| 10f64.powf(-3.0 + 6.0 * k as f64 / 29.0)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaplacianSweep {
    pub lambda_star: f64,
    pub train_mse: f64,
    /// (λ, train MSE) for every grid point.
    pub curve: Vec<(f64, f64)>,
}

/// ŷ = (I + λDᵀD)⁻¹x.
pub fn laplacian_denoise(x: &[f64], lambda: f64) -> Result<Vec<f64>, LinalgError> {
    let n = x.len();
    let k = DenseMatrix::identity(n).add(&difference_gram(n).scaled(lambda));
    Ok(Cholesky::factor(&k)?.solve(x))
}

/// Grid argmin of the per-coordinate training MSE of the Laplacian denoiser.
pub fn laplacian_sweep(train: &[Example], grid: &[f64]) -> Result<LaplacianSweep, LinalgError> {
    if grid.is_empty() || train.is_empty() {
        return Err(LinalgError::DimensionMismatch("empty grid or training set".into()));
    }
    let n = train[0].x.len();
    let mut curve = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let k = DenseMatrix::identity(n).add(&difference_gram(n).scaled(lambda));
        let chol = Cholesky::factor(&k)?;
        let mut total = 0.0;
        for ex in train {
            let yhat = chol.solve(&ex.x);
            total += yhat.iter().zip(&ex.y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64;
        }
        curve.push((lambda, total / train.len() as f64));
    }
    let &(lambda_star, train_mse) = curve
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("nonempty grid");
    Ok(LaplacianSweep { lambda_star, train_mse, curve })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReluNet {
    pub w1: DenseMatrix,
    pub b1: Vec<f64>,
    pub w2: DenseMatrix,
    pub b2: Vec<f64>,
    pub clamp: f64,
}

impl ReluNet {
    /// He initialization: weights Normal(0, 2/fan_in), zero biases.
    pub fn new(n: usize, hidden: usize, m: usize, clamp: f64, seed: u64) -> Self {
        let mut rng = Rng::seed_from_u64(seed);
        let s1 = (2.0 / n as f64).sqrt();
        let w1 = DenseMatrix::from_fn(hidden, n, |_, _| s1 * rng.normal());
        let s2 = (2.0 / hidden as f64).sqrt();
        let w2 = DenseMatrix::from_fn(m, hidden, |_, _| s2 * rng.normal());
        Self { w1, b1: vec![0.0; hidden], w2, b2: vec![0.0; m], clamp }
    }

    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut h = self.w1.matvec(x);
        for (v, b) in h.iter_mut().zip(&self.b1) {
            *v = (*v + b).max(0.0);
        }
        let mut z = self.w2.matvec(&h);
        for (v, b) in z.iter_mut().zip(&self.b2) {
            *v += b;
        }
        (h, z)
    }
}

/// clamp(W₂ relu(W₁x + b₁) + b₂) with a hard clip.
pub fn relu_predict(net: &ReluNet, x: &[f64]) -> Vec<f64> {
    net.forward(x).1.into_iter().map(|v| v.clamp(-net.clamp, net.clamp)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReluConfig {
    pub batch_size: usize,
    pub step: f64,
    pub max_iters: usize,
    /// Stop when the full training loss improves by less than `plateau_tol`
    /// (relative) over `plateau_window` steps.
    pub plateau_window: usize,
    pub plateau_tol: f64,
    pub seed: u64,
}

impl Default for ReluConfig {
    fn default() -> Self {
        Self { batch_size: 32, step: 0.05, max_iters: 5000, plateau_window: 100, plateau_tol: 1e-4, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReluFit {
    pub net: ReluNet,
    pub iters: usize,
    pub train_mse: f64,
}

/// Per-coordinate mean squared error of the clamped net on a split.
pub fn relu_mse(net: &ReluNet, data: &[Example]) -> f64 {
    data.iter()
        .map(|e| {
            let y = relu_predict(net, &e.x);
            y.iter().zip(&e.y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64
        })
        .sum::<f64>()
        / data.len() as f64
}

/// Gradients of the mean per-coordinate squared loss with respect to the
/// net's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ReluGrad {
    pub w1: DenseMatrix,
    pub b1: Vec<f64>,
    pub w2: DenseMatrix,
    pub b2: Vec<f64>,
}

/// Backward pass over a batch. The clip passes the gradient through where
/// the pre-clip output lies in [−clamp, clamp] and blocks it elsewhere.
pub fn relu_grad(net: &ReluNet, batch: &[&Example]) -> ReluGrad {
    let (hidden, n, m) = (net.w1.rows(), net.w1.cols(), net.w2.rows());
    let mut g = ReluGrad {
        w1: DenseMatrix::zeros(hidden, n),
        b1: vec![0.0; hidden],
        w2: DenseMatrix::zeros(m, hidden),
        b2: vec![0.0; m],
    };
    let scale = 2.0 / (m * batch.len()) as f64;
    for ex in batch {
        let (h, z) = net.forward(&ex.x);
        let dz: Vec<f64> = (0..m)
            .map(|j| if z[j].abs() <= net.clamp { scale * (z[j] - ex.y[j]) } else { 0.0 })
            .collect();
        g.w2.add_outer(1.0, &dz, &h);
        crate::linalg::axpy(&mut g.b2, 1.0, &dz);
        let mut dh = net.w2.tr_matvec(&dz);
        for (d, hv) in dh.iter_mut().zip(&h) {
            if *hv <= 0.0 {
                *d = 0.0;
            }
        }
        g.w1.add_outer(1.0, &dh, &ex.x);
        crate::linalg::axpy(&mut g.b1, 1.0, &dh);
    }
    g
}

/// Minibatch SGD on the squared loss with epoch-shuffled batches, stopped
/// at a plateau or after `max_iters` steps.
pub fn relu_fit(train: &[Example], hidden: usize, clamp: f64, config: &ReluConfig) -> ReluFit {
    let (n, m) = (train[0].x.len(), train[0].y.len());
    let mut net = ReluNet::new(n, hidden, m, clamp, config.seed);
    let mut cycler = BatchCycler::new(train.len(), config.seed, true);
    let batch = config.batch_size.clamp(1, train.len());
    let mut last = relu_mse(&net, train);
    let mut iters = 0;
    while iters < config.max_iters {
        let idx: Vec<&Example> = cycler.next_batch(batch).into_iter().map(|i| &train[i]).collect();
        let g = relu_grad(&net, &idx);
        net.w1.axpy(-config.step, &g.w1);
        crate::linalg::axpy(&mut net.b1, -config.step, &g.b1);
        net.w2.axpy(-config.step, &g.w2);
        crate::linalg::axpy(&mut net.b2, -config.step, &g.b2);
        iters += 1;
        if iters % config.plateau_window.max(1) == 0 {
            let cur = relu_mse(&net, train);
            let improved = (last - cur) / last.max(f64::MIN_POSITIVE);
            last = cur;
            if improved < config.plateau_tol {
                break;
            }
        }
    }
    ReluFit { train_mse: relu_mse(&net, train), net, iters }
}
