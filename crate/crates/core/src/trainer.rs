//! Losses, proximal regularizers and the proximal stochastic-gradient loop.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{sym_eig, DenseMatrix};
use crate::models::{Model, ModelError, ModelFamily, PredictSettings, Theta};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss domain error: {0}")]
    Domain(String),
    #[error("{failed} of {total} examples failed in a batch (first: {first})")]
    BatchFailed { failed: usize, total: usize, first: String },
    #[error("validation loss became non-finite at iteration {0}")]
    NonFiniteValidation(usize),
    #[error("invalid training setup: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// SquaredL2, L1 and Huber are coordinate means; KL is a sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    SquaredL2,
    L1,
    Huber(f64),
    Kl,
}

pub fn loss_value_grad(loss: Loss, yhat: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
    if yhat.len() != y.len() || y.is_empty() {
        return Err(TrainError::Domain(format!("ŷ has length {}, y has {}", yhat.len(), y.len())));
    }
    let inv_m = 1.0 / y.len() as f64;
    let r = yhat.iter().zip(y).map(|(a, b)| a - b);
    Ok(match loss {
        Loss::SquaredL2 => {
            let value = r.clone().map(|v| v * v).sum::<f64>() * inv_m;
            (value, r.map(|v| 2.0 * v * inv_m).collect())
        }
        Loss::L1 => {
            let value = r.clone().map(f64::abs).sum::<f64>() * inv_m;
            (value, r.map(|v| if v == 0.0 { 0.0 } else { v.signum() * inv_m }).collect())
        }
        Loss::Huber(delta) => {
            if !(delta > 0.0) {
                return Err(TrainError::Domain("Huber δ must be positive".into()));
            }
            let value = r
                .clone()
                .map(|v| if v.abs() <= delta { 0.5 * v * v } else { delta * (v.abs() - 0.5 * delta) })
                .sum::<f64>()
                * inv_m;
            (value, r.map(|v| v.clamp(-delta, delta) * inv_m).collect())
        }
        Loss::Kl => {
            let mut value = 0.0;
            let mut grad = vec![0.0; y.len()];
            for i in 0..y.len() {
                if y[i] > 0.0 {
                    if !(yhat[i] > 0.0) {
                        return Err(TrainError::Domain(format!("KL with ŷ[{i}] = {} where y > 0", yhat[i])));
                    }
                    value += y[i] * (y[i] / yhat[i]).ln();
                    grad[i] = -y[i] / yhat[i];
                }
            }
            (value, grad)
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    Zero,
    SquaredL2(f64),
    NonnegIndicator,
    PositiveIndicator(f64),
    /// Applies to a square slice, read row-major.
    PsdIndicator,
    /// Each piece acts on its own (disjoint) slice of θ.
    Sum(Vec<(Range<usize>, Regularizer)>),
}

/// Exact prox_{tR}(θ).
pub fn prox_apply(reg: &Regularizer, theta: &[f64], t: f64) -> Vec<f64> {
    let mut out = theta.to_vec();
    prox_in_place(reg, &mut out, t);
    out
}

fn prox_in_place(reg: &Regularizer, v: &mut [f64], t: f64) {
    match reg {
        Regularizer::Zero => {}
        Regularizer::SquaredL2(gamma) => {
            let c = 1.0 / (1.0 + t * gamma);
            v.iter_mut().for_each(|x| *x *= c);
        }
        Regularizer::NonnegIndicator => v.iter_mut().for_each(|x| *x = x.max(0.0)),
        Regularizer::PositiveIndicator(eps) => v.iter_mut().for_each(|x| *x = x.max(*eps)),
        Regularizer::PsdIndicator => {
            let k = (v.len() as f64).sqrt().round() as usize;
            assert_eq!(k * k, v.len(), "PSD slice must be square");
            let s = DenseMatrix::from_vec(k, k, v.to_vec()).expect("square").symmetrized();
            let projected = match sym_eig(&s) {
                Ok(eig) => eig.reconstruct_with(|l| l.max(0.0)),
                // Jacobi only fails on non-finite input; leave it for the
                // loop's finiteness check to report.
                Err(_) => s,
            };
            v.copy_from_slice(projected.as_slice());
        }
        Regularizer::Sum(parts) => {
            for (range, r) in parts {
                prox_in_place(r, &mut v[range.clone()], t);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    Constant,
    /// tᵏ = step0/√k
    InvSqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iters: usize,
    pub step0: f64,
    pub step_rule: StepRule,
    pub seed: u64,
    pub shuffle: bool,
    pub record_val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            iters: 100,
            step0: 0.1,
            step_rule: StepRule::InvSqrt,
            seed: 0,
            shuffle: true,
            record_val_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn step(&self, k: usize) -> f64 {
        match self.step_rule {
            StepRule::Constant => self.step0,
            StepRule::InvSqrt => self.step0 / (k as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub step: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub rows: Vec<TraceRow>,
    pub initial_val_loss: f64,
    pub theta: Theta,
    pub val_loss: f64,
    /// Examples whose solve failed (and were left out of their batch).
    pub failures: usize,
    /// Per-example gradients that needed damping.
    pub damped: usize,
}

impl TrainReport {
    /// One JSON object per recorded iteration.
    pub fn write_metrics_jsonl(&self, path: &Path) -> Result<()> {
        let io = |e: std::io::Error| TrainError::Io(format!("{}: {e}", path.display()));
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        for row in &self.rows {
            let line = serde_json::to_string(row).map_err(|e| TrainError::Io(e.to_string()))?;
            writeln!(f, "{line}").map_err(io)?;
        }
        f.flush().map_err(io)
    }

    pub fn read_metrics_jsonl(path: &Path) -> Result<Vec<TraceRow>> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| TrainError::Io(e.to_string())))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient {
    pub grad: Vec<f64>,
    pub mean_loss: f64,
    pub failures: usize,
    pub damped: usize,
}

type ExampleOutcome = std::result::Result<(f64, Vec<f64>, bool), String>;

fn example_term(model: &Model, ex: &Example, loss: Loss, settings: &PredictSettings) -> ExampleOutcome {
    let pred = model.predict(&ex.x, settings).map_err(|e| e.to_string())?;
    let (value, ybar) = loss_value_grad(loss, &pred.y_hat, &ex.y).map_err(|e| e.to_string())?;
    let g = model.pullback(&ex.x, &pred, &ybar).map_err(|e| e.to_string())?;
    Ok((value, g.dtheta, g.damped))
}

fn map_ordered<T: Send>(items: &[&Example], f: impl Fn(&Example) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(|e| f(e)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(|e| f(e)).collect()
    }
}

/// Mean loss and mean θ-gradient over a batch, accumulated in batch order.
/// Failed examples are dropped; more than 10% failures fail the batch.
pub fn batch_gradient(
    family: &ModelFamily,
    theta: &Theta,
    batch: &[&Example],
    loss: Loss,
    settings: &PredictSettings,
) -> Result<BatchGradient> {
    if batch.is_empty() {
        return Err(TrainError::Invalid("empty batch".into()));
    }
    let model = family.prepare(theta)?;
    let outcomes = map_ordered(batch, |ex| example_term(&model, ex, loss, settings));
    let mut grad = vec![0.0; theta.len()];
    let mut total = 0.0;
    let mut ok = 0usize;
    let mut damped = 0usize;
    let mut first_err = None;
    for outcome in outcomes {
        match outcome {
            Ok((value, g, d)) => {
                total += value;
                crate::linalg::axpy(&mut grad, 1.0, &g);
                ok += 1;
                damped += d as usize;
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    let failures = batch.len() - ok;
    if failures * 10 > batch.len() || ok == 0 {
        return Err(TrainError::BatchFailed {
            failed: failures,
            total: batch.len(),
            first: first_err.unwrap_or_default(),
        });
    }
    let inv = 1.0 / ok as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok(BatchGradient { grad, mean_loss: total * inv, failures, damped })
}

/// Mean loss over a split in its stored order.
pub fn evaluate(
    family: &ModelFamily,
    theta: &Theta,
    split: &[Example],
    loss: Loss,
    settings: &PredictSettings,
) -> Result<f64> {
    if split.is_empty() {
        return Err(TrainError::Invalid("empty split".into()));
    }
    let model = family.prepare(theta)?;
    let refs: Vec<&Example> = split.iter().collect();
    let values = map_ordered(&refs, |ex| -> Result<f64> {
        let pred = model.predict(&ex.x, settings)?;
        Ok(loss_value_grad(loss, &pred.y_hat, &ex.y)?.0)
    });
    let mut total = 0.0;
    for v in values {
        total += v?;
    }
    Ok(total / split.len() as f64)
}

/// Prediction of every example in a split, in order.
pub fn predict_split(
    family: &ModelFamily,
    theta: &Theta,
    split: &[Example],
    settings: &PredictSettings,
) -> Result<Vec<Vec<f64>>> {
    let model = family.prepare(theta)?;
    let refs: Vec<&Example> = split.iter().collect();
    map_ordered(&refs, |ex| model.predict(&ex.x, settings).map(|p| p.y_hat))
        .into_iter()
        .map(|r| r.map_err(TrainError::from))
        .collect()
}

/// Epoch-shuffled cyclic batches over `0..n`.
pub struct BatchCycler {
    order: Vec<usize>,
    pos: usize,
    shuffle: bool,
    rng: Rng,
}

impl BatchCycler {
    pub fn new(n: usize, seed: u64, shuffle: bool) -> Self {
        let mut rng = Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        if shuffle {
            rng.shuffle(&mut order);
        }
        Self { order, pos: 0, shuffle, rng }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    if self.shuffle {
                        self.rng.shuffle(&mut self.order);
                    }
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

struct Clock {
    #[cfg(not(target_arch = "wasm32"))]
    start: std::time::Instant,
}

impl Clock {
    fn start() -> Self {
        Self {
            #[cfg(not(target_arch = "wasm32"))]
            start: std::time::Instant::now(),
        }
    }

    fn elapsed_ms(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        {
            self.start.elapsed().as_secs_f64() * 1e3
        }
        #[cfg(target_arch = "wasm32")]
        {
            0.0
        }
    }
}

/// θᵏ⁺¹ = prox_{tᵏR}(θᵏ − tᵏ gᵏ), starting from `theta0`.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    family: &ModelFamily,
    theta0: Theta,
    train: &[Example],
    val: &[Example],
    loss: Loss,
    reg: &Regularizer,
    config: &TrainConfig,
    settings: &PredictSettings,
) -> Result<TrainReport> {
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::Invalid("train and validation splits must be nonempty".into()));
    }
    if config.batch_size == 0 || config.batch_size > train.len() {
        return Err(TrainError::Invalid(format!(
            "batch size {} outside 1..={}",
            config.batch_size,
            train.len()
        )));
    }
    if !(config.step0 > 0.0) {
        return Err(TrainError::Invalid("step0 must be positive".into()));
    }
    let clock = Clock::start();
    let mut theta = theta0;
    let initial_val_loss = evaluate(family, &theta, val, loss, settings)?;
    if !initial_val_loss.is_finite() {
        return Err(TrainError::NonFiniteValidation(0));
    }
    let mut val_loss = initial_val_loss;
    let mut cycler = BatchCycler::new(train.len(), config.seed, config.shuffle);
    let mut rows = Vec::new();
    let (mut failures, mut damped) = (0, 0);
    let every = config.record_val_every.max(1);
    for k in 1..=config.iters {
        let batch: Vec<&Example> = cycler.next_batch(config.batch_size).into_iter().map(|i| &train[i]).collect();
        let bg = batch_gradient(family, &theta, &batch, loss, settings)?;
        failures += bg.failures;
        damped += bg.damped;
        let t = config.step(k);
        let stepped: Vec<f64> = theta.0.iter().zip(&bg.grad).map(|(th, g)| th - t * g).collect();
        theta = Theta(prox_apply(reg, &stepped, t));
        if k % every == 0 || k == config.iters {
            val_loss = evaluate(family, &theta, val, loss, settings)?;
            if !val_loss.is_finite() {
                return Err(TrainError::NonFiniteValidation(k));
            }
            rows.push(TraceRow { iter: k, train_loss: bg.mean_loss, val_loss, step: t, wall_ms: clock.elapsed_ms() });
        }
    }
    Ok(TrainReport { rows, initial_val_loss, theta, val_loss, failures, damped })
}
