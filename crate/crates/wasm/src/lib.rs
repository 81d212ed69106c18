//! Browser bindings: three single-example predictions, each the argmin of a
//! small convex problem solved by the core crate.

use comlearn::linalg::DenseMatrix;
use comlearn::models::{ModelError, ModelFamily, PredictSettings, Theta};
use wasm_bindgen::prelude::*;

fn identity(m: usize) -> Theta {
    Theta(DenseMatrix::identity(m).into_vec())
}

fn predict(fam: &ModelFamily, x: &[f64], theta: &Theta) -> Result<Vec<f64>, ModelError> {
    Ok(fam.predict(x, theta, &PredictSettings::default())?.y_hat)
}

/// Euclidean projection onto {y₁ ≤ … ≤ yₘ}.
pub fn monotone(v: &[f64]) -> Result<Vec<f64>, ModelError> {
    let m = v.len();
    predict(&ModelFamily::MonotoneRegression { n: m, m }, v, &identity(m))
}

/// Entropy-regularized distribution with lower ≤ yᵢ ≤ upper; the plain
/// softmax when the box is [0, 1].
pub fn box_softmax_of(logits: &[f64], lower: f64, upper: f64) -> Result<Vec<f64>, ModelError> {
    let m = logits.len();
    let fam = ModelFamily::BoxLogistic { n: m, m, alpha: vec![lower; m], beta: vec![upper; m] };
    predict(&fam, logits, &identity(m))
}

/// Laplacian smoothing (I + λDᵀD)⁻¹x.
pub fn laplacian(signal: &[f64], lambda: f64) -> Result<Vec<f64>, ModelError> {
    let n = signal.len();
    let mut theta = identity(n).0;
    theta.push(lambda);
    predict(&ModelFamily::MrfDenoiser { n }, signal, &Theta(theta))
}

fn js(r: Result<Vec<f64>, ModelError>) -> Result<Vec<f64>, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn monotone_projection(v: &[f64]) -> Result<Vec<f64>, JsError> {
    js(monotone(v))
}

#[wasm_bindgen]
pub fn box_softmax(logits: &[f64], lower: f64, upper: f64) -> Result<Vec<f64>, JsError> {
    js(box_softmax_of(logits, lower, upper))
}

#[wasm_bindgen]
pub fn denoise(signal: &[f64], lambda: f64) -> Result<Vec<f64>, JsError> {
    js(laplacian(signal, lambda))
}
