//! Data generation, runners and artifact I/O for the four experiments:
//! monotone output regression, signal denoising, resource allocation and
//! MPC policy imitation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{
    default_lambda_grid, laplacian_denoise, laplacian_sweep, ols_fit, relu_fit, relu_mse, relu_predict,
    softmax_regression_fit, ReluConfig,
};
use crate::linalg::{fmt_real, norm2, spectral_scale, DenseMatrix, LinalgError};
use crate::models::{ModelError, ModelFamily, PredictSettings, Theta};
use crate::rng::Rng;
use crate::sep::softmax;
use crate::trainer::{
    evaluate, fit, predict_split, Example, Loss, Regularizer, StepRule, TrainConfig, TrainError, TrainReport, TraceRow,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("unknown experiment {0:?} (expected monotone, denoise, resource or mpc)")]
    UnknownExperiment(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("no metrics to plot")]
    MissingMetrics,
    #[error("i/o: {0}")]
    Io(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ExperimentError + '_ {
    move |e| ExperimentError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Monotone,
    Denoise,
    Resource,
    Mpc,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 4] =
        [ExperimentKind::Monotone, ExperimentKind::Denoise, ExperimentKind::Resource, ExperimentKind::Mpc];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Monotone => "monotone",
            ExperimentKind::Denoise => "denoise",
            ExperimentKind::Resource => "resource",
            ExperimentKind::Mpc => "mpc",
        }
    }

    /// Per-experiment defaults. Step sizes are scaled to each loss: resource
    /// allocations are O(0.1) so its losses (and gradients) are tiny, and
    /// the denoiser starts far from a good smoother.
    pub fn default_train_config(self) -> TrainConfig {
        let base = TrainConfig { step_rule: StepRule::InvSqrt, shuffle: true, seed: 0, ..TrainConfig::default() };
        match self {
            ExperimentKind::Monotone => TrainConfig { batch_size: 32, iters: 1000, step0: 5.0, record_val_every: 10, ..base },
            ExperimentKind::Denoise => TrainConfig { batch_size: 16, iters: 400, step0: 30.0, record_val_every: 10, ..base },
            ExperimentKind::Resource => TrainConfig { batch_size: 32, iters: 300, step0: 100.0, record_val_every: 10, ..base },
            ExperimentKind::Mpc => TrainConfig { batch_size: 100, iters: 200, step0: 10.0, record_val_every: 10, ..base },
        }
    }

    pub fn loss(self) -> Loss {
        Loss::SquaredL2
    }

    pub fn regularizer(self, theta_len: usize) -> Regularizer {
        match self {
            ExperimentKind::Monotone => Regularizer::Zero,
            ExperimentKind::Denoise => Regularizer::Sum(vec![
                (0..theta_len - 1, Regularizer::Zero),
                (theta_len - 1..theta_len, Regularizer::PositiveIndicator(1e-6)),
            ]),
            ExperimentKind::Resource => Regularizer::PositiveIndicator(1e-6),
            ExperimentKind::Mpc => Regularizer::NonnegIndicator,
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ExperimentError::UnknownExperiment(s.to_string()))
    }
}

pub const MPC_HORIZON: usize = 5;
pub const MPC_RADIUS: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub experiment: ExperimentKind,
    pub seed: u64,
    /// Input length.
    pub n: usize,
    /// Output length.
    pub m: usize,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub aux: BTreeMap<String, DenseMatrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    experiment: ExperimentKind,
    seed: u64,
    n: usize,
    m: usize,
    n_train: usize,
    n_val: usize,
    aux: BTreeMap<String, String>,
}

impl Dataset {
    pub fn family(&self) -> Result<ModelFamily> {
        Ok(match self.experiment {
            ExperimentKind::Monotone => ModelFamily::MonotoneRegression { n: self.n, m: self.m },
            ExperimentKind::Denoise => ModelFamily::MrfDenoiser { n: self.n },
            ExperimentKind::Resource => ModelFamily::ResourceAllocation { m: self.m },
            ExperimentKind::Mpc => ModelFamily::MpcPolicy {
                n: self.n,
                m: self.m,
                horizon: MPC_HORIZON,
                a: self.aux_matrix("A")?.clone(),
                b: self.aux_matrix("B")?.clone(),
                radius: MPC_RADIUS,
            },
        })
    }

    pub fn aux_matrix(&self, name: &str) -> Result<&DenseMatrix> {
        self.aux
            .get(name)
            .ok_or_else(|| ExperimentError::InvalidDataset(format!("missing aux matrix {name}")))
    }

    /// θ_true flattened in the family's layout, where the experiment has one.
    pub fn theta_true(&self) -> Option<Theta> {
        self.aux.get("theta_true").map(|t| Theta(t.as_slice().to_vec()))
    }

    fn validate(&self) -> Result<()> {
        let (nx, ny) = match self.experiment {
            ExperimentKind::Resource => (self.m + 1, self.m),
            _ => (self.n, self.m),
        };
        for ex in self.train.iter().chain(&self.val) {
            if ex.x.len() != nx || ex.y.len() != ny {
                return Err(ExperimentError::InvalidDataset(format!(
                    "pair of shape ({}, {}), expected ({nx}, {ny})",
                    ex.x.len(),
                    ex.y.len()
                )));
            }
        }
        if self.train.is_empty() || self.val.is_empty() {
            return Err(ExperimentError::InvalidDataset("empty split".into()));
        }
        Ok(())
    }

    /// `meta.json`, `train.csv`, `val.csv` and one headerless CSV per aux
    /// matrix.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let aux: BTreeMap<String, String> = self.aux.keys().map(|k| (k.clone(), format!("{k}.csv"))).collect();
        for (name, file) in &aux {
            self.aux[name].write_csv(&dir.join(file))?;
        }
        write_split(&dir.join("train.csv"), &self.train)?;
        write_split(&dir.join("val.csv"), &self.val)?;
        let meta = Meta {
            experiment: self.experiment,
            seed: self.seed,
            n: self.n,
            m: self.m,
            n_train: self.train.len(),
            n_val: self.val.len(),
            aux,
        };
        write_json(&dir.join("meta.json"), &meta)
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let text = std::fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
        let meta: Meta = serde_json::from_str(&text).map_err(|e| ExperimentError::Io(format!("{}: {e}", meta_path.display())))?;
        let mut aux = BTreeMap::new();
        for (name, file) in &meta.aux {
            aux.insert(name.clone(), DenseMatrix::read_csv(&dir.join(file))?);
        }
        let nx = if meta.experiment == ExperimentKind::Resource { meta.m + 1 } else { meta.n };
        let ds = Dataset {
            experiment: meta.experiment,
            seed: meta.seed,
            n: meta.n,
            m: meta.m,
            train: read_split(&dir.join("train.csv"), nx, meta.m)?,
            val: read_split(&dir.join("val.csv"), nx, meta.m)?,
            aux,
        };
        if ds.train.len() != meta.n_train || ds.val.len() != meta.n_val {
            return Err(ExperimentError::InvalidDataset("split sizes disagree with meta.json".into()));
        }
        ds.validate()?;
        Ok(ds)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| ExperimentError::Io(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> ExperimentError + '_ {
    move |e| ExperimentError::Io(format!("{}: {e}", path.display()))
}

fn write_split(path: &Path, split: &[Example]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let (nx, ny) = split.first().map_or((0, 0), |e| (e.x.len(), e.y.len()));
    let header: Vec<String> = (0..nx).map(|i| format!("x{i}")).chain((0..ny).map(|j| format!("y{j}"))).collect();
    w.write_record(&header).map_err(csv_err(path))?;
    for ex in split {
        w.write_record(ex.x.iter().chain(&ex.y).map(|v| fmt_real(*v))).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_split(path: &Path, nx: usize, ny: usize) -> Result<Vec<Example>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let width = r.headers().map_err(csv_err(path))?.len();
    if width != nx + ny {
        return Err(ExperimentError::InvalidDataset(format!("{}: {width} columns, expected {}", path.display(), nx + ny)));
    }
    r.records()
        .map(|rec| {
            let rec = rec.map_err(csv_err(path))?;
            let vals = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| ExperimentError::InvalidDataset(format!("{}: {e}", path.display())))?;
            Ok(Example { x: vals[..nx].to_vec(), y: vals[nx..].to_vec() })
        })
        .collect()
}

/// Pool-adjacent-violators: Euclidean projection onto the monotone cone.
pub fn monotone_projection(v: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(v.len());
    for &x in v {
        let (mut mean, mut count) = (x, 1usize);
        while let Some(&(pm, pc)) = blocks.last() {
            if pm <= mean {
                break;
            }
            blocks.pop();
            mean = (pm * pc as f64 + mean * count as f64) / (pc + count) as f64;
            count += pc;
        }
        blocks.push((mean, count));
    }
    blocks.into_iter().flat_map(|(m, c)| std::iter::repeat_n(m, c)).collect()
}

/// Deterministic dataset for `(experiment, seed)`.
pub fn gen_dataset(experiment: ExperimentKind, seed: u64) -> Result<Dataset> {
    let mut rng = Rng::seed_from_u64(seed);
    let ds = match experiment {
        ExperimentKind::Monotone => gen_monotone(&mut rng, seed),
        ExperimentKind::Denoise => gen_denoise(&mut rng, seed),
        ExperimentKind::Resource => gen_resource(&mut rng, seed)?,
        ExperimentKind::Mpc => gen_mpc(&mut rng, seed)?,
    };
    ds.validate()?;
    Ok(ds)
}

/// y = Π_mono(θ_trueᵀx + z), x ~ N(0, I₂₀), z ~ N(0, I₁₀), θ_true standard
/// normal. The noise enters in output space.
fn gen_monotone(rng: &mut Rng, seed: u64) -> Dataset {
    let (n, m) = (20, 10);
    let theta = DenseMatrix::from_fn(n, m, |_, _| rng.normal());
    let mut draw = |count: usize| -> Vec<Example> {
        (0..count)
            .map(|_| {
                let x = rng.normal_vec(n);
                let mut t = theta.tr_matvec(&x);
                for v in t.iter_mut() {
                    *v += rng.normal();
                }
                Example { x, y: monotone_projection(&t) }
            })
            .collect()
    };
    let train = draw(100);
    let val = draw(50);
    Dataset {
        experiment: ExperimentKind::Monotone,
        seed,
        n,
        m,
        train,
        val,
        aux: BTreeMap::from([("theta_true".to_string(), theta)]),
    }
}

/// yᵢ = cos(2π a tᵢ) on t = linspace(0, 1, 100), a ~ U[1, 3]; x = y + Pᵀg
/// with P entries Normal(0, 0.01) fixed per dataset, so the noise
/// covariance is Σ = PᵀP.
fn gen_denoise(rng: &mut Rng, seed: u64) -> Dataset {
    let n = 100;
    let p = DenseMatrix::from_fn(n, n, |_, _| 0.1 * rng.normal());
    let mut draw = |count: usize| -> Vec<Example> {
        (0..count)
            .map(|_| {
                let a = rng.uniform_range(1.0, 3.0);
                let y: Vec<f64> = (0..n)
                    .map(|i| (2.0 * std::f64::consts::PI * a * i as f64 / (n - 1) as f64).cos())
                    .collect();
                let noise = p.tr_matvec(&rng.normal_vec(n));
                Example { x: y.iter().zip(&noise).map(|(a, b)| a + b).collect(), y }
            })
            .collect()
    };
    let train = draw(500);
    let val = draw(100);
    Dataset {
        experiment: ExperimentKind::Denoise,
        seed,
        n,
        m: n,
        train,
        val,
        aux: BTreeMap::from([("sigma".to_string(), p.gram())]),
    }
}

/// B, pᵢ, θ_true,ᵢ ~ U(0, 1]; the utility-maximizing allocation is
/// perturbed by z ~ U[0.5, 1.5] elementwise and rescaled to spend B.
fn gen_resource(rng: &mut Rng, seed: u64) -> Result<Dataset> {
    let m = 10;
    let theta: Vec<f64> = (0..m).map(|_| 1.0 - rng.uniform()).collect();
    let family = ModelFamily::ResourceAllocation { m };
    let theta_t = Theta(theta.clone());
    let settings = PredictSettings::default();
    let mut draw = |count: usize| -> Result<Vec<Example>> {
        (0..count)
            .map(|_| {
                let budget = 1.0 - rng.uniform();
                let mut x = vec![budget];
                x.extend((0..m).map(|_| 1.0 - rng.uniform()));
                let alloc = family.predict(&x, &theta_t, &settings)?.y_hat;
                let mut y: Vec<f64> = alloc.iter().map(|v| v * rng.uniform_range(0.5, 1.5)).collect();
                let total: f64 = y.iter().sum();
                y.iter_mut().for_each(|v| *v *= budget / total);
                Ok(Example { x, y })
            })
            .collect()
    };
    let train = draw(100)?;
    let val = draw(50)?;
    Ok(Dataset {
        experiment: ExperimentKind::Resource,
        seed,
        n: m + 1,
        m,
        train,
        val,
        aux: BTreeMap::from([("theta_true".to_string(), DenseMatrix::from_rows(&[theta]))]),
    })
}

/// One noisy closed-loop rollout of the true MPC policy: yᵗ = Π(uᵗ + zᵗ)
/// with z ~ N(0, 0.1 I), xᵗ⁺¹ = Axᵗ + Byᵗ + w, w ~ N(0, I). The first
/// 1000 steps train, the next 1000 validate.
fn gen_mpc(rng: &mut Rng, seed: u64) -> Result<Dataset> {
    let (n, m) = (10, 4);
    let a = spectral_scale(&DenseMatrix::from_fn(n, n, |_, _| rng.normal()), 0.95)?;
    let sd = 1.0 / (n as f64).sqrt();
    let b = DenseMatrix::from_fn(n, m, |_, _| sd * rng.normal());
    let theta: Vec<f64> = (0..n).map(|_| rng.normal().abs()).collect();
    let family = ModelFamily::MpcPolicy { n, m, horizon: MPC_HORIZON, a: a.clone(), b: b.clone(), radius: MPC_RADIUS };
    let theta_t = Theta(theta.clone());
    let settings = PredictSettings::default();
    let mut x = rng.normal_vec(n);
    let mut pairs = Vec::with_capacity(2000);
    for _ in 0..2000 {
        let u = family.predict(&x, &theta_t, &settings)?.y_hat;
        let y: Vec<f64> = u
            .iter()
            .map(|v| (v + 0.1f64.sqrt() * rng.normal()).clamp(-MPC_RADIUS, MPC_RADIUS))
            .collect();
        let mut next = a.matvec(&x);
        for (i, bi) in b.matvec(&y).into_iter().enumerate() {
            next[i] += bi + rng.normal();
        }
        pairs.push(Example { x: std::mem::replace(&mut x, next), y });
    }
    let val = pairs.split_off(1000);
    Ok(Dataset {
        experiment: ExperimentKind::Mpc,
        seed,
        n,
        m,
        train: pairs,
        val,
        aux: BTreeMap::from([
            ("A".to_string(), a),
            ("B".to_string(), b),
            ("theta_true".to_string(), DenseMatrix::from_rows(&[theta])),
        ]),
    })
}

/// Optional overrides of the per-experiment training defaults.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOverrides {
    pub iters: Option<usize>,
    pub batch_size: Option<usize>,
    pub step0: Option<f64>,
    pub seed: Option<u64>,
    pub record_val_every: Option<usize>,
}

impl TrainOverrides {
    pub fn apply(&self, mut cfg: TrainConfig) -> TrainConfig {
        if let Some(v) = self.iters {
            cfg.iters = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.step0 {
            cfg.step0 = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.record_val_every {
            cfg.record_val_every = v;
        }
        cfg
    }
}

/// Fits the convex optimization model from θ¹ with the experiment's loss and
/// regularizer.
pub fn train_com(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    let family = ds.family()?;
    let theta0 = family.initial_theta(cfg.seed);
    let reg = ds.experiment.regularizer(family.theta_len());
    Ok(fit(&family, theta0, &ds.train, &ds.val, ds.experiment.loss(), &reg, cfg, &PredictSettings::default())?)
}

/// Validation loss of θ on the dataset's experiment.
pub fn evaluate_theta(ds: &Dataset, theta: &Theta) -> Result<f64> {
    Ok(evaluate(&ds.family()?, theta, &ds.val, ds.experiment.loss(), &PredictSettings::default())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub com_val: f64,
    pub com_initial_val: f64,
    pub baseline: String,
    pub baseline_val: f64,
    /// projected_ols_val / theta_true_val (monotone), theta_true_val and
    /// theta_recovery_error (mpc), theta_recovery_error (resource),
    /// lambda_star (denoise).
    pub extras: BTreeMap<String, f64>,
    pub train_config: TrainConfig,
    pub failures: usize,
    pub damped: usize,
}

/// One panel's data: named columns after an implicit index column.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub index_name: String,
    pub columns: Vec<(String, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub summary: Summary,
    pub report: TrainReport,
    pub prediction: Panel,
    pub parameters: Option<Panel>,
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

fn mean_mse(preds: &[Vec<f64>], split: &[Example]) -> f64 {
    preds.iter().zip(split).map(|(p, e)| mse(p, &e.y)).sum::<f64>() / split.len() as f64
}

fn relative_error(est: &[f64], truth: &[f64]) -> f64 {
    let d: Vec<f64> = est.iter().zip(truth).map(|(a, b)| a - b).collect();
    norm2(&d) / norm2(truth)
}

/// Fits the model and the experiment's baseline and scores both on the
/// validation split.
pub fn run_on_dataset(ds: &Dataset, cfg: &TrainConfig) -> Result<RunOutput> {
    let family = ds.family()?;
    let settings = PredictSettings::default();
    let report = train_com(ds, cfg)?;
    let com_preds = predict_split(&family, &report.theta, &ds.val, &settings)?;
    let probe = &ds.val[0];
    let mut extras = BTreeMap::new();
    let mut columns = Vec::new();
    let mut parameters = None;
    let (baseline, baseline_val) = match ds.experiment {
        ExperimentKind::Monotone => {
            let x = DenseMatrix::from_rows(&ds.train.iter().map(|e| e.x.clone()).collect::<Vec<_>>());
            let y = DenseMatrix::from_rows(&ds.train.iter().map(|e| e.y.clone()).collect::<Vec<_>>());
            let ols = ols_fit(&x, &y)?;
            let lr_preds: Vec<Vec<f64>> = ds.val.iter().map(|e| ols.tr_matvec(&e.x)).collect();
            let lr_val = mean_mse(&lr_preds, &ds.val);
            let ols_theta = Theta(ols.as_slice().to_vec());
            extras.insert("projected_ols_val".into(), evaluate(&family, &ols_theta, &ds.val, Loss::SquaredL2, &settings)?);
            let truth = ds.theta_true().expect("monotone has θ_true");
            extras.insert("theta_true_val".into(), evaluate(&family, &truth, &ds.val, Loss::SquaredL2, &settings)?);
            columns.push(("lr".to_string(), ols.tr_matvec(&probe.x)));
            ("linear_regression".to_string(), lr_val)
        }
        ExperimentKind::Denoise => {
            let sweep = laplacian_sweep(&ds.train, &default_lambda_grid())?;
            let ls_preds = ds
                .val
                .iter()
                .map(|e| laplacian_denoise(&e.x, sweep.lambda_star))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            extras.insert("lambda_star".into(), sweep.lambda_star);
            extras.insert("com_lambda".into(), *report.theta.0.last().expect("λ"));
            columns.push(("noisy".to_string(), probe.x.clone()));
            columns.push(("ls".to_string(), ls_preds[0].clone()));
            ("laplacian_least_squares".to_string(), mean_mse(&ls_preds, &ds.val))
        }
        ExperimentKind::Resource => {
            // softmax regression on (p, 1) against y/B, scored as B·ŷ
            let feats = |e: &Example| -> Vec<f64> {
                let mut f = e.x[1..].to_vec();
                f.push(1.0);
                f
            };
            let x = DenseMatrix::from_rows(&ds.train.iter().map(feats).collect::<Vec<_>>());
            let y = DenseMatrix::from_rows(&ds.train.iter().map(|e| e.y.iter().map(|v| v / e.x[0]).collect()).collect::<Vec<_>>());
            let theta_lr = softmax_regression_fit(&x, &y, 2000, 1.0);
            let predict = |e: &Example| -> Vec<f64> {
                softmax(&theta_lr.tr_matvec(&feats(e))).into_iter().map(|v| v * e.x[0]).collect()
            };
            let preds: Vec<Vec<f64>> = ds.val.iter().map(predict).collect();
            let truth = ds.theta_true().expect("resource has θ_true");
            extras.insert("theta_recovery_error".into(), relative_error(&report.theta.0, &truth.0));
            extras.insert("theta_true_val".into(), evaluate(&family, &truth, &ds.val, Loss::SquaredL2, &settings)?);
            columns.push(("baseline".to_string(), preds[0].clone()));
            parameters = Some(Panel {
                index_name: "i".into(),
                columns: vec![("theta_learned".into(), report.theta.0.clone()), ("theta_true".into(), truth.0)],
            });
            ("logistic_regression".to_string(), mean_mse(&preds, &ds.val))
        }
        ExperimentKind::Mpc => {
            let relu = relu_fit(&ds.train, ds.n, MPC_RADIUS, &mpc_relu_config(cfg.seed));
            let truth = ds.theta_true().expect("mpc has θ_true");
            extras.insert("theta_recovery_error".into(), relative_error(&report.theta.0, &truth.0));
            extras.insert("theta_true_val".into(), evaluate(&family, &truth, &ds.val, Loss::SquaredL2, &settings)?);
            extras.insert("relu_iters".into(), relu.iters as f64);
            columns.push(("relu".to_string(), relu_predict(&relu.net, &probe.x)));
            parameters = Some(Panel {
                index_name: "i".into(),
                columns: vec![("theta_learned".into(), report.theta.0.clone()), ("theta_true".into(), truth.0)],
            });
            ("relu_network".to_string(), relu_mse(&relu.net, &ds.val))
        }
    };
    columns.push(("com".to_string(), com_preds[0].clone()));
    columns.push(("true".to_string(), probe.y.clone()));
    let summary = Summary {
        experiment: ds.experiment,
        seed: ds.seed,
        com_val: mean_mse(&com_preds, &ds.val),
        com_initial_val: report.initial_val_loss,
        baseline,
        baseline_val,
        extras,
        train_config: *cfg,
        failures: report.failures,
        damped: report.damped,
    };
    Ok(RunOutput { summary, report, prediction: Panel { index_name: "index".into(), columns }, parameters })
}

pub fn mpc_relu_config(seed: u64) -> ReluConfig {
    ReluConfig { batch_size: 32, step: 0.05, seed, ..ReluConfig::default() }
}

/// Writes `val_loss.csv`, `prediction.csv` and, when present,
/// `parameters.csv` into `dir`.
pub fn emit_plot_data(dir: &Path, rows: &[TraceRow], prediction: &Panel, parameters: Option<&Panel>) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        return Err(ExperimentError::MissingMetrics);
    }
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    let path = dir.join("val_loss.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["iter", "train_loss", "val_loss", "step"]).map_err(csv_err(&path))?;
    for r in rows {
        w.write_record([r.iter.to_string(), fmt_real(r.train_loss), fmt_real(r.val_loss), fmt_real(r.step)])
            .map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;
    written.push(path);
    for (name, panel) in [("prediction.csv", Some(prediction)), ("parameters.csv", parameters)] {
        let Some(panel) = panel else { continue };
        let path = dir.join(name);
        write_panel(&path, panel)?;
        written.push(path);
    }
    Ok(written)
}

fn write_panel(path: &Path, panel: &Panel) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut header = vec![panel.index_name.clone()];
    header.extend(panel.columns.iter().map(|(n, _)| n.clone()));
    w.write_record(&header).map_err(csv_err(path))?;
    let len = panel.columns.iter().map(|(_, c)| c.len()).max().unwrap_or(0);
    for i in 0..len {
        let mut rec = vec![i.to_string()];
        rec.extend(panel.columns.iter().map(|(_, c)| c.get(i).map_or(String::new(), |v| fmt_real(*v))));
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Option<ExperimentKind>,
    pub seed: u64,
    pub overrides: TrainOverrides,
    /// Load the dataset from here instead of generating it.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

/// Removes the files a run created unless it is committed.
struct OutputGuard {
    created: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
    committed: bool,
}

impl OutputGuard {
    fn new() -> Self {
        Self { created: Vec::new(), dirs: Vec::new(), committed: false }
    }

    fn dir(&mut self, dir: &Path) -> Result<()> {
        if !dir.exists() {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            self.dirs.push(dir.to_path_buf());
        }
        Ok(())
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in &self.created {
            let _ = std::fs::remove_file(f);
        }
        for d in self.dirs.iter().rev() {
            let _ = std::fs::remove_dir_all(d);
        }
    }
}

/// Generates (or loads) the dataset, trains, runs the baseline and writes
/// `dataset/`, `metrics.jsonl`, `theta.json`, `summary.json` and `plots/`.
/// On error every file this run created is removed again.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Summary> {
    let ds = match (&config.data_dir, config.experiment) {
        (Some(dir), expected) => {
            let ds = Dataset::read_dir(dir)?;
            if expected.is_some_and(|e| e != ds.experiment) {
                return Err(ExperimentError::InvalidDataset(format!(
                    "{} holds a {} dataset",
                    dir.display(),
                    ds.experiment
                )));
            }
            ds
        }
        (None, Some(kind)) => gen_dataset(kind, config.seed)?,
        (None, None) => return Err(ExperimentError::UnknownExperiment(String::new())),
    };
    let cfg = config.overrides.apply(ds.experiment.default_train_config());
    let mut guard = OutputGuard::new();
    let out = &config.out_dir;
    guard.dir(out)?;
    if config.data_dir.is_none() {
        let dir = out.join("dataset");
        guard.dir(&dir)?;
        ds.write_dir(&dir)?;
    }
    let run = run_on_dataset(&ds, &cfg)?;
    let metrics = out.join("metrics.jsonl");
    guard.created.push(metrics.clone());
    run.report.write_metrics_jsonl(&metrics)?;
    for (name, value) in [
        ("theta.json", serde_json::to_value(&run.report.theta)),
        ("summary.json", serde_json::to_value(&run.summary)),
    ] {
        let path = out.join(name);
        guard.created.push(path.clone());
        write_json(&path, &value.map_err(|e| ExperimentError::Io(e.to_string()))?)?;
    }
    let plots = out.join("plots");
    guard.dir(&plots)?;
    guard.created.extend(emit_plot_data(&plots, &run.report.rows, &run.prediction, run.parameters.as_ref())?);
    guard.committed = true;
    Ok(run.summary)
}

pub fn read_theta(path: &Path) -> Result<Theta> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| ExperimentError::Io(format!("{}: {e}", path.display())))
}

/// One band or ordering check over a set of runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandCheck {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

fn extra(s: &Summary, key: &str) -> f64 {
    s.extras.get(key).copied().unwrap_or(f64::NAN)
}

fn every(name: &str, runs: &[Summary], ok: impl Fn(&Summary) -> bool, show: impl Fn(&Summary) -> String) -> BandCheck {
    let detail = runs.iter().map(|s| format!("seed {}: {}", s.seed, show(s))).collect::<Vec<_>>().join("; ");
    BandCheck { name: name.to_string(), pass: !runs.is_empty() && runs.iter().all(ok), detail }
}

/// Seeds used by `repro` and the acceptance suite: 1..=count.
pub fn repro_seeds(count: usize) -> Vec<u64> {
    (1..=count as u64).collect()
}

/// Runs per experiment in the reproduction bands.
pub fn repro_seed_count(kind: ExperimentKind) -> usize {
    match kind {
        ExperimentKind::Monotone | ExperimentKind::Resource => 5,
        ExperimentKind::Denoise | ExperimentKind::Mpc => 3,
    }
}

/// The reproduction bands for one experiment over its runs.
pub fn check_bands(kind: ExperimentKind, runs: &[Summary]) -> Vec<BandCheck> {
    let mut checks = vec![every(
        "learning happened (com_val < val at θ¹)",
        runs,
        |s| s.com_val < s.com_initial_val,
        |s| format!("{:.4} < {:.4}", s.com_val, s.com_initial_val),
    )];
    match kind {
        ExperimentKind::Monotone => {
            checks.push(every(
                "com_val < projected_ols_val < lr_val",
                runs,
                |s| s.com_val < extra(s, "projected_ols_val") && extra(s, "projected_ols_val") < s.baseline_val,
                |s| format!("{:.3} < {:.3} < {:.3}", s.com_val, extra(s, "projected_ols_val"), s.baseline_val),
            ));
            let com = median(runs.iter().map(|s| s.com_val).collect());
            checks.push(BandCheck {
                name: "median com_val in [0.25, 1.2]".into(),
                pass: (0.25..=1.2).contains(&com),
                detail: format!("{com:.4}"),
            });
            let lr = median(runs.iter().map(|s| s.baseline_val).collect());
            checks.push(BandCheck {
                name: "median lr_val in [2.0, 5.5]".into(),
                pass: (2.0..=5.5).contains(&lr),
                detail: format!("{lr:.4}"),
            });
            checks.push(every(
                "com_val <= 2.5 x true-model val",
                runs,
                |s| s.com_val <= 2.5 * extra(s, "theta_true_val"),
                |s| format!("{:.3} vs {:.3}", s.com_val, extra(s, "theta_true_val")),
            ));
        }
        ExperimentKind::Denoise => {
            checks.push(every(
                "com_val <= 0.35 x ls_val",
                runs,
                |s| s.com_val <= 0.35 * s.baseline_val,
                |s| format!("{:.4} vs {:.4}", s.com_val, s.baseline_val),
            ));
            checks.push(every("com_val <= 0.035", runs, |s| s.com_val <= 0.035, |s| format!("{:.4}", s.com_val)));
        }
        ExperimentKind::Resource => {
            checks.push(every(
                "com_val < baseline_val",
                runs,
                |s| s.com_val < s.baseline_val,
                |s| format!("{:.5} vs {:.5}", s.com_val, s.baseline_val),
            ));
            checks.push(every(
                "theta recovery error <= 0.25",
                runs,
                |s| extra(s, "theta_recovery_error") <= 0.25,
                |s| format!("{:.3}", extra(s, "theta_recovery_error")),
            ));
        }
        ExperimentKind::Mpc => {
            checks.push(every(
                "com_val <= relu_val",
                runs,
                |s| s.com_val <= s.baseline_val,
                |s| format!("{:.4} vs {:.4}", s.com_val, s.baseline_val),
            ));
            checks.push(every(
                "com_val in [0.03, 0.10]",
                runs,
                |s| (0.03..=0.10).contains(&s.com_val),
                |s| format!("{:.4}", s.com_val),
            ));
            checks.push(every(
                "theta recovery error <= 0.25",
                runs,
                |s| extra(s, "theta_recovery_error") <= 0.25,
                |s| format!("{:.3}", extra(s, "theta_recovery_error")),
            ));
        }
    }
    checks
}

/// Generates and runs each seed in memory, then checks the bands.
pub fn repro(kind: ExperimentKind, seeds: &[u64], overrides: &TrainOverrides) -> Result<(Vec<Summary>, Vec<BandCheck>)> {
    let cfg = overrides.apply(kind.default_train_config());
    let runs = seeds
        .iter()
        .map(|&seed| {
            let ds = gen_dataset(kind, seed)?;
            Ok(run_on_dataset(&ds, &cfg)?.summary)
        })
        .collect::<Result<Vec<_>>>()?;
    let checks = check_bands(kind, &runs);
    Ok((runs, checks))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for k in ExperimentKind::ALL {
            assert_eq!(k.name().parse::<ExperimentKind>().unwrap(), k);
        }
        assert!(matches!("nope".parse::<ExperimentKind>(), Err(ExperimentError::UnknownExperiment(_))));
    }

    #[test]
    fn projection_pools_violators() {
        assert_eq!(monotone_projection(&[2.0, 1.0]), vec![1.5, 1.5]);
        assert_eq!(monotone_projection(&[1.0, 3.0, 2.0, 0.0]), vec![1.0, 5.0 / 3.0, 5.0 / 3.0, 5.0 / 3.0]);
        assert_eq!(monotone_projection(&[]), Vec::<f64>::new());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn overrides_apply() {
        let o = TrainOverrides { iters: Some(7), step0: Some(0.01), ..TrainOverrides::default() };
        let cfg = o.apply(ExperimentKind::Monotone.default_train_config());
        assert_eq!((cfg.iters, cfg.step0, cfg.batch_size), (7, 0.01, 32));
    }
}
