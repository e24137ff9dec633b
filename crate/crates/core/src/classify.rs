//! One-vs-all logistic regression and a one-hidden-layer MLP.
//!
//! The OvA classifier fits `c` independent binary logistic regressions by
//! full-batch gradient descent with a Barzilai-Borwein trial step and
//! Armijo backtracking. Its probability vector is the per-class sigmoid
//! normalized to sum to one.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::store::{self, MatrixFile, StoreError};

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("need at least two classes present, found {0}")]
    SingleClass(usize),
    #[error("non-finite feature at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("{rows} rows but {labels} labels")]
    Misaligned { rows: usize, labels: usize },
    #[error("classifier expects d={expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("invalid classifier metadata: {0}")]
    Meta(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

type Result<T, E = ClassifyError> = std::result::Result<T, E>;

/// Anything that maps a feature vector to a distribution over classes.
pub trait ProbabilisticClassifier: Sync {
    fn n_classes(&self) -> usize;
    fn dim(&self) -> usize;
    fn predict_proba(&self, x: &DVector<f64>) -> Result<DVector<f64>>;

    /// Argmax of [`Self::predict_proba`], lowest index on ties.
    fn predict(&self, x: &DVector<f64>) -> Result<usize> {
        Ok(argmax(self.predict_proba(x)?.as_slice()))
    }

    /// Row-wise probabilities, N×c.
    fn predict_proba_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let rows = (0..x.nrows())
            .into_par_iter()
            .map(|i| self.predict_proba(&x.row(i).transpose()))
            .collect::<Result<Vec<_>>>()?;
        let mut out = DMatrix::zeros(x.nrows(), self.n_classes());
        for (i, p) in rows.iter().enumerate() {
            out.row_mut(i).copy_from(&p.transpose());
        }
        Ok(out)
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_data(x: &DMatrix<f64>, y: &[usize], classes: usize) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(ClassifyError::Misaligned {
            rows: x.nrows(),
            labels: y.len(),
        });
    }
    for (col, column) in x.column_iter().enumerate() {
        if let Some(row) = column.iter().position(|v| !v.is_finite()) {
            return Err(ClassifyError::NonFinite { row, col });
        }
    }
    let mut present = vec![false; classes];
    for &label in y {
        if label >= classes {
            return Err(ClassifyError::LabelOutOfRange { label, classes });
        }
        present[label] = true;
    }
    let n_present = present.iter().filter(|&&p| p).count();
    if n_present < 2 {
        return Err(ClassifyError::SingleClass(n_present));
    }
    Ok(())
}

/// Regularized binary logistic loss and its gradient.
///
/// `L(w, b) = mean_i softplus(−s_i (w·x_i + b)) + (λ/2)‖w‖²` with
/// `s_i = 2 t_i − 1`; the bias is not penalized.
pub fn logistic_objective(
    x: &DMatrix<f64>,
    targets: &[f64],
    w: &DVector<f64>,
    b: f64,
    lambda: f64,
) -> (f64, DVector<f64>, f64) {
    let n = x.nrows() as f64;
    let margins = x * w;
    let mut losses = Vec::with_capacity(targets.len());
    let mut coef = DVector::zeros(targets.len());
    for (i, &t) in targets.iter().enumerate() {
        let m = margins[i] + b;
        let s = 2.0 * t - 1.0;
        losses.push(softplus(-s * m));
        coef[i] = (sigmoid(m) - t) / n;
    }
    let loss = crate::linalg::pairwise_sum(&losses) / n + 0.5 * lambda * w.norm_squared();
    let grad_w = x.tr_mul(&coef) + w * lambda;
    let grad_b = crate::linalg::pairwise_sum(coef.as_slice());
    (loss, grad_w, grad_b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRegConfig {
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        Self {
            max_iter: 10_000,
            grad_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BinaryFit {
    pub weights: DVector<f64>,
    pub bias: f64,
    /// Objective value before the first step and after every accepted step.
    pub losses: Vec<f64>,
    pub converged: bool,
}

fn grad_norm(gw: &DVector<f64>, gb: f64) -> f64 {
    (gw.norm_squared() + gb * gb).sqrt()
}

/// Full-batch gradient descent on [`logistic_objective`] until the gradient
/// norm drops to `grad_tol` or `max_iter` steps were taken. Steps follow the
/// gradient scaled by the inverse of a fixed diagonal curvature bound, so a
/// large λ does not stall the bias.
pub fn fit_binary_logistic(
    x: &DMatrix<f64>,
    targets: &[f64],
    lambda: f64,
    cfg: &LogRegConfig,
) -> BinaryFit {
    let (n, d) = x.shape();
    let h_w = DVector::from_fn(d, |j, _| {
        0.25 * x.column(j).norm_squared() / n as f64 + lambda
    });
    let h_w = h_w.map(|v| if v > 0.0 { v } else { 1.0 });
    let h_b = 0.25;
    let mut w = DVector::zeros(d);
    let mut b = 0.0;
    let (mut loss, mut gw, mut gb) = logistic_objective(x, targets, &w, b, lambda);
    let mut losses = vec![loss];
    let mut step = 1.0;
    let mut converged = grad_norm(&gw, gb) <= cfg.grad_tol;
    let mut iter = 0;
    while !converged && iter < cfg.max_iter {
        iter += 1;
        let dw = gw.component_div(&h_w);
        let db = gb / h_b;
        let slope = gw.dot(&dw) + gb * db;
        let mut t = step;
        let mut accepted = None;
        for _ in 0..60 {
            let w_new = &w - &dw * t;
            let b_new = b - db * t;
            let (l_new, gw_new, gb_new) = logistic_objective(x, targets, &w_new, b_new, lambda);
            if l_new <= loss - 1e-4 * t * slope {
                accepted = Some((w_new, b_new, l_new, gw_new, gb_new));
                break;
            }
            t *= 0.5;
        }
        let Some((w_new, b_new, l_new, gw_new, gb_new)) = accepted else {
            // no decrease possible at machine precision
            break;
        };
        // Barzilai-Borwein trial step in the scaled metric
        let sw = &w_new - &w;
        let sb = b_new - b;
        let sy = sw.dot(&(&gw_new - &gw)) + sb * (gb_new - gb);
        let ss = sw.component_mul(&h_w).dot(&sw) + h_b * sb * sb;
        step = if sy > 0.0 {
            (ss / sy).clamp(1e-6, 1e6)
        } else {
            (t * 2.0).min(1e6)
        };
        w = w_new;
        b = b_new;
        loss = l_new;
        gw = gw_new;
        gb = gb_new;
        losses.push(loss);
        converged = grad_norm(&gw, gb) <= cfg.grad_tol;
    }
    BinaryFit {
        weights: w,
        bias: b,
        losses,
        converged,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    /// c×d.
    pub weights: DMatrix<f64>,
    pub biases: DVector<f64>,
    pub classes: Vec<String>,
    pub lambda: f64,
}

impl LinearClassifier {
    pub fn new(
        weights: DMatrix<f64>,
        biases: DVector<f64>,
        classes: Vec<String>,
        lambda: f64,
    ) -> Result<Self> {
        if weights.nrows() != biases.len() || classes.len() != biases.len() {
            return Err(ClassifyError::BadConfig(format!(
                "{} weight rows, {} biases, {} class names",
                weights.nrows(),
                biases.len(),
                classes.len()
            )));
        }
        Ok(Self {
            weights,
            biases,
            classes,
            lambda,
        })
    }

    pub fn scores(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.weights.ncols() {
            return Err(ClassifyError::DimensionMismatch {
                expected: self.weights.ncols(),
                got: x.len(),
            });
        }
        Ok(&self.weights * x + &self.biases)
    }

    fn meta_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".meta");
        PathBuf::from(s)
    }

    /// Rows `[w_c | b_c]` (ids `c<index>`) plus `<path>.meta` with the class
    /// names and λ.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let d = self.weights.ncols();
        let mut values = Vec::with_capacity(self.classes.len() * (d + 1));
        for c in 0..self.classes.len() {
            values.extend(self.weights.row(c).iter());
            values.push(self.biases[c]);
        }
        let ids = (0..self.classes.len()).map(|c| format!("c{c}")).collect();
        store::write_matrix(
            &MatrixFile {
                ids,
                cols: d + 1,
                values,
            },
            path,
        )?;
        let mut meta = String::new();
        let _ = writeln!(meta, "classes={}", self.classes.join(","));
        let _ = writeln!(meta, "lambda={}", self.lambda);
        let meta_path = Self::meta_path(path);
        fs::write(&meta_path, meta).map_err(|e| StoreError::Io {
            path: meta_path,
            source: e,
        })?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = store::read_matrix(path)?;
        let meta_path = Self::meta_path(path);
        let text = fs::read_to_string(&meta_path).map_err(|e| StoreError::Io {
            path: meta_path.clone(),
            source: e,
        })?;
        let field = |key: &str| -> Result<&str> {
            text.lines()
                .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| ClassifyError::Meta(format!("missing {key}")))
        };
        let classes: Vec<String> = field("classes")?.split(',').map(str::to_string).collect();
        let lambda: f64 = field("lambda")?
            .parse()
            .map_err(|_| ClassifyError::Meta("invalid lambda".into()))?;
        if file.ids.len() != classes.len() || file.cols == 0 {
            return Err(ClassifyError::Meta(format!(
                "{} rows for {} classes",
                file.ids.len(),
                classes.len()
            )));
        }
        let m = file.to_matrix();
        let d = file.cols - 1;
        let weights = m.columns(0, d).clone_owned();
        let biases = m.column(d).clone_owned();
        Self::new(weights, biases, classes, lambda)
    }
}

impl ProbabilisticClassifier for LinearClassifier {
    fn n_classes(&self) -> usize {
        self.classes.len()
    }

    fn dim(&self) -> usize {
        self.weights.ncols()
    }

    /// Per-class sigmoids normalized to sum to one, computed in log space.
    fn predict_proba(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let s = self.scores(x)?;
        let logs = s.map(|v| -softplus(-v));
        let top = logs.max();
        let e = logs.map(|v| (v - top).exp());
        let total = e.sum();
        Ok(e / total)
    }

    fn predict(&self, x: &DVector<f64>) -> Result<usize> {
        // sigmoid is monotone, and raw scores do not saturate
        Ok(argmax(self.scores(x)?.as_slice()))
    }
}

/// One binary fit per class, in parallel.
pub fn fit_logreg_ova(
    x: &DMatrix<f64>,
    y: &[usize],
    classes: Vec<String>,
    lambda: f64,
    cfg: &LogRegConfig,
) -> Result<LinearClassifier> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(ClassifyError::BadConfig(format!(
            "lambda must be >= 0, got {lambda}"
        )));
    }
    let c = classes.len();
    check_data(x, y, c)?;
    let fits: Vec<BinaryFit> = (0..c)
        .into_par_iter()
        .map(|class| {
            let targets: Vec<f64> = y
                .iter()
                .map(|&l| if l == class { 1.0 } else { 0.0 })
                .collect();
            fit_binary_logistic(x, &targets, lambda, cfg)
        })
        .collect();
    let mut weights = DMatrix::zeros(c, x.ncols());
    let mut biases = DVector::zeros(c);
    for (class, fit) in fits.iter().enumerate() {
        if !fit.converged {
            log::warn!(
                "logistic fit for class {class} stopped before gradient norm {}",
                cfg.grad_tol
            );
        }
        weights.row_mut(class).copy_from(&fit.weights.transpose());
        biases[class] = fit.bias;
    }
    LinearClassifier::new(weights, biases, classes, lambda)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpConfig {
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            lr: 1e-3,
            epochs: 100,
            batch_size: 64,
            lambda: 1e-4,
            seed: 0,
        }
    }
}

/// ReLU hidden layer, softmax output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpClassifier {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

fn softmax_rows(s: &mut DMatrix<f64>) {
    for mut row in s.row_iter_mut() {
        let top = row.max();
        row.apply(|v| *v = (*v - top).exp());
        let total = row.sum();
        row /= total;
    }
}

impl MlpClassifier {
    fn forward(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut h = x * self.w1.transpose();
        for mut row in h.row_iter_mut() {
            row += self.b1.transpose();
            row.apply(|v| *v = v.max(0.0));
        }
        let mut s = &h * self.w2.transpose();
        for mut row in s.row_iter_mut() {
            row += self.b2.transpose();
        }
        softmax_rows(&mut s);
        (h, s)
    }
}

impl ProbabilisticClassifier for MlpClassifier {
    fn n_classes(&self) -> usize {
        self.b2.len()
    }

    fn dim(&self) -> usize {
        self.w1.ncols()
    }

    fn predict_proba(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.dim() {
            return Err(ClassifyError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let row = DMatrix::from_row_slice(1, x.len(), x.as_slice());
        let (_, p) = self.forward(&row);
        Ok(p.row(0).transpose())
    }

    fn predict_proba_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.dim() {
            return Err(ClassifyError::DimensionMismatch {
                expected: self.dim(),
                got: x.ncols(),
            });
        }
        Ok(self.forward(x).1)
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        let mut k = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            for (pi, &gi) in p.iter_mut().zip(g.iter()) {
                self.m[k] = B1 * self.m[k] + (1.0 - B1) * gi;
                self.v[k] = B2 * self.v[k] + (1.0 - B2) * gi * gi;
                *pi -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + 1e-8);
                k += 1;
            }
        }
    }
}

/// Minibatch Adam on the L2-regularized cross-entropy. He-initialized from
/// `cfg.seed`; identical seeds give identical parameters.
pub fn fit_mlp(
    x: &DMatrix<f64>,
    y: &[usize],
    n_classes: usize,
    cfg: &MlpConfig,
) -> Result<MlpClassifier> {
    check_data(x, y, n_classes)?;
    if cfg.hidden == 0 || cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(ClassifyError::BadConfig(format!("{cfg:?}")));
    }
    let (n, d) = x.shape();
    let h = cfg.hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s1 = (2.0 / d as f64).sqrt();
    let s2 = (2.0 / h as f64).sqrt();
    let mut model = MlpClassifier {
        w1: DMatrix::from_fn(h, d, |_, _| s1 * rng.sample::<f64, _>(StandardNormal)),
        b1: DVector::zeros(h),
        w2: DMatrix::from_fn(n_classes, h, |_, _| {
            s2 * rng.sample::<f64, _>(StandardNormal)
        }),
        b2: DVector::zeros(n_classes),
    };
    let mut adam = Adam::new(h * d + h + n_classes * h + n_classes);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let xb = x.select_rows(batch);
            let (hid, mut ds) = model.forward(&xb);
            let bsz = batch.len() as f64;
            for (r, &i) in batch.iter().enumerate() {
                ds[(r, y[i])] -= 1.0;
            }
            ds /= bsz;
            let gw2 = ds.tr_mul(&hid) + &model.w2 * cfg.lambda;
            let gb2 = ds.row_sum().transpose();
            let mut dh = &ds * &model.w2;
            dh.zip_apply(&hid, |g, a| {
                if a <= 0.0 {
                    *g = 0.0
                }
            });
            let gw1 = dh.tr_mul(&xb) + &model.w1 * cfg.lambda;
            let gb1 = dh.row_sum().transpose();
            adam.step(
                &mut [
                    model.w1.as_mut_slice(),
                    model.b1.as_mut_slice(),
                    model.w2.as_mut_slice(),
                    model.b2.as_mut_slice(),
                ],
                &[
                    gw1.as_slice(),
                    gb1.as_slice(),
                    gw2.as_slice(),
                    gb2.as_slice(),
                ],
                cfg.lr,
            );
        }
    }
    Ok(model)
}
