//! Per-value regressions of `x∥` on `x⊥` and counterfactual construction.
//!
//! For each concept value `z`, a ridge regression maps the ambient perp
//! vector to the `r` parallel coordinates. A counterfactual keeps `x⊥` and
//! replaces the parallel coordinates by `W(z)·x⊥ + b(z)`, optionally adding
//! a draw from the class residual covariance.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::erasure::{Decomposition, ErasureError, ErasureProjector};
use crate::linalg::psd_factor;
use crate::store::{self, EmbeddingSet, LabelVector, MatrixFile, StoreError};

/// Ridge added to the diagonal of every residual covariance.
pub const RESIDUAL_RIDGE: f64 = 1e-9;

/// Relative eigenvalue cut of the Gram matrix used for the unregularized fit.
const GRAM_RANK_CUT: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CfrError {
    #[error("concept value {0} has no training samples")]
    EmptyClass(usize),
    #[error("concept value {z} has {got} samples, need at least {needed}")]
    TooFewSamples { z: usize, got: usize, needed: usize },
    #[error("normal matrix for value {z} is singular at lambda=0 (rank {rank} < {needed}); use lambda > 0")]
    Singular {
        z: usize,
        rank: usize,
        needed: usize,
    },
    #[error("ridge strength must be finite and >= 0, got {0}")]
    BadLambda(f64),
    #[error("SGD diverged (non-finite loss) with lr={lr}")]
    Divergence { lr: f64 },
    #[error("invalid SGD configuration: {0}")]
    BadSgdConfig(String),
    #[error("target value {target} out of range for k={k}")]
    TargetOutOfRange { target: usize, k: usize },
    #[error("{rows} rows but {labels} labels")]
    Misaligned { rows: usize, labels: usize },
    #[error("projector has k={proj}, labels have k={labels}")]
    ConceptMismatch { proj: usize, labels: usize },
    #[error("model expects d={expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid model metadata: {0}")]
    Meta(String),
    #[error(transparent)]
    Erasure(#[from] ErasureError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

type Result<T, E = CfrError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitMethod {
    ClosedForm,
    Sgd,
}

impl FitMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            FitMethod::ClosedForm => "closed-form",
            FitMethod::Sgd => "sgd",
        }
    }
}

impl fmt::Display for FitMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FitMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "closed-form" => Ok(FitMethod::ClosedForm),
            "sgd" => Ok(FitMethod::Sgd),
            other => Err(format!("unknown fit method {other:?} (closed-form|sgd)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CfrMode {
    #[default]
    Deterministic,
    Stochastic,
}

impl FromStr for CfrMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "deterministic" => Ok(CfrMode::Deterministic),
            "stochastic" => Ok(CfrMode::Stochastic),
            other => Err(format!("unknown mode {other:?} (deterministic|stochastic)")),
        }
    }
}

/// Regression for one concept value.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRegression {
    /// r×d, applied to the ambient perp vector.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub resid_cov: DMatrix<f64>,
    pub count: usize,
    resid_factor: DMatrix<f64>,
}

impl ClassRegression {
    fn new(
        weights: DMatrix<f64>,
        bias: DVector<f64>,
        resid_cov: DMatrix<f64>,
        count: usize,
    ) -> Result<Self> {
        let resid_factor = psd_factor(&resid_cov).map_err(|m| {
            CfrError::Meta(format!(
                "residual covariance not PSD (min eigenvalue {m:e})"
            ))
        })?;
        Ok(Self {
            weights,
            bias,
            resid_cov,
            count,
            resid_factor,
        })
    }

    pub fn predict(&self, perp: &DVector<f64>) -> DVector<f64> {
        &self.weights * perp + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfrModel {
    d: usize,
    r: usize,
    lambda: f64,
    method: FitMethod,
    classes: Vec<ClassRegression>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 50,
            batch_size: 256,
            seed: 0,
        }
    }
}

impl CfrModel {
    pub fn k(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn rank(&self) -> usize {
        self.r
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn method(&self) -> FitMethod {
        self.method
    }

    pub fn class(&self, z: usize) -> &ClassRegression {
        &self.classes[z]
    }

    pub fn classes(&self) -> &[ClassRegression] {
        &self.classes
    }

    pub fn counts(&self) -> Vec<usize> {
        self.classes.iter().map(|c| c.count).collect()
    }

    fn check_target(&self, z: usize) -> Result<()> {
        if z >= self.k() {
            return Err(CfrError::TargetOutOfRange {
                target: z,
                k: self.k(),
            });
        }
        Ok(())
    }

    fn meta_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".meta");
        PathBuf::from(s)
    }

    /// One f64 container with `k·r` rows `[W row | b_j | resid_cov row]`
    /// (ids `z<value>.<j>`), and `<path>.meta` with the shapes and fit
    /// metadata.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (d, r) = (self.d, self.r);
        let cols = d + 1 + r;
        let mut ids = Vec::with_capacity(self.k() * r);
        let mut values = Vec::with_capacity(self.k() * r * cols);
        for (z, c) in self.classes.iter().enumerate() {
            for j in 0..r {
                ids.push(format!("z{z}.{j}"));
                values.extend(c.weights.row(j).iter());
                values.push(c.bias[j]);
                values.extend(c.resid_cov.row(j).iter());
            }
        }
        store::write_matrix(&MatrixFile { ids, cols, values }, path)?;
        let mut meta = String::new();
        let _ = writeln!(meta, "k={}", self.k());
        let _ = writeln!(meta, "r={r}");
        let _ = writeln!(meta, "d={d}");
        let _ = writeln!(meta, "lambda={}", self.lambda);
        let _ = writeln!(meta, "method={}", self.method);
        let counts: Vec<String> = self.classes.iter().map(|c| c.count.to_string()).collect();
        let _ = writeln!(meta, "counts={}", counts.join(","));
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
                .ok_or_else(|| CfrError::Meta(format!("missing {key}")))
        };
        let num = |key: &str| -> Result<usize> {
            field(key)?
                .parse()
                .map_err(|_| CfrError::Meta(format!("invalid {key}")))
        };
        let (k, r, d) = (num("k")?, num("r")?, num("d")?);
        let lambda: f64 = field("lambda")?
            .parse()
            .map_err(|_| CfrError::Meta("invalid lambda".into()))?;
        let method: FitMethod = field("method")?.parse().map_err(CfrError::Meta)?;
        let counts: Vec<usize> = field("counts")?
            .split(',')
            .map(|s| {
                s.parse()
                    .map_err(|_| CfrError::Meta("invalid counts".into()))
            })
            .collect::<Result<_>>()?;
        let cols = d + 1 + r;
        if counts.len() != k || file.ids.len() != k * r || (k * r > 0 && file.cols != cols) {
            return Err(CfrError::Meta(format!(
                "container holds {}×{}, metadata says k={k} r={r} d={d}",
                file.ids.len(),
                file.cols
            )));
        }
        let mut classes = Vec::with_capacity(k);
        for (z, &count) in counts.iter().enumerate() {
            let mut w = DMatrix::zeros(r, d);
            let mut b = DVector::zeros(r);
            let mut cov = DMatrix::zeros(r, r);
            for j in 0..r {
                let row = &file.values[(z * r + j) * cols..(z * r + j + 1) * cols];
                for c in 0..d {
                    w[(j, c)] = row[c];
                }
                b[j] = row[d];
                for c in 0..r {
                    cov[(j, c)] = row[d + 1 + c];
                }
            }
            classes.push(ClassRegression::new(w, b, cov, count)?);
        }
        Ok(Self {
            d,
            r,
            lambda,
            method,
            classes,
        })
    }
}

struct ClassData {
    perp: DMatrix<f64>,
    par: DMatrix<f64>,
}

fn split_by_class(
    x: &DMatrix<f64>,
    z: &[usize],
    proj: &ErasureProjector,
) -> Result<Vec<ClassData>> {
    let k = proj.k();
    if x.nrows() != z.len() {
        return Err(CfrError::Misaligned {
            rows: x.nrows(),
            labels: z.len(),
        });
    }
    if x.ncols() != proj.dim() {
        return Err(CfrError::DimensionMismatch {
            expected: proj.dim(),
            got: x.ncols(),
        });
    }
    let r = proj.rank();
    let par_all = x * proj.basis();
    let perp_all = x - &par_all * proj.basis().transpose();
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &zi) in z.iter().enumerate() {
        if zi >= k {
            return Err(CfrError::TargetOutOfRange { target: zi, k });
        }
        rows[zi].push(i);
    }
    rows.iter()
        .enumerate()
        .map(|(zv, idx)| {
            if idx.is_empty() {
                return Err(CfrError::EmptyClass(zv));
            }
            if idx.len() < r + 1 {
                return Err(CfrError::TooFewSamples {
                    z: zv,
                    got: idx.len(),
                    needed: r + 1,
                });
            }
            Ok(ClassData {
                perp: perp_all.select_rows(idx),
                par: par_all.select_rows(idx),
            })
        })
        .collect()
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    m.row_mean().transpose()
}

fn center(m: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut c = m.clone();
    for mut row in c.row_iter_mut() {
        row -= mean.transpose();
    }
    c
}

fn residual_covariance(xc: &DMatrix<f64>, yc: &DMatrix<f64>, w: &DMatrix<f64>) -> DMatrix<f64> {
    let n = xc.nrows();
    let r = yc.ncols();
    let resid = yc - xc * w.transpose();
    let denom = n.saturating_sub(1).max(1) as f64;
    let mut cov = resid.tr_mul(&resid) / denom;
    cov = (&cov + cov.transpose()) * 0.5;
    if n < 3 * r {
        cov = DMatrix::from_diagonal(&cov.diagonal());
    }
    for j in 0..r {
        cov[(j, j)] += RESIDUAL_RIDGE;
    }
    cov
}

fn fit_class_closed_form(
    zv: usize,
    data: &ClassData,
    lambda: f64,
    r_par: usize,
) -> Result<ClassRegression> {
    let d = data.perp.ncols();
    let n = data.perp.nrows();
    let x_mean = column_means(&data.perp);
    let y_mean = column_means(&data.par);
    let xc = center(&data.perp, &x_mean);
    let yc = center(&data.par, &y_mean);
    let gram = xc.tr_mul(&xc);
    let rhs = xc.tr_mul(&yc);
    let eig = gram.symmetric_eigen();
    let top = eig.eigenvalues.amax();
    let mut inv = DVector::zeros(d);
    let mut rank = 0;
    for (i, &ev) in eig.eigenvalues.iter().enumerate() {
        if lambda > 0.0 {
            inv[i] = 1.0 / (ev.max(0.0) + lambda);
        } else if ev > GRAM_RANK_CUT * top && ev > 0.0 {
            inv[i] = 1.0 / ev;
            rank += 1;
        }
    }
    if lambda == 0.0 {
        // perp rows live in a (d−r)-dimensional subspace; anything less is
        // a genuinely under-determined problem
        let needed = d.saturating_sub(r_par);
        if rank < needed {
            return Err(CfrError::Singular {
                z: zv,
                rank,
                needed,
            });
        }
    }
    let v = &eig.eigenvectors;
    let wt = v * DMatrix::from_diagonal(&inv) * v.tr_mul(&rhs);
    let weights = wt.transpose();
    let bias = &y_mean - &weights * &x_mean;
    let resid_cov = residual_covariance(&xc, &yc, &weights);
    ClassRegression::new(weights, bias, resid_cov, n)
}

fn check_inputs(
    x: &EmbeddingSet,
    z: &LabelVector,
    proj: &ErasureProjector,
    lambda: f64,
) -> Result<Vec<usize>> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(CfrError::BadLambda(lambda));
    }
    if z.k() != proj.k() {
        return Err(CfrError::ConceptMismatch {
            proj: proj.k(),
            labels: z.k(),
        });
    }
    Ok(z.aligned(x.ids())?)
}

/// Closed-form ridge fit on aligned matrices.
pub fn fit_cfr_matrix(
    x: &DMatrix<f64>,
    z: &[usize],
    proj: &ErasureProjector,
    lambda: f64,
) -> Result<CfrModel> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(CfrError::BadLambda(lambda));
    }
    let data = split_by_class(x, z, proj)?;
    let r = proj.rank();
    let classes = data
        .par_iter()
        .enumerate()
        .map(|(zv, cd)| fit_class_closed_form(zv, cd, lambda, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(CfrModel {
        d: proj.dim(),
        r,
        lambda,
        method: FitMethod::ClosedForm,
        classes,
    })
}

/// Per-value ridge regressions solved through the normal equations. At
/// `lambda = 0` the minimum-norm solution is returned, provided the class
/// data spans the whole perp subspace.
pub fn fit_cfr(
    x: &EmbeddingSet,
    z: &LabelVector,
    proj: &ErasureProjector,
    lambda: f64,
) -> Result<CfrModel> {
    let labels = check_inputs(x, z, proj, lambda)?;
    fit_cfr_matrix(&x.to_matrix(), &labels, proj, lambda)
}

fn lr_factor(epoch: usize, epochs: usize) -> f64 {
    let half = epochs / 2;
    if epoch < half {
        1.0
    } else {
        let t = (epoch - half + 1) as f64 / (epochs - half) as f64;
        1.0 - 0.99 * t
    }
}

fn fit_class_sgd(
    zv: usize,
    data: &ClassData,
    lambda: f64,
    cfg: &SgdConfig,
) -> Result<ClassRegression> {
    let d = data.perp.ncols();
    let r = data.par.ncols();
    let n = data.perp.nrows();
    let x_mean = column_means(&data.perp);
    let y_mean = column_means(&data.par);
    let xc = center(&data.perp, &x_mean);
    let yc = center(&data.par, &y_mean);
    let mut w = DMatrix::<f64>::zeros(r, d);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(cfg.seed ^ (zv as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let reg = 2.0 * lambda / n as f64;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr * lr_factor(epoch, cfg.epochs);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let xb = xc.select_rows(batch);
            let yb = yc.select_rows(batch);
            let resid = &xb * w.transpose() - &yb;
            let loss = resid.norm_squared() / batch.len() as f64;
            let grad = resid.tr_mul(&xb) * (2.0 / batch.len() as f64) + &w * reg;
            w -= grad * lr;
            if !loss.is_finite() || !w.iter().all(|v| v.is_finite()) {
                return Err(CfrError::Divergence { lr: cfg.lr });
            }
        }
    }
    let bias = &y_mean - &w * &x_mean;
    let resid_cov = residual_covariance(&xc, &yc, &w);
    ClassRegression::new(w, bias, resid_cov, n)
}

/// Same objective as [`fit_cfr_matrix`], minimized by shuffled minibatch
/// SGD on class-centred data. The learning rate is constant for the first
/// half of the epochs, then decays linearly to 1% of its value.
pub fn fit_cfr_sgd_matrix(
    x: &DMatrix<f64>,
    z: &[usize],
    proj: &ErasureProjector,
    lambda: f64,
    cfg: &SgdConfig,
) -> Result<CfrModel> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(CfrError::BadLambda(lambda));
    }
    if !(cfg.lr.is_finite() && cfg.lr > 0.0) || cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(CfrError::BadSgdConfig(format!(
            "lr={}, epochs={}, batch_size={}",
            cfg.lr, cfg.epochs, cfg.batch_size
        )));
    }
    let data = split_by_class(x, z, proj)?;
    let classes = data
        .par_iter()
        .enumerate()
        .map(|(zv, cd)| fit_class_sgd(zv, cd, lambda, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(CfrModel {
        d: proj.dim(),
        r: proj.rank(),
        lambda,
        method: FitMethod::Sgd,
        classes,
    })
}

pub fn fit_cfr_sgd(
    x: &EmbeddingSet,
    z: &LabelVector,
    proj: &ErasureProjector,
    lambda: f64,
    cfg: &SgdConfig,
) -> Result<CfrModel> {
    let labels = check_inputs(x, z, proj, lambda)?;
    fit_cfr_sgd_matrix(&x.to_matrix(), &labels, proj, lambda, cfg)
}

/// Counterfactual in decomposed form; `perp` is the input's perp part,
/// untouched.
pub fn counterfactual_parts<R: Rng + ?Sized>(
    model: &CfrModel,
    proj: &ErasureProjector,
    x: &DVector<f64>,
    z_target: usize,
    mode: CfrMode,
    rng: &mut R,
) -> Result<Decomposition> {
    model.check_target(z_target)?;
    if x.len() != model.d {
        return Err(CfrError::DimensionMismatch {
            expected: model.d,
            got: x.len(),
        });
    }
    let dec = proj.decompose(x)?;
    let class = &model.classes[z_target];
    let mut par = class.predict(&dec.perp);
    if mode == CfrMode::Stochastic && model.r > 0 {
        let u = DVector::from_fn(model.r, |_, _| rng.sample::<f64, _>(StandardNormal));
        par += &class.resid_factor * u;
    }
    Ok(Decomposition {
        perp: dec.perp,
        par_coords: par,
    })
}

/// `X_{Z←z_target}` in ambient coordinates.
pub fn counterfactual<R: Rng + ?Sized>(
    model: &CfrModel,
    proj: &ErasureProjector,
    x: &DVector<f64>,
    z_target: usize,
    mode: CfrMode,
    rng: &mut R,
) -> Result<DVector<f64>> {
    Ok(counterfactual_parts(model, proj, x, z_target, mode, rng)?.reconstruct(proj))
}

/// Row-wise counterfactuals of an N×d matrix. Stochastic draws are taken
/// in row order.
pub fn counterfactual_matrix<R: Rng + ?Sized>(
    model: &CfrModel,
    proj: &ErasureProjector,
    x: &DMatrix<f64>,
    targets: &[usize],
    mode: CfrMode,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if x.nrows() != targets.len() {
        return Err(CfrError::Misaligned {
            rows: x.nrows(),
            labels: targets.len(),
        });
    }
    let mut out = DMatrix::zeros(x.nrows(), x.ncols());
    for (i, &t) in targets.iter().enumerate() {
        let cf = counterfactual(model, proj, &x.row(i).transpose(), t, mode, rng)?;
        out.row_mut(i).copy_from(&cf.transpose());
    }
    Ok(out)
}

/// Binary-setting convention for the "Unknown" value: the perp part alone.
pub fn counterfactual_unknown(proj: &ErasureProjector, x: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(proj.decompose(x)?.perp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::erasure::fit_projector_matrix;
    use crate::scm::{GaussianScm, ParBlock};

    fn axis_projector(d: usize, axes: &[usize], k: usize) -> ErasureProjector {
        let mut b = DMatrix::zeros(d, axes.len());
        for (j, &a) in axes.iter().enumerate() {
            b[(a, j)] = 1.0;
        }
        ErasureProjector::from_basis(b, k, 1e-8).unwrap()
    }

    /// Rows whose last coordinate is an exact affine function of the others.
    fn affine_data(n: usize, seed: u64) -> (DMatrix<f64>, Vec<usize>, Vec<(DVector<f64>, f64)>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4;
        let maps = vec![
            (DVector::from_vec(vec![0.5, -1.0, 2.0, 0.0]), 3.0),
            (DVector::from_vec(vec![-0.25, 0.75, 0.0, 0.0]), -1.0),
        ];
        let mut x = DMatrix::zeros(n, d);
        let mut z = Vec::with_capacity(n);
        for i in 0..n {
            let zi = i % 2;
            for j in 0..3 {
                x[(i, j)] = rng.sample::<f64, _>(StandardNormal);
            }
            let (w, b) = &maps[zi];
            x[(i, 3)] = w.dot(&x.row(i).transpose()) + b;
            z.push(zi);
        }
        (x, z, maps)
    }

    #[test]
    fn noiseless_affine_fit_is_exact() {
        let (x, z, maps) = affine_data(200, 1);
        let proj = axis_projector(4, &[3], 2);
        let model = fit_cfr_matrix(&x, &z, &proj, 0.0).unwrap();
        for (zv, (w, b)) in maps.iter().enumerate() {
            let c = model.class(zv);
            assert!((c.weights.row(0).transpose() - w).amax() < 1e-8);
            assert!((c.bias[0] - b).abs() < 1e-8);
            assert!(c.resid_cov[(0, 0)] < 1e-8);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..x.nrows() {
            let row = x.row(i).transpose();
            let cf = counterfactual(&model, &proj, &row, z[i], CfrMode::Deterministic, &mut rng)
                .unwrap();
            assert!((cf - &row).amax() < 1e-6);
        }
    }

    #[test]
    fn huge_ridge_gives_class_means() {
        let (x, z, _) = affine_data(200, 2);
        let proj = axis_projector(4, &[3], 2);
        let model = fit_cfr_matrix(&x, &z, &proj, 1e12).unwrap();
        for zv in 0..2 {
            let idx: Vec<usize> = (0..z.len()).filter(|&i| z[i] == zv).collect();
            let mean = idx.iter().map(|&i| x[(i, 3)]).sum::<f64>() / idx.len() as f64;
            assert!(model.class(zv).weights.amax() < 1e-8);
            assert!((model.class(zv).bias[0] - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn fit_errors() {
        let (x, mut z, _) = affine_data(20, 3);
        let proj = axis_projector(4, &[3], 2);
        assert!(matches!(
            fit_cfr_matrix(&x, &z, &proj, -1.0),
            Err(CfrError::BadLambda(_))
        ));
        z.iter_mut().for_each(|v| *v = 0);
        assert!(matches!(
            fit_cfr_matrix(&x, &z, &proj, 1.0),
            Err(CfrError::EmptyClass(1))
        ));
        z[0] = 1;
        assert!(matches!(
            fit_cfr_matrix(&x, &z, &proj, 1.0),
            Err(CfrError::TooFewSamples { z: 1, .. })
        ));
        // two samples of class 1 span a single direction of a 3-dim perp space
        z[1] = 1;
        assert!(matches!(
            fit_cfr_matrix(&x, &z, &proj, 0.0),
            Err(CfrError::Singular { z: 1, .. })
        ));
        assert!(fit_cfr_matrix(&x, &z, &proj, 1e-3).is_ok());
    }

    /// Ridge solution computed naively: augmented design, explicit inverse of
    /// the regularized normal matrix with the intercept left unpenalized.
    fn naive_ridge(perp: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> (DVector<f64>, f64) {
        let (n, d) = perp.shape();
        let mut a = DMatrix::zeros(n, d + 1);
        a.view_mut((0, 0), (n, d)).copy_from(perp);
        a.column_mut(d).fill(1.0);
        let mut g = a.transpose() * &a;
        for j in 0..d {
            g[(j, j)] += lambda;
        }
        let sol = g.try_inverse().unwrap() * a.transpose() * y;
        (sol.rows(0, d).clone_owned(), sol[d])
    }

    #[test]
    fn ridge_matches_naive_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, d) = (60, 3);
        let x = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z: Vec<usize> = (0..n).map(|i| i % 2).collect();
        // r = 0: every coordinate is perp, nothing to regress onto; use a
        // projector with one direction instead
        let proj = axis_projector(d, &[2], 2);
        let model = fit_cfr_matrix(&x, &z, &proj, 0.7).unwrap();
        for zv in 0..2 {
            let idx: Vec<usize> = (0..n).filter(|&i| z[i] == zv).collect();
            let sub = x.select_rows(&idx);
            let mut perp = sub.clone();
            perp.column_mut(2).fill(0.0);
            let y = sub.column(2).clone_owned();
            // zero column makes the naive normal matrix singular without the
            // ridge on it, which is present here
            let (w, b) = naive_ridge(&perp, &y, 0.7);
            let c = model.class(zv);
            assert!((c.weights.row(0).transpose() - w).amax() < 1e-10);
            assert!((c.bias[0] - b).abs() < 1e-10);
        }
    }

    #[test]
    fn perp_is_preserved_in_every_mode() {
        let (x, z, _) = affine_data(100, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noisy = x.map(|v| v + 0.1 * rng.sample::<f64, _>(StandardNormal));
        let proj = fit_projector_matrix(&noisy, &z, 2, 1e-8).unwrap();
        let model = fit_cfr_matrix(&noisy, &z, &proj, 1e-3).unwrap();
        for mode in [CfrMode::Deterministic, CfrMode::Stochastic] {
            for i in 0..10 {
                let row = noisy.row(i).transpose();
                let parts =
                    counterfactual_parts(&model, &proj, &row, 1 - z[i], mode, &mut rng).unwrap();
                assert_eq!(parts.perp, proj.decompose(&row).unwrap().perp);
                let amb = parts.reconstruct(&proj);
                let again = proj.decompose(&amb).unwrap();
                assert!((again.perp - &parts.perp).amax() < 1e-12);
            }
        }
        assert!(matches!(
            counterfactual(
                &model,
                &proj,
                &noisy.row(0).transpose(),
                2,
                CfrMode::Deterministic,
                &mut rng
            ),
            Err(CfrError::TargetOutOfRange { .. })
        ));
    }

    #[test]
    fn unknown_is_the_projection() {
        let proj = axis_projector(3, &[1], 2);
        let x = DVector::from_vec(vec![1.0, 5.0, -2.0]);
        let u = counterfactual_unknown(&proj, &x).unwrap();
        assert_eq!(u, DVector::from_vec(vec![1.0, 0.0, -2.0]));
        assert!(u.norm() <= x.norm());
        assert_eq!(counterfactual_unknown(&proj, &u).unwrap(), u);
    }

    #[test]
    fn stochastic_mean_matches_deterministic() {
        let blocks = (0..2)
            .map(|zv| ParBlock {
                mu_par: DVector::from_vec(vec![zv as f64 * 3.0]),
                cross_cov: DMatrix::from_column_slice(2, 1, &[0.3, -0.2]),
                sigma_par: DMatrix::from_element(1, 1, 1.0),
            })
            .collect();
        let scm = GaussianScm::new(DVector::zeros(2), DMatrix::identity(2, 2), blocks).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = scm.sample(4000, &mut rng).unwrap();
        let proj = axis_projector(3, &[2], 2);
        let model = fit_cfr_matrix(&s.x, &s.z, &proj, 0.0).unwrap();
        let x = s.x.row(0).transpose();
        let det = counterfactual(&model, &proj, &x, 1, CfrMode::Deterministic, &mut rng).unwrap();
        let m = 10_000;
        let mut acc = DVector::zeros(3);
        for _ in 0..m {
            acc += counterfactual(&model, &proj, &x, 1, CfrMode::Stochastic, &mut rng).unwrap();
        }
        acc /= m as f64;
        let bound = 3.0 * (model.class(1).resid_cov.trace() / m as f64).sqrt();
        assert!((acc - det).amax() <= bound);
    }

    #[test]
    fn sgd_matches_closed_form_on_noiseless_data() {
        let (x, z, _) = affine_data(2000, 7);
        let proj = axis_projector(4, &[3], 2);
        let cf = fit_cfr_matrix(&x, &z, &proj, 1e-3).unwrap();
        let cfg = SgdConfig {
            lr: 0.05,
            epochs: 60,
            batch_size: 32,
            seed: 3,
        };
        let sgd = fit_cfr_sgd_matrix(&x, &z, &proj, 1e-3, &cfg).unwrap();
        for zv in 0..2 {
            let (a, b) = (cf.class(zv), sgd.class(zv));
            assert!((&a.weights - &b.weights).amax() < 1e-3);
            assert!((&a.bias - &b.bias).amax() < 1e-3);
        }
        let again = fit_cfr_sgd_matrix(&x, &z, &proj, 1e-3, &cfg).unwrap();
        assert_eq!(sgd, again);
    }

    #[test]
    fn sgd_divergence_names_lr() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = DMatrix::from_fn(300, 5, |_, _| rng.sample::<f64, _>(StandardNormal) * 3.0);
        let z: Vec<usize> = (0..300).map(|i| i % 2).collect();
        let proj = fit_projector_matrix(&x, &z, 2, 1e-8).unwrap();
        let cfg = SgdConfig {
            lr: 1e3,
            ..SgdConfig::default()
        };
        let err = fit_cfr_sgd_matrix(&x, &z, &proj, 0.0, &cfg).unwrap_err();
        assert!(matches!(err, CfrError::Divergence { lr } if lr == 1e3));
        assert!(err.to_string().contains("lr=1000"));
    }

    #[test]
    fn save_load_round_trip() {
        let (x, z, _) = affine_data(100, 9);
        let proj = axis_projector(4, &[3], 2);
        let model = fit_cfr_matrix(&x, &z, &proj, 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfr.bin");
        model.save(&path).unwrap();
        assert_eq!(CfrModel::load(&path).unwrap(), model);

        let degenerate = fit_cfr_matrix(&x, &z, &ErasureProjector::identity(4, 2), 0.5).unwrap();
        degenerate.save(&path).unwrap();
        assert_eq!(CfrModel::load(&path).unwrap(), degenerate);
    }
}
