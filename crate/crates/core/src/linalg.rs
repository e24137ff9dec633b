//! Small numeric helpers shared across modules.

use nalgebra::{DMatrix, SymmetricEigen};

/// Pairwise (tree) summation. The reduction order depends only on the
/// length of the slice, so results are reproducible across runs.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 8;
    if values.len() <= LEAF {
        let mut s = 0.0;
        for &v in values {
            s += v;
        }
        return s;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Mean via [`pairwise_sum`]; `None` for an empty slice.
pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(pairwise_sum(values) / values.len() as f64)
    }
}

/// Standard error of the mean (sample standard deviation / √n).
pub fn std_error(values: &[f64]) -> Option<f64> {
    let n = values.len();
    if n < 2 {
        return None;
    }
    let m = mean(values)?;
    let sq: Vec<f64> = values.iter().map(|v| (v - m) * (v - m)).collect();
    Some((pairwise_sum(&sq) / (n - 1) as f64).sqrt() / (n as f64).sqrt())
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    if x.len() < 2 {
        return None;
    }
    let (mx, my) = (mean(x)?, mean(y)?);
    let dx: Vec<f64> = x.iter().map(|v| v - mx).collect();
    let dy: Vec<f64> = y.iter().map(|v| v - my).collect();
    let sxy = pairwise_sum(&dx.iter().zip(&dy).map(|(a, b)| a * b).collect::<Vec<_>>());
    let sxx = pairwise_sum(&dx.iter().map(|a| a * a).collect::<Vec<_>>());
    let syy = pairwise_sum(&dy.iter().map(|b| b * b).collect::<Vec<_>>());
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Least-squares slope of `y` on `x` (with intercept); `None` when `x` is
/// constant.
pub fn ols_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    if x.len() < 2 {
        return None;
    }
    let (mx, my) = (mean(x)?, mean(y)?);
    let sxy = pairwise_sum(
        &x.iter()
            .zip(y)
            .map(|(a, b)| (a - mx) * (b - my))
            .collect::<Vec<_>>(),
    );
    let sxx = pairwise_sum(&x.iter().map(|a| (a - mx) * (a - mx)).collect::<Vec<_>>());
    if sxx <= 0.0 {
        return None;
    }
    Some(sxy / sxx)
}

/// Returns `L` with `L Lᵀ = A` for a symmetric PSD matrix `A`, built from the
/// eigendecomposition so that singular (even zero) matrices are accepted.
/// Fails with the most negative eigenvalue if `A` is not PSD within
/// `1e-10 · max(1, ‖A‖)`.
pub fn psd_factor(a: &DMatrix<f64>) -> Result<DMatrix<f64>, f64> {
    let n = a.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let min = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if min < -1e-10 * scale {
        return Err(min);
    }
    let mut l = eig.eigenvectors.clone();
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        l.column_mut(j).scale_mut(s);
    }
    Ok(l)
}

/// Moore-Penrose inverse of a symmetric matrix; eigenvalues with
/// `|λ| ≤ rel_cut · max|λ|` are treated as zero.
pub fn symmetric_pinv(a: &DMatrix<f64>, rel_cut: f64) -> DMatrix<f64> {
    let n = a.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = SymmetricEigen::new((a + a.transpose()) * 0.5);
    let top = eig.eigenvalues.amax();
    let mut scaled = eig.eigenvectors.clone();
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let inv = if lambda.abs() > rel_cut * top {
            1.0 / lambda
        } else {
            0.0
        };
        scaled.column_mut(j).scale_mut(inv);
    }
    scaled * eig.eigenvectors.transpose()
}
