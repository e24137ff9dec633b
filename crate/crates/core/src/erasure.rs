//! Linear concept erasure by orthogonal projection.
//!
//! `V∥ = im(Cov[X, Z])` (with `Z` one-hot encoded) holds every direction a
//! linear probe could use to recover `Z`. Projecting onto its orthogonal
//! complement `V⊥` yields a representation whose cross-covariance with `Z`
//! vanishes, i.e. one that linearly guards `Z`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::store::{self, EmbeddingSet, LabelVector, MatrixFile, StoreError};

pub const DEFAULT_RANK_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum ErasureError {
    #[error("need at least {needed} observations, got {got}")]
    TooFewObservations { needed: usize, got: usize },
    #[error("label index {index} out of range for k={k}")]
    LabelOutOfRange { index: usize, k: usize },
    #[error("{rows} observations but {labels} labels")]
    Misaligned { rows: usize, labels: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("rank tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("basis is not orthonormal (Gram deviation {0:e})")]
    NotOrthonormal(f64),
    #[error("basis rank {r} exceeds k-1 = {max}")]
    RankTooLarge { r: usize, max: usize },
    #[error("singular value decomposition did not converge")]
    SvdFailed,
    #[error("malformed projector metadata: {0}")]
    Meta(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

type Result<T, E = ErasureError> = std::result::Result<T, E>;

/// One-hot encoded labels, centred, times the centred data, over `N − 1`.
///
/// Rows are shifted by the first observation before centring, which leaves
/// the covariance unchanged and makes a constant `X` give an exact zero.
pub fn cross_covariance_matrix(x: &DMatrix<f64>, z: &[usize], k: usize) -> Result<DMatrix<f64>> {
    let (n, d) = x.shape();
    if n != z.len() {
        return Err(ErasureError::Misaligned {
            rows: n,
            labels: z.len(),
        });
    }
    if n < 2 {
        return Err(ErasureError::TooFewObservations { needed: 2, got: n });
    }
    if let Some(&bad) = z.iter().find(|&&v| v >= k) {
        return Err(ErasureError::LabelOutOfRange { index: bad, k });
    }
    let origin = x.row(0).transpose();
    let mut class_sums = DMatrix::<f64>::zeros(d, k);
    let mut total = DVector::<f64>::zeros(d);
    let mut counts = vec![0usize; k];
    for (i, &zi) in z.iter().enumerate() {
        let shifted = x.row(i).transpose() - &origin;
        let mut col = class_sums.column_mut(zi);
        col += &shifted;
        total += &shifted;
        counts[zi] += 1;
    }
    // Σ_i (x_i − x̄)(e_{z_i} − p)ᵀ, column j = S_j − p_j·S (the x̄ terms cancel).
    let mut out = class_sums;
    for (j, &count) in counts.iter().enumerate() {
        let p = count as f64 / n as f64;
        let mut col = out.column_mut(j);
        col -= &total * p;
    }
    Ok(out / (n - 1) as f64)
}

/// `Cov[X, Z]` for an embedding set and labels aligned by id.
pub fn compute_cross_covariance(x: &EmbeddingSet, z: &LabelVector) -> Result<DMatrix<f64>> {
    let labels = z.aligned(x.ids())?;
    cross_covariance_matrix(&x.to_matrix(), &labels, z.k())
}

/// Orthonormal basis of `V∥` and the induced projector `P = I − B Bᵀ` onto
/// `V⊥`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErasureProjector {
    basis: DMatrix<f64>,
    k: usize,
    rank_tolerance: f64,
    degenerate: bool,
}

/// `x = perp + basis · par_coords`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub perp: DVector<f64>,
    pub par_coords: DVector<f64>,
}

impl Decomposition {
    pub fn reconstruct(&self, proj: &ErasureProjector) -> DVector<f64> {
        &self.perp + &proj.basis * &self.par_coords
    }
}

impl ErasureProjector {
    /// `P = I` (nothing erased).
    pub fn identity(dim: usize, k: usize) -> Self {
        Self {
            basis: DMatrix::zeros(dim, 0),
            k,
            rank_tolerance: DEFAULT_RANK_TOLERANCE,
            degenerate: true,
        }
    }

    /// Wraps a known orthonormal basis (columns) of the erased subspace.
    pub fn from_basis(basis: DMatrix<f64>, k: usize, rank_tolerance: f64) -> Result<Self> {
        let r = basis.ncols();
        if r > k.saturating_sub(1) {
            return Err(ErasureError::RankTooLarge {
                r,
                max: k.saturating_sub(1),
            });
        }
        let gram = basis.transpose() * &basis;
        let dev = (gram - DMatrix::<f64>::identity(r, r)).amax();
        if dev > 1e-10 {
            return Err(ErasureError::NotOrthonormal(dev));
        }
        Ok(Self {
            basis,
            k,
            rank_tolerance,
            degenerate: r == 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn rank_tolerance(&self) -> f64 {
        self.rank_tolerance
    }

    /// True when `Cov[X, Z]` vanished at fit time and nothing was erased.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// d×r matrix with orthonormal columns spanning `V∥`.
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// The dense d×d projector onto `V⊥`.
    pub fn projector_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::identity(d, d) - &self.basis * self.basis.transpose()
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim() {
            return Err(ErasureError::DimensionMismatch {
                expected: self.dim(),
                got,
            });
        }
        Ok(())
    }

    pub fn decompose(&self, x: &DVector<f64>) -> Result<Decomposition> {
        self.check_dim(x.len())?;
        let par_coords = self.basis.tr_mul(x);
        let perp = x - &self.basis * &par_coords;
        Ok(Decomposition { perp, par_coords })
    }

    /// Rows of `x` (N×d) mapped through `P`.
    pub fn erase_matrix(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(x.ncols())?;
        let coords = x * &self.basis;
        Ok(x - coords * self.basis.transpose())
    }

    pub fn erase(&self, x: &EmbeddingSet) -> Result<EmbeddingSet> {
        let erased = self.erase_matrix(&x.to_matrix())?;
        Ok(EmbeddingSet::from_matrix(x.ids().to_vec(), &erased)?)
    }

    fn meta_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".meta");
        PathBuf::from(s)
    }

    /// Writes the basis (r×d, f64) to `path` and `d, k, r, rank_tolerance`
    /// to `<path>.meta`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let rows = self.basis.transpose();
        let ids = (0..self.rank()).map(|i| format!("v{i}")).collect();
        let mut file = MatrixFile::from_matrix(ids, &rows)?;
        file.cols = self.dim();
        store::write_matrix(&file, path)?;
        let mut meta = String::new();
        let _ = writeln!(meta, "d={}", self.dim());
        let _ = writeln!(meta, "k={}", self.k);
        let _ = writeln!(meta, "r={}", self.rank());
        let _ = writeln!(meta, "rank_tolerance={}", self.rank_tolerance);
        let _ = writeln!(meta, "degenerate={}", self.degenerate);
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
                .ok_or_else(|| ErasureError::Meta(format!("missing {key}")))
        };
        let parse_usize = |key: &str| -> Result<usize> {
            field(key)?
                .parse()
                .map_err(|_| ErasureError::Meta(format!("invalid {key}")))
        };
        let d = parse_usize("d")?;
        let k = parse_usize("k")?;
        let r = parse_usize("r")?;
        let tol: f64 = field("rank_tolerance")?
            .parse()
            .map_err(|_| ErasureError::Meta("invalid rank_tolerance".into()))?;
        let degenerate = field("degenerate")? == "true";
        if file.ids.len() != r || (r > 0 && file.cols != d) {
            return Err(ErasureError::Meta(format!(
                "container holds {}×{}, metadata says {r}×{d}",
                file.ids.len(),
                file.cols
            )));
        }
        let basis = if r == 0 {
            DMatrix::zeros(d, 0)
        } else {
            file.to_matrix().transpose()
        };
        let mut proj = Self::from_basis(basis, k, tol)?;
        proj.degenerate = degenerate;
        Ok(proj)
    }
}

/// Left singular vectors and singular values of a tall matrix. nalgebra's
/// SVD loses accuracy on rank-deficient input (and a centred one-hot
/// cross-covariance always is), so this goes through faer.
fn thin_svd_left(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let m = faer::Mat::<f64>::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)]);
    let svd = m.thin_svd().map_err(|_| ErasureError::SvdFailed)?;
    let (u, s) = (svd.U(), svd.S().column_vector());
    Ok((
        DMatrix::from_fn(u.nrows(), u.ncols(), |i, j| u[(i, j)]),
        DVector::from_fn(s.nrows(), |i, _| s[i]),
    ))
}

/// Fits the projector from aligned data. Singular directions of the
/// cross-covariance with `σ > rank_tolerance · σ_max` form the erased basis.
pub fn fit_projector_matrix(
    x: &DMatrix<f64>,
    z: &[usize],
    k: usize,
    rank_tolerance: f64,
) -> Result<ErasureProjector> {
    if !(rank_tolerance > 0.0) {
        return Err(ErasureError::BadTolerance(rank_tolerance));
    }
    let n = x.nrows();
    if n < k.max(2) {
        return Err(ErasureError::TooFewObservations {
            needed: k.max(2),
            got: n,
        });
    }
    let sigma = cross_covariance_matrix(x, z, k)?;
    let d = x.ncols();
    let (u, values) = thin_svd_left(&sigma)?;
    let values = &values;
    let sigma_max = values.iter().copied().fold(0.0f64, f64::max);
    if sigma_max == 0.0 {
        log::warn!("cross-covariance is zero; erasure projector is the identity");
        return Ok(ErasureProjector::identity(d, k));
    }
    let mut order: Vec<usize> = (0..values.len())
        .filter(|&i| values[i] > rank_tolerance * sigma_max)
        .collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let max_rank = k.saturating_sub(1).min(d);
    if order.len() > max_rank {
        log::warn!(
            "{} singular values above tolerance, keeping the top {max_rank}",
            order.len()
        );
        order.truncate(max_rank);
    }
    let r = order.len();
    let mut basis = DMatrix::<f64>::zeros(d, r);
    for (j, &i) in order.iter().enumerate() {
        basis.set_column(j, &u.column(i));
    }
    // Re-orthonormalise (modified Gram-Schmidt, two passes) so the Gram
    // matrix is the identity to working precision.
    for _ in 0..2 {
        for j in 0..r {
            for i in 0..j {
                let dot = basis.column(i).dot(&basis.column(j));
                let ci = basis.column(i).clone_owned();
                basis.column_mut(j).axpy(-dot, &ci, 1.0);
            }
            let norm = basis.column(j).norm();
            basis.column_mut(j).unscale_mut(norm);
        }
    }
    Ok(ErasureProjector {
        basis,
        k,
        rank_tolerance,
        degenerate: false,
    })
}

pub fn fit_projector(
    x: &EmbeddingSet,
    z: &LabelVector,
    rank_tolerance: f64,
) -> Result<ErasureProjector> {
    let labels = z.aligned(x.ids())?;
    fit_projector_matrix(&x.to_matrix(), &labels, z.k(), rank_tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Literal definition: (1/(N−1)) Σᵢ (xᵢ − x̄)(zᵢ − z̄)ᵀ with one-hot z.
    fn naive_cross_cov(x: &[Vec<f64>], z: &[usize], k: usize) -> Vec<Vec<f64>> {
        let n = x.len();
        let d = x[0].len();
        let mut xbar = vec![0.0; d];
        for row in x {
            for j in 0..d {
                xbar[j] += row[j] / n as f64;
            }
        }
        let mut zbar = vec![0.0; k];
        for &zi in z {
            zbar[zi] += 1.0 / n as f64;
        }
        let mut out = vec![vec![0.0; k]; d];
        for i in 0..n {
            for a in 0..d {
                for b in 0..k {
                    let onehot = if z[i] == b { 1.0 } else { 0.0 };
                    out[a][b] += (x[i][a] - xbar[a]) * (onehot - zbar[b]) / (n - 1) as f64;
                }
            }
        }
        out
    }

    fn gaussian_classes(n: usize, means: &[Vec<f64>], seed: u64) -> (DMatrix<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = means[0].len();
        let k = means.len();
        let z: Vec<usize> = (0..n).map(|i| i % k).collect();
        let x = DMatrix::from_fn(n, d, |i, j| {
            let e: f64 = StandardNormal.sample(&mut rng);
            means[z[i]][j] + e
        });
        (x, z)
    }

    #[test]
    fn constant_x_gives_zero_matrix_and_identity_projector() {
        let x = DMatrix::from_element(6, 3, 0.1);
        let z = vec![0, 1, 0, 1, 1, 0];
        assert_eq!(
            cross_covariance_matrix(&x, &z, 2).unwrap(),
            DMatrix::zeros(3, 2)
        );
        let p = fit_projector_matrix(&x, &z, 2, DEFAULT_RANK_TOLERANCE).unwrap();
        assert_eq!(p.rank(), 0);
        assert!(p.is_degenerate());
        assert_eq!(p.projector_matrix(), DMatrix::identity(3, 3));
    }

    #[test]
    fn toy_matches_literal_definition() {
        let rows = vec![
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, -1.0],
        ];
        let z = vec![0, 0, 1, 1];
        let x = DMatrix::from_fn(4, 2, |i, j| rows[i][j]);
        let got = cross_covariance_matrix(&x, &z, 2).unwrap();
        let want = naive_cross_cov(&rows, &z, 2);
        for a in 0..2 {
            for b in 0..2 {
                assert!((got[(a, b)] - want[a][b]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn random_instances_match_literal_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..20 {
            let (n, d, k) = (5 + trial, 4, 3);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect();
            let z: Vec<usize> = (0..n).map(|i| (i * 7 + trial) % k).collect();
            let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
            let got = cross_covariance_matrix(&x, &z, k).unwrap();
            let want = naive_cross_cov(&rows, &z, k);
            for a in 0..d {
                for b in 0..k {
                    assert!((got[(a, b)] - want[a][b]).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn too_few_rows_is_an_error() {
        let x = DMatrix::from_element(1, 3, 1.0);
        assert!(matches!(
            cross_covariance_matrix(&x, &[0], 2),
            Err(ErasureError::TooFewObservations { .. })
        ));
    }

    #[test]
    fn two_class_axis_is_recovered() {
        let (x, z) = gaussian_classes(10_000, &[vec![1.0, 0.0], vec![-1.0, 0.0]], 11);
        let p = fit_projector_matrix(&x, &z, 2, DEFAULT_RANK_TOLERANCE).unwrap();
        assert_eq!(p.rank(), 1);
        assert!(p.basis()[(0, 0)].abs() > 0.99);
        let erased = p
            .erase_matrix(&DMatrix::from_row_slice(1, 2, &[3.0, 0.0]))
            .unwrap();
        assert!(erased[(0, 0)].abs() < 0.5);
    }

    #[test]
    fn three_classes_give_rank_two() {
        let mut means = vec![vec![0.0; 10]; 3];
        means[0][0] = 5.0;
        means[1][1] = 5.0;
        means[2][2] = 5.0;
        let (x, z) = gaussian_classes(3000, &means, 5);
        let p = fit_projector_matrix(&x, &z, 3, DEFAULT_RANK_TOLERANCE).unwrap();
        assert_eq!(p.rank(), 2);
        let gram = p.basis().transpose() * p.basis();
        assert!((gram - DMatrix::<f64>::identity(2, 2)).amax() < 1e-10);
        let pm = p.projector_matrix();
        assert!((&pm * &pm - &pm).amax() < 1e-8);
        assert_eq!(pm, pm.transpose());
    }

    #[test]
    fn erasure_nullifies_cross_covariance_and_is_idempotent() {
        let mut means = vec![vec![0.0; 6]; 3];
        means[0][0] = 2.0;
        means[1][3] = -1.5;
        let (x, z) = gaussian_classes(900, &means, 8);
        let before = cross_covariance_matrix(&x, &z, 3).unwrap().norm();
        let p = fit_projector_matrix(&x, &z, 3, DEFAULT_RANK_TOLERANCE).unwrap();
        let once = p.erase_matrix(&x).unwrap();
        let after = cross_covariance_matrix(&once, &z, 3).unwrap().norm();
        assert!(after <= 1e-6 * before, "{after} vs {before}");
        let twice = p.erase_matrix(&once).unwrap();
        assert!((twice - &once).amax() < 1e-6);
    }

    #[test]
    fn identity_projector_decomposition() {
        let p = ErasureProjector::identity(3, 2);
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let dec = p.decompose(&x).unwrap();
        assert_eq!(dec.perp, x);
        assert_eq!(dec.par_coords.len(), 0);
    }

    #[test]
    fn pure_parallel_vector() {
        let basis = DMatrix::from_column_slice(3, 1, &[0.6, 0.8, 0.0]);
        let p = ErasureProjector::from_basis(basis.clone(), 2, 1e-8).unwrap();
        let x = &basis * DVector::from_vec(vec![2.5]);
        let dec = p.decompose(&x).unwrap();
        assert!(dec.perp.amax() < 1e-12);
        assert!((dec.par_coords[0] - 2.5).abs() < 1e-12);
        assert!(matches!(
            p.decompose(&DVector::zeros(4)),
            Err(ErasureError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn from_basis_validates() {
        let not_unit = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        assert!(matches!(
            ErasureProjector::from_basis(not_unit, 2, 1e-8),
            Err(ErasureError::NotOrthonormal(_))
        ));
        let too_many = DMatrix::<f64>::identity(3, 2);
        assert!(matches!(
            ErasureProjector::from_basis(too_many, 2, 1e-8),
            Err(ErasureError::RankTooLarge { .. })
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let mut means = vec![vec![0.0; 5]; 3];
        means[0][1] = 3.0;
        means[2][4] = 3.0;
        let (x, z) = gaussian_classes(300, &means, 2);
        let p = fit_projector_matrix(&x, &z, 3, 1e-8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("proj.bin");
        p.save(&path).unwrap();
        assert_eq!(ErasureProjector::load(&path).unwrap(), p);

        let id = ErasureProjector::identity(4, 2);
        id.save(&path).unwrap();
        assert_eq!(ErasureProjector::load(&path).unwrap(), id);
    }

    proptest! {
        #[test]
        fn decomposition_reconstructs(seed in 0u64..1000, scale in 0.1f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 7;
            let raw = DMatrix::from_fn(d, 3, |_, _| StandardNormal.sample(&mut rng));
            let q = raw.qr().q();
            let p = ErasureProjector::from_basis(q, 4, 1e-8).unwrap();
            let x = DVector::from_fn(d, |_, _| scale * { let u: f64 = StandardNormal.sample(&mut rng); u.abs() } + 0.01);
            let dec = p.decompose(&x).unwrap();
            let back = dec.reconstruct(&p);
            prop_assert!((&back - &x).norm() / x.norm() <= 1e-6);
            let leak = p.basis().tr_mul(&dec.perp);
            prop_assert!(leak.amax() <= 1e-8);
        }

        #[test]
        fn cross_covariance_columns_sum_to_zero(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, d, k) = (30, 5, 4);
            let x = DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng));
            let z: Vec<usize> = (0..n).map(|i| (i * 31 + seed as usize) % k).collect();
            let s = cross_covariance_matrix(&x, &z, k).unwrap();
            for a in 0..d {
                prop_assert!(s.row(a).sum().abs() <= 1e-10);
            }
        }
    }
}
