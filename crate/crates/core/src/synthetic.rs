//! Seeded fixtures: random Gaussian SCMs (optionally rotated so the guarded
//! subspace is not axis-aligned), labels with a tunable dependence on the
//! concept, and a plain Gaussian mixture for guardedness checks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scm::{GaussianScm, ParBlock, ScmError, ScmSample};

type Result<T> = std::result::Result<T, ScmError>;

#[derive(Debug, Clone, PartialEq)]
pub struct ScmFixtureConfig {
    /// Guarded (perp) dimension.
    pub p: usize,
    /// Parallel dimension.
    pub r: usize,
    pub k: usize,
    pub seed: u64,
    /// Scale of the per-value parallel means.
    pub mean_scale: f64,
    /// Standard deviation of the parallel noise around the regression.
    pub par_noise: f64,
    /// Ratio of largest to smallest eigenvalue of the perp covariance.
    pub perp_condition: f64,
    /// Apply a random orthogonal change of basis to the observed vectors.
    pub rotate: bool,
}

impl Default for ScmFixtureConfig {
    fn default() -> Self {
        Self {
            p: 32,
            r: 2,
            k: 3,
            seed: 0,
            mean_scale: 3.0,
            par_noise: 0.1,
            perp_condition: 10.0,
            rotate: true,
        }
    }
}

fn normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Haar-ish random orthogonal matrix: Q from the QR of a Gaussian matrix
/// with the column signs fixed by diag(R).
pub fn random_orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DMatrix<f64> {
    let qr = normal_matrix(d, d, rng).qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Per-value parallel means. With `r ≥ k − 1` they are the vertices of a
/// regular simplex with edge `scale·√2`, randomly oriented, so every
/// direction of the mean spread is equally strong; otherwise Gaussian.
fn simplex_means<R: Rng + ?Sized>(
    r: usize,
    k: usize,
    scale: f64,
    rng: &mut R,
) -> Vec<DVector<f64>> {
    if r + 1 < k {
        return (0..k)
            .map(|_| DVector::from_fn(r, |_, _| scale * rng.sample::<f64, _>(StandardNormal)))
            .collect();
    }
    // e_z − 1/k lives in the (k−1)-dim subspace orthogonal to the ones vector
    let centred = DMatrix::from_fn(k, k, |i, j| f64::from(u8::from(i == j)) - 1.0 / k as f64);
    let eig = centred.symmetric_eigen();
    let keep: Vec<usize> = (0..k).filter(|&i| eig.eigenvalues[i] > 0.5).collect();
    let basis = eig.eigenvectors.select_columns(&keep);
    let embed = random_orthogonal(r, rng).columns(0, k - 1).clone_owned();
    (0..k)
        .map(|z| &embed * (basis.row(z).transpose() * scale))
        .collect()
}

/// An SCM plus the rotation mapping its `(perp ⊕ par)` coordinates to the
/// observed space: `x_obs = Q x`.
#[derive(Debug, Clone)]
pub struct ScmFixture {
    pub scm: GaussianScm,
    pub rotation: DMatrix<f64>,
}

/// Observed draws from a fixture.
#[derive(Debug, Clone)]
pub struct ScmData {
    pub sample: ScmSample,
    /// n×d rows in the observed basis.
    pub x: DMatrix<f64>,
}

impl ScmData {
    pub fn z(&self) -> &[usize] {
        &self.sample.z
    }

    pub fn len(&self) -> usize {
        self.sample.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample.is_empty()
    }
}

impl ScmFixture {
    pub fn new(cfg: &ScmFixtureConfig) -> Result<Self> {
        let (p, r, k) = (cfg.p, cfg.r, cfg.k);
        if p == 0 || r == 0 || k < 2 || !(cfg.perp_condition >= 1.0) || !(cfg.par_noise > 0.0) {
            return Err(ScmError::Dimension(format!(
                "bad fixture config p={p} r={r} k={k} condition={} noise={}",
                cfg.perp_condition, cfg.par_noise
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mu_perp = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        // eigenvalues log-spaced from 1 down to 1/condition
        let spectrum = DVector::from_fn(p, |i, _| {
            let t = if p == 1 {
                0.0
            } else {
                i as f64 / (p - 1) as f64
            };
            cfg.perp_condition.powf(-t)
        });
        let u = random_orthogonal(p, &mut rng);
        let sigma_perp = &u * DMatrix::from_diagonal(&spectrum) * u.transpose();
        let sigma_perp = (&sigma_perp + sigma_perp.transpose()) * 0.5;
        let noise_cov = DMatrix::<f64>::identity(r, r) * cfg.par_noise.powi(2);
        let means = simplex_means(r, k, cfg.mean_scale, &mut rng);
        let blocks = means
            .into_iter()
            .map(|mu_par| {
                let w = normal_matrix(r, p, &mut rng) / (p as f64).sqrt();
                let cross_cov = &sigma_perp * w.transpose();
                let sigma_par = &w * &cross_cov + &noise_cov;
                ParBlock {
                    mu_par,
                    cross_cov,
                    sigma_par: (&sigma_par + sigma_par.transpose()) * 0.5,
                }
            })
            .collect();
        let rotation = if cfg.rotate {
            random_orthogonal(p + r, &mut rng)
        } else {
            DMatrix::identity(p + r, p + r)
        };
        Ok(Self {
            scm: GaussianScm::new(mu_perp, sigma_perp, blocks)?,
            rotation,
        })
    }

    pub fn dim(&self) -> usize {
        self.scm.dim()
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<ScmData> {
        let sample = self.scm.sample(n, rng)?;
        let x = &sample.x * self.rotation.transpose();
        Ok(ScmData { sample, x })
    }

    fn perp_of(&self, data: &ScmData, i: usize) -> DVector<f64> {
        let p = self.scm.perp_dim();
        data.sample.x.row(i).columns(0, p).transpose()
    }

    /// Conditional-mean counterfactual of row `i`, in the observed basis.
    pub fn true_counterfactual(
        &self,
        data: &ScmData,
        i: usize,
        z_target: usize,
    ) -> Result<DVector<f64>> {
        Ok(&self.rotation
            * self
                .scm
                .true_counterfactual(&self.perp_of(data, i), z_target)?)
    }

    /// Counterfactual of row `i` realised with the row's unused noise draw
    /// for `z_target`; for `z_target = z_i` this reproduces the row.
    pub fn reference_counterfactual(
        &self,
        data: &ScmData,
        i: usize,
        z_target: usize,
    ) -> Result<DVector<f64>> {
        if z_target >= self.scm.k() {
            return Err(ScmError::TargetOutOfRange {
                target: z_target,
                k: self.scm.k(),
            });
        }
        let noise = data.sample.par_noise(i, z_target);
        Ok(&self.rotation
            * self
                .scm
                .counterfactual_realization(&self.perp_of(data, i), z_target, &noise)?)
    }

    /// Binary labels `y = 1[wᵀ(x⊥ − μ⊥) + γ·s(z) + ε > 0]` with `s` spread
    /// linearly from −1 (z = 0) to +1 (z = k−1) and `ε ~ N(0, noise²)`.
    /// `w` is drawn from `label_seed`, so the same direction can be reused
    /// with different `gamma`.
    pub fn labels<R: Rng + ?Sized>(
        &self,
        data: &ScmData,
        gamma: f64,
        noise: f64,
        label_seed: u64,
        rng: &mut R,
    ) -> Vec<usize> {
        let p = self.scm.perp_dim();
        let k = self.scm.k();
        let mut wrng = ChaCha8Rng::seed_from_u64(label_seed);
        let w = normal_matrix(p, 1, &mut wrng).column(0).normalize();
        (0..data.len())
            .map(|i| {
                let centered = self.perp_of(data, i) - self.scm.mu_perp();
                let s = 2.0 * data.z()[i] as f64 / (k - 1) as f64 - 1.0;
                let eps = noise * rng.sample::<f64, _>(StandardNormal);
                usize::from(w.dot(&centered) + gamma * s + eps > 0.0)
            })
            .collect()
    }
}

/// `k` Gaussian classes with a shared random covariance and means
/// `separation · m_z` for random unit vectors `m_z`; labels are uniform.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    means: Vec<DVector<f64>>,
    factor: DMatrix<f64>,
}

impl GaussianMixture {
    pub fn new(d: usize, k: usize, separation: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let means = (0..k)
            .map(|_| normal_matrix(d, 1, &mut rng).column(0).normalize() * separation)
            .collect();
        let a = normal_matrix(d, d, &mut rng) / (d as f64).sqrt();
        let factor = (a + DMatrix::identity(d, d)) * 0.5;
        Self { means, factor }
    }

    pub fn k(&self) -> usize {
        self.means.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (DMatrix<f64>, Vec<usize>) {
        let d = self.factor.nrows();
        let mut x = DMatrix::zeros(n, d);
        let mut z = Vec::with_capacity(n);
        for i in 0..n {
            let zi = rng.random_range(0..self.k());
            let u = normal_matrix(d, 1, rng);
            let row = &self.means[zi] + &self.factor * u.column(0);
            x.row_mut(i).copy_from(&row.transpose());
            z.push(zi);
        }
        (x, z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = random_orthogonal(10, &mut rng);
        assert!((q.transpose() * &q - DMatrix::identity(10, 10)).amax() < 1e-12);
    }

    #[test]
    fn fixture_matches_its_scm() {
        let fx = ScmFixture::new(&ScmFixtureConfig::default()).unwrap();
        assert_eq!(fx.dim(), 34);
        let eig = fx.scm.sigma_perp().clone().symmetric_eigen().eigenvalues;
        let cond = eig.max() / eig.min();
        assert!((cond - 10.0).abs() < 1e-6, "{cond}");
        for z in 0..3 {
            let c = fx.scm.conditional_covariance(z);
            assert!((c - DMatrix::identity(2, 2) * 0.01).amax() < 1e-9);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = fx.sample(50, &mut rng).unwrap();
        for i in 0..50 {
            let same = fx.reference_counterfactual(&data, i, data.z()[i]).unwrap();
            assert!((same - data.x.row(i).transpose()).amax() < 1e-10);
        }
    }

    #[test]
    fn labels_follow_gamma() {
        let fx = ScmFixture::new(&ScmFixtureConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = fx.sample(3000, &mut rng).unwrap();
        let rate = |y: &[usize], zv: usize| {
            let idx: Vec<usize> = (0..y.len()).filter(|&i| data.z()[i] == zv).collect();
            idx.iter().map(|&i| y[i] as f64).sum::<f64>() / idx.len() as f64
        };
        let biased = fx.labels(&data, 2.0, 0.5, 9, &mut rng);
        assert!(rate(&biased, 2) - rate(&biased, 0) > 0.6);
        let balanced = fx.labels(&data, 0.0, 0.5, 9, &mut rng);
        assert!((rate(&balanced, 2) - rate(&balanced, 0)).abs() < 0.1);
    }

    #[test]
    fn simplex_means_are_equidistant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (r, k) in [(2, 3), (3, 3), (4, 5)] {
            let m = simplex_means(r, k, 3.0, &mut rng);
            let centre: DVector<f64> = m.iter().sum::<DVector<f64>>() / k as f64;
            assert!(centre.amax() < 1e-12);
            for a in 0..k {
                for b in a + 1..k {
                    assert!(((&m[a] - &m[b]).norm() - 3.0 * 2f64.sqrt()).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn mixture_is_seeded() {
        let m = GaussianMixture::new(8, 3, 2.0, 4);
        let a = m.sample(20, &mut ChaCha8Rng::seed_from_u64(5));
        let b = m.sample(20, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }
}
