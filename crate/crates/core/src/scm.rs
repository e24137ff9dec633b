//! Gaussian structural causal model over `(Z, X⊥, X∥)`.
//!
//! `Z` is uniform over `k` values, `X⊥ ~ N(μ⊥, Σ⊥⊥)` does not depend on `Z`,
//! and `X∥ | X⊥, Z=z` is linear-Gaussian. Each observation carries `k`
//! independent parallel-noise draws `U∥_1..U∥_k`, of which only the factual
//! one is consumed; the others make the counterfactual `X∥_{Z←z'}` random
//! after abduction. Conditioning formulas give the ground-truth
//! counterfactual mean that fitted CFRs are checked against.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::linalg::{psd_factor, symmetric_pinv};
use crate::store::{EmbeddingSet, LabelVector, StoreError};

#[derive(Debug, Error)]
pub enum ScmError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{which} is not positive semi-definite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { which: String, min_eigenvalue: f64 },
    #[error("perp covariance is singular")]
    SingularPerp,
    #[error("target value {target} out of range for k={k}")]
    TargetOutOfRange { target: usize, k: usize },
    #[error("sample size must be at least 1")]
    EmptySample,
    #[error(transparent)]
    Store(#[from] StoreError),
}

type Result<T, E = ScmError> = std::result::Result<T, E>;

/// Per-value parameters of the parallel block.
#[derive(Debug, Clone, PartialEq)]
pub struct ParBlock {
    /// `μ∥(z)`, length r.
    pub mu_par: DVector<f64>,
    /// `Σ⊥∥(z)`, p×r.
    pub cross_cov: DMatrix<f64>,
    /// `Σ∥∥(z)`, r×r.
    pub sigma_par: DMatrix<f64>,
}

#[derive(Debug, Clone)]
struct Conditional {
    weights: DMatrix<f64>,
    bias: DVector<f64>,
    cov: DMatrix<f64>,
    factor: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct GaussianScm {
    mu_perp: DVector<f64>,
    sigma_perp: DMatrix<f64>,
    blocks: Vec<ParBlock>,
    perp_factor: DMatrix<f64>,
    conditionals: Vec<Conditional>,
}

/// Draws from the SCM in `(perp ⊕ par)` coordinates.
#[derive(Debug, Clone)]
pub struct ScmSample {
    /// n×(p+r).
    pub x: DMatrix<f64>,
    pub z: Vec<usize>,
    k: usize,
    r: usize,
    /// n·k·r standard-normal parallel-noise draws, observation-major.
    par_noise: Vec<f64>,
}

impl ScmSample {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// `U∥_z` for observation `i`.
    pub fn par_noise(&self, i: usize, z: usize) -> DVector<f64> {
        let start = (i * self.k + z) * self.r;
        DVector::from_column_slice(&self.par_noise[start..start + self.r])
    }

    pub fn ids(&self, prefix: &str) -> Vec<String> {
        (0..self.len()).map(|i| format!("{prefix}{i:06}")).collect()
    }

    /// Embedding set (rounded to f32) and concept labels named `z`.
    pub fn to_dataset(&self, prefix: &str) -> Result<(EmbeddingSet, LabelVector)> {
        let ids = self.ids(prefix);
        let set = EmbeddingSet::from_matrix(ids.clone(), &self.x)?;
        let values = (0..self.k).map(|v| format!("z{v}")).collect();
        let labels = LabelVector::new("z", values, ids, self.z.clone())?;
        Ok((set, labels))
    }
}

impl GaussianScm {
    pub fn new(
        mu_perp: DVector<f64>,
        sigma_perp: DMatrix<f64>,
        blocks: Vec<ParBlock>,
    ) -> Result<Self> {
        let p = mu_perp.len();
        if sigma_perp.shape() != (p, p) {
            return Err(ScmError::Dimension(format!(
                "sigma_perp is {:?}, expected {p}×{p}",
                sigma_perp.shape()
            )));
        }
        if blocks.is_empty() {
            return Err(ScmError::Dimension(
                "need at least one concept value".into(),
            ));
        }
        let r = blocks[0].mu_par.len();
        for (z, b) in blocks.iter().enumerate() {
            if b.mu_par.len() != r || b.cross_cov.shape() != (p, r) || b.sigma_par.shape() != (r, r)
            {
                return Err(ScmError::Dimension(format!(
                    "parallel block {z} has inconsistent shapes"
                )));
            }
        }
        let perp_factor = psd_factor(&sigma_perp).map_err(|m| ScmError::NotPsd {
            which: "sigma_perp".into(),
            min_eigenvalue: m,
        })?;
        let pinv = symmetric_pinv(&sigma_perp, 1e-12);
        let mut conditionals = Vec::with_capacity(blocks.len());
        for (z, b) in blocks.iter().enumerate() {
            let joint = joint_covariance(&sigma_perp, b);
            psd_factor(&joint).map_err(|m| ScmError::NotPsd {
                which: format!("joint covariance for z={z}"),
                min_eigenvalue: m,
            })?;
            let weights = b.cross_cov.transpose() * &pinv;
            let bias = &b.mu_par - &weights * &mu_perp;
            let cov = &b.sigma_par - &weights * &b.cross_cov;
            let cov = (&cov + cov.transpose()) * 0.5;
            let factor = psd_factor(&cov).map_err(|m| ScmError::NotPsd {
                which: format!("conditional parallel covariance for z={z}"),
                min_eigenvalue: m,
            })?;
            conditionals.push(Conditional {
                weights,
                bias,
                cov,
                factor,
            });
        }
        Ok(Self {
            mu_perp,
            sigma_perp,
            blocks,
            perp_factor,
            conditionals,
        })
    }

    pub fn k(&self) -> usize {
        self.blocks.len()
    }

    pub fn perp_dim(&self) -> usize {
        self.mu_perp.len()
    }

    pub fn par_dim(&self) -> usize {
        self.blocks[0].mu_par.len()
    }

    pub fn dim(&self) -> usize {
        self.perp_dim() + self.par_dim()
    }

    pub fn mu_perp(&self) -> &DVector<f64> {
        &self.mu_perp
    }

    pub fn sigma_perp(&self) -> &DMatrix<f64> {
        &self.sigma_perp
    }

    pub fn block(&self, z: usize) -> &ParBlock {
        &self.blocks[z]
    }

    /// Class prior; always uniform.
    pub fn prior(&self) -> Vec<f64> {
        vec![1.0 / self.k() as f64; self.k()]
    }

    /// `μ(z) = [μ⊥; μ∥(z)]`.
    pub fn joint_mean(&self, z: usize) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim());
        m.rows_mut(0, self.perp_dim()).copy_from(&self.mu_perp);
        m.rows_mut(self.perp_dim(), self.par_dim())
            .copy_from(&self.blocks[z].mu_par);
        m
    }

    /// `Σ(z)` assembled from its blocks.
    pub fn joint_covariance(&self, z: usize) -> DMatrix<f64> {
        joint_covariance(&self.sigma_perp, &self.blocks[z])
    }

    /// Conditional covariance `Σ∥(z)` of `X∥` given `X⊥` and `Z = z`.
    pub fn conditional_covariance(&self, z: usize) -> &DMatrix<f64> {
        &self.conditionals[z].cov
    }

    /// Draws `n` observations. Per observation the generator is consumed as:
    /// `U_Z`, then `p` perp normals, then `k·r` parallel normals.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<ScmSample> {
        if n == 0 {
            return Err(ScmError::EmptySample);
        }
        let (p, r, k) = (self.perp_dim(), self.par_dim(), self.k());
        let mut x = DMatrix::zeros(n, p + r);
        let mut z = Vec::with_capacity(n);
        let mut par_noise = Vec::with_capacity(n * k * r);
        for i in 0..n {
            let zi = rng.random_range(0..k);
            let u_perp = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
            for _ in 0..k * r {
                par_noise.push(rng.sample::<f64, _>(StandardNormal));
            }
            let x_perp = &self.mu_perp + &self.perp_factor * u_perp;
            let start = (i * k + zi) * r;
            let u_par = DVector::from_column_slice(&par_noise[start..start + r]);
            let c = &self.conditionals[zi];
            let x_par = &c.weights * &x_perp + &c.bias + &c.factor * u_par;
            for j in 0..p {
                x[(i, j)] = x_perp[j];
            }
            for j in 0..r {
                x[(i, p + j)] = x_par[j];
            }
            z.push(zi);
        }
        Ok(ScmSample {
            x,
            z,
            k,
            r,
            par_noise,
        })
    }

    /// Regression coefficients `W(z) = Σ∥⊥(z) Σ⊥⊥⁻¹` and
    /// `b(z) = μ∥(z) − W(z) μ⊥`, computed through a Cholesky solve.
    pub fn analytic_regression(&self, z: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
        if z >= self.k() {
            return Err(ScmError::TargetOutOfRange {
                target: z,
                k: self.k(),
            });
        }
        let chol = self
            .sigma_perp
            .clone()
            .cholesky()
            .ok_or(ScmError::SingularPerp)?;
        let b = &self.blocks[z];
        let weights = chol.solve(&b.cross_cov).transpose();
        let bias = &b.mu_par - &weights * &self.mu_perp;
        Ok((weights, bias))
    }

    /// Mean of the counterfactual `X_{Z←z}` given the factual perp part,
    /// returned in `(perp ⊕ par)` coordinates: `[x⊥ ; W(z) x⊥ + b(z)]`.
    pub fn true_counterfactual(
        &self,
        x_perp: &DVector<f64>,
        z_target: usize,
    ) -> Result<DVector<f64>> {
        if x_perp.len() != self.perp_dim() {
            return Err(ScmError::Dimension(format!(
                "perp vector has length {}, expected {}",
                x_perp.len(),
                self.perp_dim()
            )));
        }
        let (w, b) = self.analytic_regression(z_target)?;
        let par = w * x_perp + b;
        let mut out = DVector::zeros(self.dim());
        out.rows_mut(0, self.perp_dim()).copy_from(x_perp);
        out.rows_mut(self.perp_dim(), self.par_dim())
            .copy_from(&par);
        Ok(out)
    }

    /// One realisation of the counterfactual: the conditional mean plus the
    /// target value's (unconsumed) noise draw.
    pub fn counterfactual_realization(
        &self,
        x_perp: &DVector<f64>,
        z_target: usize,
        par_noise: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        if z_target >= self.k() {
            return Err(ScmError::TargetOutOfRange {
                target: z_target,
                k: self.k(),
            });
        }
        let c = &self.conditionals[z_target];
        let par = &c.weights * x_perp + &c.bias + &c.factor * par_noise;
        let mut out = DVector::zeros(self.dim());
        out.rows_mut(0, self.perp_dim()).copy_from(x_perp);
        out.rows_mut(self.perp_dim(), self.par_dim())
            .copy_from(&par);
        Ok(out)
    }
}

fn joint_covariance(sigma_perp: &DMatrix<f64>, b: &ParBlock) -> DMatrix<f64> {
    let p = sigma_perp.nrows();
    let r = b.mu_par.len();
    let mut s = DMatrix::zeros(p + r, p + r);
    s.view_mut((0, 0), (p, p)).copy_from(sigma_perp);
    s.view_mut((0, p), (p, r)).copy_from(&b.cross_cov);
    s.view_mut((p, 0), (r, p))
        .copy_from(&b.cross_cov.transpose());
    s.view_mut((p, p), (r, r)).copy_from(&b.sigma_par);
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_scm(m: [f64; 2]) -> GaussianScm {
        let blocks = m
            .iter()
            .map(|&mu| ParBlock {
                mu_par: DVector::from_vec(vec![mu]),
                cross_cov: DMatrix::from_element(1, 1, 0.5),
                sigma_par: DMatrix::from_element(1, 1, 1.0),
            })
            .collect();
        GaussianScm::new(DVector::zeros(1), DMatrix::identity(1, 1), blocks).unwrap()
    }

    #[test]
    fn scalar_conditioning_formula() {
        let scm = scalar_scm([2.0, -1.0]);
        for &xp in &[-1.5, 0.0, 3.0] {
            let out = scm
                .true_counterfactual(&DVector::from_vec(vec![xp]), 0)
                .unwrap();
            assert_eq!(out[0], xp);
            assert!((out[1] - (2.0 + 0.5 * xp)).abs() < 1e-14);
        }
        assert!((scm.conditional_covariance(1)[(0, 0)] - 0.75).abs() < 1e-14);
    }

    #[test]
    fn uncorrelated_blocks_ignore_perp() {
        let blocks = vec![ParBlock {
            mu_par: DVector::from_vec(vec![4.0, 5.0]),
            cross_cov: DMatrix::zeros(3, 2),
            sigma_par: DMatrix::identity(2, 2),
        }];
        let scm = GaussianScm::new(DVector::zeros(3), DMatrix::identity(3, 3), blocks).unwrap();
        let out = scm
            .true_counterfactual(&DVector::from_vec(vec![9.0, -9.0, 1.0]), 0)
            .unwrap();
        assert_eq!(
            out.rows(3, 2).clone_owned(),
            DVector::from_vec(vec![4.0, 5.0])
        );
    }

    #[test]
    fn zero_covariances_sample_means_exactly() {
        let blocks = (0..3)
            .map(|z| ParBlock {
                mu_par: DVector::from_vec(vec![z as f64, 10.0 + z as f64]),
                cross_cov: DMatrix::zeros(2, 2),
                sigma_par: DMatrix::zeros(2, 2),
            })
            .collect();
        let scm = GaussianScm::new(
            DVector::from_vec(vec![1.0, -1.0]),
            DMatrix::zeros(2, 2),
            blocks,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = scm.sample(50, &mut rng).unwrap();
        for i in 0..50 {
            let row = s.x.row(i).transpose();
            assert_eq!(row, scm.joint_mean(s.z[i]));
        }
        // singular perp covariance: no analytic counterfactual
        assert!(matches!(
            scm.true_counterfactual(&DVector::zeros(2), 0),
            Err(ScmError::SingularPerp)
        ));
    }

    #[test]
    fn non_psd_is_rejected() {
        let blocks = vec![ParBlock {
            mu_par: DVector::zeros(1),
            cross_cov: DMatrix::from_element(1, 1, 2.0),
            sigma_par: DMatrix::from_element(1, 1, 1.0),
        }];
        assert!(matches!(
            GaussianScm::new(DVector::zeros(1), DMatrix::identity(1, 1), blocks),
            Err(ScmError::NotPsd { .. })
        ));
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let scm = scalar_scm([1.0, 2.0]);
        let a = scm.sample(100, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = scm.sample(100, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.z, b.z);
        assert!(scm.sample(0, &mut ChaCha8Rng::seed_from_u64(9)).is_err());
    }

    #[test]
    fn factual_realization_reproduces_the_sample() {
        let scm = scalar_scm([1.0, -2.0]);
        let s = scm.sample(20, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        for i in 0..20 {
            let xp = DVector::from_vec(vec![s.x[(i, 0)]]);
            let again = scm
                .counterfactual_realization(&xp, s.z[i], &s.par_noise(i, s.z[i]))
                .unwrap();
            assert!((again - s.x.row(i).transpose()).amax() < 1e-12);
        }
    }
}
