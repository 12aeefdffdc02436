use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{check_dim, check_sigma, Denoiser};
use crate::error::{Error, Result};
use crate::grid::Field;

/// Largest state dimension for which a dense covariance is fitted.
pub const DENSE_MAX_DIM: usize = 4096;

/// `λ/(λ + σ²)`, with the `σ = 0` limit taken as the identity.
#[inline]
fn shrink(lambda: f64, s2: f64) -> f64 {
    if s2 == 0.0 {
        1.0
    } else {
        lambda / (lambda + s2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Scalar(f64),
    Diagonal(Vec<f64>),
    /// `Q diag(λ) Qᵀ + floor·(I − QQᵀ)` with orthonormal columns `Q`.
    Spectral { basis: DMatrix<f64>, eigenvalues: Vec<f64>, floor: f64 },
}

impl Covariance {
    /// Eigendecomposes a dense symmetric matrix.
    pub fn dense(matrix: DMatrix<f64>) -> Result<Self> {
        let d = matrix.nrows();
        if matrix.ncols() != d {
            return Err(Error::Prior("covariance must be square".into()));
        }
        let asym = (&matrix - matrix.transpose()).amax();
        if asym > 1e-12 * matrix.amax().max(1.0) {
            return Err(Error::Prior(format!("covariance is not symmetric (max asymmetry {asym:e})")));
        }
        let eig = SymmetricEigen::new(matrix);
        let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
        if eig.eigenvalues.min() < -1e-10 * scale {
            return Err(Error::Prior(format!("covariance has eigenvalue {}", eig.eigenvalues.min())));
        }
        Ok(Covariance::Spectral {
            basis: eig.eigenvectors,
            eigenvalues: eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect(),
            floor: 0.0,
        })
    }

    fn validate(&self, d: usize) -> Result<()> {
        let bad = |v: f64| !(v >= 0.0 && v.is_finite());
        match self {
            Covariance::Scalar(v) if bad(*v) => Err(Error::Prior(format!("variance {v} is not a valid variance"))),
            Covariance::Diagonal(v) if v.len() != d => Err(Error::Prior("diagonal length mismatch".into())),
            Covariance::Diagonal(v) if v.iter().any(|&x| bad(x)) => {
                Err(Error::Prior("diagonal covariance has negative entries".into()))
            }
            Covariance::Spectral { basis, eigenvalues, floor } => {
                if basis.nrows() != d || basis.ncols() != eigenvalues.len() {
                    return Err(Error::Prior("spectral covariance shape mismatch".into()));
                }
                if bad(*floor) || eigenvalues.iter().any(|&x| bad(x)) {
                    return Err(Error::Prior("covariance is not positive semidefinite".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// `f(Σ) v` for a spectral function `f` applied eigenvalue-wise.
    fn apply_fn(&self, v: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
        match self {
            Covariance::Scalar(s) => {
                let c = f(*s);
                v.iter().map(|x| c * x).collect()
            }
            Covariance::Diagonal(diag) => v.iter().zip(diag).map(|(x, &s)| f(s) * x).collect(),
            Covariance::Spectral { basis, eigenvalues, floor } => {
                let cf = f(*floor);
                let vv = DVector::from_column_slice(v);
                let mut coords = basis.tr_mul(&vv);
                for (c, &lam) in coords.iter_mut().zip(eigenvalues) {
                    *c *= f(lam) - cf;
                }
                let out = basis * coords + vv * cf;
                out.as_slice().to_vec()
            }
        }
    }

    /// Dense matrix form, for tests and small problems.
    pub fn to_dense(&self, d: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(d, d);
        let mut e = vec![0.0; d];
        for j in 0..d {
            e[j] = 1.0;
            let col = self.apply_fn(&e, |l| l);
            e[j] = 0.0;
            m.set_column(j, &DVector::from_vec(col));
        }
        m
    }
}

/// `N(μ, Σ)` prior whose denoiser is the exact posterior mean.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior {
    mean: Vec<f64>,
    covariance: Covariance,
    shrinkage: Option<f64>,
}

impl GaussianPrior {
    pub fn new(mean: Vec<f64>, covariance: Covariance) -> Result<Self> {
        covariance.validate(mean.len())?;
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Prior("mean must be finite".into()));
        }
        Ok(Self { mean, covariance, shrinkage: None })
    }

    pub fn isotropic(mean: Vec<f64>, variance: f64) -> Result<Self> {
        Self::new(mean, Covariance::Scalar(variance))
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &Covariance {
        &self.covariance
    }

    pub fn shrinkage(&self) -> Option<f64> {
        self.shrinkage
    }

    /// `Σ(Σ + σ²I)⁻¹ v`, the (symmetric) denoiser Jacobian applied to `v`.
    pub fn gain(&self, v: &[f64], sigma: f64) -> Vec<f64> {
        let s2 = sigma * sigma;
        self.covariance.apply_fn(v, |l| shrink(l, s2))
    }

    /// `μ + Σ^{1/2} z`.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let z: Vec<f64> = (0..self.mean.len()).map(|_| rng.sample(StandardNormal)).collect();
        let dz = self.covariance.apply_fn(&z, f64::sqrt);
        self.mean.iter().zip(dz).map(|(m, d)| m + d).collect()
    }
}

impl Denoiser for GaussianPrior {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        check_sigma(sigma)?;
        let centred: Vec<f64> = x.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        let g = self.gain(&centred, sigma);
        Ok(self.mean.iter().zip(g).map(|(m, g)| m + g).collect())
    }

    fn vjp(&self, x: &[f64], sigma: f64, cotangent: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        check_dim(self.dim(), cotangent.len())?;
        check_sigma(sigma)?;
        Ok(self.gain(cotangent, sigma))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceFit {
    Diagonal,
    Dense,
}

/// Empirical mean and `(1−λ)·S + λ·(tr S/d)·I` covariance of flattened
/// states, `S` being the unbiased sample covariance.
pub fn fit_empirical_prior(samples: &[Field], lambda: f64, fit: CovarianceFit) -> Result<GaussianPrior> {
    let first = samples.first().ok_or_else(|| Error::Prior("dataset is empty".into()))?;
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::Prior(format!("shrinkage must lie in (0, 1], got {lambda}")));
    }
    let d = first.values().len();
    if samples.iter().any(|s| s.spec() != first.spec()) {
        return Err(Error::Prior("samples live on different grids".into()));
    }
    if fit == CovarianceFit::Dense && d > DENSE_MAX_DIM {
        return Err(Error::Prior(format!("dense covariance limited to dimension {DENSE_MAX_DIM}, state has {d}")));
    }
    let m = samples.len();
    let mut mean = vec![0.0; d];
    for s in samples {
        for (acc, v) in mean.iter_mut().zip(s.values()) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let denom = (m.max(2) - 1) as f64;

    let covariance = match fit {
        CovarianceFit::Diagonal => {
            let mut var = vec![0.0; d];
            for s in samples {
                for k in 0..d {
                    var[k] += (s.values()[k] - mean[k]).powi(2) / denom;
                }
            }
            let tau = var.iter().sum::<f64>() / d as f64;
            Covariance::Diagonal(var.iter().map(|v| (1.0 - lambda) * v + lambda * tau).collect())
        }
        CovarianceFit::Dense => {
            let centred = DMatrix::from_fn(m, d, |i, k| samples[i].values()[k] - mean[k]);
            let (basis, s_eigs) = if m < d {
                // eigenpairs of S = XᵀX/(m−1) through the m×m Gram matrix
                let gram = &centred * centred.transpose() / denom;
                let eig = SymmetricEigen::new(gram);
                let top = eig.eigenvalues.amax();
                let keep: Vec<usize> =
                    (0..m).filter(|&i| eig.eigenvalues[i] > 1e-12 * top && top > 0.0).collect();
                let mut basis = DMatrix::zeros(d, keep.len());
                let mut vals = Vec::with_capacity(keep.len());
                for (c, &i) in keep.iter().enumerate() {
                    let s = eig.eigenvalues[i];
                    let v = centred.tr_mul(&eig.eigenvectors.column(i)) / (s * denom).sqrt();
                    basis.set_column(c, &v);
                    vals.push(s);
                }
                (basis, vals)
            } else {
                let s = centred.tr_mul(&centred) / denom;
                let eig = SymmetricEigen::new(s);
                (eig.eigenvectors, eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect())
            };
            let tau = s_eigs.iter().sum::<f64>() / d as f64;
            Covariance::Spectral {
                basis,
                eigenvalues: s_eigs.iter().map(|s| (1.0 - lambda) * s + lambda * tau).collect(),
                floor: lambda * tau,
            }
        }
    };
    let mut prior = GaussianPrior::new(mean, covariance)?;
    prior.shrinkage = Some(lambda);
    Ok(prior)
}

pub(crate) fn set_shrinkage(prior: &mut GaussianPrior, lambda: Option<f64>) {
    prior.shrinkage = lambda;
}
