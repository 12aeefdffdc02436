//! Noise schedules, the denoiser interface and analytic denoisers.

mod gaussian;
mod gmm;
mod normalize;
mod store;

pub use gaussian::{fit_empirical_prior, CovarianceFit, Covariance, GaussianPrior, DENSE_MAX_DIM};
pub use gmm::{GmmComponent, GmmDenoiser};
pub use normalize::ChannelNormalization;
pub use store::{read_prior, write_prior, PriorMetadata};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub steps: usize,
    pub rho: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { sigma_max: 80.0, sigma_min: 0.002, steps: 200, rho: 7.0 }
    }
}

impl NoiseSchedule {
    pub fn new(sigma_max: f64, sigma_min: f64, steps: usize, rho: f64) -> Result<Self> {
        let s = Self { sigma_max, sigma_min, steps, rho };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min >= 0.0 && self.sigma_max > self.sigma_min && self.sigma_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "need sigma_max > sigma_min >= 0, got {} and {}",
                self.sigma_max, self.sigma_min
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidArgument(format!("warp exponent must be positive, got {}", self.rho)));
        }
        Ok(())
    }

    /// Noise level at step `k`; `k = steps` is `sigma_max`, `k = 0` is `sigma_min`.
    pub fn sigma_at(&self, k: usize) -> Result<f64> {
        if k > self.steps {
            return Err(Error::InvalidArgument(format!("step {k} outside 0..={}", self.steps)));
        }
        if k == self.steps {
            return Ok(self.sigma_max);
        }
        if k == 0 {
            return Ok(self.sigma_min);
        }
        let inv = 1.0 / self.rho;
        let lo = self.sigma_min.powf(inv);
        let hi = self.sigma_max.powf(inv);
        let t = k as f64 / self.steps as f64;
        Ok((lo + t * (hi - lo)).powf(self.rho))
    }

    /// `σ_0, …, σ_K`.
    pub fn sigmas(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.sigma_at(k).expect("in range")).collect()
    }
}

/// Estimates the clean state from a noisy one, `x = x₀ + σz`.
///
/// States are flat vectors in the layout of [`crate::grid::Field`].
pub trait Denoiser: Send + Sync {
    fn dim(&self) -> usize;

    fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>>;

    /// `vᵀ ∂D/∂x` at `(x, σ)`.
    fn vjp(&self, x: &[f64], sigma: f64, cotangent: &[f64]) -> Result<Vec<f64>>;
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Shape(format!("denoiser expects dimension {expected}, got {got}")));
    }
    Ok(())
}

pub(crate) fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise level must be finite and nonnegative, got {sigma}")));
    }
    Ok(())
}

/// `∇ log p_σ(x) = (D(x, σ) − x)/σ²`.
pub fn score(denoiser: &dyn Denoiser, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument("score is undefined at sigma = 0".into()));
    }
    let d = denoiser.denoise(x, sigma)?;
    let s2 = sigma * sigma;
    Ok(d.iter().zip(x).map(|(d, x)| (d - x) / s2).collect())
}
