//! Observation/residual likelihoods, their denoiser-reconstructed
//! intermediate form, guidance gradients and SMC potentials.

use serde::{Deserialize, Serialize};

use crate::data::Observations;
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::prior::{ChannelNormalization, Denoiser};
use crate::residuals::{mean_sq_residual_grad, residual_values, Group, PdeSystem, StateLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMode {
    /// Back-propagate through the denoiser.
    #[default]
    Exact,
    /// Treat the denoiser Jacobian as the identity.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceWeights {
    pub beta: f64,
    pub gamma: f64,
    pub omega: f64,
    pub temper_rho: f64,
    pub jacobian_mode: JacobianMode,
}

impl Default for GuidanceWeights {
    fn default() -> Self {
        Self { beta: 1.0, gamma: 1.0, omega: 1.0, temper_rho: 1.0, jacobian_mode: JacobianMode::Exact }
    }
}

impl GuidanceWeights {
    pub fn zero() -> Self {
        Self { beta: 0.0, gamma: 0.0, omega: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("omega", self.omega),
            ("rho", self.temper_rho),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("guidance weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// A log-likelihood of a clean state, up to an additive constant.
pub trait Likelihood: Send + Sync {
    fn dim(&self) -> usize;

    fn log_likelihood(&self, x0: &[f64]) -> Result<f64>;

    fn gradient(&self, x0: &[f64]) -> Result<Vec<f64>>;

    /// Whether the likelihood is identically zero.
    fn is_flat(&self) -> bool {
        false
    }
}

/// Sparse observations of both channel groups plus the mean-squared PDE
/// residual, each term normalised by its entry count.
#[derive(Debug, Clone)]
pub struct PdeLikelihood {
    system: PdeSystem,
    layout: StateLayout,
    grid: GridSpec,
    obs: Observations,
    beta: f64,
    gamma: f64,
    omega: f64,
    /// Flat state indices of the observed entries, matching `obs.values_*`.
    flat_a: Vec<usize>,
    flat_u: Vec<usize>,
}

impl PdeLikelihood {
    pub fn new(system: PdeSystem, layout: StateLayout, obs: Observations, weights: &GuidanceWeights) -> Result<Self> {
        weights.validate()?;
        obs.validate()?;
        system.validate()?;
        layout.check(system.kind())?;
        let grid = obs.grid;
        if grid.channels != layout.channels() {
            return Err(Error::Layout("observation grid and layout channel counts differ".into()));
        }
        system.check_boundary(grid.boundary)?;
        for (channels, group) in [(&obs.channels_a, Group::Coefficient), (&obs.channels_u, Group::Solution)] {
            let mut expected = layout.group_channels(group);
            let mut got = channels.clone();
            expected.sort_unstable();
            got.sort_unstable();
            if expected != got {
                return Err(Error::Layout(format!("observed channels {channels:?} do not form the {group:?} group")));
            }
        }
        let n = grid.cells();
        let flat = |channels: &[usize], indices: &[usize]| -> Vec<usize> {
            channels.iter().flat_map(|&c| indices.iter().map(move |&i| c * n + i)).collect()
        };
        Ok(Self {
            flat_a: flat(&obs.channels_a, &obs.indices_a),
            flat_u: flat(&obs.channels_u, &obs.indices_u),
            system,
            layout,
            grid,
            obs,
            beta: weights.beta,
            gamma: weights.gamma,
            omega: weights.omega,
        })
    }

    pub fn observations(&self) -> &Observations {
        &self.obs
    }

    pub fn system(&self) -> &PdeSystem {
        &self.system
    }

    pub fn layout(&self) -> &StateLayout {
        &self.layout
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.grid.len() {
            return Err(Error::Shape(format!("state length {} != {}", x.len(), self.grid.len())));
        }
        Ok(())
    }

    fn misfit(weight: f64, flat: &[usize], values: &[f64], x: &[f64]) -> f64 {
        if weight == 0.0 || flat.is_empty() {
            return 0.0;
        }
        let sq: f64 = flat.iter().zip(values).map(|(&k, y)| (y - x[k]).powi(2)).sum();
        weight * sq / flat.len() as f64
    }
}

impl Likelihood for PdeLikelihood {
    fn dim(&self) -> usize {
        self.grid.len()
    }

    fn log_likelihood(&self, x0: &[f64]) -> Result<f64> {
        self.check(x0)?;
        let mut value = -Self::misfit(self.beta, &self.flat_u, &self.obs.values_u, x0)
            - Self::misfit(self.gamma, &self.flat_a, &self.obs.values_a, x0);
        if self.omega != 0.0 {
            let r = residual_values(&self.system, &self.layout, &self.grid, x0)?;
            value -= self.omega * r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64;
        }
        Ok(value)
    }

    fn gradient(&self, x0: &[f64]) -> Result<Vec<f64>> {
        self.check(x0)?;
        let mut grad = if self.omega != 0.0 {
            let mut g = mean_sq_residual_grad(&self.system, &self.layout, &self.grid, x0)?;
            g.iter_mut().for_each(|v| *v *= -self.omega);
            g
        } else {
            vec![0.0; x0.len()]
        };
        for (weight, flat, values) in [
            (self.beta, &self.flat_u, &self.obs.values_u),
            (self.gamma, &self.flat_a, &self.obs.values_a),
        ] {
            if weight == 0.0 || flat.is_empty() {
                continue;
            }
            let scale = 2.0 * weight / flat.len() as f64;
            for (&k, y) in flat.iter().zip(values) {
                grad[k] += scale * (y - x0[k]);
            }
        }
        Ok(grad)
    }

    fn is_flat(&self) -> bool {
        self.omega == 0.0
            && (self.beta == 0.0 || self.flat_u.is_empty())
            && (self.gamma == 0.0 || self.flat_a.is_empty())
    }
}

/// `−Σ (y_k − x_{i_k})² / (2 s²)` over directly observed coordinates.
#[derive(Debug, Clone)]
pub struct LinearGaussianLikelihood {
    dim: usize,
    indices: Vec<usize>,
    values: Vec<f64>,
    noise_var: f64,
}

impl LinearGaussianLikelihood {
    pub fn new(dim: usize, indices: Vec<usize>, values: Vec<f64>, noise_std: f64) -> Result<Self> {
        if indices.len() != values.len() || indices.iter().any(|&i| i >= dim) {
            return Err(Error::Shape("observation indices and values disagree".into()));
        }
        if !(noise_std > 0.0) {
            return Err(Error::InvalidArgument("observation noise must be positive".into()));
        }
        Ok(Self { dim, indices, values, noise_var: noise_std * noise_std })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }
}

impl Likelihood for LinearGaussianLikelihood {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_likelihood(&self, x0: &[f64]) -> Result<f64> {
        if x0.len() != self.dim {
            return Err(Error::Shape("state length mismatch".into()));
        }
        let sq: f64 = self.indices.iter().zip(&self.values).map(|(&i, y)| (y - x0[i]).powi(2)).sum();
        Ok(-sq / (2.0 * self.noise_var))
    }

    fn gradient(&self, x0: &[f64]) -> Result<Vec<f64>> {
        if x0.len() != self.dim {
            return Err(Error::Shape("state length mismatch".into()));
        }
        let mut g = vec![0.0; self.dim];
        for (&i, y) in self.indices.iter().zip(&self.values) {
            g[i] += (y - x0[i]) / self.noise_var;
        }
        Ok(g)
    }

    fn is_flat(&self) -> bool {
        self.indices.is_empty()
    }
}

/// A physical-space likelihood seen from normalized coordinates.
pub struct NormalizedLikelihood<'a> {
    pub inner: &'a dyn Likelihood,
    pub normalization: &'a ChannelNormalization,
}

impl Likelihood for NormalizedLikelihood<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn log_likelihood(&self, z: &[f64]) -> Result<f64> {
        self.inner.log_likelihood(&self.normalization.denormalize(z)?)
    }

    fn gradient(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.normalization.pull_back(&self.inner.gradient(&self.normalization.denormalize(z)?)?)
    }

    fn is_flat(&self) -> bool {
        self.inner.is_flat()
    }
}

/// The constant likelihood, for unguided sampling.
#[derive(Debug, Clone, Copy)]
pub struct FlatLikelihood {
    pub dim: usize,
}

impl Likelihood for FlatLikelihood {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_likelihood(&self, _x0: &[f64]) -> Result<f64> {
        Ok(0.0)
    }

    fn gradient(&self, x0: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; x0.len()])
    }

    fn is_flat(&self) -> bool {
        true
    }
}

/// Likelihood of the denoiser's reconstruction, with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub denoised: Vec<f64>,
    pub loglik: f64,
    pub grad: Option<Vec<f64>>,
}

/// Denoiser and likelihood bundled with the tempering exponent and the
/// Jacobian treatment used for guidance.
#[derive(Clone, Copy)]
pub struct Guidance<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub likelihood: &'a dyn Likelihood,
    pub temper_rho: f64,
    pub jacobian_mode: JacobianMode,
}

impl<'a> Guidance<'a> {
    pub fn new(denoiser: &'a dyn Denoiser, likelihood: &'a dyn Likelihood, weights: &GuidanceWeights) -> Result<Self> {
        weights.validate()?;
        if denoiser.dim() != likelihood.dim() {
            return Err(Error::Shape(format!(
                "denoiser dimension {} differs from likelihood dimension {}",
                denoiser.dim(),
                likelihood.dim()
            )));
        }
        Ok(Self { denoiser, likelihood, temper_rho: weights.temper_rho, jacobian_mode: weights.jacobian_mode })
    }

    /// `ℓ(D(x, σ))` and optionally its gradient with respect to `x`.
    pub fn evaluate(&self, x: &[f64], sigma: f64, with_grad: bool) -> Result<Evaluation> {
        let denoised = self.denoiser.denoise(x, sigma)?;
        let loglik = self.likelihood.log_likelihood(&denoised)?;
        let grad = if with_grad {
            Some(if self.likelihood.is_flat() {
                vec![0.0; x.len()]
            } else {
                let g = self.likelihood.gradient(&denoised)?;
                match self.jacobian_mode {
                    JacobianMode::Exact => self.denoiser.vjp(x, sigma, &g)?,
                    JacobianMode::Identity => g,
                }
            })
        } else {
            None
        };
        Ok(Evaluation { denoised, loglik, grad })
    }

    pub fn intermediate_log_likelihood(&self, x: &[f64], sigma: f64) -> Result<f64> {
        Ok(self.evaluate(x, sigma, false)?.loglik)
    }

    pub fn guidance_grad(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        Ok(self.evaluate(x, sigma, true)?.grad.expect("gradient requested"))
    }

    /// Potential for the move `(x_k, σ_k) → (x_next, σ_next)`.
    pub fn potential_log(
        &self,
        scheme: Scheme,
        x_k: &[f64],
        sigma_k: f64,
        x_next: &[f64],
        sigma_next: f64,
        transition: Option<&GaussianTransition>,
    ) -> Result<f64> {
        let cur = self.intermediate_log_likelihood(x_k, sigma_k)?;
        let next = self.intermediate_log_likelihood(x_next, sigma_next)?;
        potential_from_logliks(scheme, self.temper_rho, cur, next, x_next, transition)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Likelihood ratio plus unguided/guided proposal density ratio.
    Tds,
    /// Likelihood ratio only.
    Pbs,
}

/// Means and shared isotropic variance of the unguided and guided Gaussian
/// proposals behind one step.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTransition {
    pub mean_unguided: Vec<f64>,
    pub mean_guided: Vec<f64>,
    pub variance: f64,
}

impl GaussianTransition {
    /// `log N(x; μ_u, s²I) − log N(x; μ_g, s²I)`.
    pub fn log_density_ratio(&self, x: &[f64]) -> f64 {
        let mut delta_sq = 0.0;
        let mut cross = 0.0;
        for k in 0..x.len() {
            let delta = self.mean_guided[k] - self.mean_unguided[k];
            delta_sq += delta * delta;
            cross += delta * (x[k] - self.mean_unguided[k]);
        }
        (delta_sq - 2.0 * cross) / (2.0 * self.variance)
    }
}

pub fn potential_from_logliks(
    scheme: Scheme,
    temper_rho: f64,
    loglik_cur: f64,
    loglik_next: f64,
    x_next: &[f64],
    transition: Option<&GaussianTransition>,
) -> Result<f64> {
    let ratio = if temper_rho == 0.0 { 0.0 } else { temper_rho * (loglik_next - loglik_cur) };
    match scheme {
        Scheme::Pbs => Ok(ratio),
        Scheme::Tds => {
            let t = transition.ok_or(Error::NonEvaluableProposal)?;
            Ok(ratio + t.log_density_ratio(x_next))
        }
    }
}
