//! Reverse-time integrators, one chain at a time.
//!
//! Steps run from `k = K` down to `1`, moving a state at `σ_k` to `σ_{k−1}`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::stream_rng;
use crate::error::{Error, Result};
use crate::guidance::{Evaluation, GaussianTransition, Guidance};
use crate::prior::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    Em,
    Gem,
    SecondOrder,
    Sosag,
    OdeHeun,
    OdeHeunGuided,
}

impl SamplerMode {
    pub fn guided(self) -> bool {
        matches!(self, SamplerMode::Gem | SamplerMode::Sosag | SamplerMode::OdeHeunGuided)
    }

    /// Whether the step's transition density can be evaluated pointwise.
    pub fn evaluable(self) -> bool {
        matches!(self, SamplerMode::Em | SamplerMode::Gem)
    }

    fn churns(self) -> bool {
        matches!(self, SamplerMode::SecondOrder | SamplerMode::Sosag)
    }

    pub fn name(self) -> &'static str {
        match self {
            SamplerMode::Em => "em",
            SamplerMode::Gem => "gem",
            SamplerMode::SecondOrder => "second_order",
            SamplerMode::Sosag => "sosag",
            SamplerMode::OdeHeun => "ode_heun",
            SamplerMode::OdeHeunGuided => "ode_heun_guided",
        }
    }
}

/// Extra noise multiplier on churn.
pub const S_NOISE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub schedule: NoiseSchedule,
    pub s_churn: f64,
    pub seed: u64,
    pub mode: SamplerMode,
}

impl SamplerConfig {
    pub fn new(schedule: NoiseSchedule, mode: SamplerMode, seed: u64) -> Self {
        Self { schedule, s_churn: 2.0, seed, mode }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if !(self.s_churn >= 0.0 && self.s_churn.is_finite()) {
            return Err(Error::InvalidArgument(format!("s_churn must be >= 0, got {}", self.s_churn)));
        }
        Ok(())
    }

    /// Per-step churn `min(s_churn/K, √2 − 1)`.
    pub fn churn_gamma(&self) -> f64 {
        if !self.mode.churns() {
            return 0.0;
        }
        (self.s_churn / self.schedule.steps as f64).min(std::f64::consts::SQRT_2 - 1.0)
    }
}

/// Outcome of one step; `transition` is set for Gaussian (EM-family) steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub next: Vec<f64>,
    pub transition: Option<GaussianTransition>,
}

fn sigmas(schedule: &NoiseSchedule, k: usize) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(Error::InvalidArgument("no step below k = 0".into()));
    }
    Ok((schedule.sigma_at(k)?, schedule.sigma_at(k - 1)?))
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Gaussian proposal means for an EM step from `x` given `D(x, σ_k)` and,
/// for GEM, the guidance gradient at `x`.
pub fn em_transition(
    x: &[f64],
    denoised: &[f64],
    guidance_grad: Option<&[f64]>,
    sigma_k: f64,
    sigma_next: f64,
) -> GaussianTransition {
    let variance = sigma_k * sigma_k - sigma_next * sigma_next;
    let drift = variance / (sigma_k * sigma_k);
    let mean_unguided: Vec<f64> = x.iter().zip(denoised).map(|(x, d)| x + drift * (d - x)).collect();
    let mean_guided = match guidance_grad {
        Some(g) => mean_unguided.iter().zip(g).map(|(m, g)| m + variance * g).collect(),
        None => mean_unguided.clone(),
    };
    GaussianTransition { mean_unguided, mean_guided, variance }
}

fn sample_transition(t: GaussianTransition, rng: &mut impl Rng) -> Step {
    let std = t.variance.sqrt();
    let next = t.mean_guided.iter().map(|m| m + std * normal(rng)).collect();
    Step { next, transition: Some(t) }
}

/// Unguided Euler–Maruyama step.
pub fn em_step(x: &[f64], k: usize, guidance: &Guidance, schedule: &NoiseSchedule, rng: &mut impl Rng) -> Result<Step> {
    let (sk, sn) = sigmas(schedule, k)?;
    let denoised = guidance.denoiser.denoise(x, sk)?;
    Ok(sample_transition(em_transition(x, &denoised, None, sk, sn), rng))
}

/// Guided Euler–Maruyama step from a cached evaluation at `(x, σ_k)`.
pub fn gem_step_from(
    x: &[f64],
    eval: &Evaluation,
    k: usize,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Step> {
    let (sk, sn) = sigmas(schedule, k)?;
    let grad = eval.grad.as_deref().ok_or_else(|| Error::InvalidArgument("evaluation lacks a gradient".into()))?;
    Ok(sample_transition(em_transition(x, &eval.denoised, Some(grad), sk, sn), rng))
}

pub fn gem_step(x: &[f64], k: usize, guidance: &Guidance, schedule: &NoiseSchedule, rng: &mut impl Rng) -> Result<Step> {
    let eval = guidance.evaluate(x, schedule.sigma_at(k)?, true)?;
    gem_step_from(x, &eval, k, schedule, rng)
}

/// Churned Heun step, with guidance when `guided`.
pub fn second_order_step(
    x: &[f64],
    k: usize,
    guidance: &Guidance,
    config: &SamplerConfig,
    guided: bool,
    rng: &mut impl Rng,
) -> Result<Step> {
    let (sk, sn) = sigmas(&config.schedule, k)?;
    let gamma = config.churn_gamma();
    let sigma_hat = sk + gamma * sk;
    let x_hat: Vec<f64> = if gamma > 0.0 {
        let scale = (sigma_hat * sigma_hat - sk * sk).sqrt() * S_NOISE;
        x.iter().map(|v| v + scale * normal(rng)).collect()
    } else {
        x.to_vec()
    };
    let (denoised, grad) = if guided {
        let e = guidance.evaluate(&x_hat, sigma_hat, true)?;
        (e.denoised, e.grad)
    } else {
        (guidance.denoiser.denoise(&x_hat, sigma_hat)?, None)
    };
    let slope: Vec<f64> = x_hat.iter().zip(&denoised).map(|(x, d)| (x - d) / sigma_hat).collect();
    let dsig = sn - sigma_hat;
    let mut next: Vec<f64> = x_hat.iter().zip(&slope).map(|(x, d)| x + dsig * d).collect();
    if sn != 0.0 {
        let d2 = guidance.denoiser.denoise(&next, sn)?;
        for i in 0..next.len() {
            let slope2 = (next[i] - d2[i]) / sn;
            next[i] = x_hat[i] + dsig * 0.5 * (slope[i] + slope2);
        }
    }
    if let Some(g) = grad {
        let scale = sigma_hat * sigma_hat - sn * sn;
        next.iter_mut().zip(&g).for_each(|(v, g)| *v += scale * g);
    }
    Ok(Step { next, transition: None })
}

/// One step of the configured mode. `cached` may hold the evaluation at
/// `(x, σ_k)` with gradient, which GEM reuses.
pub fn propagate(
    x: &[f64],
    k: usize,
    guidance: &Guidance,
    config: &SamplerConfig,
    cached: Option<&Evaluation>,
    rng: &mut impl Rng,
) -> Result<Step> {
    match config.mode {
        SamplerMode::Em => match cached {
            Some(e) => {
                let (sk, sn) = sigmas(&config.schedule, k)?;
                Ok(sample_transition(em_transition(x, &e.denoised, None, sk, sn), rng))
            }
            None => em_step(x, k, guidance, &config.schedule, rng),
        },
        SamplerMode::Gem => match cached.filter(|e| e.grad.is_some()) {
            Some(e) => gem_step_from(x, e, k, &config.schedule, rng),
            None => gem_step(x, k, guidance, &config.schedule, rng),
        },
        SamplerMode::SecondOrder | SamplerMode::OdeHeun => second_order_step(x, k, guidance, config, false, rng),
        SamplerMode::Sosag | SamplerMode::OdeHeunGuided => second_order_step(x, k, guidance, config, true, rng),
    }
}

/// Draws `x_K ~ N(0, σ_max² I)`.
pub fn initial_state(dim: usize, sigma_max: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..dim).map(|_| sigma_max * normal(rng)).collect()
}

pub(crate) fn check_finite(x: &[f64], k: usize) -> Result<()> {
    if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("state entry {pos} at step {k}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainResult {
    pub x0: Vec<f64>,
    /// `ℓ(D(x_k, σ_k))` for `k = K, …, 0`.
    pub loglik: Vec<f64>,
    /// `‖x_{k−1} − x_k‖` for `k = K, …, 1`.
    pub step_norms: Vec<f64>,
}

/// Per-particle random stream; `run_chain` uses particle 0.
pub fn particle_rng(seed: u64, particle: usize) -> ChaCha8Rng {
    stream_rng(seed, particle as u64)
}

pub fn run_chain(config: &SamplerConfig, guidance: &Guidance) -> Result<ChainResult> {
    config.validate()?;
    let mut rng = particle_rng(config.seed, 0);
    let schedule = &config.schedule;
    let k_max = schedule.steps;
    let needs_grad = config.mode == SamplerMode::Gem;
    let mut x = initial_state(guidance.denoiser.dim(), schedule.sigma_max, &mut rng);
    let mut eval = guidance.evaluate(&x, schedule.sigma_at(k_max)?, needs_grad)?;
    let mut loglik = vec![eval.loglik];
    let mut step_norms = Vec::with_capacity(k_max);
    for k in (1..=k_max).rev() {
        let step = propagate(&x, k, guidance, config, Some(&eval), &mut rng)?;
        check_finite(&step.next, k - 1)?;
        step_norms.push(x.iter().zip(&step.next).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());
        x = step.next;
        eval = guidance.evaluate(&x, schedule.sigma_at(k - 1)?, needs_grad && k > 1)?;
        loglik.push(eval.loglik);
    }
    Ok(ChainResult { x0: x, loglik, step_norms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::{FlatLikelihood, GuidanceWeights, LinearGaussianLikelihood};
    use crate::prior::{Denoiser, GaussianPrior};

    /// `D(x, σ) = x`.
    struct Identity(usize);

    impl Denoiser for Identity {
        fn dim(&self) -> usize {
            self.0
        }
        fn denoise(&self, x: &[f64], _sigma: f64) -> Result<Vec<f64>> {
            Ok(x.to_vec())
        }
        fn vjp(&self, _x: &[f64], _sigma: f64, c: &[f64]) -> Result<Vec<f64>> {
            Ok(c.to_vec())
        }
    }

    fn schedule(steps: usize) -> NoiseSchedule {
        NoiseSchedule::new(10.0, 0.01, steps, 7.0).unwrap()
    }

    #[test]
    fn em_mean_is_fixed_under_identity_denoiser() {
        let d = Identity(3);
        let flat = FlatLikelihood { dim: 3 };
        let g = Guidance::new(&d, &flat, &GuidanceWeights::default()).unwrap();
        let x = [0.5, -1.0, 2.0];
        let s = schedule(10);
        let step = em_step(&x, 4, &g, &s, &mut particle_rng(1, 0)).unwrap();
        let t = step.transition.unwrap();
        assert_eq!(t.mean_unguided, x.to_vec());
        let (sk, sn) = (s.sigma_at(4).unwrap(), s.sigma_at(3).unwrap());
        assert!((t.variance - (sk * sk - sn * sn)).abs() < 1e-15);
        // the noise is exactly √var · z for the stream's first draws
        let mut rng = particle_rng(1, 0);
        for (i, v) in step.next.iter().enumerate() {
            let z: f64 = normal(&mut rng);
            assert_eq!(*v, x[i] + t.variance.sqrt() * z);
        }
    }

    #[test]
    fn em_mean_matches_gaussian_closed_form() {
        let prior = GaussianPrior::isotropic(vec![0.0; 2], 1.0).unwrap();
        let flat = FlatLikelihood { dim: 2 };
        let g = Guidance::new(&prior, &flat, &GuidanceWeights::default()).unwrap();
        let s = schedule(10);
        let x = [1.5, -0.5];
        let t = em_step(&x, 7, &g, &s, &mut particle_rng(0, 0)).unwrap().transition.unwrap();
        let (sk, sn) = (s.sigma_at(7).unwrap(), s.sigma_at(6).unwrap());
        for i in 0..2 {
            let expected = x[i] - (sk * sk - sn * sn) / (sk * sk + 1.0) * x[i];
            assert!((t.mean_unguided[i] - expected).abs() < 1e-13);
        }
    }

    #[test]
    fn gem_reduces_to_em_and_reports_increment() {
        let prior = GaussianPrior::isotropic(vec![0.0; 4], 2.0).unwrap();
        let lik = LinearGaussianLikelihood::new(4, vec![0, 2], vec![1.0, -1.0], 0.3).unwrap();
        let s = schedule(20);
        let x = [0.3, 0.1, -0.4, 2.0];
        let zero = Guidance::new(&prior, &FlatLikelihood { dim: 4 }, &GuidanceWeights::default()).unwrap();
        let a = gem_step(&x, 5, &zero, &s, &mut particle_rng(2, 0)).unwrap();
        let b = em_step(&x, 5, &zero, &s, &mut particle_rng(2, 0)).unwrap();
        assert_eq!(a, b);

        let g = Guidance::new(&prior, &lik, &GuidanceWeights::default()).unwrap();
        let step = gem_step(&x, 5, &g, &s, &mut particle_rng(2, 0)).unwrap();
        let t = step.transition.unwrap();
        let grad = g.guidance_grad(&x, s.sigma_at(5).unwrap()).unwrap();
        for i in 0..4 {
            assert!((t.mean_guided[i] - t.mean_unguided[i] - t.variance * grad[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn guidance_pushes_reconstruction_toward_observation() {
        let prior = GaussianPrior::isotropic(vec![0.0], 1.0).unwrap();
        let y = 1.5;
        let lik = LinearGaussianLikelihood::new(1, vec![0], vec![y], 0.5).unwrap();
        let g = Guidance::new(&prior, &lik, &GuidanceWeights::default()).unwrap();
        let s = schedule(30);
        let mut x = vec![-0.7];
        let mut rng = particle_rng(4, 0);
        for k in (1..=30).rev() {
            let denoised = prior.denoise(&x, s.sigma_at(k).unwrap()).unwrap()[0];
            let step = gem_step(&x, k, &g, &s, &mut rng).unwrap();
            let t = step.transition.as_ref().unwrap();
            assert!((t.mean_guided[0] - t.mean_unguided[0]) * (y - denoised) > 0.0, "step {k}");
            x = step.next;
        }
    }

    #[test]
    fn churn_free_unguided_sosag_is_ode_heun() {
        let prior = GaussianPrior::isotropic(vec![0.2; 5], 0.7).unwrap();
        let flat = FlatLikelihood { dim: 5 };
        let g = Guidance::new(&prior, &flat, &GuidanceWeights::default()).unwrap();
        let mut sosag = SamplerConfig::new(schedule(12), SamplerMode::Sosag, 3);
        sosag.s_churn = 0.0;
        let ode = SamplerConfig::new(schedule(12), SamplerMode::OdeHeun, 99);
        let a = run_chain(&sosag, &g).unwrap();
        let mut ode_same_seed = ode;
        ode_same_seed.seed = 3;
        let b = run_chain(&ode_same_seed, &g).unwrap();
        assert_eq!(a.x0, b.x0);
    }

    #[test]
    fn identity_denoiser_slopes_vanish() {
        let d = Identity(3);
        let lik = LinearGaussianLikelihood::new(3, vec![1], vec![2.0], 1.0).unwrap();
        let g = Guidance::new(&d, &lik, &GuidanceWeights::default()).unwrap();
        let mut cfg = SamplerConfig::new(schedule(10), SamplerMode::Sosag, 0);
        cfg.s_churn = 0.0;
        let x = [1.0, 0.5, -1.0];
        let step = second_order_step(&x, 6, &g, &cfg, true, &mut particle_rng(0, 0)).unwrap();
        let (sk, sn) = (cfg.schedule.sigma_at(6).unwrap(), cfg.schedule.sigma_at(5).unwrap());
        let inc = (sk * sk - sn * sn) * (2.0 - 0.5);
        assert_eq!(step.next, vec![1.0, 0.5 + inc, -1.0]);
    }

    #[test]
    fn ode_chain_ignores_seed_and_churn_is_capped() {
        let prior = GaussianPrior::isotropic(vec![0.0; 3], 1.0).unwrap();
        let flat = FlatLikelihood { dim: 3 };
        let g = Guidance::new(&prior, &flat, &GuidanceWeights::default()).unwrap();
        let cfg = SamplerConfig::new(schedule(8), SamplerMode::OdeHeun, 5);
        assert_eq!(cfg.churn_gamma(), 0.0);
        let a = run_chain(&cfg, &g).unwrap();
        let b = run_chain(&cfg, &g).unwrap();
        assert_eq!(a, b);
        let mut big = SamplerConfig::new(schedule(2), SamplerMode::Sosag, 5);
        big.s_churn = 100.0;
        assert_eq!(big.churn_gamma(), std::f64::consts::SQRT_2 - 1.0);
    }

    #[test]
    fn k_zero_rejected() {
        let d = Identity(1);
        let flat = FlatLikelihood { dim: 1 };
        let g = Guidance::new(&d, &flat, &GuidanceWeights::default()).unwrap();
        assert!(em_step(&[0.0], 0, &g, &schedule(3), &mut particle_rng(0, 0)).is_err());
    }
}
