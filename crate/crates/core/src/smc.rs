//! Weighted particle populations driven by the guided samplers.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::stream_rng;
use crate::error::{Error, Result};
use crate::guidance::{potential_from_logliks, Evaluation, Guidance, Scheme};
use crate::samplers::{check_finite, initial_state, particle_rng, propagate, SamplerConfig, SamplerMode};

/// Stream index reserved for resampling and random-particle draws.
const RESAMPLE_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointEstimate {
    /// Highest weight, ties broken by likelihood.
    #[default]
    BestParticle,
    WeightedMean,
    RandomParticle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmcConfig {
    pub particles: usize,
    /// Resample when `ESS ≤ resample_threshold · N`.
    pub resample_threshold: f64,
    pub scheme: Scheme,
    pub sampler: SamplerConfig,
    pub estimate: PointEstimate,
}

impl SmcConfig {
    pub fn new(particles: usize, scheme: Scheme, sampler: SamplerConfig) -> Result<Self> {
        let c = Self { particles, resample_threshold: 0.5, scheme, sampler, estimate: PointEstimate::default() };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        if self.particles == 0 {
            return Err(Error::InvalidArgument("at least one particle is required".into()));
        }
        if !(self.resample_threshold > 0.0 && self.resample_threshold <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "resample threshold must lie in (0, 1], got {}",
                self.resample_threshold
            )));
        }
        if self.scheme == Scheme::Tds && !self.sampler.mode.evaluable() {
            return Err(Error::NonEvaluableProposal);
        }
        Ok(())
    }
}

/// Normalised weights from log-weights.
pub fn normalize(log_weights: &[f64]) -> Result<Vec<f64>> {
    let top = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY || top.is_nan() {
        return Err(Error::DegenerateWeights);
    }
    let mut w: Vec<f64> = log_weights.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    Ok(w)
}

/// `(Σw)²/Σw²` evaluated after subtracting the largest log-weight.
pub fn ess(log_weights: &[f64]) -> Result<f64> {
    let top = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY || top.is_nan() {
        return Err(Error::DegenerateWeights);
    }
    let (s1, s2) = log_weights.iter().fold((0.0, 0.0), |(a, b), l| {
        let w = (l - top).exp();
        (a + w, b + w * w)
    });
    Ok((s1 * s1 / s2).clamp(1.0, log_weights.len() as f64))
}

/// `log Σ exp(l_i)`.
fn log_sum_exp(values: &[f64]) -> f64 {
    let top = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return top;
    }
    top + values.iter().map(|v| (v - top).exp()).sum::<f64>().ln()
}

/// Ancestor indices from `N` independent categorical draws.
pub fn multinomial_ancestors(weights: &[f64], rng: &mut impl Rng) -> Result<Vec<usize>> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::DegenerateWeights);
    }
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in weights {
        acc += w / total;
        cdf.push(acc);
    }
    let last = weights.iter().rposition(|w| *w > 0.0).expect("positive total");
    Ok((0..weights.len())
        .map(|_| {
            let u: f64 = rng.random();
            cdf.partition_point(|c| *c <= u).min(last)
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct Population {
    pub particles: Vec<Vec<f64>>,
    pub log_weights: Vec<f64>,
    /// `ℓ(D(x_i, σ_k))` at the current step.
    pub cached_loglik: Vec<f64>,
    pub ancestors: Vec<usize>,
    pub step: usize,
    evals: Vec<Evaluation>,
}

impl Population {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn weights(&self) -> Result<Vec<f64>> {
        normalize(&self.log_weights)
    }

    pub fn ess(&self) -> Result<f64> {
        ess(&self.log_weights)
    }

    /// Multinomial resampling; weights become uniform.
    pub fn resample(&mut self, rng: &mut impl Rng) -> Result<()> {
        let anc = multinomial_ancestors(&self.weights()?, rng)?;
        self.particles = anc.iter().map(|&a| self.particles[a].clone()).collect();
        self.cached_loglik = anc.iter().map(|&a| self.cached_loglik[a]).collect();
        self.evals = anc.iter().map(|&a| self.evals[a].clone()).collect();
        self.log_weights = vec![0.0; anc.len()];
        self.ancestors = anc;
        Ok(())
    }

    pub fn best_index(&self) -> usize {
        (0..self.len())
            .max_by(|&a, &b| {
                self.log_weights[a]
                    .total_cmp(&self.log_weights[b])
                    .then(self.cached_loglik[a].total_cmp(&self.cached_loglik[b]))
                    .then(b.cmp(&a))
            })
            .expect("non-empty population")
    }

    pub fn weighted_mean(&self) -> Result<Vec<f64>> {
        self.weighted_estimate(|x| x.to_vec())
    }

    /// `Σ_i w_i f(x_i)`.
    pub fn weighted_estimate(&self, statistic: impl Fn(&[f64]) -> Vec<f64>) -> Result<Vec<f64>> {
        let w = self.weights()?;
        let mut out: Vec<f64> = Vec::new();
        for (wi, x) in w.iter().zip(&self.particles) {
            let s = statistic(x);
            if out.is_empty() {
                out = vec![0.0; s.len()];
            }
            out.iter_mut().zip(&s).for_each(|(o, v)| *o += wi * v);
        }
        Ok(out)
    }

    pub fn point_estimate(&self, kind: PointEstimate, rng: &mut impl Rng) -> Result<Vec<f64>> {
        match kind {
            PointEstimate::BestParticle => Ok(self.particles[self.best_index()].clone()),
            PointEstimate::WeightedMean => self.weighted_mean(),
            PointEstimate::RandomParticle => {
                let i = multinomial_ancestors(&self.weights()?, rng)?[0];
                Ok(self.particles[i].clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub step: usize,
    pub ess: f64,
    pub resampled: bool,
    pub log_evidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmcSummary {
    pub particles: usize,
    pub steps: usize,
    pub scheme: Scheme,
    pub mode: SamplerMode,
    pub resample_steps: Vec<usize>,
    pub final_ess: f64,
    pub min_ess: f64,
    pub log_evidence: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Diagnostics {
    pub rows: Vec<DiagnosticRow>,
}

impl Diagnostics {
    pub fn ess_trace(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.ess).collect()
    }

    pub fn resample_steps(&self) -> Vec<usize> {
        self.rows.iter().filter(|r| r.resampled).map(|r| r.step).collect()
    }

    pub fn log_evidence(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.log_evidence)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,ess,resampled,log_evidence\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.step, r.ess, u8::from(r.resampled), r.log_evidence));
        }
        out
    }

    pub fn summary(&self, config: &SmcConfig) -> SmcSummary {
        let ess = self.ess_trace();
        SmcSummary {
            particles: config.particles,
            steps: config.sampler.schedule.steps,
            scheme: config.scheme,
            mode: config.sampler.mode,
            resample_steps: self.resample_steps(),
            final_ess: ess.last().copied().unwrap_or(f64::NAN),
            min_ess: ess.iter().copied().fold(f64::INFINITY, f64::min),
            log_evidence: self.log_evidence(),
        }
    }

    pub fn write(&self, dir: impl AsRef<Path>, config: &SmcConfig) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("diagnostics.csv"), self.to_csv())?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&self.summary(config))?)?;
        Ok(())
    }
}

fn check_weights(log_weights: &[f64], k: usize) -> Result<()> {
    match log_weights.iter().position(|w| w.is_nan() || *w == f64::INFINITY) {
        Some(i) => Err(Error::NonFinite(format!("log-weight of particle {i} at step {k}"))),
        None => Ok(()),
    }
}

/// Runs the particle system from `σ_max` down to zero noise.
pub fn smc_run(config: &SmcConfig, guidance: &Guidance) -> Result<(Population, Diagnostics)> {
    config.validate()?;
    let sampler = &config.sampler;
    let schedule = &sampler.schedule;
    let k_max = schedule.steps;
    let n = config.particles;
    let rho = guidance.temper_rho;
    let needs_grad = sampler.mode == SamplerMode::Gem;
    let dim = guidance.denoiser.dim();
    let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|i| particle_rng(sampler.seed, i)).collect();
    let mut resample_rng = stream_rng(sampler.seed, RESAMPLE_STREAM);

    let sigma_k = schedule.sigma_at(k_max)?;
    let init: Vec<(Vec<f64>, Evaluation)> = rngs
        .par_iter_mut()
        .map(|rng| {
            let x = initial_state(dim, schedule.sigma_max, rng);
            let e = guidance.evaluate(&x, sigma_k, needs_grad)?;
            Ok((x, e))
        })
        .collect::<Result<_>>()?;
    let (particles, evals): (Vec<_>, Vec<_>) = init.into_iter().unzip();
    let cached_loglik: Vec<f64> = evals.iter().map(|e| e.loglik).collect();
    let log_weights: Vec<f64> =
        cached_loglik.iter().map(|l| if rho == 0.0 { 0.0 } else { rho * l }).collect();
    check_weights(&log_weights, k_max)?;
    let mut log_evidence = log_sum_exp(&log_weights) - (n as f64).ln();
    let mut pop =
        Population { particles, log_weights, cached_loglik, ancestors: (0..n).collect(), step: k_max, evals };
    let mut diag = Diagnostics::default();

    for k in (1..=k_max).rev() {
        let current = pop.ess()?;
        let resampled = current <= config.resample_threshold * n as f64 && n > 1;
        if resampled {
            pop.resample(&mut resample_rng)?;
        } else {
            pop.ancestors = (0..n).collect();
        }
        diag.rows.push(DiagnosticRow { step: k, ess: current, resampled, log_evidence });

        let sigma_next = schedule.sigma_at(k - 1)?;
        let prev_weights = pop.weights()?;
        let moved: Vec<(Vec<f64>, Evaluation, f64)> = pop
            .particles
            .par_iter()
            .zip(pop.evals.par_iter())
            .zip(rngs.par_iter_mut())
            .map(|((x, eval), rng)| {
                let step = propagate(x, k, guidance, sampler, Some(eval), rng)?;
                check_finite(&step.next, k - 1)?;
                let next_eval = guidance.evaluate(&step.next, sigma_next, needs_grad && k > 1)?;
                let g = potential_from_logliks(
                    config.scheme,
                    rho,
                    eval.loglik,
                    next_eval.loglik,
                    &step.next,
                    step.transition.as_ref(),
                )?;
                Ok((step.next, next_eval, g))
            })
            .collect::<Result<_>>()?;
        let mut increments = Vec::with_capacity(n);
        for (i, (x, e, g)) in moved.into_iter().enumerate() {
            pop.particles[i] = x;
            pop.cached_loglik[i] = e.loglik;
            pop.evals[i] = e;
            pop.log_weights[i] += g;
            increments.push(prev_weights[i].ln() + g);
        }
        check_weights(&pop.log_weights, k - 1)?;
        log_evidence += log_sum_exp(&increments);
        pop.step = k - 1;
    }
    diag.rows.push(DiagnosticRow { step: 0, ess: pop.ess()?, resampled: false, log_evidence });
    Ok((pop, diag))
}

/// Point estimate chosen by `config.estimate`.
pub fn estimate(config: &SmcConfig, pop: &Population) -> Result<Vec<f64>> {
    let mut rng = stream_rng(config.sampler.seed, RESAMPLE_STREAM - 1);
    pop.point_estimate(config.estimate, &mut rng)
}
