//! Metrics, task setup, single runs and the experiment grid.

mod config;
mod grid;
mod render;
mod report;

pub use config::{
    keys_help, CoeffKind, Config, DatasetSection, GridSection, GuidanceSection, Method, ObservationSection,
    PriorSection, SamplerSection, SmcSection, SystemName, KEYS,
};
pub use grid::{aggregate, run_grid, verify_manifest, AggregateRow, RunManifest, RunRecord, AGGREGATE_CSV, RUNS_CSV};
pub use render::{render, Palette, RenderInfo};
pub use report::markdown_report;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{generate_dataset, generate_sample, make_observations, stream_rng, DatasetSpec, Observations};
use crate::error::{Error, Result};
use crate::grid::{write_pgdf_file, Field};
use crate::guidance::{Guidance, GuidanceWeights, NormalizedLikelihood, PdeLikelihood};
use crate::prior::{fit_empirical_prior, ChannelNormalization, Denoiser, GaussianPrior};
use crate::residuals::{Group, StateLayout};
use crate::smc::{estimate, smc_run, Diagnostics, SmcConfig};

/// `‖estimate − truth‖₂ / ‖truth‖₂` over the channels of `group`.
pub fn relative_error(estimate: &Field, truth: &Field, layout: &StateLayout, group: Group) -> Result<f64> {
    if estimate.spec() != truth.spec() {
        return Err(Error::Shape("estimate and truth live on different grids".into()));
    }
    let n = truth.spec().cells();
    let (mut num, mut den) = (0.0, 0.0);
    for c in layout.group_channels(group) {
        let range = c * n..(c + 1) * n;
        for (e, t) in estimate.values()[range.clone()].iter().zip(&truth.values()[range]) {
            num += (e - t) * (e - t);
            den += t * t;
        }
    }
    if den == 0.0 {
        return Err(Error::InvalidArgument("truth has zero norm over the channel group".into()));
    }
    Ok((num / den).sqrt())
}

/// Everything a run needs besides the sampler settings.
#[derive(Debug, Clone)]
pub struct Task {
    pub spec: DatasetSpec,
    pub layout: StateLayout,
    /// Prior over normalized states.
    pub prior: GaussianPrior,
    pub normalization: ChannelNormalization,
    pub truth: Field,
}

/// Channel normalization and the prior fitted on normalized samples.
pub fn fit_prior(config: &Config, samples: &[Field]) -> Result<(GaussianPrior, ChannelNormalization)> {
    let normalization = ChannelNormalization::fit(samples)?;
    let scaled: Vec<Field> = samples.iter().map(|s| normalization.normalize_field(s)).collect::<Result<_>>()?;
    let prior = fit_empirical_prior(&scaled, config.prior.shrinkage, config.prior.covariance)?;
    Ok((prior, normalization))
}

impl Task {
    /// Generates the training set, fits the prior and draws the held-out truth.
    pub fn build(config: &Config) -> Result<Self> {
        let spec = config.dataset_spec()?;
        let samples = generate_dataset(&spec)?;
        let (prior, normalization) = fit_prior(config, &samples)?;
        Self::with_prior(config, spec, prior, normalization)
    }

    pub fn with_prior(
        config: &Config,
        spec: DatasetSpec,
        prior: GaussianPrior,
        normalization: ChannelNormalization,
    ) -> Result<Self> {
        if prior.dim() != spec.grid.len() || normalization.channels() != spec.grid.channels {
            return Err(Error::Config(format!(
                "prior dimension {} does not match the dataset state size {}",
                prior.dim(),
                spec.grid.len()
            )));
        }
        let (truth, _) = generate_sample(&spec, spec.sample_count + config.observations.test_index)?;
        Ok(Self { layout: spec.layout(), spec, prior, normalization, truth })
    }

    /// Observations of the truth; mask and noise pattern depend only on the seed.
    pub fn observations(&self, config: &Config, sigma_o: f64) -> Result<Observations> {
        let mut rng = stream_rng(config.observations.seed, 0);
        make_observations(&self.truth, &self.layout, config.observations.count, sigma_o, &mut rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub err_a: f64,
    pub err_u: f64,
    /// Mean of the two group errors.
    pub err: f64,
    pub final_ess: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub estimate: Field,
    pub metrics: RunMetrics,
    pub diagnostics: Diagnostics,
}

/// One particle run against the task's truth.
pub fn run_once(task: &Task, obs: &Observations, smc: &SmcConfig, weights: &GuidanceWeights) -> Result<RunOutcome> {
    let physical = PdeLikelihood::new(task.spec.system.clone(), task.layout.clone(), obs.clone(), weights)?;
    let likelihood = NormalizedLikelihood { inner: &physical, normalization: &task.normalization };
    let guidance = Guidance::new(&task.prior, &likelihood, weights)?;
    let (pop, diagnostics) = smc_run(smc, &guidance)?;
    let estimate = Field::new(task.spec.grid, task.normalization.denormalize(&estimate(smc, &pop)?)?)?;
    let err_a = relative_error(&estimate, &task.truth, &task.layout, Group::Coefficient)?;
    let err_u = relative_error(&estimate, &task.truth, &task.layout, Group::Solution)?;
    let final_ess = diagnostics.rows.last().map_or(f64::NAN, |r| r.ess);
    Ok(RunOutcome { estimate, metrics: RunMetrics { err_a, err_u, err: 0.5 * (err_a + err_u), final_ess }, diagnostics })
}

/// Guidance weights of a method; the unguided baseline zeroes them.
pub fn method_weights(config: &Config, method: Method) -> GuidanceWeights {
    let w = config.guidance.weights();
    match method {
        Method::Nog => GuidanceWeights { temper_rho: 0.0, ..GuidanceWeights::zero() },
        _ => w,
    }
}

pub fn method_config(config: &Config, method: Method, particles: usize, seed: u64) -> Result<SmcConfig> {
    let n = if method.uses_particles() { particles } else { 1 };
    config.smc_config(method.mode(), method.scheme(), n, seed)
}

pub(crate) fn write_metrics_csv(path: &Path, metrics: &RunMetrics) -> Result<()> {
    fs::write(
        path,
        format!("err_a,err_u,err,final_ess\n{},{},{},{}\n", metrics.err_a, metrics.err_u, metrics.err, metrics.final_ess),
    )?;
    Ok(())
}

/// Writes `estimate.pgdf`, `truth.pgdf`, `metrics.csv`, `diagnostics.csv`
/// and `summary.json` into `dir`.
pub fn write_outcome(dir: impl AsRef<Path>, task: &Task, smc: &SmcConfig, outcome: &RunOutcome) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_pgdf_file(&outcome.estimate, dir.join("estimate.pgdf"))?;
    write_pgdf_file(&task.truth, dir.join("truth.pgdf"))?;
    write_metrics_csv(&dir.join("metrics.csv"), &outcome.metrics)?;
    outcome.diagnostics.write(dir, smc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Boundary, GridSpec};
    use crate::residuals::PdeKind;

    fn pair() -> (Field, StateLayout) {
        let spec = GridSpec::new(3, 3, 2, 0.25, Boundary::DirichletZero).unwrap();
        let f = Field::from_fn(spec, |c, i, j| 1.0 + c as f64 + (i * 3 + j) as f64 * 0.1).unwrap();
        (f, StateLayout::canonical(PdeKind::Poisson))
    }

    #[test]
    fn relative_error_examples() {
        let (t, layout) = pair();
        for g in [Group::Coefficient, Group::Solution] {
            assert_eq!(relative_error(&t, &t, &layout, g).unwrap(), 0.0);
            assert_eq!(relative_error(&Field::zeros(*t.spec()), &t, &layout, g).unwrap(), 1.0);
            let scaled = Field::new(*t.spec(), t.values().iter().map(|v| 1.1 * v).collect()).unwrap();
            assert!((relative_error(&scaled, &t, &layout, g).unwrap() - 0.1).abs() < 1e-12);
        }
        let z = Field::zeros(*t.spec());
        assert!(relative_error(&t, &z, &layout, Group::Solution).is_err());
    }

    #[test]
    fn groups_are_measured_separately() {
        let (t, layout) = pair();
        let mut v = t.values().to_vec();
        v[9] += 5.0;
        let e = Field::new(*t.spec(), v).unwrap();
        assert_eq!(relative_error(&e, &t, &layout, Group::Coefficient).unwrap(), 0.0);
        assert!(relative_error(&e, &t, &layout, Group::Solution).unwrap() > 0.0);
    }
}
