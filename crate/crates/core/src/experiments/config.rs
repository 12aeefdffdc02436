//! Run configuration: one TOML file with a table per pipeline stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{sample_coupling, stream_rng, CoeffModel, DatasetSpec, RdSettings};
use crate::error::{Error, Result};
use crate::grid::{Boundary, GridSpec};
use crate::guidance::{GuidanceWeights, JacobianMode, Scheme};
use crate::prior::{CovarianceFit, NoiseSchedule};
use crate::residuals::{PdeSystem, StateLayout};
use crate::samplers::{SamplerConfig, SamplerMode};
use crate::smc::{PointEstimate, SmcConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemName {
    Darcy,
    Poisson,
    Helmholtz,
    DivergenceFree,
    #[serde(alias = "gray_scott_2")]
    GrayScott,
    #[serde(alias = "competitive_3")]
    Competitive,
}

impl SystemName {
    pub fn name(self) -> &'static str {
        match self {
            SystemName::Darcy => "darcy",
            SystemName::Poisson => "poisson",
            SystemName::Helmholtz => "helmholtz",
            SystemName::DivergenceFree => "divergence_free",
            SystemName::GrayScott => "gray_scott",
            SystemName::Competitive => "competitive",
        }
    }

    fn reaction_diffusion(self) -> bool {
        matches!(self, SystemName::GrayScott | SystemName::Competitive)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoeffKind {
    Smooth,
    Thresholded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub system: SystemName,
    pub height: usize,
    pub width: usize,
    /// Cell size; `1/(n+1)` for Dirichlet and `1/n` for periodic grids when absent.
    pub spacing: Option<f64>,
    pub samples: usize,
    pub seed: u64,
    pub coeff_model: CoeffKind,
    pub length_scale: f64,
    pub coeff_mean: f64,
    pub coeff_std: f64,
    pub coeff_low: f64,
    pub coeff_high: f64,
    pub source: f64,
    pub k_wave: f64,
    pub feed: f64,
    pub removal: f64,
    pub horizon: f64,
    pub coupling: Option<[[f64; 3]; 3]>,
    pub dt: f64,
    pub records: usize,
    pub diffusivity: Option<Vec<f64>>,
    pub modulation: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            system: SystemName::Poisson,
            height: 32,
            width: 32,
            spacing: None,
            samples: 200,
            seed: 0,
            coeff_model: CoeffKind::Smooth,
            length_scale: 4.0,
            coeff_mean: 1.0,
            coeff_std: 1.0,
            coeff_low: 3.0,
            coeff_high: 12.0,
            source: 1.0,
            k_wave: 2.0,
            feed: 0.035,
            removal: 0.06,
            horizon: 1.0,
            coupling: None,
            dt: 0.01,
            records: 11,
            diffusivity: None,
            modulation: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSection {
    pub covariance: CovarianceFit,
    pub shrinkage: f64,
}

impl Default for PriorSection {
    fn default() -> Self {
        Self { covariance: CovarianceFit::Dense, shrinkage: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservationSection {
    /// Observed cells per channel group.
    pub count: usize,
    pub sigma_o: f64,
    pub seed: u64,
    /// Held-out sample used as ground truth.
    pub test_index: usize,
}

impl Default for ObservationSection {
    fn default() -> Self {
        Self { count: 31, sigma_o: 0.0, seed: 1, test_index: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub mode: SamplerMode,
    pub steps: usize,
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub rho: f64,
    pub s_churn: f64,
    pub seed: u64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self { mode: SamplerMode::Sosag, steps: 200, sigma_max: 80.0, sigma_min: 0.002, rho: 7.0, s_churn: 2.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceSection {
    pub beta: f64,
    pub gamma: f64,
    pub omega: f64,
    #[serde(alias = "rho")]
    pub temper_rho: f64,
    pub jacobian_mode: JacobianMode,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        let w = GuidanceWeights::default();
        Self { beta: w.beta, gamma: w.gamma, omega: w.omega, temper_rho: w.temper_rho, jacobian_mode: w.jacobian_mode }
    }
}

impl GuidanceSection {
    pub fn weights(&self) -> GuidanceWeights {
        GuidanceWeights {
            beta: self.beta,
            gamma: self.gamma,
            omega: self.omega,
            temper_rho: self.temper_rho,
            jacobian_mode: self.jacobian_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmcSection {
    pub particles: usize,
    pub resample_threshold: f64,
    pub scheme: Scheme,
    pub estimate: PointEstimate,
}

impl Default for SmcSection {
    fn default() -> Self {
        Self { particles: 8, resample_threshold: 0.5, scheme: Scheme::Pbs, estimate: PointEstimate::BestParticle }
    }
}

/// Named sampler/weighting combinations compared by the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Deterministic chain without guidance.
    Nog,
    /// Deterministic guided chain.
    OdeGuided,
    GemTds,
    GemPbs,
    /// Single guided second-order chain.
    Sosag,
    SosagPbs,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::Nog, Method::OdeGuided, Method::GemTds, Method::GemPbs, Method::Sosag, Method::SosagPbs];

    pub fn name(self) -> &'static str {
        match self {
            Method::Nog => "nog",
            Method::OdeGuided => "ode_guided",
            Method::GemTds => "gem_tds",
            Method::GemPbs => "gem_pbs",
            Method::Sosag => "sosag",
            Method::SosagPbs => "sosag_pbs",
        }
    }

    /// Whether the method runs a population rather than a single chain.
    pub fn uses_particles(self) -> bool {
        matches!(self, Method::GemTds | Method::GemPbs | Method::SosagPbs)
    }

    pub fn mode(self) -> SamplerMode {
        match self {
            Method::Nog | Method::OdeGuided => SamplerMode::OdeHeunGuided,
            Method::GemTds | Method::GemPbs => SamplerMode::Gem,
            Method::Sosag | Method::SosagPbs => SamplerMode::Sosag,
        }
    }

    pub fn scheme(self) -> Scheme {
        match self {
            Method::GemTds => Scheme::Tds,
            _ => Scheme::Pbs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    /// Defaults to the dataset system alone.
    pub systems: Vec<SystemName>,
    pub methods: Vec<Method>,
    pub noise_levels: Vec<f64>,
    pub particle_counts: Vec<usize>,
    pub seeds: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            systems: Vec::new(),
            methods: Method::ALL.to_vec(),
            noise_levels: vec![0.0, 0.005, 0.01, 0.02],
            particle_counts: vec![8],
            seeds: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub dataset: DatasetSection,
    pub prior: PriorSection,
    pub observations: ObservationSection,
    pub sampler: SamplerSection,
    pub guidance: GuidanceSection,
    pub smc: SmcSection,
    pub grid: GridSection,
}

/// Every configuration key with its default and meaning.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("dataset.system", "\"poisson\"", "darcy | poisson | helmholtz | divergence_free | gray_scott | competitive"),
    ("dataset.height", "32", "grid rows"),
    ("dataset.width", "32", "grid columns"),
    ("dataset.spacing", "auto", "cell size; 1/(n+1) on Dirichlet grids, 1/n on periodic ones"),
    ("dataset.samples", "200", "training samples used to fit the prior"),
    ("dataset.seed", "0", "dataset random seed"),
    ("dataset.coeff_model", "\"smooth\"", "smooth | thresholded coefficient field"),
    ("dataset.length_scale", "4.0", "correlation length of the random field, in cells"),
    ("dataset.coeff_mean", "1.0", "smooth model mean"),
    ("dataset.coeff_std", "1.0", "smooth model standard deviation"),
    ("dataset.coeff_low", "3.0", "thresholded model low value"),
    ("dataset.coeff_high", "12.0", "thresholded model high value"),
    ("dataset.source", "1.0", "darcy source term"),
    ("dataset.k_wave", "2.0", "helmholtz wave number"),
    ("dataset.feed", "0.035", "gray_scott feed rate"),
    ("dataset.removal", "0.06", "gray_scott removal rate"),
    ("dataset.horizon", "1.0", "reaction-diffusion end time"),
    ("dataset.coupling", "random", "competitive 3x3 coupling matrix, zero diagonal"),
    ("dataset.dt", "0.01", "reaction-diffusion time step"),
    ("dataset.records", "11", "stored snapshots, both ends included"),
    ("dataset.diffusivity", "per system", "mean diffusivity per species"),
    ("dataset.modulation", "0.2", "log-amplitude of the diffusivity field"),
    ("prior.covariance", "\"dense\"", "dense | diagonal"),
    ("prior.shrinkage", "0.05", "weight of the isotropic shrinkage target, in (0, 1]"),
    ("observations.count", "31", "observed cells per channel group"),
    ("observations.sigma_o", "0.0", "observation noise standard deviation"),
    ("observations.seed", "1", "seed of the observation mask and noise"),
    ("observations.test_index", "0", "held-out sample used as ground truth"),
    ("sampler.mode", "\"sosag\"", "em | gem | second_order | sosag | ode_heun | ode_heun_guided"),
    ("sampler.steps", "200", "noise levels K"),
    ("sampler.sigma_max", "80.0", "largest noise level"),
    ("sampler.sigma_min", "0.002", "smallest noise level"),
    ("sampler.rho", "7.0", "schedule warp exponent"),
    ("sampler.s_churn", "2.0", "total churn of the second-order sampler"),
    ("sampler.seed", "0", "base seed of the particle streams"),
    ("guidance.beta", "1.0", "weight of the solution observations"),
    ("guidance.gamma", "1.0", "weight of the coefficient observations"),
    ("guidance.omega", "1.0", "weight of the PDE residual"),
    ("guidance.temper_rho", "1.0", "likelihood tempering exponent in the particle weights (alias: guidance.rho)"),
    ("guidance.jacobian_mode", "\"exact\"", "exact | identity"),
    ("smc.particles", "8", "population size"),
    ("smc.resample_threshold", "0.5", "resample when ESS <= threshold * N"),
    ("smc.scheme", "\"pbs\"", "tds | pbs"),
    ("smc.estimate", "\"best_particle\"", "best_particle | weighted_mean | random_particle"),
    ("grid.systems", "[dataset.system]", "systems swept by `grid`"),
    ("grid.methods", "all", "nog | ode_guided | gem_tds | gem_pbs | sosag | sosag_pbs"),
    ("grid.noise_levels", "[0.0, 0.005, 0.01, 0.02]", "observation noise levels"),
    ("grid.particle_counts", "[8]", "population sizes for particle methods"),
    ("grid.seeds", "20", "independent sampler seeds per cell"),
];

pub fn keys_help() -> String {
    let width = KEYS.iter().map(|k| k.0.len()).max().unwrap_or(0);
    let mut out = String::from("Configuration keys (TOML, all optional):\n");
    for (key, default, text) in KEYS {
        out.push_str(&format!("  {key:<width$}  {text} [default: {default}]\n"));
    }
    out
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.dataset_spec().map_err(cfg)?.validate().map_err(cfg)?;
        if self.observations.count > self.dataset.height * self.dataset.width {
            return Err(Error::Config("observations.count exceeds the number of cells".into()));
        }
        if !(self.observations.sigma_o >= 0.0) {
            return Err(Error::Config("observations.sigma_o must be >= 0".into()));
        }
        if !(self.prior.shrinkage > 0.0 && self.prior.shrinkage <= 1.0) {
            return Err(Error::Config("prior.shrinkage must lie in (0, 1]".into()));
        }
        self.guidance.weights().validate().map_err(cfg)?;
        self.smc_config(self.sampler.mode, self.smc.scheme, self.smc.particles, self.sampler.seed).map_err(cfg)?;
        if self.grid.noise_levels.iter().any(|s| !(*s >= 0.0)) || self.grid.particle_counts.contains(&0) {
            return Err(Error::Config("grid noise levels must be >= 0 and particle counts positive".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.sampler;
        NoiseSchedule::new(s.sigma_max, s.sigma_min, s.steps, s.rho)
    }

    pub fn smc_config(&self, mode: SamplerMode, scheme: Scheme, particles: usize, seed: u64) -> Result<SmcConfig> {
        let mut sampler = SamplerConfig::new(self.schedule()?, mode, seed);
        sampler.s_churn = self.sampler.s_churn;
        let mut c = SmcConfig::new(particles, scheme, sampler)?;
        c.resample_threshold = self.smc.resample_threshold;
        c.estimate = self.smc.estimate;
        c.validate()?;
        Ok(c)
    }

    pub fn systems(&self) -> Vec<SystemName> {
        if self.grid.systems.is_empty() {
            vec![self.dataset.system]
        } else {
            self.grid.systems.clone()
        }
    }

    /// The same configuration with another system.
    pub fn with_system(&self, system: SystemName) -> Config {
        let mut c = self.clone();
        c.dataset.system = system;
        c
    }

    pub fn pde_system(&self) -> Result<PdeSystem> {
        let d = &self.dataset;
        let system = match d.system {
            SystemName::Darcy => PdeSystem::Darcy { source: d.source },
            SystemName::Poisson => PdeSystem::Poisson,
            SystemName::Helmholtz => PdeSystem::Helmholtz { k_wave: d.k_wave },
            SystemName::DivergenceFree => PdeSystem::DivergenceFree,
            SystemName::GrayScott => PdeSystem::GrayScott2 { feed: d.feed, removal: d.removal, horizon: d.horizon },
            SystemName::Competitive => {
                let coupling = d.coupling.unwrap_or_else(|| sample_coupling(&mut stream_rng(d.seed, u64::MAX)));
                PdeSystem::Competitive3 { coupling, horizon: d.horizon }
            }
        };
        system.validate()?;
        Ok(system)
    }

    pub fn layout(&self) -> Result<StateLayout> {
        Ok(StateLayout::canonical(self.pde_system()?.kind()))
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        let d = &self.dataset;
        let system = self.pde_system()?;
        let layout = StateLayout::canonical(system.kind());
        let boundary = match d.system {
            SystemName::Darcy | SystemName::Poisson | SystemName::Helmholtz => Boundary::DirichletZero,
            _ => Boundary::Periodic,
        };
        let spacing = d.spacing.unwrap_or(match boundary {
            Boundary::DirichletZero => 1.0 / (d.height.max(d.width) + 1) as f64,
            Boundary::Periodic => 1.0 / d.height.max(d.width) as f64,
        });
        let grid = GridSpec::new(d.height, d.width, layout.channels(), spacing, boundary)?;
        let coeff_model = match d.coeff_model {
            CoeffKind::Smooth => CoeffModel::SmoothGrf { length_scale: d.length_scale, mean: d.coeff_mean, std: d.coeff_std },
            CoeffKind::Thresholded => {
                CoeffModel::ThresholdedGrf { length_scale: d.length_scale, low: d.coeff_low, high: d.coeff_high }
            }
        };
        let rd = if d.system.reaction_diffusion() {
            if !(d.dt > 0.0) {
                return Err(Error::Config("dataset.dt must be positive".into()));
            }
            let steps = (d.horizon / d.dt).round() as usize;
            let diffusivity = d.diffusivity.clone().unwrap_or_else(|| match d.system {
                SystemName::GrayScott => vec![0.002, 0.001],
                _ => vec![0.002; 3],
            });
            Some(RdSettings { dt: d.dt, steps, records: d.records, diffusivity, modulation: d.modulation })
        } else {
            None
        };
        Ok(DatasetSpec { system, grid, sample_count: d.samples, coeff_model, seed: d.seed, rd })
    }
}
