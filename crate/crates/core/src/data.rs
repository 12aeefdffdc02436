//! Synthetic datasets: coefficient ensembles, forward solves, sparse noisy
//! observations, and on-disk persistence.

use std::fs;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{gradient, read_pgdf_file, write_pgdf_file, Field, GridSpec, Mask};
use crate::residuals::{Group, PdeKind, PdeSystem, StateLayout};
use crate::solvers::{simulate_rd, solve_elliptic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum CoeffModel {
    /// `mean + std·g` for a unit-variance Gaussian random field `g`.
    SmoothGrf { length_scale: f64, mean: f64, std: f64 },
    /// `high` where `g > 0`, `low` elsewhere.
    ThresholdedGrf { length_scale: f64, low: f64, high: f64 },
}

impl CoeffModel {
    pub fn length_scale(&self) -> f64 {
        match *self {
            CoeffModel::SmoothGrf { length_scale, .. } | CoeffModel::ThresholdedGrf { length_scale, .. } => length_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdSettings {
    pub dt: f64,
    pub steps: usize,
    /// Snapshots kept along the trajectory, including both ends.
    pub records: usize,
    /// Mean diffusivity per species.
    pub diffusivity: Vec<f64>,
    /// Log-amplitude of the per-pixel diffusivity modulation.
    pub modulation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub system: PdeSystem,
    pub grid: GridSpec,
    pub sample_count: usize,
    pub coeff_model: CoeffModel,
    pub seed: u64,
    pub rd: Option<RdSettings>,
}

impl DatasetSpec {
    pub fn layout(&self) -> StateLayout {
        StateLayout::canonical(self.system.kind())
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.grid.validate()?;
        self.system.check_boundary(self.grid.boundary)?;
        let channels = self.layout().channels();
        if self.grid.channels != channels {
            return Err(Error::Config(format!(
                "{} states have {channels} channels, grid declares {}",
                self.system.kind().name(),
                self.grid.channels
            )));
        }
        if self.sample_count == 0 {
            return Err(Error::Config("sample_count must be positive".into()));
        }
        if !(self.coeff_model.length_scale() > 0.0) {
            return Err(Error::Config("GRF length scale must be positive".into()));
        }
        let horizon = match self.system {
            PdeSystem::GrayScott2 { horizon, .. } | PdeSystem::Competitive3 { horizon, .. } => Some(horizon),
            _ => None,
        };
        if let Some(horizon) = horizon {
            let rd = self
                .rd
                .as_ref()
                .ok_or_else(|| Error::Config("reaction-diffusion datasets need rd settings".into()))?;
            if rd.diffusivity.len() != self.system.components() {
                return Err(Error::Config(format!(
                    "need {} diffusivities, got {}",
                    self.system.components(),
                    rd.diffusivity.len()
                )));
            }
            let simulated = rd.dt * rd.steps as f64;
            if (simulated - horizon).abs() > 1e-9 * horizon {
                return Err(Error::Config(format!("dt·steps = {simulated} differs from horizon {horizon}")));
            }
        }
        Ok(())
    }
}

/// Independent stream for `(seed, index)`.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn fft2(data: &mut [Complex<f64>], height: usize, width: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(width), planner.plan_fft_inverse(height))
    } else {
        (planner.plan_fft_forward(width), planner.plan_fft_forward(height))
    };
    for row in data.chunks_mut(width) {
        row_fft.process(row);
    }
    let mut column = vec![Complex::new(0.0, 0.0); height];
    for j in 0..width {
        for i in 0..height {
            column[i] = data[i * width + j];
        }
        col_fft.process(&mut column);
        for i in 0..height {
            data[i * width + j] = column[i];
        }
    }
}

/// Unit-RMS periodic Gaussian random field with squared-exponential
/// spectrum of correlation length `length_scale` cells.
pub fn gaussian_random_field(height: usize, width: usize, length_scale: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut data: Vec<Complex<f64>> =
        (0..height * width).map(|_| Complex::new(rng.sample(StandardNormal), 0.0)).collect();
    fft2(&mut data, height, width, false);
    let omega = |k: usize, n: usize| {
        let k = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
        2.0 * std::f64::consts::PI * k / n as f64
    };
    for i in 0..height {
        for j in 0..width {
            let w2 = omega(i, height).powi(2) + omega(j, width).powi(2);
            data[i * width + j] *= (-0.5 * w2 * length_scale * length_scale).exp();
        }
    }
    fft2(&mut data, height, width, true);
    let field: Vec<f64> = data.iter().map(|c| c.re).collect();
    let rms = (field.iter().map(|v| v * v).sum::<f64>() / field.len() as f64).sqrt();
    field.iter().map(|v| v / rms).collect()
}

/// The coefficient part of a sample: `a` for elliptic kinds, initial species
/// and diffusivities for reaction–diffusion, the initial velocity's stream
/// function pair for the divergence constraint.
pub fn sample_coefficients(spec: &DatasetSpec, rng: &mut impl Rng) -> Result<Field> {
    let plane = spec.grid.with_channels(1);
    let (h, w) = (plane.height, plane.width);
    let ell = spec.coeff_model.length_scale();
    match spec.system.kind() {
        PdeKind::Darcy | PdeKind::Poisson | PdeKind::Helmholtz => {
            let g = gaussian_random_field(h, w, ell, rng);
            let values = match spec.coeff_model {
                CoeffModel::SmoothGrf { mean, std, .. } => g.iter().map(|v| mean + std * v).collect(),
                CoeffModel::ThresholdedGrf { low, high, .. } => {
                    g.iter().map(|&v| if v > 0.0 { high } else { low }).collect()
                }
            };
            Field::new(plane, values)
        }
        PdeKind::DivergenceFree => {
            let a = gaussian_random_field(h, w, ell, rng);
            let b = gaussian_random_field(h, w, ell, rng);
            Field::new(plane.with_channels(2), a.into_iter().chain(b).collect())
        }
        PdeKind::GrayScott2 | PdeKind::Competitive3 => {
            let rd = spec.rd.as_ref().ok_or_else(|| Error::Config("missing rd settings".into()))?;
            let count = spec.system.components();
            let mut values = rd_initial_state(spec.system.kind(), h, w, rng);
            for s in 0..count {
                let g = gaussian_random_field(h, w, ell, rng);
                values.extend(g.iter().map(|v| rd.diffusivity[s] * (rd.modulation * v).exp()));
            }
            Field::new(plane.with_channels(2 * count), values)
        }
    }
}

const RD_NOISE: f64 = 0.01;

fn in_square(i: usize, j: usize, ci: f64, cj: f64, half: f64) -> bool {
    (i as f64 + 0.5 - ci).abs() < half && (j as f64 + 0.5 - cj).abs() < half
}

fn rd_initial_state(kind: PdeKind, h: usize, w: usize, rng: &mut impl Rng) -> Vec<f64> {
    let (ch, cw) = (h as f64 / 2.0, w as f64 / 2.0);
    let mut values = Vec::new();
    let mut push = |level: &dyn Fn(usize, usize) -> f64| {
        for i in 0..h {
            for j in 0..w {
                values.push(level(i, j));
            }
        }
    };
    match kind {
        PdeKind::GrayScott2 => {
            let half = h.min(w) as f64 / 8.0;
            push(&|i, j| if in_square(i, j, ch, cw, half) { 0.5 } else { 1.0 });
            push(&|i, j| if in_square(i, j, ch, cw, half) { 0.25 } else { 0.0 });
        }
        _ => {
            let half = h.min(w) as f64 / 12.0;
            let off = h.min(w) as f64 / 6.0;
            let centres = [(ch - off, cw), (ch + off / 2.0, cw - off), (ch + off / 2.0, cw + off)];
            let base = [0.6, 0.2, 0.2];
            let peak = [0.9, 0.7, 0.7];
            for s in 0..3 {
                let (pi, pj) = centres[s];
                push(&|i, j| if in_square(i, j, pi, pj, half) { peak[s] } else { base[s] });
            }
        }
    }
    for v in &mut values {
        *v += RD_NOISE * rng.sample::<f64, _>(StandardNormal);
    }
    values
}

/// Cyclic couplings `a12, a23, a31 ~ U(1.2, 2.0)`, the rest `U(0.3, 0.8)`.
pub fn sample_coupling(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    let mut a = [[0.0; 3]; 3];
    for (i, j) in [(0, 1), (1, 2), (2, 0)] {
        a[i][j] = rng.random_range(1.2..2.0);
    }
    for (i, j) in [(0, 2), (1, 0), (2, 1)] {
        a[i][j] = rng.random_range(0.3..0.8);
    }
    a
}

/// Divergence-free velocity `(∂ⱼψ, −∂ᵢψ)` normalised to unit RMS.
fn curl(psi: &Field) -> Result<(Field, Field)> {
    let (dx, dy) = gradient(psi, 0)?;
    let rms = (dx.values().iter().chain(dy.values()).map(|v| v * v).sum::<f64>() / (2 * dx.values().len()) as f64)
        .sqrt()
        .max(f64::MIN_POSITIVE);
    let spec = *dx.spec();
    Ok((
        Field::new(spec, dy.values().iter().map(|v| v / rms).collect())?,
        Field::new(spec, dx.values().iter().map(|v| -v / rms).collect())?,
    ))
}

/// One complete state in canonical layout, plus the full trajectory for
/// time-dependent kinds.
pub fn generate_sample(spec: &DatasetSpec, index: usize) -> Result<(Field, Vec<Field>)> {
    let mut rng = stream_rng(spec.seed, index as u64);
    let coeffs = sample_coefficients(spec, &mut rng)?;
    let plane = spec.grid.with_channels(1);
    match spec.system.kind() {
        PdeKind::Darcy | PdeKind::Poisson | PdeKind::Helmholtz => {
            let u = solve_elliptic(&spec.system, &coeffs)?;
            Ok((Field::stack(&[&coeffs, &u])?, Vec::new()))
        }
        PdeKind::DivergenceFree => {
            let psi0 = coeffs.select_channels(&[0])?;
            let n = plane.cells();
            let drift: Vec<f64> =
                (0..n).map(|k| coeffs.values()[k] + 0.5 * coeffs.values()[n + k]).collect();
            let psi_t = Field::new(plane, drift)?;
            let (v0x, v0y) = curl(&psi0)?;
            let (vtx, vty) = curl(&psi_t)?;
            Ok((Field::stack(&[&v0x, &v0y, &vtx, &vty])?, Vec::new()))
        }
        PdeKind::GrayScott2 | PdeKind::Competitive3 => {
            let rd = spec.rd.as_ref().ok_or_else(|| Error::Config("missing rd settings".into()))?;
            let count = spec.system.components();
            let species: Vec<usize> = (0..count).collect();
            let diff: Vec<usize> = (count..2 * count).collect();
            let initial = coeffs.select_channels(&species)?;
            let diffusivity = coeffs.select_channels(&diff)?;
            let trajectory = simulate_rd(&spec.system, &initial, &diffusivity, rd.dt, rd.steps, rd.records)?;
            let terminal = trajectory.last().expect("at least two records");
            Ok((Field::stack(&[&coeffs, terminal])?, trajectory))
        }
    }
}

/// All samples of a dataset, generated in parallel on independent streams.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<Field>> {
    spec.validate()?;
    (0..spec.sample_count)
        .into_par_iter()
        .map(|i| generate_sample(spec, i).map(|(x, _)| x))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observations {
    pub grid: GridSpec,
    pub channels_a: Vec<usize>,
    pub indices_a: Vec<usize>,
    /// Channel-major: all masked cells of the first group channel, then the next.
    pub values_a: Vec<f64>,
    pub channels_u: Vec<usize>,
    pub indices_u: Vec<usize>,
    pub values_u: Vec<f64>,
    pub sigma_o: f64,
}

impl Observations {
    pub fn validate(&self) -> Result<()> {
        let cells = self.grid.cells();
        for (name, channels, indices, values) in [
            ("a", &self.channels_a, &self.indices_a, &self.values_a),
            ("u", &self.channels_u, &self.indices_u, &self.values_u),
        ] {
            if values.len() != channels.len() * indices.len() {
                return Err(Error::Shape(format!(
                    "{name}-group has {} values for {} channels x {} cells",
                    values.len(),
                    channels.len(),
                    indices.len()
                )));
            }
            if let Some(&c) = channels.iter().find(|&&c| c >= self.grid.channels) {
                return Err(Error::ChannelOutOfRange { channel: c, channels: self.grid.channels });
            }
            if let Some(&i) = indices.iter().find(|&&i| i >= cells) {
                return Err(Error::Shape(format!("observation index {i} outside {cells} cells")));
            }
        }
        if !(self.sigma_o >= 0.0) {
            return Err(Error::InvalidArgument("sigma_o must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn mask_a(&self) -> Result<Mask> {
        Mask::from_indices(self.grid, &self.indices_a)
    }

    pub fn mask_u(&self) -> Result<Mask> {
        Mask::from_indices(self.grid, &self.indices_u)
    }

    /// Observed scalar entries per group, `(n_a, n_u)`.
    pub fn counts(&self) -> (usize, usize) {
        (self.values_a.len(), self.values_u.len())
    }
}

fn gather(x: &Field, channels: &[usize], indices: &[usize], sigma_o: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(channels.len() * indices.len());
    for &c in channels {
        let plane = x.channel(c)?;
        for &i in indices {
            let z: f64 = rng.sample(StandardNormal);
            out.push(plane[i] + sigma_o * z);
        }
    }
    Ok(out)
}

fn make_observations_at(
    x: &Field,
    channels_a: &[usize],
    indices_a: &[usize],
    channels_u: &[usize],
    indices_u: &[usize],
    sigma_o: f64,
    rng: &mut impl Rng,
) -> Result<Observations> {
    let values_a = gather(x, channels_a, indices_a, sigma_o, rng)?;
    let values_u = gather(x, channels_u, indices_u, sigma_o, rng)?;
    let obs = Observations {
        grid: x.spec().with_channels(x.spec().channels),
        channels_a: channels_a.to_vec(),
        indices_a: indices_a.to_vec(),
        values_a,
        channels_u: channels_u.to_vec(),
        indices_u: indices_u.to_vec(),
        values_u,
        sigma_o,
    };
    obs.validate()?;
    Ok(obs)
}

/// Draws `n_obs` cells without replacement for each channel group and
/// records the true values plus `N(0, σ_O²)` noise. Noise draws for a given
/// rng state do not depend on `sigma_o`, so sweeps share one noise pattern.
pub fn make_observations(
    x: &Field,
    layout: &StateLayout,
    n_obs: usize,
    sigma_o: f64,
    rng: &mut impl Rng,
) -> Result<Observations> {
    let cells = x.spec().cells();
    if n_obs > cells {
        return Err(Error::TooManyObservations { requested: n_obs, available: cells });
    }
    if layout.channels() != x.spec().channels {
        return Err(Error::Layout("layout and state channel counts differ".into()));
    }
    let mut ia = sample_indices(rng, cells, n_obs).into_vec();
    let mut iu = sample_indices(rng, cells, n_obs).into_vec();
    ia.sort_unstable();
    iu.sort_unstable();
    make_observations_at(
        x,
        &layout.group_channels(Group::Coefficient),
        &ia,
        &layout.group_channels(Group::Solution),
        &iu,
        sigma_o,
        rng,
    )
}

/// Lower-case hex SHA-256 of a file's bytes.
pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub file: String,
    pub sha256: String,
    pub channel_min: Vec<f64>,
    pub channel_max: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    pub seed: u64,
    pub samples: Vec<SampleEntry>,
}

pub const DATASET_MANIFEST: &str = "manifest.json";

pub fn write_dataset(dir: impl AsRef<Path>, spec: &DatasetSpec, samples: &[Field]) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, x) in samples.iter().enumerate() {
        let file = format!("sample_{i:05}.pgdf");
        let path = dir.join(&file);
        write_pgdf_file(x, &path)?;
        let n = x.spec().cells();
        let (mut lo, mut hi) = (Vec::new(), Vec::new());
        for plane in x.values().chunks(n) {
            lo.push(plane.iter().copied().fold(f64::INFINITY, f64::min));
            hi.push(plane.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        }
        entries.push(SampleEntry { file, sha256: file_digest(&path)?, channel_min: lo, channel_max: hi });
    }
    let manifest = DatasetManifest { spec: spec.clone(), seed: spec.seed, samples: entries };
    fs::write(dir.join(DATASET_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<Field>)> {
    let dir = dir.as_ref();
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join(DATASET_MANIFEST))?)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let path = dir.join(&entry.file);
        if file_digest(&path)? != entry.sha256 {
            return Err(Error::Format(format!("{} does not match its recorded digest", entry.file)));
        }
        samples.push(read_pgdf_file(path)?);
    }
    Ok((manifest, samples))
}
