//! Uniform 2-D grids, multi-channel fields and observation masks.
//!
//! Values are stored row-major by `(channel, row, column)`. Rows run along
//! the `x` axis of the stencils and columns along `y`.

mod io;
mod stencil;

pub use io::{read_pgdf, read_pgdf_file, to_csv, write_pgdf, write_pgdf_file, PGDF_MAGIC, PGDF_VERSION};
pub use stencil::{
    div_coef_grad, div_coef_grad_adjoint_coef, div_coef_grad_adjoint_u, divergence, gradient,
    laplacian, stencil_adjoint_apply, stencil_apply, Stencil,
};

pub(crate) use stencil::{
    apply_plane, apply_plane_adjoint, flux_plane, flux_plane_adjoint_coef, flux_plane_adjoint_u, flux_plane_diagonal,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Ghost cells outside the domain are held at zero.
    DirichletZero,
    Periodic,
}

impl Boundary {
    pub(crate) fn code(self) -> u8 {
        match self {
            Boundary::DirichletZero => 0,
            Boundary::Periodic => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Boundary::DirichletZero),
            1 => Ok(Boundary::Periodic),
            other => Err(Error::Format(format!("unknown boundary code {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub spacing: f64,
    pub boundary: Boundary,
}

impl GridSpec {
    pub fn new(height: usize, width: usize, channels: usize, spacing: f64, boundary: Boundary) -> Result<Self> {
        let spec = Self { height, width, channels, spacing, boundary };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 3 || self.width < 3 {
            return Err(Error::InvalidGrid(format!(
                "grid must be at least 3x3, got {}x{}",
                self.height, self.width
            )));
        }
        if self.channels == 0 {
            return Err(Error::InvalidGrid("at least one channel required".into()));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(Error::InvalidGrid(format!("spacing must be positive, got {}", self.spacing)));
        }
        Ok(())
    }

    /// Cells per channel.
    #[inline]
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Total number of values.
    #[inline]
    pub fn len(&self) -> usize {
        self.cells() * self.channels
    }

    /// Always false: a valid spec has at least one cell and one channel.
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, channel: usize, row: usize, col: usize) -> usize {
        debug_assert!(channel < self.channels && row < self.height && col < self.width);
        (channel * self.height + row) * self.width + col
    }

    pub fn with_channels(&self, channels: usize) -> Self {
        Self { channels, ..*self }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    spec: GridSpec,
    values: Vec<f64>,
}

impl Field {
    pub fn new(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if values.len() != spec.len() {
            return Err(Error::Shape(format!(
                "expected {} values for {}x{}x{}, got {}",
                spec.len(),
                spec.channels,
                spec.height,
                spec.width,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("field value at flat index {pos}")));
        }
        Ok(Self { spec, values })
    }

    pub fn zeros(spec: GridSpec) -> Self {
        Self { spec, values: vec![0.0; spec.len()] }
    }

    pub fn constant(spec: GridSpec, value: f64) -> Self {
        Self { spec, values: vec![value; spec.len()] }
    }

    /// Builds a field from `f(channel, row, col)`.
    pub fn from_fn(spec: GridSpec, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(spec.len());
        for c in 0..spec.channels {
            for i in 0..spec.height {
                for j in 0..spec.width {
                    values.push(f(c, i, j));
                }
            }
        }
        Self::new(spec, values)
    }

    #[inline]
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.values[self.spec.index(channel, row, col)]
    }

    pub fn channel(&self, channel: usize) -> Result<&[f64]> {
        self.check_channel(channel)?;
        let n = self.spec.cells();
        Ok(&self.values[channel * n..(channel + 1) * n])
    }

    pub(crate) fn check_channel(&self, channel: usize) -> Result<()> {
        if channel >= self.spec.channels {
            return Err(Error::ChannelOutOfRange { channel, channels: self.spec.channels });
        }
        Ok(())
    }

    /// Copies the listed channels into a new field, in the given order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Field> {
        let n = self.spec.cells();
        let mut values = Vec::with_capacity(n * channels.len());
        for &c in channels {
            values.extend_from_slice(self.channel(c)?);
        }
        Field::new(self.spec.with_channels(channels.len()), values)
    }

    /// Stacks single- or multi-channel fields on the same grid.
    pub fn stack(parts: &[&Field]) -> Result<Field> {
        let first = parts.first().ok_or_else(|| Error::Shape("nothing to stack".into()))?;
        let mut values = Vec::new();
        let mut channels = 0;
        for p in parts {
            let s = p.spec();
            if (s.height, s.width, s.boundary) != (first.spec.height, first.spec.width, first.spec.boundary)
                || s.spacing != first.spec.spacing
            {
                return Err(Error::Shape("stacked fields must share a grid".into()));
            }
            channels += s.channels;
            values.extend_from_slice(p.values());
        }
        Field::new(first.spec.with_channels(channels), values)
    }
}

/// Binary indicator over the cells of one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    spec: GridSpec,
    indicator: Vec<bool>,
    count: usize,
}

impl Mask {
    pub fn from_indices(spec: GridSpec, indices: &[usize]) -> Result<Self> {
        let spec = spec.with_channels(1);
        spec.validate()?;
        let mut indicator = vec![false; spec.cells()];
        for &idx in indices {
            if idx >= indicator.len() {
                return Err(Error::Shape(format!("mask index {idx} outside grid of {} cells", indicator.len())));
            }
            indicator[idx] = true;
        }
        let count = indicator.iter().filter(|&&b| b).count();
        Ok(Self { spec, indicator, count })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn indicator(&self) -> &[bool] {
        &self.indicator
    }

    /// Flat cell indices of the set entries, ascending.
    pub fn indices(&self) -> Vec<usize> {
        self.indicator
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn fraction(&self) -> f64 {
        self.count as f64 / self.indicator.len() as f64
    }
}
