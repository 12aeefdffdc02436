use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Field;

/// Per-channel affine map `z = (x − offset)/scale` into the space the prior
/// is fitted and sampled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelNormalization {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ChannelNormalization {
    pub fn identity(channels: usize) -> Self {
        Self { offset: vec![0.0; channels], scale: vec![1.0; channels] }
    }

    /// Pooled mean and standard deviation of every channel; constant
    /// channels keep unit scale.
    pub fn fit(samples: &[Field]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Prior("dataset is empty".into()))?;
        let spec = *first.spec();
        if samples.iter().any(|s| *s.spec() != spec) {
            return Err(Error::Prior("samples live on different grids".into()));
        }
        let count = (samples.len() * spec.cells()) as f64;
        let mut offset = Vec::with_capacity(spec.channels);
        let mut scale = Vec::with_capacity(spec.channels);
        for c in 0..spec.channels {
            let mean = samples.iter().map(|s| s.channel(c).map(|p| p.iter().sum::<f64>())).sum::<Result<f64>>()? / count;
            let var = samples
                .iter()
                .map(|s| s.channel(c).map(|p| p.iter().map(|v| (v - mean).powi(2)).sum::<f64>()))
                .sum::<Result<f64>>()?
                / count;
            offset.push(mean);
            scale.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Ok(Self { offset, scale })
    }

    pub fn channels(&self) -> usize {
        self.offset.len()
    }

    fn check(&self, len: usize) -> Result<usize> {
        let c = self.channels();
        if c == 0 || !len.is_multiple_of(c) {
            return Err(Error::Shape(format!("state of length {len} does not split into {c} channels")));
        }
        Ok(len / c)
    }

    pub fn normalize(&self, x: &[f64]) -> Result<Vec<f64>> {
        let n = self.check(x.len())?;
        Ok(x.iter().enumerate().map(|(k, v)| (v - self.offset[k / n]) / self.scale[k / n]).collect())
    }

    pub fn denormalize(&self, z: &[f64]) -> Result<Vec<f64>> {
        let n = self.check(z.len())?;
        Ok(z.iter().enumerate().map(|(k, v)| self.offset[k / n] + self.scale[k / n] * v).collect())
    }

    /// Chain rule for a gradient taken in physical units.
    pub fn pull_back(&self, grad: &[f64]) -> Result<Vec<f64>> {
        let n = self.check(grad.len())?;
        Ok(grad.iter().enumerate().map(|(k, g)| g * self.scale[k / n]).collect())
    }

    pub fn normalize_field(&self, f: &Field) -> Result<Field> {
        Field::new(*f.spec(), self.normalize(f.values())?)
    }

    pub fn denormalize_field(&self, f: &Field) -> Result<Field> {
        Field::new(*f.spec(), self.denormalize(f.values())?)
    }
}
