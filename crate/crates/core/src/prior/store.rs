//! Fitted priors on disk: `mean.pgdf`, `covariance.bin` and `prior.json`.
//!
//! `covariance.bin` (little-endian):
//!
//! ```text
//! "PGDC" | version u32 | kind u8 | d u64 | r u64 | floor f64 | r values f64 | d·r basis f64 (column-major)
//! ```
//!
//! `kind` is 0 for scalar (value in `floor`), 1 for diagonal (`r = d`
//! values, no basis) and 2 for spectral.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::gaussian::set_shrinkage;
use super::{ChannelNormalization, Covariance, Denoiser, GaussianPrior};
use crate::data::file_digest;
use crate::error::{Error, Result};
use crate::grid::{read_pgdf_file, write_pgdf_file, Field, GridSpec};

const MAGIC: &[u8; 4] = b"PGDC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorMetadata {
    pub dim: usize,
    pub grid: GridSpec,
    pub covariance: String,
    pub shrinkage: Option<f64>,
    /// Digest of the dataset manifest the prior was fitted on.
    pub dataset_digest: Option<String>,
    /// Map from physical states into the space the prior lives in.
    #[serde(default)]
    pub normalization: Option<ChannelNormalization>,
    pub mean_sha256: String,
    pub covariance_sha256: String,
}

fn encode_covariance(cov: &Covariance, d: usize) -> Vec<u8> {
    let (kind, floor, values, basis): (u8, f64, &[f64], Option<&DMatrix<f64>>) = match cov {
        Covariance::Scalar(v) => (0, *v, &[], None),
        Covariance::Diagonal(v) => (1, 0.0, v, None),
        Covariance::Spectral { basis, eigenvalues, floor } => (2, *floor, eigenvalues, Some(basis)),
    };
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind);
    out.extend_from_slice(&(d as u64).to_le_bytes());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    out.extend_from_slice(&floor.to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(b) = basis {
        for v in b.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_covariance(bytes: &[u8]) -> Result<(Covariance, usize)> {
    let mut pos = 0;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| Error::Format("covariance file truncated".into()))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(Error::Format("missing PGDC magic".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported covariance version {version}")));
    }
    let kind = take(1)?[0];
    let d = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let r = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let floor = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
    let mut read_f64s = |n: usize| -> Result<Vec<f64>> {
        let raw = take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    };
    let values = read_f64s(r)?;
    let cov = match kind {
        0 => Covariance::Scalar(floor),
        1 => Covariance::Diagonal(values),
        2 => {
            let basis = read_f64s(d * r)?;
            Covariance::Spectral { basis: DMatrix::from_vec(d, r, basis), eigenvalues: values, floor }
        }
        other => return Err(Error::Format(format!("unknown covariance kind {other}"))),
    };
    if pos != bytes.len() {
        return Err(Error::Format("trailing bytes after covariance payload".into()));
    }
    Ok((cov, d))
}

pub fn write_prior(
    dir: impl AsRef<Path>,
    prior: &GaussianPrior,
    grid: &GridSpec,
    normalization: Option<ChannelNormalization>,
    dataset_digest: Option<String>,
) -> Result<PriorMetadata> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mean = Field::new(*grid, prior.mean().to_vec())?;
    write_pgdf_file(&mean, dir.join("mean.pgdf"))?;
    fs::write(dir.join("covariance.bin"), encode_covariance(prior.covariance(), prior.dim()))?;
    let meta = PriorMetadata {
        dim: prior.dim(),
        grid: *grid,
        covariance: match prior.covariance() {
            Covariance::Scalar(_) => "scalar",
            Covariance::Diagonal(_) => "diagonal",
            Covariance::Spectral { .. } => "dense",
        }
        .into(),
        shrinkage: prior.shrinkage(),
        dataset_digest,
        normalization,
        mean_sha256: file_digest(dir.join("mean.pgdf"))?,
        covariance_sha256: file_digest(dir.join("covariance.bin"))?,
    };
    fs::write(dir.join("prior.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(meta)
}

pub fn read_prior(dir: impl AsRef<Path>) -> Result<(GaussianPrior, PriorMetadata)> {
    let dir = dir.as_ref();
    let meta: PriorMetadata = serde_json::from_str(&fs::read_to_string(dir.join("prior.json"))?)?;
    let mean = read_pgdf_file(dir.join("mean.pgdf"))?;
    let (cov, d) = decode_covariance(&fs::read(dir.join("covariance.bin"))?)?;
    if d != mean.values().len() || d != meta.dim {
        return Err(Error::Format("prior files disagree on dimension".into()));
    }
    let mut prior = GaussianPrior::new(mean.into_values(), cov)?;
    set_shrinkage(&mut prior, meta.shrinkage);
    Ok((prior, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::stream_rng;
    use crate::grid::Boundary;
    use crate::prior::{fit_empirical_prior, CovarianceFit};
    use rand::Rng;

    #[test]
    fn round_trip_every_covariance_kind() {
        let grid = GridSpec::new(3, 4, 1, 0.5, Boundary::Periodic).unwrap();
        let mut rng = stream_rng(1, 0);
        let samples: Vec<Field> =
            (0..5).map(|_| Field::from_fn(grid, |_, _, _| rng.random_range(-1.0..1.0)).unwrap()).collect();
        let priors = [
            GaussianPrior::isotropic(vec![0.5; 12], 2.0).unwrap(),
            fit_empirical_prior(&samples, 0.2, CovarianceFit::Diagonal).unwrap(),
            fit_empirical_prior(&samples, 0.2, CovarianceFit::Dense).unwrap(),
        ];
        for p in priors {
            let dir = tempfile::tempdir().unwrap();
            let norm = ChannelNormalization { offset: vec![0.5], scale: vec![2.0] };
            write_prior(dir.path(), &p, &grid, Some(norm.clone()), Some("abc".into())).unwrap();
            let (back, meta) = read_prior(dir.path()).unwrap();
            assert_eq!(back, p);
            assert_eq!(meta.dataset_digest.as_deref(), Some("abc"));
            assert_eq!(meta.normalization, Some(norm));
        }
    }

    #[test]
    fn corrupt_covariance_rejected() {
        let cov = Covariance::Diagonal(vec![1.0, 2.0]);
        let mut bytes = encode_covariance(&cov, 2);
        assert!(decode_covariance(&bytes[..bytes.len() - 3]).is_err());
        bytes.push(0);
        assert!(decode_covariance(&bytes).is_err());
    }
}
