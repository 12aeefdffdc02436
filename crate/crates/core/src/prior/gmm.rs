use super::{check_dim, check_sigma, Denoiser};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Isotropic variance of the component.
    pub variance: f64,
}

/// Mixture of isotropic Gaussians with its exact posterior-mean denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmDenoiser {
    components: Vec<GmmComponent>,
    dim: usize,
}

struct Posterior {
    resp: Vec<f64>,
    /// Component posterior means `μ_j + c_j (x − μ_j)`.
    means: Vec<Vec<f64>>,
    /// Shrinkage factors `s_j²/(s_j² + σ²)`.
    gains: Vec<f64>,
}

impl GmmDenoiser {
    pub fn new(components: Vec<GmmComponent>) -> Result<Self> {
        let first = components.first().ok_or_else(|| Error::Prior("mixture has no components".into()))?;
        let dim = first.mean.len();
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if components.iter().any(|c| !(c.weight > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Prior(format!("weights must be positive and sum to 1 (sum {total})")));
        }
        if components.iter().any(|c| c.mean.len() != dim || !(c.variance >= 0.0)) {
            return Err(Error::Prior("components need equal dimensions and nonnegative variances".into()));
        }
        Ok(Self { components, dim })
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    /// Responsibilities of each component for `x` under noise level `σ`.
    pub fn responsibilities(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        check_sigma(sigma)?;
        Ok(self.posterior(x, sigma).resp)
    }

    fn posterior(&self, x: &[f64], sigma: f64) -> Posterior {
        let s2 = sigma * sigma;
        let d = self.dim as f64;
        let logits: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                let v = c.variance + s2;
                let dist2: f64 = x.iter().zip(&c.mean).map(|(x, m)| (x - m).powi(2)).sum();
                c.weight.ln() - 0.5 * d * v.ln() - 0.5 * dist2 / v
            })
            .collect();
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut resp: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let total: f64 = resp.iter().sum();
        resp.iter_mut().for_each(|r| *r /= total);
        let gains: Vec<f64> = self.components.iter().map(|c| c.variance / (c.variance + s2)).collect();
        let means = self
            .components
            .iter()
            .zip(&gains)
            .map(|(c, &g)| c.mean.iter().zip(x).map(|(m, x)| m + g * (x - m)).collect())
            .collect();
        Posterior { resp, means, gains }
    }
}

impl Denoiser for GmmDenoiser {
    fn dim(&self) -> usize {
        self.dim
    }

    fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        check_sigma(sigma)?;
        if sigma == 0.0 {
            return Ok(x.to_vec());
        }
        let post = self.posterior(x, sigma);
        let mut out = vec![0.0; self.dim];
        for (r, m) in post.resp.iter().zip(&post.means) {
            for (o, v) in out.iter_mut().zip(m) {
                *o += r * v;
            }
        }
        Ok(out)
    }

    fn vjp(&self, x: &[f64], sigma: f64, cotangent: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        check_dim(self.dim, cotangent.len())?;
        check_sigma(sigma)?;
        if sigma == 0.0 {
            return Ok(cotangent.to_vec());
        }
        let s2 = sigma * sigma;
        let post = self.posterior(x, sigma);
        // ∇r_j = r_j (g_j − ḡ), g_j = −(x − μ_j)/(s_j² + σ²)
        let grads: Vec<Vec<f64>> = self
            .components
            .iter()
            .map(|c| {
                let v = c.variance + s2;
                x.iter().zip(&c.mean).map(|(x, m)| -(x - m) / v).collect()
            })
            .collect();
        let mut gbar = vec![0.0; self.dim];
        for (r, g) in post.resp.iter().zip(&grads) {
            for (b, v) in gbar.iter_mut().zip(g) {
                *b += r * v;
            }
        }
        let diag: f64 = post.resp.iter().zip(&post.gains).map(|(r, c)| r * c).sum();
        let mut out: Vec<f64> = cotangent.iter().map(|v| diag * v).collect();
        for j in 0..self.components.len() {
            let proj: f64 = cotangent.iter().zip(&post.means[j]).map(|(a, b)| a * b).sum();
            let scale = post.resp[j] * proj;
            for k in 0..self.dim {
                out[k] += scale * (grads[j][k] - gbar[k]);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::stream_rng;
    use crate::prior::{score, GaussianPrior};
    use rand::Rng;

    fn two_component(d: usize) -> GmmDenoiser {
        let mu: Vec<f64> = (0..d).map(|i| 1.0 + 0.1 * i as f64).collect();
        GmmDenoiser::new(vec![
            GmmComponent { weight: 0.3, mean: mu.clone(), variance: 0.4 },
            GmmComponent { weight: 0.7, mean: mu.iter().map(|v| -v).collect(), variance: 0.9 },
        ])
        .unwrap()
    }

    #[test]
    fn single_component_is_gaussian() {
        let mu = vec![0.5, -1.0, 2.0];
        let g = GmmDenoiser::new(vec![GmmComponent { weight: 1.0, mean: mu.clone(), variance: 0.8 }]).unwrap();
        let p = GaussianPrior::isotropic(mu, 0.8).unwrap();
        let x = [1.0, 0.0, -1.0];
        let a = g.denoise(&x, 0.6).unwrap();
        let b = p.denoise(&x, 0.6).unwrap();
        assert!(a.iter().zip(&b).all(|(u, v)| (u - v).abs() < 1e-15));
    }

    #[test]
    fn symmetric_mixture_at_origin() {
        let g = GmmDenoiser::new(vec![
            GmmComponent { weight: 0.5, mean: vec![1.0, 2.0], variance: 0.3 },
            GmmComponent { weight: 0.5, mean: vec![-1.0, -2.0], variance: 0.3 },
        ])
        .unwrap();
        assert!(g.denoise(&[0.0, 0.0], 0.9).unwrap().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let d = 16;
        let g = two_component(d);
        let mut rng = stream_rng(6, 0);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sigma = 1.3;
        let vjp = g.vjp(&x, sigma, &v).unwrap();
        let scale = vjp.iter().fold(0.0f64, |m, a| m.max(a.abs()));
        let h = 1e-6;
        for k in 0..d {
            let mut xp = x.clone();
            xp[k] += h;
            let mut xm = x.clone();
            xm[k] -= h;
            let dp = g.denoise(&xp, sigma).unwrap();
            let dm = g.denoise(&xm, sigma).unwrap();
            let fd: f64 = (0..d).map(|a| v[a] * (dp[a] - dm[a]) / (2.0 * h)).sum();
            let err = (fd - vjp[k]).abs() / vjp[k].abs().max(1e-3 * scale);
            assert!(err < 1e-5, "component {k}: {fd} vs {}", vjp[k]);
        }
    }

    #[test]
    fn score_matches_noised_density() {
        let d = 4;
        let g = two_component(d);
        let sigma = 0.8;
        // log p_σ(x) = log Σ_j w_j N(x; μ_j, (s_j²+σ²) I)
        let log_density = |x: &[f64]| -> f64 {
            g.components()
                .iter()
                .map(|c| {
                    let v = c.variance + sigma * sigma;
                    let dist2: f64 = x.iter().zip(&c.mean).map(|(a, b)| (a - b).powi(2)).sum();
                    c.weight * (2.0 * std::f64::consts::PI * v).powf(-(d as f64) / 2.0) * (-dist2 / (2.0 * v)).exp()
                })
                .sum::<f64>()
                .ln()
        };
        let x = vec![0.2, -0.4, 0.7, 0.1];
        let s = score(&g, &x, sigma).unwrap();
        let scale = s.iter().fold(0.0f64, |m, a| m.max(a.abs()));
        let h = 1e-6;
        for k in 0..d {
            let mut xp = x.clone();
            xp[k] += h;
            let mut xm = x.clone();
            xm[k] -= h;
            let fd = (log_density(&xp) - log_density(&xm)) / (2.0 * h);
            assert!((fd - s[k]).abs() / s[k].abs().max(1e-3 * scale) < 1e-5);
        }
    }

    #[test]
    fn invalid_mixtures_rejected() {
        assert!(GmmDenoiser::new(vec![]).is_err());
        let c = GmmComponent { weight: 0.6, mean: vec![0.0], variance: 1.0 };
        assert!(GmmDenoiser::new(vec![c.clone()]).is_err());
        assert!(GmmDenoiser::new(vec![c.clone(), GmmComponent { mean: vec![0.0, 1.0], weight: 0.4, ..c }]).is_err());
    }

    #[test]
    fn zero_noise_is_identity() {
        let g = two_component(3);
        let x = [0.3, 0.1, -0.2];
        assert_eq!(g.denoise(&x, 0.0).unwrap(), x.to_vec());
        let near = g.denoise(&x, 1e-8).unwrap();
        assert!(near.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-6));
    }
}
