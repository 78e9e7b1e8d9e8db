//! DDPM noise schedule with velocity parameterization.
//!
//! All arrays are indexed by the denoising step `k` in `1..=K`; index 0 of
//! `alpha_bar` holds 1.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::normal_vec;

pub const BETA_MIN: f64 = 1e-4;
pub const BETA_MAX: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma2: Vec<f64>,
}

impl NoiseSchedule {
    /// Geometric betas from `BETA_MIN` to `BETA_MAX`.
    pub fn new(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::parameter(format!("need at least 2 denoising steps, got {steps}")));
        }
        let r = (BETA_MAX / BETA_MIN).powf(1.0 / (steps - 1) as f64);
        let mut beta = vec![0.0; steps + 1];
        for k in 1..=steps {
            beta[k] = BETA_MIN * r.powi(k as i32 - 1);
        }
        beta[steps] = BETA_MAX;
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = vec![1.0; steps + 1];
        for k in 1..=steps {
            alpha_bar[k] = alpha_bar[k - 1] * alpha[k];
        }
        let mut sigma2 = vec![0.0; steps + 1];
        for k in 1..=steps {
            sigma2[k] = (1.0 - alpha_bar[k - 1]) / (1.0 - alpha_bar[k]) * beta[k];
        }
        Ok(NoiseSchedule {
            steps,
            beta,
            alpha,
            alpha_bar,
            sigma2,
        })
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps {
            return Err(Error::parameter(format!("denoising step {k} outside 1..={}", self.steps)));
        }
        Ok(())
    }

    fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
        if a.len() != b.len() {
            return Err(Error::structural(format!("length mismatch {} vs {}", a.len(), b.len())));
        }
        Ok(())
    }

    /// `u_k = sqrt(ab) u0 + sqrt(1 - ab) eps`.
    pub fn q_sample(&self, u0: &[f64], eps: &[f64], k: usize) -> Result<Vec<f64>> {
        self.check_k(k)?;
        Self::check_len(u0, eps)?;
        let (a, s) = (self.alpha_bar[k].sqrt(), (1.0 - self.alpha_bar[k]).sqrt());
        Ok(u0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
    }

    /// `v = sqrt(ab) eps - sqrt(1 - ab) u0`.
    pub fn v_target(&self, u0: &[f64], eps: &[f64], k: usize) -> Result<Vec<f64>> {
        self.check_k(k)?;
        Self::check_len(u0, eps)?;
        let (a, s) = (self.alpha_bar[k].sqrt(), (1.0 - self.alpha_bar[k]).sqrt());
        Ok(u0.iter().zip(eps).map(|(x, e)| a * e - s * x).collect())
    }

    /// Clean-sample estimate `sqrt(ab) u_k - sqrt(1 - ab) v`.
    pub fn reconstruct_clean(&self, uk: &[f64], v: &[f64], k: usize) -> Result<Vec<f64>> {
        self.check_k(k)?;
        Self::check_len(uk, v)?;
        let (a, s) = (self.alpha_bar[k].sqrt(), (1.0 - self.alpha_bar[k]).sqrt());
        Ok(uk.iter().zip(v).map(|(x, w)| a * x - s * w).collect())
    }

    /// Noise estimate `sqrt(1 - ab) u_k + sqrt(ab) v`.
    pub fn reconstruct_noise(&self, uk: &[f64], v: &[f64], k: usize) -> Result<Vec<f64>> {
        self.check_k(k)?;
        Self::check_len(uk, v)?;
        let (a, s) = (self.alpha_bar[k].sqrt(), (1.0 - self.alpha_bar[k]).sqrt());
        Ok(uk.iter().zip(v).map(|(x, w)| s * x + a * w).collect())
    }

    /// Coefficients `(c0, ck)` of the posterior mean `c0 u0 + ck u_k`.
    pub fn posterior_coefficients(&self, k: usize) -> Result<(f64, f64)> {
        self.check_k(k)?;
        let denom = 1.0 - self.alpha_bar[k];
        let c0 = self.alpha_bar[k - 1].sqrt() * self.beta[k] / denom;
        let ck = self.alpha[k].sqrt() * (1.0 - self.alpha_bar[k - 1]) / denom;
        Ok((c0, ck))
    }

    /// Posterior mean of `u_{k-1}` and the clean estimate it was built from.
    pub fn posterior_mean(&self, uk: &[f64], v: &[f64], k: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let u0 = self.reconstruct_clean(uk, v, k)?;
        let (c0, ck) = self.posterior_coefficients(k)?;
        let mu = u0.iter().zip(uk).map(|(a, b)| c0 * a + ck * b).collect();
        Ok((mu, u0))
    }

    /// One reverse step. Returns `(u_{k-1}, clean estimate)`; the step from
    /// `k = 1` adds no noise.
    pub fn ddpm_step<R: Rng>(&self, uk: &[f64], v: &[f64], k: usize, rng: &mut R) -> Result<(Vec<f64>, Vec<f64>)> {
        if k == 0 {
            return Err(Error::Contract("sample is already clean at k = 0".into()));
        }
        let (mut mu, u0) = self.posterior_mean(uk, v, k)?;
        if k > 1 {
            let s = self.sigma2[k].sqrt();
            let z = normal_vec(rng, mu.len());
            mu.iter_mut().zip(&z).for_each(|(m, z)| *m += s * z);
        }
        Ok((mu, u0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn endpoints_and_monotonicity() {
        let s = NoiseSchedule::new(20).unwrap();
        assert_eq!(s.beta[1], 1e-4);
        assert_eq!(s.beta[20], 1.0);
        assert!((s.beta[2] / s.beta[1] - 10f64.powf(4.0 / 19.0)).abs() < 1e-12);
        assert_eq!(s.alpha_bar[20], 0.0);
        for k in [5, 10, 20] {
            let s = NoiseSchedule::new(k).unwrap();
            assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
            assert!(s.beta[1..].windows(2).all(|w| w[1] > w[0]));
            for j in 1..=k {
                assert!(s.sigma2[j] >= 0.0 && s.sigma2[j] <= s.beta[j]);
            }
        }
        assert!(NoiseSchedule::new(1).is_err());
    }

    #[test]
    fn last_step_targets() {
        let s = NoiseSchedule::new(5).unwrap();
        let u0 = [0.3, -1.2, 2.0];
        let eps = [1.0, 0.5, -0.7];
        assert_eq!(s.q_sample(&u0, &eps, 5).unwrap(), eps.to_vec());
        assert_eq!(s.v_target(&u0, &eps, 5).unwrap(), vec![-0.3, 1.2, -2.0]);
        assert_eq!(s.reconstruct_clean(&eps, &[-0.3, 1.2, -2.0], 5).unwrap(), u0.to_vec());
        let zero = s.q_sample(&u0, &[0.0; 3], 2).unwrap();
        let a = s.alpha_bar[2].sqrt();
        assert!(zero.iter().zip(&u0).all(|(z, u)| (z - a * u).abs() < 1e-15));
        assert!(s.q_sample(&u0, &eps, 0).is_err());
    }

    #[test]
    fn k1_step_is_noiseless() {
        let s = NoiseSchedule::new(5).unwrap();
        let uk = [0.1, 0.2];
        let v = [0.3, -0.4];
        let (mu, _) = s.posterior_mean(&uk, &v, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(s.ddpm_step(&uk, &v, 1, &mut rng).unwrap().0, mu);
        assert!(matches!(s.ddpm_step(&uk, &v, 0, &mut rng), Err(Error::Contract(_))));
    }
}
