//! Noise schedule and preconditioning coefficients for the denoiser, with
//! σ(t) = t. The wrapped network sees a scaled input and a log-time code;
//! the skip path makes the denoiser exact at t = 0 and well-scaled at large t.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub sigma_data: f64,
    /// Mean of ln t for training draws.
    pub p_mean: f64,
    /// Std of ln t for training draws.
    pub p_std: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            sigma_data: 0.5,
            p_mean: -1.2,
            p_std: 1.2,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return Err(Error::Config(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if self.rho < 1.0 {
            return Err(Error::Config(format!("rho must be >= 1, got {}", self.rho)));
        }
        if self.sigma_data <= 0.0 || self.p_std <= 0.0 {
            return Err(Error::Config("sigma_data and p_std must be positive".into()));
        }
        Ok(())
    }

    pub fn c_skip(&self, t: f64) -> f64 {
        let s2 = self.sigma_data * self.sigma_data;
        s2 / (t * t + s2)
    }

    pub fn c_out(&self, t: f64) -> f64 {
        let s2 = self.sigma_data * self.sigma_data;
        t * self.sigma_data / (t * t + s2).sqrt()
    }

    pub fn c_in(&self, t: f64) -> f64 {
        let s2 = self.sigma_data * self.sigma_data;
        1.0 / (t * t + s2).sqrt()
    }

    /// ¼·ln t; callers must special-case t = 0 before asking for this.
    pub fn c_noise(&self, t: f64) -> f64 {
        0.25 * t.ln()
    }

    /// λ(t) = (t² + σ_d²)/(t·σ_d)², the denoising-error weight.
    pub fn loss_weight(&self, t: f64) -> f64 {
        let s2 = self.sigma_data * self.sigma_data;
        (t * t + s2) / (t * t * s2)
    }

    /// Decreasing sampler grid: nfe interior points from σ_max down, then an
    /// exact 0 terminator, giving nfe Euler steps and nfe denoiser calls.
    pub fn time_grid(&self, nfe: usize) -> Result<Vec<f64>> {
        if nfe < 1 {
            return Err(Error::Contract("nfe must be >= 1".into()));
        }
        let inv_rho = 1.0 / self.rho;
        let hi = self.sigma_max.powf(inv_rho);
        let lo = self.sigma_min.powf(inv_rho);
        let mut grid = Vec::with_capacity(nfe + 1);
        for i in 0..nfe {
            let frac = i as f64 / nfe as f64;
            grid.push((hi + frac * (lo - hi)).powf(self.rho));
        }
        grid.push(0.0);
        Ok(grid)
    }

    /// ln t ~ Normal(p_mean, p_std²).
    pub fn sample_train_time<R: Rng>(&self, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        (self.p_mean + self.p_std * z).exp()
    }
}

/// One sampler step record for the trace output.
#[derive(Clone, Debug)]
pub struct TraceRow {
    pub step: usize,
    pub time: f64,
    pub state_norm: f64,
    pub residual_norm: f64,
}
