//! Denoising schedule for the toy rollout: strictly decreasing timesteps
//! ending at t_0, each with mixing coefficients alpha^2 + sigma^2 = 1. The
//! re-noising between steps is the linear mix
//! `x = alpha * x_hat + sigma * eps` with fresh seeded noise.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct DenoiseSchedule {
    timesteps: Vec<f64>,
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
}

impl DenoiseSchedule {
    pub fn new(timesteps: Vec<f64>, alphas: Vec<f64>) -> Result<Self> {
        if timesteps.is_empty() {
            return Err(Error::Argument("schedule needs at least one timestep".into()));
        }
        if timesteps.len() != alphas.len() {
            return Err(Error::Shape(format!(
                "{} timesteps vs {} alphas",
                timesteps.len(),
                alphas.len()
            )));
        }
        for pair in timesteps.windows(2) {
            if pair[0] <= pair[1] {
                return Err(Error::Argument(
                    "timesteps must be strictly decreasing".into(),
                ));
            }
        }
        let last = *timesteps.last().unwrap();
        if last < 0.0 {
            return Err(Error::Argument("final timestep must be >= 0".into()));
        }
        for &a in &alphas {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Argument(format!("alpha {a} out of [0, 1]")));
            }
        }
        let sigmas = alphas.iter().map(|a| (1.0 - a * a).sqrt()).collect();
        Ok(DenoiseSchedule {
            timesteps,
            alphas,
            sigmas,
        })
    }

    /// Linear alpha ramp over `steps` timesteps `steps-1, ..., 1, 0`:
    /// alpha rises from 0 at the noisiest step to 1 at t_0, so the final
    /// re-noising is the identity.
    pub fn linear(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Argument("schedule needs at least one step".into()));
        }
        let t_max = (steps - 1) as f64;
        let timesteps: Vec<f64> = (0..steps).map(|i| t_max - i as f64).collect();
        let alphas: Vec<f64> = timesteps
            .iter()
            .map(|&t| if t_max == 0.0 { 1.0 } else { 1.0 - t / t_max })
            .collect();
        DenoiseSchedule::new(timesteps, alphas)
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    pub fn timesteps(&self) -> &[f64] {
        &self.timesteps
    }

    /// (alpha, sigma) of the step at position `idx` (0 = noisiest).
    pub fn mix(&self, idx: usize) -> (f64, f64) {
        (self.alphas[idx], self.sigmas[idx])
    }
}
