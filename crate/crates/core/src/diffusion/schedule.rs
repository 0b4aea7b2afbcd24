use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Linear-beta DDPM schedule indexed by `t = 1..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::invalid("schedule needs at least two steps"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "beta range [{beta_start}, {beta_end}] must satisfy 0 < start <= end < 1"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
        .collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bars.push(acc);
    }
    let sigmas = (0..steps)
        .map(|i| {
            if i == 0 {
                0.0
            } else {
                (betas[i] * (1.0 - alpha_bars[i - 1]) / (1.0 - alpha_bars[i])).sqrt()
            }
        })
        .collect();
    Ok(NoiseSchedule {
        betas,
        alpha_bars,
        sigmas,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.index(t)?])
    }

    /// Cumulative signal coefficient; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bars[self.index(t)?])
    }

    /// Reverse-step standard deviation for `t -> t-1`; zero at `t = 1`.
    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok(self.sigmas[self.index(t)?])
    }

    /// Posterior standard deviation for a strided jump `t -> t_prev`.
    /// Equals [`NoiseSchedule::sigma`] when `t_prev = t - 1`.
    pub fn sigma_between(&self, t: usize, t_prev: usize) -> Result<f64> {
        if t_prev >= t {
            return Err(Error::invalid("t_prev must precede t"));
        }
        if t_prev + 1 == t {
            return self.sigma(t);
        }
        let (ab, ab_prev) = (self.alpha_bar(t)?, self.alpha_bar(t_prev)?);
        let beta = 1.0 - ab / ab_prev;
        Ok((beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt())
    }

    /// `steps` timesteps from `T` down to 1, evenly strided.
    pub fn strided(&self, steps: usize) -> Result<Vec<usize>> {
        let total = self.steps();
        if steps == 0 || steps > total {
            return Err(Error::invalid(format!("sampling steps {steps} outside 1..={total}")));
        }
        let mut ts: Vec<usize> = (0..steps)
            .map(|i| total - ((i * (total - 1)) as f64 / (steps - 1).max(1) as f64).round() as usize)
            .collect();
        ts.dedup();
        Ok(ts)
    }
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_noise<S: Scalar>(x0: &[S], t: usize, eps: &[S], schedule: &NoiseSchedule) -> Result<Vec<S>> {
    if x0.len() != eps.len() {
        return Err(Error::invalid("x0 and eps shapes differ"));
    }
    let ab = schedule.alpha_bar(t)?;
    if t == 0 {
        return Err(Error::invalid("timestep 0 is not a noising step"));
    }
    let (a, b) = (S::lit(ab.sqrt()), S::lit((1.0 - ab).sqrt()));
    Ok(x0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect())
}
