//! Finite-difference verification of the analytic parameter gradients.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::loss::{loss, loss_with_grad};
use super::model::{DenoiseInput, Denoiser, DenoiserConfig};
use crate::error::Result;
use crate::raster::ClassId;

/// A fixed input and target for the scalar loss being differentiated.
#[derive(Debug, Clone)]
pub struct GradProbe {
    pub x_t: Vec<f64>,
    pub t: f64,
    pub text: Vec<f64>,
    pub mask: Vec<ClassId>,
    pub eps: Vec<f64>,
    pub fg: Vec<f64>,
    pub gamma: f64,
}

impl GradProbe {
    /// Random probe with every condition present and a mixed foreground.
    pub fn random(cfg: &DenoiserConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.sample_len();
        let mask: Vec<ClassId> = (0..cfg.pixels())
            .map(|_| rng.random_range(0..cfg.num_classes) as ClassId)
            .collect();
        let fg = (0..cfg.channels)
            .flat_map(|_| mask.iter().map(|&c| if c != 0 { 1.0 } else { 0.0 }))
            .collect();
        Self {
            x_t: (0..n).map(|_| rng.random_range(-1.5..1.5)).collect(),
            t: rng.random_range(1.0..1000.0f64).floor(),
            text: (0..cfg.text_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            mask,
            eps: (0..n).map(|_| rng.random_range(-1.5..1.5)).collect(),
            fg,
            gamma: 10.0,
        }
    }

    fn input(&self) -> DenoiseInput<'_, f64> {
        DenoiseInput {
            x_t: &self.x_t,
            t: self.t,
            text: Some(&self.text),
            mask: Some(&self.mask),
        }
    }

    fn loss(&self, model: &Denoiser<f64>) -> Result<f64> {
        let eps_hat = model.predict(&self.input())?;
        Ok(loss(&eps_hat, &self.eps, &self.fg, self.gamma)?.total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_error < self.tolerance)
    }
}

const STEP: f64 = 1e-5;
/// Gradients below this magnitude are compared absolutely.
const FLOOR: f64 = 1e-6;
/// Tensors up to this size are checked exhaustively.
const SAMPLE: usize = 48;

pub fn analytic_gradients(model: &Denoiser<f64>, probe: &GradProbe) -> Result<Vec<Vec<f64>>> {
    let (eps_hat, cache) = model.forward(&probe.input())?;
    let (_, d_out) = loss_with_grad(&eps_hat, &probe.eps, &probe.fg, probe.gamma)?;
    let mut grads = model.zero_grads();
    model.backward(&cache, &d_out, &mut grads, |_| true);
    Ok(grads)
}

/// Compares `analytic` against central differences of the probe loss.
pub fn compare_gradients(
    model: &Denoiser<f64>,
    probe: &GradProbe,
    analytic: &[Vec<f64>],
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = model.clone();
    let mut tensors = Vec::with_capacity(analytic.len());
    for (i, spec) in model.specs().iter().enumerate() {
        let len = spec.len();
        let entries: Vec<usize> = if len <= SAMPLE {
            (0..len).collect()
        } else {
            index::sample(&mut rng, len, SAMPLE).into_vec()
        };
        let mut worst = 0.0f64;
        for &j in &entries {
            let orig = work.params()[i][j];
            work.params_mut()[i][j] = orig + STEP;
            let up = probe.loss(&work)?;
            work.params_mut()[i][j] = orig - STEP;
            let down = probe.loss(&work)?;
            work.params_mut()[i][j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(rel);
        }
        tensors.push(TensorCheck {
            name: spec.name.to_string(),
            checked: entries.len(),
            max_rel_error: worst,
        });
    }
    Ok(GradCheckReport { tolerance, tensors })
}

pub fn grad_check(model: &Denoiser<f64>, probe: &GradProbe, tolerance: f64) -> Result<GradCheckReport> {
    let analytic = analytic_gradients(model, probe)?;
    compare_gradients(model, probe, &analytic, tolerance, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> DenoiserConfig {
        DenoiserConfig {
            channels: 2,
            size: 6,
            num_classes: 3,
            text_dim: 5,
        }
    }

    #[test]
    fn seeded_model_passes() {
        let model = Denoiser::<f64>::new(cfg(), 1).unwrap();
        let report = grad_check(&model, &GradProbe::random(&cfg(), 2), 1e-3).unwrap();
        assert!(report.passed(), "{report:#?}");
    }

    #[test]
    fn corrupted_gradient_fails() {
        let model = Denoiser::<f64>::new(cfg(), 1).unwrap();
        let probe = GradProbe::random(&cfg(), 2);
        let mut g = analytic_gradients(&model, &probe).unwrap();
        g[3][0] += 1.0;
        let report = compare_gradients(&model, &probe, &g, 1e-3, 0).unwrap();
        assert!(!report.passed());
        assert!(report.tensors[3].max_rel_error > 0.1);
    }
}
