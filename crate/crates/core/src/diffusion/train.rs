//! Counterfactual-composition training loop.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::loss::loss_with_grad;
use super::model::{DenoiseInput, Denoiser, TrainMode};
use super::schedule::{forward_noise, NoiseSchedule};
use crate::cfcomp::{select_composites, PairThresholds};
use crate::embed::TextEmbedder;
use crate::error::{Error, Result};
use crate::raster::{CategoryVocabulary, Triplet};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch: usize,
    pub grad_accum: usize,
    pub lr: f64,
    pub steps: usize,
    pub clip_norm: f64,
    pub mode: TrainMode,
    pub cond_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 8,
            grad_accum: 4,
            lr: 1e-3,
            steps: 2000,
            clip_norm: 1.0,
            mode: TrainMode::Adapter,
            cond_dropout: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch > 0
            && self.grad_accum > 0
            && self.lr > 0.0
            && self.clip_norm > 0.0
            && (0.0..=1.0).contains(&self.cond_dropout);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid training config {self:?}")))
        }
    }
}

/// Everything a training step depends on besides the model itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSettings {
    pub train: TrainConfig,
    pub thresholds: PairThresholds,
    pub gamma: f64,
    /// Whether composites are added to each batch.
    pub cfcomp: bool,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct TrainState<S> {
    pub model: Denoiser<S>,
    pub settings: TrainerSettings,
    pub(crate) moment1: Vec<Vec<S>>,
    pub(crate) moment2: Vec<Vec<S>>,
    pub(crate) accum: Vec<Vec<S>>,
    pub(crate) accum_count: usize,
    /// Micro-batches processed.
    pub step: u64,
    /// Optimizer updates applied.
    pub updates: u64,
    pub(crate) rng: ChaCha8Rng,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub total: f64,
    pub global: f64,
    pub local: f64,
    pub composites: usize,
    pub batch: usize,
    pub updated: bool,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(model: Denoiser<S>, settings: TrainerSettings, seed: u64) -> Result<Self> {
        settings.train.validate()?;
        settings.thresholds.validate()?;
        if settings.gamma < 0.0 {
            return Err(Error::invalid("gamma must be non-negative"));
        }
        let zeros = model.zero_grads();
        Ok(Self {
            moment1: zeros.clone(),
            moment2: zeros.clone(),
            accum: zeros,
            accum_count: 0,
            step: 0,
            updates: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            model,
            settings,
        })
    }

    fn trainable(&self, i: usize) -> bool {
        self.settings.train.mode.trains(self.model.specs()[i].group)
    }

    /// Draws `batch` distinct records (all of them if the dataset is smaller).
    pub fn sample_batch<'a>(&mut self, data: &'a [Triplet]) -> Result<Vec<&'a Triplet>> {
        if data.is_empty() {
            return Err(Error::invalid("empty dataset"));
        }
        let k = self.settings.train.batch.min(data.len());
        let mut idx = index::sample(&mut self.rng, data.len(), k).into_vec();
        idx.sort_unstable();
        Ok(idx.into_iter().map(|i| &data[i]).collect())
    }

    /// One micro-batch: composites are added, every sample gets its own noise
    /// level, and the averaged gradient is accumulated. Parameters change
    /// every `grad_accum` micro-batches.
    pub fn train_step(
        &mut self,
        batch: &[Triplet],
        embedder: &dyn TextEmbedder,
        schedule: &NoiseSchedule,
        vocab: &CategoryVocabulary,
    ) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let composites = if self.settings.cfcomp {
            select_composites(batch, &self.settings.thresholds, embedder, vocab)?
        } else {
            Vec::new()
        };
        let samples: Vec<&Triplet> = batch.iter().chain(&composites).collect();
        let scale = S::one() / S::lit(samples.len() as f64);
        let gamma = S::lit(self.settings.gamma);
        let mode = self.settings.train.mode;
        let (mut total, mut global, mut local) = (0.0, 0.0, 0.0);

        let mut grads = self.model.zero_grads();
        for t in &samples {
            let x0 = t.image.to_planar::<S>();
            let text: Vec<S> = embedder.embed(&t.text)?.values().iter().map(|&v| S::lit(v)).collect();
            let fg = t.mask.foreground::<S>();
            let step_t = self.rng.random_range(1..=schedule.steps());
            let eps: Vec<S> = (0..x0.len())
                .map(|_| S::lit(self.rng.sample::<f64, _>(StandardNormal)))
                .collect();
            let dropped = self.rng.random::<f64>() < self.settings.train.cond_dropout;
            let x_t = forward_noise(&x0, step_t, &eps, schedule)?;
            let input = DenoiseInput {
                x_t: &x_t,
                t: step_t as f64,
                text: (!dropped).then_some(text.as_slice()),
                mask: (!dropped && mode.uses_mask()).then_some(t.mask.classes()),
            };
            let (eps_hat, cache) = self.model.forward(&input)?;
            let (parts, mut d_out) = loss_with_grad(&eps_hat, &eps, &fg, gamma)?;
            d_out.iter_mut().for_each(|g| *g *= scale);
            self.model.backward(&cache, &d_out, &mut grads, |g| mode.trains(g));
            total += parts.total.to_f64().unwrap_or(f64::NAN);
            global += parts.global.to_f64().unwrap_or(f64::NAN);
            local += parts.local.to_f64().unwrap_or(f64::NAN);
        }

        for (acc, g) in self.accum.iter_mut().zip(&grads) {
            for (a, &v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        self.accum_count += 1;
        self.step += 1;
        let updated = self.accum_count == self.settings.train.grad_accum;
        if updated {
            self.apply_update();
        }
        let n = samples.len() as f64;
        Ok(StepMetrics {
            step: self.step,
            total: total / n,
            global: global / n,
            local: local / n,
            composites: composites.len(),
            batch: samples.len(),
            updated,
        })
    }

    fn apply_update(&mut self) {
        let inv = S::one() / S::lit(self.accum_count as f64);
        let trainable: Vec<bool> = (0..self.accum.len()).map(|i| self.trainable(i)).collect();
        let mut sq = 0.0f64;
        for (g, &on) in self.accum.iter_mut().zip(&trainable) {
            g.iter_mut().for_each(|v| *v *= inv);
            if on {
                sq += g.iter().map(|v| v.to_f64().unwrap_or(0.0).powi(2)).sum::<f64>();
            }
        }
        let norm = sq.sqrt();
        let clip = if norm > self.settings.train.clip_norm {
            S::lit(self.settings.train.clip_norm / norm)
        } else {
            S::one()
        };

        self.updates += 1;
        let (b1, b2) = (S::lit(ADAM_BETA1), S::lit(ADAM_BETA2));
        let bc1 = S::lit(1.0 - ADAM_BETA1.powf(self.updates as f64));
        let bc2 = S::lit(1.0 - ADAM_BETA2.powf(self.updates as f64));
        let lr = S::lit(self.settings.train.lr);
        let eps = S::lit(ADAM_EPS);
        let params = self.model.params_mut();
        for i in 0..params.len() {
            if !trainable[i] {
                continue;
            }
            let (p, g, m, v) = (&mut params[i], &self.accum[i], &mut self.moment1[i], &mut self.moment2[i]);
            for j in 0..p.len() {
                let gj = g[j] * clip;
                m[j] = b1 * m[j] + (S::one() - b1) * gj;
                v[j] = b2 * v[j] + (S::one() - b2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        self.accum.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v = S::zero()));
        self.accum_count = 0;
    }

    /// Runs `steps` micro-batches drawn from `data`, reporting each one.
    pub fn run(
        &mut self,
        data: &[Triplet],
        steps: usize,
        embedder: &dyn TextEmbedder,
        schedule: &NoiseSchedule,
        vocab: &CategoryVocabulary,
        mut on_step: impl FnMut(&StepMetrics),
    ) -> Result<Vec<StepMetrics>> {
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let batch: Vec<Triplet> = self.sample_batch(data)?.into_iter().cloned().collect();
            let m = self.train_step(&batch, embedder, schedule, vocab)?;
            on_step(&m);
            out.push(m);
        }
        Ok(out)
    }
}

/// Order-sensitive checksum over the tensors of one parameter group.
pub fn checksum<S: Scalar>(model: &Denoiser<S>, include: impl Fn(super::model::ParamGroup) -> bool) -> u64 {
    let mut bytes = Vec::new();
    for (spec, p) in model.specs().iter().zip(model.params()) {
        if include(spec.group) {
            for v in p {
                bytes.extend_from_slice(&v.to_f64().unwrap_or(f64::NAN).to_le_bytes());
            }
        }
    }
    crate::hash::fnv1a64(&bytes)
}
