//! The conditional noise predictor.
//!
//! A small two-level convolutional denoiser. Timestep and text embeddings
//! are summed into a conditioning vector that produces a per-channel
//! scale/shift for each block. A mask adapter (one-hot mask, 1x1 conv to 16
//! channels, 3x3 conv to 32 channels) adds its features to the first block
//! and, pooled and projected, to the second. The adapter's 3x3 conv starts
//! at zero so an untrained adapter leaves the base model unchanged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, Conv};
use crate::error::{Error, Result};
use crate::raster::ClassId;
use crate::scalar::Scalar;

pub const TIME_DIM: usize = 32;
pub const ADAPTER_HIDDEN: usize = 16;
pub const WIDTH: usize = 32;
pub const DEEP_WIDTH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub size: usize,
    pub num_classes: usize,
    pub text_dim: usize,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.size < 2 || self.size % 2 != 0 || self.num_classes == 0 || self.text_dim == 0 {
            return Err(Error::invalid(format!("invalid denoiser config {self:?}")));
        }
        Ok(())
    }

    /// Geometry of a dataset whose records are all `size x size`.
    pub fn for_dataset(triplets: &[crate::raster::Triplet], num_classes: usize, text_dim: usize) -> Result<Self> {
        let first = triplets.first().ok_or_else(|| Error::invalid("empty dataset"))?;
        let (size, channels) = (first.width(), first.image.channels());
        if let Some(t) = triplets
            .iter()
            .find(|t| t.width() != size || t.height() != size || t.image.channels() != channels)
        {
            return Err(Error::invalid(format!(
                "record {} is {}x{}x{}; training needs uniform {size}x{size}x{channels} records",
                t.id,
                t.width(),
                t.height(),
                t.image.channels()
            )));
        }
        let cfg = Self {
            channels,
            size,
            num_classes,
            text_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pixels(&self) -> usize {
        self.size * self.size
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.pixels()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    /// Convolutional trunk.
    Backbone,
    /// Timestep/text projections and per-block scale/shift heads.
    Conditioning,
    /// Mask adapter.
    Adapter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Every parameter.
    Joint,
    /// Backbone and conditioning with the mask withheld; prepares a frozen base.
    Base,
    /// Only the mask adapter; everything else stays bit-identical.
    Adapter,
}

impl TrainMode {
    pub fn trains(&self, group: ParamGroup) -> bool {
        match self {
            TrainMode::Joint => true,
            TrainMode::Base => group != ParamGroup::Adapter,
            TrainMode::Adapter => group == ParamGroup::Adapter,
        }
    }

    pub fn uses_mask(&self) -> bool {
        *self != TrainMode::Base
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Uniform { fan_in: usize },
    Zero,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// Parameter indices; order is the checkpoint order.
const TEXT_W: usize = 0;
const TEXT_B: usize = 1;
const FILM1_W: usize = 2;
const FILM1_B: usize = 3;
const FILM2_W: usize = 4;
const FILM2_B: usize = 5;
const FILM3_W: usize = 6;
const FILM3_B: usize = 7;
const ENC1_W: usize = 8;
const ENC1_B: usize = 9;
const ENC2_W: usize = 10;
const ENC2_B: usize = 11;
const DEC_W: usize = 12;
const DEC_B: usize = 13;
const OUT_W: usize = 14;
const OUT_B: usize = 15;
const AD_IN_W: usize = 16;
const AD_IN_B: usize = 17;
const AD_MID_W: usize = 18;
const AD_MID_B: usize = 19;
const AD_DOWN_W: usize = 20;
const AD_DOWN_B: usize = 21;
pub const PARAM_COUNT: usize = 22;

struct Layout {
    enc1: Conv,
    enc2: Conv,
    dec: Conv,
    out: Conv,
    ad_in: Conv,
    ad_mid: Conv,
    ad_down: Conv,
}

impl Layout {
    fn new(cfg: &DenoiserConfig) -> Self {
        Self {
            enc1: Conv::new(cfg.channels, WIDTH, 3, 1),
            enc2: Conv::new(WIDTH, DEEP_WIDTH, 3, 2),
            dec: Conv::new(DEEP_WIDTH, WIDTH, 3, 1),
            out: Conv::new(WIDTH, cfg.channels, 3, 1),
            ad_in: Conv::new(cfg.num_classes, ADAPTER_HIDDEN, 1, 1),
            ad_mid: Conv::new(ADAPTER_HIDDEN, WIDTH, 3, 1),
            ad_down: Conv::new(WIDTH, DEEP_WIDTH, 1, 1),
        }
    }
}

fn specs(cfg: &DenoiserConfig) -> Vec<(ParamSpec, Init)> {
    use ParamGroup::*;
    let l = Layout::new(cfg);
    let conv = |name_w: &'static str, name_b: &'static str, c: Conv, group, zero: bool| {
        let fan_in = c.cin * c.kernel * c.kernel;
        let init = if zero { Init::Zero } else { Init::Uniform { fan_in } };
        [
            (
                ParamSpec {
                    name: name_w,
                    shape: vec![c.cout, c.cin, c.kernel, c.kernel],
                    group,
                },
                init,
            ),
            (
                ParamSpec {
                    name: name_b,
                    shape: vec![c.cout],
                    group,
                },
                init,
            ),
        ]
    };
    let lin = |name_w: &'static str, name_b: &'static str, out: usize, inp: usize, group| {
        let init = Init::Uniform { fan_in: inp };
        [
            (
                ParamSpec {
                    name: name_w,
                    shape: vec![out, inp],
                    group,
                },
                init,
            ),
            (
                ParamSpec {
                    name: name_b,
                    shape: vec![out],
                    group,
                },
                init,
            ),
        ]
    };
    let mut v = Vec::with_capacity(PARAM_COUNT);
    v.extend(lin("cond.text.weight", "cond.text.bias", TIME_DIM, cfg.text_dim, Conditioning));
    v.extend(lin("cond.film1.weight", "cond.film1.bias", 2 * WIDTH, TIME_DIM, Conditioning));
    v.extend(lin("cond.film2.weight", "cond.film2.bias", 2 * DEEP_WIDTH, TIME_DIM, Conditioning));
    v.extend(lin("cond.film3.weight", "cond.film3.bias", 2 * WIDTH, TIME_DIM, Conditioning));
    v.extend(conv("enc1.weight", "enc1.bias", l.enc1, Backbone, false));
    v.extend(conv("enc2.weight", "enc2.bias", l.enc2, Backbone, false));
    v.extend(conv("dec.weight", "dec.bias", l.dec, Backbone, false));
    v.extend(conv("out.weight", "out.bias", l.out, Backbone, false));
    v.extend(conv("adapter.in.weight", "adapter.in.bias", l.ad_in, Adapter, false));
    v.extend(conv("adapter.mid.weight", "adapter.mid.bias", l.ad_mid, Adapter, true));
    v.extend(conv("adapter.down.weight", "adapter.down.bias", l.ad_down, Adapter, false));
    // the pooled projection must not add a constant before the adapter learns
    v[AD_DOWN_B].1 = Init::Zero;
    debug_assert_eq!(v.len(), PARAM_COUNT);
    v
}

/// Declared parameter names, shapes and groups for a configuration.
pub fn param_specs(cfg: &DenoiserConfig) -> Vec<ParamSpec> {
    specs(cfg).into_iter().map(|(s, _)| s).collect()
}

/// One conditioned prediction request.
#[derive(Debug, Clone, Copy)]
pub struct DenoiseInput<'a, S> {
    /// Noisy sample, planar `[channels][size][size]`.
    pub x_t: &'a [S],
    pub t: f64,
    /// `None` drops the text condition (zero embedding).
    pub text: Option<&'a [S]>,
    /// `None` drops the mask condition (all-zero one-hot).
    pub mask: Option<&'a [ClassId]>,
}

#[derive(Debug, Clone)]
pub struct Denoiser<S> {
    config: DenoiserConfig,
    specs: Vec<ParamSpec>,
    params: Vec<Vec<S>>,
}

/// Activations kept from the forward pass.
pub struct ForwardCache<S> {
    text: Vec<S>,
    g: Vec<S>,
    a: Vec<S>,
    film: [Vec<S>; 3],
    x_cols: Vec<S>,
    onehot: Vec<S>,
    q: Vec<S>,
    qa_cols: Vec<S>,
    a1p: Vec<S>,
    z1: Vec<S>,
    y1: Vec<S>,
    h1_cols: Vec<S>,
    z2: Vec<S>,
    y2: Vec<S>,
    u_cols: Vec<S>,
    z3: Vec<S>,
    y3: Vec<S>,
    h3_cols: Vec<S>,
}

impl<S: Scalar> Denoiser<S> {
    /// Seeded initialization: uniform `±1/sqrt(fan_in)` everywhere except the
    /// adapter's 3x3 conv, which starts at zero.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut specs_out = Vec::with_capacity(PARAM_COUNT);
        let mut params = Vec::with_capacity(PARAM_COUNT);
        for (spec, init) in specs(&config) {
            let n = spec.len();
            let data = match init {
                Init::Zero => vec![S::zero(); n],
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| S::lit(rng.random_range(-bound..bound))).collect()
                }
            };
            specs_out.push(spec);
            params.push(data);
        }
        Ok(Self {
            config,
            specs: specs_out,
            params,
        })
    }

    pub fn zeros(config: DenoiserConfig) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.params.iter_mut().for_each(|p| p.iter_mut().for_each(|v| *v = S::zero()));
        Ok(m)
    }

    pub fn from_params(config: DenoiserConfig, params: Vec<Vec<S>>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if params.len() != specs.len() || params.iter().zip(&specs).any(|(p, s)| p.len() != s.len()) {
            return Err(Error::invalid("parameter tensors do not match the declared architecture"));
        }
        Ok(Self {
            config,
            specs,
            params,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Vec<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<S>] {
        &mut self.params
    }

    pub fn zero_grads(&self) -> Vec<Vec<S>> {
        self.params.iter().map(|p| vec![S::zero(); p.len()]).collect()
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<T: Scalar>(&self) -> Denoiser<T> {
        Denoiser {
            config: self.config,
            specs: self.specs.clone(),
            params: self
                .params
                .iter()
                .map(|p| p.iter().map(|v| T::lit(v.to_f64().unwrap_or(0.0))).collect())
                .collect(),
        }
    }

    fn check_input(&self, input: &DenoiseInput<'_, S>) -> Result<()> {
        let c = &self.config;
        if input.x_t.len() != c.sample_len() {
            return Err(Error::invalid(format!(
                "x_t has {} values, expected {}",
                input.x_t.len(),
                c.sample_len()
            )));
        }
        if let Some(m) = input.mask {
            if m.len() != c.pixels() {
                return Err(Error::invalid("mask resolution differs from the model's"));
            }
            if let Some(bad) = m.iter().find(|&&k| k as usize >= c.num_classes) {
                return Err(Error::invalid(format!("mask class {bad} outside the model's vocabulary")));
            }
        }
        if let Some(e) = input.text {
            if e.len() != c.text_dim {
                return Err(Error::invalid("text embedding dimension differs from the model's"));
            }
        }
        Ok(())
    }

    pub fn predict(&self, input: &DenoiseInput<'_, S>) -> Result<Vec<S>> {
        Ok(self.forward(input)?.0)
    }

    pub fn forward(&self, input: &DenoiseInput<'_, S>) -> Result<(Vec<S>, ForwardCache<S>)> {
        self.check_input(input)?;
        let cfg = &self.config;
        let l = Layout::new(cfg);
        let p = &self.params;
        let (hw, n) = (cfg.size, cfg.pixels());
        let (hs, ns) = (hw / 2, n / 4);

        // conditioning vector
        let text = input.text.map(<[S]>::to_vec).unwrap_or_else(|| vec![S::zero(); cfg.text_dim]);
        let temb: Vec<S> = layers::timestep_embedding(input.t, TIME_DIM);
        let proj = layers::linear(&p[TEXT_W], &p[TEXT_B], &text);
        let g: Vec<S> = temb.iter().zip(&proj).map(|(&a, &b)| a + b).collect();
        let a = layers::silu_vec(&g);
        let film = [
            layers::linear(&p[FILM1_W], &p[FILM1_B], &a),
            layers::linear(&p[FILM2_W], &p[FILM2_B], &a),
            layers::linear(&p[FILM3_W], &p[FILM3_B], &a),
        ];

        // mask adapter
        let mut onehot = vec![S::zero(); cfg.num_classes * n];
        if let Some(m) = input.mask {
            for (i, &k) in m.iter().enumerate() {
                onehot[k as usize * n + i] = S::one();
            }
        }
        let (q, _) = l.ad_in.forward(&p[AD_IN_W], &p[AD_IN_B], &onehot, hw, hw);
        let qa = layers::silu_vec(&q);
        let (a1, qa_cols) = l.ad_mid.forward(&p[AD_MID_W], &p[AD_MID_B], &qa, hw, hw);
        let a1p = layers::avgpool2(&a1, WIDTH, hw, hw);
        let (a2, _) = l.ad_down.forward(&p[AD_DOWN_W], &p[AD_DOWN_B], &a1p, hs, hs);

        // trunk
        let (mut z1, x_cols) = l.enc1.forward(&p[ENC1_W], &p[ENC1_B], input.x_t, hw, hw);
        add_into(&mut z1, &a1);
        let y1 = layers::film(&z1, &film[0][..WIDTH], &film[0][WIDTH..], n);
        let h1 = layers::silu_vec(&y1);

        let (mut z2, h1_cols) = l.enc2.forward(&p[ENC2_W], &p[ENC2_B], &h1, hw, hw);
        add_into(&mut z2, &a2);
        let y2 = layers::film(&z2, &film[1][..DEEP_WIDTH], &film[1][DEEP_WIDTH..], ns);
        let h2 = layers::silu_vec(&y2);

        let u = layers::upsample2(&h2, DEEP_WIDTH, hs, hs);
        let (mut z3, u_cols) = l.dec.forward(&p[DEC_W], &p[DEC_B], &u, hw, hw);
        add_into(&mut z3, &h1);
        let y3 = layers::film(&z3, &film[2][..WIDTH], &film[2][WIDTH..], n);
        let h3 = layers::silu_vec(&y3);

        let (out, h3_cols) = l.out.forward(&p[OUT_W], &p[OUT_B], &h3, hw, hw);
        Ok((
            out,
            ForwardCache {
                text,
                g,
                a,
                film,
                x_cols,
                onehot,
                q,
                qa_cols,
                a1p,
                z1,
                y1,
                h1_cols,
                z2,
                y2,
                u_cols,
                z3,
                y3,
                h3_cols,
            },
        ))
    }

    /// Accumulates `d loss / d param` into `grads` for every parameter whose
    /// group `trainable` accepts; other entries are left untouched.
    pub fn backward(
        &self,
        cache: &ForwardCache<S>,
        d_out: &[S],
        grads: &mut [Vec<S>],
        trainable: impl Fn(ParamGroup) -> bool,
    ) {
        let cfg = &self.config;
        let l = Layout::new(cfg);
        let p = &self.params;
        let (hw, n) = (cfg.size, cfg.pixels());
        let (hs, ns) = (hw / 2, n / 4);
        let on = |i: usize| trainable(self.specs[i].group);
        let backbone = on(OUT_W);
        let cond = on(TEXT_W);
        let adapter = on(AD_MID_W);

        let mut dh3 = l
            .out
            .backward(&p[OUT_W], &cache.h3_cols, d_out, hw, hw, pair(grads, OUT_W, OUT_B, backbone), true)
            .expect("input grad requested");
        layers::silu_backward(&cache.y3, &mut dh3);
        let mut dfilm3 = vec![S::zero(); 2 * WIDTH];
        let (ds3, dsh3) = dfilm3.split_at_mut(WIDTH);
        let dz3 = layers::film_backward(&cache.z3, &cache.film[2][..WIDTH], &dh3, n, ds3, dsh3);

        let du = l
            .dec
            .backward(&p[DEC_W], &cache.u_cols, &dz3, hw, hw, pair(grads, DEC_W, DEC_B, backbone), true)
            .expect("input grad requested");
        let mut dh2 = layers::upsample2_backward(&du, DEEP_WIDTH, hw, hw);
        layers::silu_backward(&cache.y2, &mut dh2);
        let mut dfilm2 = vec![S::zero(); 2 * DEEP_WIDTH];
        let (ds2, dsh2) = dfilm2.split_at_mut(DEEP_WIDTH);
        let dz2 = layers::film_backward(&cache.z2, &cache.film[1][..DEEP_WIDTH], &dh2, ns, ds2, dsh2);

        let mut dh1 = l
            .enc2
            .backward(&p[ENC2_W], &cache.h1_cols, &dz2, hw, hw, pair(grads, ENC2_W, ENC2_B, backbone), true)
            .expect("input grad requested");
        add_into(&mut dh1, &dz3);
        layers::silu_backward(&cache.y1, &mut dh1);
        let mut dfilm1 = vec![S::zero(); 2 * WIDTH];
        let (ds1, dsh1) = dfilm1.split_at_mut(WIDTH);
        let dz1 = layers::film_backward(&cache.z1, &cache.film[0][..WIDTH], &dh1, n, ds1, dsh1);
        l.enc1
            .backward(&p[ENC1_W], &cache.x_cols, &dz1, hw, hw, pair(grads, ENC1_W, ENC1_B, backbone), false);

        if adapter {
            // z2 += a2, z1 += a1
            let da1p = l
                .ad_down
                .backward(&p[AD_DOWN_W], &cache.a1p, &dz2, hs, hs, pair(grads, AD_DOWN_W, AD_DOWN_B, true), true)
                .expect("input grad requested");
            let mut da1 = layers::avgpool2_backward(&da1p, WIDTH, hw, hw);
            add_into(&mut da1, &dz1);
            let mut dqa = l
                .ad_mid
                .backward(&p[AD_MID_W], &cache.qa_cols, &da1, hw, hw, pair(grads, AD_MID_W, AD_MID_B, true), true)
                .expect("input grad requested");
            layers::silu_backward(&cache.q, &mut dqa);
            l.ad_in
                .backward(&p[AD_IN_W], &cache.onehot, &dqa, hw, hw, pair(grads, AD_IN_W, AD_IN_B, true), false);
        }

        if cond {
            let mut da = vec![S::zero(); TIME_DIM];
            for (idx, df) in [(FILM1_W, &dfilm1), (FILM2_W, &dfilm2), (FILM3_W, &dfilm3)] {
                let d = layers::linear_backward(&p[idx], &cache.a, df, pair(grads, idx, idx + 1, true));
                add_into(&mut da, &d);
            }
            layers::silu_backward(&cache.g, &mut da);
            layers::linear_backward(&p[TEXT_W], &cache.text, &da, pair(grads, TEXT_W, TEXT_B, true));
        }
    }
}

fn pair<S>(grads: &mut [Vec<S>], w: usize, b: usize, on: bool) -> Option<(&mut [S], &mut [S])> {
    if !on {
        return None;
    }
    let (lo, hi) = grads.split_at_mut(b);
    Some((lo[w].as_mut_slice(), hi[0].as_mut_slice()))
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(size: usize) -> DenoiserConfig {
        DenoiserConfig {
            channels: 3,
            size,
            num_classes: 3,
            text_dim: 8,
        }
    }

    #[test]
    fn output_shape_matches_input() {
        for size in [4, 8, 16, 32] {
            let m = Denoiser::<f32>::new(cfg(size), 1).unwrap();
            let x = vec![0.3f32; 3 * size * size];
            let mask = vec![1u8; size * size];
            let text = vec![0.1f32; 8];
            let out = m
                .predict(&DenoiseInput {
                    x_t: &x,
                    t: 10.0,
                    text: Some(&text),
                    mask: Some(&mask),
                })
                .unwrap();
            assert_eq!(out.len(), x.len());
        }
    }

    #[test]
    fn zero_parameters_predict_zero() {
        let m = Denoiser::<f64>::zeros(cfg(8)).unwrap();
        let x: Vec<f64> = (0..192).map(|i| (i as f64).cos()).collect();
        let mask = vec![2u8; 64];
        let text = vec![1.0; 8];
        let out = m
            .predict(&DenoiseInput {
                x_t: &x,
                t: 500.0,
                text: Some(&text),
                mask: Some(&mask),
            })
            .unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let m = Denoiser::<f32>::new(cfg(8), 1).unwrap();
        let bad = vec![0.0f32; 10];
        assert!(m
            .predict(&DenoiseInput {
                x_t: &bad,
                t: 1.0,
                text: None,
                mask: None
            })
            .is_err());
        let x = vec![0.0f32; 192];
        let mask = vec![0u8; 63];
        assert!(m
            .predict(&DenoiseInput {
                x_t: &x,
                t: 1.0,
                text: None,
                mask: Some(&mask)
            })
            .is_err());
        assert!(DenoiserConfig { size: 7, ..cfg(8) }.validate().is_err());
    }

    #[test]
    fn untrained_adapter_is_inert() {
        let m = Denoiser::<f64>::new(cfg(8), 3).unwrap();
        let x: Vec<f64> = (0..192).map(|i| (i as f64 * 0.1).sin()).collect();
        let text = vec![0.5; 8];
        let with = |mask: Option<&[u8]>| {
            m.predict(&DenoiseInput {
                x_t: &x,
                t: 42.0,
                text: Some(&text),
                mask,
            })
            .unwrap()
        };
        let mask = vec![1u8; 64];
        assert_eq!(with(Some(&mask)), with(None));
    }

    #[test]
    fn declared_shapes() {
        let specs = param_specs(&cfg(8));
        assert_eq!(specs.len(), PARAM_COUNT);
        let names: std::collections::HashSet<_> = specs.iter().map(|s| s.name).collect();
        assert_eq!(names.len(), PARAM_COUNT);
        let dec = specs.iter().find(|s| s.name == "dec.weight").unwrap();
        assert_eq!(dec.shape, vec![32, 64, 3, 3]);
        let ad = specs.iter().find(|s| s.name == "adapter.mid.weight").unwrap();
        assert_eq!(ad.shape, vec![32, 16, 3, 3]);
        assert_eq!(ad.group, ParamGroup::Adapter);
    }
}
