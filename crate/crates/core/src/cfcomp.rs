//! Counterfactual composition: pairwise compatibility criteria, Copy-Paste
//! compositing and per-batch composite selection.

use serde::{Deserialize, Serialize};

use crate::embed::{cosine, TextEmbedder, TextEmbedding};
use crate::error::{Error, Result};
use crate::raster::{check_aligned, CategoryVocabulary, Raster, SemanticMask, Triplet, BACKGROUND};
use crate::scalar::Scalar;

/// Acceptance thresholds for a composite pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairThresholds {
    /// Maximum color-sensitivity gap, on the 0-255 intensity scale.
    pub s0: f64,
    pub ics_min: f64,
    pub mor_min: f64,
    pub tss_min: f64,
    /// Cap on composites as a fraction of the batch size.
    pub max_copy_fraction: f64,
}

impl Default for PairThresholds {
    fn default() -> Self {
        Self {
            s0: 150.0,
            ics_min: 1.0,
            mor_min: 0.02,
            tss_min: 0.6,
            max_copy_fraction: 0.5,
        }
    }
}

impl PairThresholds {
    pub fn validate(&self) -> Result<()> {
        let ok = self.s0 > 0.0
            && (0.0..=1.0).contains(&self.mor_min)
            && (-1.0..=1.0).contains(&self.tss_min)
            && (0.0..=1.0).contains(&self.max_copy_fraction);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("pair thresholds out of range: {self:?}")))
        }
    }

    pub fn cap(&self, batch: usize) -> usize {
        (self.max_copy_fraction * batch as f64).ceil() as usize
    }
}

/// `Var(R-G) + Var(R-B) + Var(G-B)` over all pixels (population variance,
/// 0-255 scale).
pub fn color_sensitivity(image: &Raster) -> Result<f64> {
    if image.channels() != 3 {
        return Err(Error::invalid(format!(
            "color sensitivity needs 3 channels, got {}",
            image.channels()
        )));
    }
    let n = image.width() * image.height();
    if n == 0 {
        return Err(Error::invalid("empty image"));
    }
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    for px in image.data().chunks_exact(3) {
        let (r, g, b) = (px[0] as f64, px[1] as f64, px[2] as f64);
        for (k, d) in [r - g, r - b, g - b].into_iter().enumerate() {
            sum[k] += d;
            sq[k] += d * d;
        }
    }
    let n = n as f64;
    Ok((0..3)
        .map(|k| {
            let mean = sum[k] / n;
            (sq[k] / n - mean * mean).max(0.0)
        })
        .sum())
}

/// Channel compatibility gate: 1 when channel counts match and the color
/// sensitivities differ by less than `s0`.
pub fn ics(a: &Raster, b: &Raster, s0: f64) -> f64 {
    if a.channels() != b.channels() {
        return 0.0;
    }
    match (sensitivity_or_gray(a), sensitivity_or_gray(b)) {
        (sa, sb) if (sa - sb).abs() < s0 => 1.0,
        _ => 0.0,
    }
}

/// Single-channel rasters have no inter-channel variance.
fn sensitivity_or_gray(r: &Raster) -> f64 {
    color_sensitivity(r).unwrap_or(0.0)
}

fn ics_from(ca: usize, sa: f64, cb: usize, sb: f64, s0: f64) -> f64 {
    if ca == cb && (sa - sb).abs() < s0 {
        1.0
    } else {
        0.0
    }
}

/// Foreground IoU; 0 when both foregrounds are empty.
pub fn mor(a: &SemanticMask, b: &SemanticMask) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::invalid("mask dimensions differ"));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.classes().iter().zip(b.classes()) {
        let (fa, fb) = (x != BACKGROUND, y != BACKGROUND);
        inter += (fa && fb) as usize;
        union += (fa || fb) as usize;
    }
    Ok(if union > 0 { inter as f64 / union as f64 } else { 0.0 })
}

pub fn tss(a: &str, b: &str, embedder: &dyn TextEmbedder) -> Result<f64> {
    cosine(&embedder.embed(a)?, &embedder.embed(b)?)
}

/// Pastes the foreground of `a` over `b`.
///
/// Image and mask take `a` wherever `a`'s mask is foreground and `b`
/// elsewhere. The class set is read back from the composed mask, which is
/// `classes_b ∪ classes_a` unless `a` fully occludes one of `b`'s classes.
pub fn copy_paste(a: &Triplet, b: &Triplet, vocab: &CategoryVocabulary) -> Result<Triplet> {
    check_aligned(&a.image, &b.mask)?;
    check_aligned(&b.image, &a.mask)?;
    if a.image.channels() != b.image.channels() {
        return Err(Error::invalid("channel counts differ"));
    }
    if a.mask.vocab_ref() != b.mask.vocab_ref() {
        return Err(Error::invalid(format!(
            "vocabularies differ: {} vs {}",
            a.mask.vocab_ref(),
            b.mask.vocab_ref()
        )));
    }
    let ch = a.image.channels();
    let mut data = b.image.data().to_vec();
    let mut ids = b.mask.classes().to_vec();
    for (p, &c) in a.mask.classes().iter().enumerate() {
        if c != BACKGROUND {
            ids[p] = c;
            data[p * ch..(p + 1) * ch].copy_from_slice(&a.image.data()[p * ch..(p + 1) * ch]);
        }
    }
    let image = Raster::new(a.width(), a.height(), ch, data)?;
    let mask = SemanticMask::new(a.width(), a.height(), ids, a.mask.vocab_ref())?;
    Triplet::from_mask(format!("{}+{}", a.id, b.id), image, mask, "cfcomp", vocab)
}

/// Criteria for one ordered pair `(a, b)`: paste `a` onto `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairEvaluation {
    pub a: usize,
    pub b: usize,
    pub ics: f64,
    pub mor: f64,
    pub tss: f64,
    /// All three criteria pass.
    pub passes: bool,
    /// Passed and fell within the composite cap.
    pub accepted: bool,
}

struct PairCache {
    channels: Vec<usize>,
    sensitivity: Vec<f64>,
    embeddings: Vec<TextEmbedding>,
}

impl PairCache {
    fn new(batch: &[Triplet], embedder: &dyn TextEmbedder) -> Result<Self> {
        Ok(Self {
            channels: batch.iter().map(|t| t.image.channels()).collect(),
            sensitivity: batch.iter().map(|t| sensitivity_or_gray(&t.image)).collect(),
            embeddings: batch.iter().map(|t| embedder.embed(&t.text)).collect::<Result<_>>()?,
        })
    }

    fn evaluate(&self, batch: &[Triplet], a: usize, b: usize, th: &PairThresholds) -> Result<PairEvaluation> {
        let ics = ics_from(self.channels[a], self.sensitivity[a], self.channels[b], self.sensitivity[b], th.s0);
        let mor = mor(&batch[a].mask, &batch[b].mask)?;
        let tss = cosine(&self.embeddings[a], &self.embeddings[b])?;
        let passes = ics >= th.ics_min && mor >= th.mor_min && tss >= th.tss_min;
        Ok(PairEvaluation {
            a,
            b,
            ics,
            mor,
            tss,
            passes,
            accepted: false,
        })
    }
}

fn ordered_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |a| (0..n).filter(move |&b| b != a).map(move |b| (a, b)))
}

/// Evaluates every ordered pair; `accepted` marks the ones
/// [`select_composites`] would use.
pub fn scan_pairs(
    batch: &[Triplet],
    thresholds: &PairThresholds,
    embedder: &dyn TextEmbedder,
) -> Result<Vec<PairEvaluation>> {
    let cache = PairCache::new(batch, embedder)?;
    let cap = thresholds.cap(batch.len());
    let mut taken = 0;
    let mut out = Vec::new();
    for (a, b) in ordered_pairs(batch.len()) {
        let mut e = cache.evaluate(batch, a, b, thresholds)?;
        if e.passes && taken < cap {
            e.accepted = true;
            taken += 1;
        }
        out.push(e);
    }
    Ok(out)
}

/// Composites for one training batch, in ascending `(a, b)` order, capped at
/// `ceil(max_copy_fraction * len)`.
pub fn select_composites(
    batch: &[Triplet],
    thresholds: &PairThresholds,
    embedder: &dyn TextEmbedder,
    vocab: &CategoryVocabulary,
) -> Result<Vec<Triplet>> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let cap = thresholds.cap(batch.len());
    if cap == 0 {
        return Ok(Vec::new());
    }
    let cache = PairCache::new(batch, embedder)?;
    let mut out = Vec::new();
    for (a, b) in ordered_pairs(batch.len()) {
        if cache.evaluate(batch, a, b, thresholds)?.passes {
            out.push(copy_paste(&batch[a], &batch[b], vocab)?);
            if out.len() == cap {
                break;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixedStats<S> {
    pub mu_mix: S,
    pub var_mix: S,
    pub alpha: S,
}

/// Mean and variance of an image whose foreground fraction `alpha` follows
/// the object distribution and the rest the background distribution.
pub fn mixed_stats<S: Scalar>(mu_obj: S, var_obj: S, mu_bg: S, var_bg: S, alpha: S) -> Result<MixedStats<S>> {
    let finite = [mu_obj, var_obj, mu_bg, var_bg, alpha].iter().all(|v| v.is_finite());
    if !finite || var_obj < S::zero() || var_bg < S::zero() || alpha < S::zero() || alpha > S::one() {
        return Err(Error::invalid("mixed_stats inputs out of range"));
    }
    let beta = S::one() - alpha;
    let d = mu_obj - mu_bg;
    Ok(MixedStats {
        mu_mix: alpha * mu_obj + beta * mu_bg,
        var_mix: alpha * var_obj + beta * var_bg + alpha * beta * d * d,
        alpha,
    })
}
