//! Condition sampling, guided reverse diffusion and batch synthesis.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::template::describe;
use crate::dataset::{write_manifest, DatasetManifest};
use crate::diffusion::{DenoiseInput, Denoiser, NoiseSchedule};
use crate::embed::TextEmbedder;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::hash::mix_seed;
use crate::raster::{class_set, CategoryVocabulary, ClassId, Raster, SemanticMask, Triplet, BACKGROUND};
use crate::scalar::Scalar;

pub const GENERATION_FILE: &str = "generation.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Sampled,
    Transformed,
    Merged,
}

/// A mask and the caption naming exactly its classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Condition {
    mask: SemanticMask,
    text: String,
    classes: BTreeSet<ClassId>,
    provenance: Provenance,
}

impl Condition {
    pub fn new(mask: SemanticMask, vocab: &CategoryVocabulary, provenance: Provenance) -> Result<Self> {
        let classes = class_set(&mask, vocab)?;
        let text = describe(&classes, vocab)?;
        Ok(Self {
            mask,
            text,
            classes,
            provenance,
        })
    }

    pub fn mask(&self) -> &SemanticMask {
        &self.mask
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn classes(&self) -> &BTreeSet<ClassId> {
        &self.classes
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledConditions {
    pub conditions: Vec<Condition>,
    /// Vocabulary classes with no occurrence in the manifest.
    pub absent: Vec<ClassId>,
}

/// Draws `per_class` conditions for every class present in the manifest,
/// without replacement when enough records contain the class.
pub fn sample_conditions(manifest: &DatasetManifest, per_class: usize, seed: u64) -> Result<SampledConditions> {
    if manifest.is_empty() {
        return Err(Error::invalid("cannot sample conditions from an empty manifest"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut conditions = Vec::new();
    let mut absent = Vec::new();
    for cat in manifest.vocab.entries().iter().filter(|c| c.id != BACKGROUND) {
        let holders: Vec<&Triplet> = manifest.triplets.iter().filter(|t| t.classes.contains(&cat.id)).collect();
        if holders.is_empty() {
            log::warn!("class {:?} does not occur in the manifest; no conditions drawn", cat.name);
            absent.push(cat.id);
            continue;
        }
        let picks: Vec<usize> = if holders.len() >= per_class {
            index::sample(&mut rng, holders.len(), per_class).into_vec()
        } else {
            (0..per_class).map(|_| rng.random_range(0..holders.len())).collect()
        };
        for i in picks {
            conditions.push(Condition::new(holders[i].mask.clone(), &manifest.vocab, Provenance::Sampled)?);
        }
    }
    Ok(SampledConditions { conditions, absent })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Transform {
    /// Counter-clockwise quarter turns.
    Rotate90(u32),
    /// Factor in `[0.5, 2]`.
    Scale(f64),
    /// Paste this condition's objects over the other's.
    Merge(Box<Condition>),
}

/// Geometric transforms keep the canvas size: content is re-centred and
/// uncovered pixels become background.
pub fn transform_condition(c: &Condition, transform: &Transform, vocab: &CategoryVocabulary) -> Result<Condition> {
    let m = &c.mask;
    let (w, h) = (m.width() as i64, m.height() as i64);
    let ids = match transform {
        Transform::Rotate90(k) => {
            let k = k % 4;
            let (rw, rh) = if k % 2 == 1 { (h, w) } else { (w, h) };
            let (ox, oy) = ((w - rw).div_euclid(2), (h - rh).div_euclid(2));
            resample(m, |x, y| {
                let (rx, ry) = (x - ox, y - oy);
                if rx < 0 || ry < 0 || rx >= rw || ry >= rh {
                    return None;
                }
                // Inverse of k counter-clockwise turns.
                Some(match k {
                    0 => (rx, ry),
                    1 => (w - 1 - ry, rx),
                    2 => (w - 1 - rx, h - 1 - ry),
                    _ => (ry, h - 1 - rx),
                })
            })
        }
        Transform::Scale(f) => {
            if !(0.5..=2.0).contains(f) {
                return Err(Error::invalid(format!("scale factor {f} outside [0.5, 2]")));
            }
            let sw = ((w as f64) * f).round() as i64;
            let sh = ((h as f64) * f).round() as i64;
            let (ox, oy) = ((w - sw).div_euclid(2), (h - sh).div_euclid(2));
            resample(m, |x, y| {
                let (sx, sy) = (x - ox, y - oy);
                if sx < 0 || sy < 0 || sx >= sw || sy >= sh {
                    return None;
                }
                let src = |v: i64, len: i64| ((((v as f64) + 0.5) / f).floor() as i64).clamp(0, len - 1);
                Some((src(sx, w), src(sy, h)))
            })
        }
        Transform::Merge(other) => {
            let o = &other.mask;
            if o.width() != m.width() || o.height() != m.height() {
                return Err(Error::invalid("merged conditions must share dimensions"));
            }
            o.classes()
                .iter()
                .zip(m.classes())
                .map(|(&under, &over)| if over != BACKGROUND { over } else { under })
                .collect()
        }
    };
    let provenance = match transform {
        Transform::Merge(_) => Provenance::Merged,
        _ => Provenance::Transformed,
    };
    let mask = SemanticMask::new(m.width(), m.height(), ids, m.vocab_ref())?;
    Condition::new(mask, vocab, provenance)
}

fn resample(m: &SemanticMask, source: impl Fn(i64, i64) -> Option<(i64, i64)>) -> Vec<ClassId> {
    let (w, h) = (m.width(), m.height());
    let mut out = vec![BACKGROUND; w * h];
    for y in 0..h {
        for x in 0..w {
            if let Some((sx, sy)) = source(x as i64, y as i64) {
                out[y * w + x] = m.get(sx as usize, sy as usize);
            }
        }
    }
    out
}

/// A randomly chosen rotation, scaling, or merge with another condition of
/// the same size drawn from `pool`.
pub fn random_transform(
    c: &Condition,
    pool: &[Condition],
    seed: u64,
    vocab: &CategoryVocabulary,
) -> Result<Condition> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let partners: Vec<&Condition> = pool
        .iter()
        .filter(|o| o.mask.width() == c.mask.width() && o.mask.height() == c.mask.height())
        .collect();
    let kinds = if partners.is_empty() { 2 } else { 3 };
    let t = match rng.random_range(0..kinds) {
        0 => Transform::Rotate90(rng.random_range(1..4)),
        1 => Transform::Scale(rng.random_range(0.5..=2.0)),
        _ => Transform::Merge(Box::new(partners[rng.random_range(0..partners.len())].clone())),
    };
    transform_condition(c, &t, vocab)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    /// `x_prev = (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t) + sigma z`.
    Paper,
    /// Standard ancestral update.
    Ddpm,
}

/// Reverse update from `t` to `t_prev < t`. `z` is ignored when `t_prev == 0`.
pub fn reverse_step_to<S: Scalar>(
    x_t: &[S],
    t: usize,
    t_prev: usize,
    eps_hat: &[S],
    schedule: &NoiseSchedule,
    sampler: Sampler,
    z: Option<&[S]>,
) -> Result<Vec<S>> {
    if t == 0 || t > schedule.steps() || t_prev >= t {
        return Err(Error::invalid(format!("reverse step {t} -> {t_prev} outside 1..={}", schedule.steps())));
    }
    if x_t.len() != eps_hat.len() || z.is_some_and(|z| z.len() != x_t.len()) {
        return Err(Error::invalid("reverse step shapes differ"));
    }
    let ab = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar(t_prev)?;
    let sigma = if t_prev == 0 { 0.0 } else { schedule.sigma_between(t, t_prev)? };
    let (a, b) = match sampler {
        Sampler::Paper => (1.0 / ab.sqrt(), (1.0 - ab).sqrt() / ab.sqrt()),
        Sampler::Ddpm => {
            let alpha = ab / ab_prev;
            let beta = 1.0 - alpha;
            (1.0 / alpha.sqrt(), beta / ((1.0 - ab).sqrt() * alpha.sqrt()))
        }
    };
    let (a, b, s) = (S::lit(a), S::lit(b), S::lit(sigma));
    let mut out: Vec<S> = x_t.iter().zip(eps_hat).map(|(&x, &e)| a * x - b * e).collect();
    if let (Some(z), true) = (z, t_prev > 0 && sigma > 0.0) {
        out.iter_mut().zip(z).for_each(|(o, &zv)| *o += s * zv);
    }
    Ok(out)
}

/// Single-step form: `t -> t - 1`.
pub fn reverse_step<S: Scalar>(
    x_t: &[S],
    t: usize,
    eps_hat: &[S],
    schedule: &NoiseSchedule,
    sampler: Sampler,
    z: Option<&[S]>,
) -> Result<Vec<S>> {
    reverse_step_to(x_t, t, t.saturating_sub(1), eps_hat, schedule, sampler, z)
}

/// `eps_u + g (eps_c - eps_u)`, with the endpoints returned unchanged.
pub fn guide<S: Scalar>(eps_uncond: &[S], eps_cond: &[S], guidance: f64) -> Vec<S> {
    if guidance == 1.0 {
        return eps_cond.to_vec();
    }
    if guidance == 0.0 {
        return eps_uncond.to_vec();
    }
    let g = S::lit(guidance);
    eps_uncond.iter().zip(eps_cond).map(|(&u, &c)| u + g * (c - u)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub steps: usize,
    pub guidance: f64,
    pub sampler: Sampler,
    pub per_class: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            guidance: 4.0,
            sampler: Sampler::Paper,
            per_class: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthesisJob {
    pub conditions: Vec<Condition>,
    pub steps: usize,
    pub guidance: f64,
    pub sampler: Sampler,
    pub seed: u64,
}

impl SynthesisJob {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.conditions.is_empty() {
            return Err(Error::invalid("synthesis job has no conditions"));
        }
        if self.steps == 0 || self.steps > schedule.steps() {
            return Err(Error::invalid(format!("steps {} outside 1..={}", self.steps, schedule.steps())));
        }
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return Err(Error::invalid("guidance must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Generates one image for `condition` from seeded Gaussian noise.
#[allow(clippy::too_many_arguments)]
pub fn generate<S: Scalar>(
    model: &Denoiser<S>,
    schedule: &NoiseSchedule,
    condition: &Condition,
    embedder: &dyn TextEmbedder,
    steps: usize,
    guidance: f64,
    sampler: Sampler,
    seed: u64,
) -> Result<Raster> {
    let cfg = *model.config();
    if condition.mask.width() != cfg.size || condition.mask.height() != cfg.size {
        return Err(Error::invalid(format!(
            "condition is {}x{}, model expects {}x{}",
            condition.mask.width(),
            condition.mask.height(),
            cfg.size,
            cfg.size
        )));
    }
    let text: Vec<S> = embedder.embed(&condition.text)?.values().iter().map(|&v| S::lit(v)).collect();
    let ts = schedule.strided(steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |n: usize| -> Vec<S> { (0..n).map(|_| S::lit(rng.sample::<f64, _>(StandardNormal))).collect() };
    let n = cfg.sample_len();
    let mut x = normal(n);
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let cond = DenoiseInput {
            x_t: &x,
            t: t as f64,
            text: Some(&text),
            mask: Some(condition.mask.classes()),
        };
        let eps_c = (guidance != 0.0).then(|| model.predict(&cond)).transpose()?;
        let eps_u = (guidance != 1.0)
            .then(|| {
                model.predict(&DenoiseInput {
                    text: None,
                    mask: None,
                    ..cond
                })
            })
            .transpose()?;
        let eps = match (eps_u, eps_c) {
            (Some(u), Some(c)) => guide(&u, &c, guidance),
            (Some(u), None) => u,
            (None, Some(c)) => c,
            (None, None) => unreachable!("guidance cannot be both 0 and 1"),
        };
        let z = (t_prev > 0).then(|| normal(n));
        x = reverse_step_to(&x, t, t_prev, &eps, schedule, sampler, z.as_deref())?;
    }
    Raster::from_planar(cfg.size, cfg.size, cfg.channels, &x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationRecord {
    pub id: String,
    pub seed: u64,
    pub guidance: f64,
    pub steps: usize,
    pub sampler: Sampler,
    pub provenance: Provenance,
}

#[derive(Debug, Clone)]
pub struct SynthesisOutput {
    pub dataset: DatasetManifest,
    pub records: Vec<GenerationRecord>,
}

/// Generates every condition of `job`; condition `i` uses seed
/// `mix_seed(job.seed, i)`. Work is split over `threads` without changing
/// the result.
pub fn synthesize<S: Scalar>(
    model: &Denoiser<S>,
    schedule: &NoiseSchedule,
    job: &SynthesisJob,
    embedder: &dyn TextEmbedder,
    vocab: &CategoryVocabulary,
    threads: usize,
) -> Result<SynthesisOutput> {
    job.validate(schedule)?;
    let n = job.conditions.len();
    let threads = threads.clamp(1, n);
    let one = |i: usize| -> Result<(Triplet, GenerationRecord)> {
        let c = &job.conditions[i];
        let seed = mix_seed(job.seed, i as u64);
        let image = generate(model, schedule, c, embedder, job.steps, job.guidance, job.sampler, seed)?;
        let id = format!("synth-{i:05}");
        let triplet = Triplet::new(id.clone(), image, c.mask.clone(), c.text.clone(), "synth", vocab)?;
        let record = GenerationRecord {
            id,
            seed,
            guidance: job.guidance,
            steps: job.steps,
            sampler: job.sampler,
            provenance: c.provenance,
        };
        Ok((triplet, record))
    };
    let results: Vec<Result<(Triplet, GenerationRecord)>> = if threads == 1 {
        (0..n).map(one).collect()
    } else {
        let chunk = n.div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..n)
                .step_by(chunk)
                .map(|start| {
                    let one = &one;
                    s.spawn(move || (start..(start + chunk).min(n)).map(one).collect::<Vec<_>>())
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("generation worker panicked"))
                .collect()
        })
    };
    let (triplets, records): (Vec<_>, Vec<_>) = results.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    Ok(SynthesisOutput {
        dataset: DatasetManifest::new(vocab.clone(), job.seed, triplets)?,
        records,
    })
}

/// Writes the candidate manifest and its `generation.json` sidecar.
pub fn write_synthesis(dir: &Path, out: &SynthesisOutput) -> Result<PathBuf> {
    let manifest = write_manifest(dir, &out.dataset)?;
    let mut json = serde_json::to_vec_pretty(&out.records)?;
    json.push(b'\n');
    write_atomic(&dir.join(GENERATION_FILE), &json)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::toy::{make_toy_dataset, toy_vocabulary, DISK, SQUARE};
    use crate::diffusion::{forward_noise, make_schedule, DenoiserConfig};
    use crate::embed::BuiltinEmbedder;

    fn block_mask(w: usize, h: usize, x0: usize, y0: usize, bw: usize, bh: usize, id: ClassId) -> SemanticMask {
        let mut m = SemanticMask::filled(w, h, 0, toy_vocabulary().identifier());
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                m.set(x, y, id);
            }
        }
        m
    }

    fn cond(m: SemanticMask) -> Condition {
        Condition::new(m, &toy_vocabulary(), Provenance::Sampled).unwrap()
    }

    #[test]
    fn per_class_counts_and_determinism() {
        let ds = make_toy_dataset(30, 16, 4).unwrap();
        let a = sample_conditions(&ds, 10, 1).unwrap();
        assert_eq!(a.conditions.len(), 20);
        assert!(a.absent.is_empty());
        assert_eq!(a, sample_conditions(&ds, 10, 1).unwrap());
        for c in &a.conditions[..10] {
            assert!(c.classes().contains(&DISK));
        }
        for c in &a.conditions[10..] {
            assert!(c.classes().contains(&SQUARE));
        }
    }

    #[test]
    fn absent_class_is_reported() {
        let vocab = CategoryVocabulary::from_names(&["disk", "square", "river"]).unwrap();
        let src = make_toy_dataset(5, 16, 4).unwrap();
        let triplets = src
            .triplets
            .iter()
            .map(|t| {
                let mask = SemanticMask::new(16, 16, t.mask.classes().to_vec(), vocab.identifier()).unwrap();
                Triplet::from_mask(t.id.clone(), t.image.clone(), mask, "toy", &vocab).unwrap()
            })
            .collect();
        let ds = DatasetManifest::new(vocab, 0, triplets).unwrap();
        let s = sample_conditions(&ds, 3, 0).unwrap();
        assert_eq!(s.absent, vec![3]);
    }

    #[test]
    fn empty_manifest_rejected() {
        let ds = DatasetManifest::new(toy_vocabulary(), 0, vec![]).unwrap();
        assert!(sample_conditions(&ds, 1, 0).is_err());
    }

    #[test]
    fn quarter_turns() {
        let vocab = toy_vocabulary();
        let c = cond(block_mask(8, 8, 0, 0, 3, 2, DISK));
        let full = transform_condition(&c, &Transform::Rotate90(4), &vocab).unwrap();
        assert_eq!(full.mask(), c.mask());
        let one = transform_condition(&c, &Transform::Rotate90(1), &vocab).unwrap();
        // Top-left 3x2 block turns counter-clockwise into the bottom-left 2x3 block.
        assert_eq!(one.mask(), &block_mask(8, 8, 0, 5, 2, 3, DISK));
        let mut back = one.clone();
        for _ in 0..3 {
            back = transform_condition(&back, &Transform::Rotate90(1), &vocab).unwrap();
        }
        assert_eq!(back.mask(), c.mask());
    }

    #[test]
    fn scaling_keeps_canvas_and_classes() {
        let vocab = toy_vocabulary();
        let c = cond(block_mask(16, 16, 6, 6, 4, 4, SQUARE));
        let up = transform_condition(&c, &Transform::Scale(2.0), &vocab).unwrap();
        assert_eq!(up.mask(), &block_mask(16, 16, 4, 4, 8, 8, SQUARE));
        let down = transform_condition(&c, &Transform::Scale(0.5), &vocab).unwrap();
        assert_eq!(down.classes(), c.classes());
        assert!(transform_condition(&c, &Transform::Scale(2.5), &vocab).is_err());
        assert!(transform_condition(&c, &Transform::Scale(0.4), &vocab).is_err());
    }

    #[test]
    fn merge_unions_classes() {
        let vocab = toy_vocabulary();
        let disk = cond(block_mask(16, 16, 1, 1, 4, 4, DISK));
        let square = cond(block_mask(16, 16, 9, 9, 5, 5, SQUARE));
        let m = transform_condition(&disk, &Transform::Merge(Box::new(square.clone())), &vocab).unwrap();
        let union: BTreeSet<ClassId> = disk.classes().union(square.classes()).copied().collect();
        assert_eq!(m.classes(), &union);
        assert_eq!(m.provenance(), Provenance::Merged);
        assert_eq!(crate::dataset::parse_text(m.text(), &vocab).unwrap(), union);
        let small = cond(block_mask(8, 8, 1, 1, 2, 2, SQUARE));
        assert!(transform_condition(&disk, &Transform::Merge(Box::new(small)), &vocab).is_err());
    }

    #[test]
    fn paper_step_inverts_forward_noise() {
        let s = make_schedule(50, 1e-4, 0.02).unwrap();
        let x0: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let eps: Vec<f64> = (0..40).map(|i| (i as f64 * 1.91).cos()).collect();
        for t in 1..=50 {
            let xt = forward_noise(&x0, t, &eps, &s).unwrap();
            let back = reverse_step(&xt, t, &eps, &s, Sampler::Paper, None).unwrap();
            for (a, b) in back.iter().zip(&x0) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ddpm_step_matches_posterior_mean() {
        let s = make_schedule(10, 1e-3, 0.2).unwrap();
        let t = 6;
        let (beta, ab, ab_prev) = (s.beta(t).unwrap(), s.alpha_bar(t).unwrap(), s.alpha_bar(t - 1).unwrap());
        let x0 = [0.3, -0.8];
        let eps = [1.1, 0.4];
        let xt = forward_noise(&x0, t, &eps, &s).unwrap();
        let step = reverse_step(&xt, t, &eps, &s, Sampler::Ddpm, None).unwrap();
        // Posterior mean written in terms of x0 and x_t.
        for i in 0..2 {
            let mean = ab_prev.sqrt() * beta / (1.0 - ab) * x0[i] + (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab) * xt[i];
            assert!((step[i] - mean).abs() < 1e-6, "{} vs {mean}", step[i]);
        }
    }

    #[test]
    fn final_step_has_no_noise() {
        let s = make_schedule(10, 1e-3, 0.2).unwrap();
        let x = [0.5, 0.1];
        let e = [0.2, -0.3];
        let z = [5.0, 5.0];
        for sampler in [Sampler::Paper, Sampler::Ddpm] {
            assert_eq!(
                reverse_step(&x, 1, &e, &s, sampler, Some(&z)).unwrap(),
                reverse_step(&x, 1, &e, &s, sampler, None).unwrap()
            );
        }
        assert!(reverse_step(&x, 0, &e, &s, Sampler::Paper, None).is_err());
        assert!(reverse_step(&x, 11, &e, &s, Sampler::Paper, None).is_err());
    }

    #[test]
    fn guidance_endpoints_are_exact() {
        let u = [0.1f32, -0.7, 0.3];
        let c = [0.4f32, 0.2, -0.9];
        assert_eq!(guide(&u, &c, 1.0), c.to_vec());
        assert_eq!(guide(&u, &c, 0.0), u.to_vec());
        let g = guide(&u, &c, 4.0);
        assert!((g[0] - (0.1 + 4.0 * 0.3)).abs() < 1e-6);
    }

    fn small_model() -> (Denoiser<f32>, NoiseSchedule, BuiltinEmbedder) {
        let emb = BuiltinEmbedder::default();
        let cfg = DenoiserConfig {
            channels: 3,
            size: 8,
            num_classes: 3,
            text_dim: emb.dim(),
        };
        (Denoiser::new(cfg, 5).unwrap(), make_schedule(20, 1e-3, 0.2).unwrap(), emb)
    }

    #[test]
    fn generation_is_deterministic_and_sized() {
        let (m, s, emb) = small_model();
        let c = cond(block_mask(8, 8, 2, 2, 3, 3, DISK));
        let a = generate(&m, &s, &c, &emb, 20, 4.0, Sampler::Paper, 3).unwrap();
        assert_eq!((a.width(), a.height(), a.channels()), (8, 8, 3));
        assert_eq!(a, generate(&m, &s, &c, &emb, 20, 4.0, Sampler::Paper, 3).unwrap());
        assert_ne!(a, generate(&m, &s, &c, &emb, 20, 4.0, Sampler::Paper, 4).unwrap());
        let wrong = cond(block_mask(16, 16, 2, 2, 3, 3, DISK));
        assert!(generate(&m, &s, &wrong, &emb, 20, 4.0, Sampler::Paper, 3).is_err());
    }

    #[test]
    fn synthesis_is_thread_independent() {
        let (m, s, emb) = small_model();
        let vocab = toy_vocabulary();
        let conditions = vec![
            cond(block_mask(8, 8, 2, 2, 3, 3, DISK)),
            cond(block_mask(8, 8, 0, 0, 4, 4, SQUARE)),
            cond(block_mask(8, 8, 5, 1, 2, 3, DISK)),
        ];
        let job = SynthesisJob {
            conditions,
            steps: 5,
            guidance: 4.0,
            sampler: Sampler::Ddpm,
            seed: 8,
        };
        let one = synthesize(&m, &s, &job, &emb, &vocab, 1).unwrap();
        let two = synthesize(&m, &s, &job, &emb, &vocab, 2).unwrap();
        assert_eq!(one.dataset, two.dataset);
        assert_eq!(one.records, two.records);
        assert!(one.dataset.triplets.iter().all(|t| t.source == "synth"));
        let bad = SynthesisJob { steps: 21, ..job };
        assert!(synthesize(&m, &s, &bad, &emb, &vocab, 1).is_err());
    }
}
