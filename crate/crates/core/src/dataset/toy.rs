//! Synthetic three-class scenes: bright disks and dark squares on a noisy
//! mid-gray field.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::hash::mix_seed;
use crate::raster::{quantize, CategoryVocabulary, Raster, SemanticMask, Triplet};

pub const DISK: u8 = 1;
pub const SQUARE: u8 = 2;

const BACKGROUND_LEVEL: f64 = 0.5;
const BACKGROUND_NOISE: f64 = 0.05;
const DISK_LEVEL: f64 = 0.85;
const SQUARE_LEVEL: f64 = 0.15;
const OBJECT_NOISE: f64 = 0.03;

pub fn toy_vocabulary() -> CategoryVocabulary {
    CategoryVocabulary::from_names(&["disk", "square"]).expect("static vocabulary")
}

pub fn make_toy_dataset(n: usize, size: usize, seed: u64) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::invalid("toy dataset needs at least one sample"));
    }
    if size < 8 {
        return Err(Error::invalid("toy samples must be at least 8 pixels wide"));
    }
    let vocab = toy_vocabulary();
    let triplets = (0..n)
        .map(|i| toy_triplet(i, size, mix_seed(seed, i as u64), &vocab))
        .collect::<Result<Vec<_>>>()?;
    DatasetManifest::new(vocab, seed, triplets)
}

fn toy_triplet(index: usize, size: usize, seed: u64, vocab: &CategoryVocabulary) -> Result<Triplet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg_noise = Normal::new(0.0, BACKGROUND_NOISE).expect("finite sigma");
    let obj_noise = Normal::new(0.0, OBJECT_NOISE).expect("finite sigma");

    let mut ids = vec![0u8; size * size];
    let objects = rng.random_range(1..=2);
    let (rmin, rmax) = ((size / 8).max(2), (size / 4).max(3));
    for _ in 0..objects {
        let class = if rng.random_bool(0.5) { DISK } else { SQUARE };
        let r = rng.random_range(rmin..=rmax) as i64;
        let cx = rng.random_range(r..size as i64 - r);
        let cy = rng.random_range(r..size as i64 - r);
        for y in 0..size as i64 {
            for x in 0..size as i64 {
                let (dx, dy) = (x - cx, y - cy);
                let inside = match class {
                    DISK => dx * dx + dy * dy <= r * r,
                    _ => dx.abs() < r && dy.abs() < r,
                };
                if inside {
                    ids[(y as usize) * size + x as usize] = class;
                }
            }
        }
    }

    let mut data = Vec::with_capacity(size * size * 3);
    for &c in &ids {
        let (level, noise) = match c {
            DISK => (DISK_LEVEL, &obj_noise),
            SQUARE => (SQUARE_LEVEL, &obj_noise),
            _ => (BACKGROUND_LEVEL, &bg_noise),
        };
        for _ in 0..3 {
            data.push(quantize(level + noise.sample(&mut rng)));
        }
    }
    let image = Raster::new(size, size, 3, data)?;
    let mask = SemanticMask::new(size, size, ids, vocab.identifier())?;
    Triplet::from_mask(format!("toy-{index:05}"), image, mask, "toy", vocab)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = make_toy_dataset(10, 32, 7).unwrap();
        let b = make_toy_dataset(10, 32, 7).unwrap();
        assert_eq!(a, b);
        let c = make_toy_dataset(10, 32, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn every_sample_is_a_valid_triplet() {
        let d = make_toy_dataset(40, 32, 1).unwrap();
        for t in &d.triplets {
            let again = Triplet::new(
                t.id.clone(),
                t.image.clone(),
                t.mask.clone(),
                t.text.clone(),
                t.source.clone(),
                &d.vocab,
            )
            .unwrap();
            assert_eq!(&again, t);
            assert!(!t.classes.is_empty());
        }
    }

    #[test]
    fn class_intensity_signatures() {
        let d = make_toy_dataset(100, 32, 11).unwrap();
        let (mut gap_sum, mut gap_n) = (0.0, 0);
        for t in &d.triplets {
            let mean_of = |class: u8| {
                let (mut s, mut n) = (0.0, 0usize);
                for (p, &c) in t.mask.classes().iter().enumerate() {
                    if c == class {
                        s += t.image.data()[p * 3..p * 3 + 3].iter().map(|&v| v as f64).sum::<f64>() / 3.0;
                        n += 1;
                    }
                }
                (n > 0).then(|| s / n as f64 / 255.0)
            };
            if let Some(m) = mean_of(DISK) {
                assert!(m >= 0.7, "disk mean {m}");
                gap_sum += m - mean_of(0).unwrap();
                gap_n += 1;
            }
            if let Some(m) = mean_of(SQUARE) {
                assert!(m <= 0.3, "square mean {m}");
            }
        }
        assert!(gap_n > 0);
        assert!(gap_sum / gap_n as f64 > 0.2);
    }
}
