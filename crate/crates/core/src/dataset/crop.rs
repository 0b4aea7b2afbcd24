//! Random cropping to a square patch, applied identically to image and mask.
//!
//! Each axis is handled independently: a length of at least twice the crop
//! gets a random offset, a length in `[crop, 2*crop)` is resampled down to
//! the crop, and a shorter length is taken from the origin and zero-padded.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::raster::{quantize, Raster, SemanticMask, Triplet, CategoryVocabulary, BACKGROUND};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisMap {
    /// Take `crop` samples starting at the offset.
    Offset(usize),
    /// Resample a source axis of this length onto the crop.
    Resample(usize),
    /// Copy a source axis of this length from the origin and pad with zeros.
    Pad(usize),
}

impl AxisMap {
    fn plan(len: usize, crop: usize, rng: &mut impl Rng) -> Self {
        if len >= 2 * crop {
            AxisMap::Offset(rng.random_range(0..=len - crop))
        } else if len >= crop {
            if len == crop {
                AxisMap::Offset(0)
            } else {
                AxisMap::Resample(len)
            }
        } else {
            AxisMap::Pad(len)
        }
    }

    /// Source index for nearest-neighbour sampling; `None` in padding.
    pub fn nearest(&self, o: usize, crop: usize) -> Option<usize> {
        match *self {
            AxisMap::Offset(off) => Some(off + o),
            AxisMap::Resample(len) => Some((((o as f64 + 0.5) * len as f64 / crop as f64) as usize).min(len - 1)),
            AxisMap::Pad(len) => (o < len).then_some(o),
        }
    }

    /// Continuous source coordinate (pixel-centre convention); `None` in padding.
    pub fn source(&self, o: usize, crop: usize) -> Option<f64> {
        match *self {
            AxisMap::Resample(len) => {
                Some(((o as f64 + 0.5) * len as f64 / crop as f64 - 0.5).clamp(0.0, (len - 1) as f64))
            }
            _ => self.nearest(o, crop).map(|i| i as f64),
        }
    }

    /// Linear interpolation taps `(index, weight)`; empty in padding.
    fn taps(&self, o: usize, crop: usize) -> Vec<(usize, f64)> {
        match *self {
            AxisMap::Resample(len) => {
                let s = self.source(o, crop).expect("resample always maps");
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(len - 1);
                let w = s - i0 as f64;
                if w == 0.0 {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, 1.0 - w), (i1, w)]
                }
            }
            _ => self.nearest(o, crop).map(|i| vec![(i, 1.0)]).unwrap_or_default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropPlan {
    pub crop: usize,
    pub x: AxisMap,
    pub y: AxisMap,
}

impl CropPlan {
    pub fn new(width: usize, height: usize, crop: usize, seed: u64) -> Result<Self> {
        if crop == 0 {
            return Err(Error::invalid("crop size must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = AxisMap::plan(width, crop, &mut rng);
        let y = AxisMap::plan(height, crop, &mut rng);
        Ok(Self { crop, x, y })
    }

    pub fn apply_mask(&self, mask: &SemanticMask) -> SemanticMask {
        let c = self.crop;
        let mut out = SemanticMask::filled(c, c, BACKGROUND, mask.vocab_ref());
        for oy in 0..c {
            let Some(sy) = self.y.nearest(oy, c) else { continue };
            for ox in 0..c {
                if let Some(sx) = self.x.nearest(ox, c) {
                    out.set(ox, oy, mask.get(sx, sy));
                }
            }
        }
        out
    }

    pub fn apply_image(&self, image: &Raster) -> Raster {
        let c = self.crop;
        let ch = image.channels();
        let mut out = Raster::zeros(c, c, ch);
        let xtaps: Vec<_> = (0..c).map(|o| self.x.taps(o, c)).collect();
        let mut acc = vec![0.0f64; ch];
        for oy in 0..c {
            let ytaps = self.y.taps(oy, c);
            for (ox, xt) in xtaps.iter().enumerate() {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for &(sy, wy) in &ytaps {
                    for &(sx, wx) in xt {
                        let w = wx * wy;
                        for (a, &v) in acc.iter_mut().zip(image.pixel(sx, sy)) {
                            *a += w * v as f64;
                        }
                    }
                }
                for (dst, a) in out.pixel_mut(ox, oy).iter_mut().zip(&acc) {
                    *dst = quantize(a / 255.0);
                }
            }
        }
        out
    }
}

/// Crops a triplet to `crop x crop`; the text is re-rendered from the classes
/// that survive the crop.
pub fn random_crop(
    triplet: &Triplet,
    crop: usize,
    seed: u64,
    vocab: &CategoryVocabulary,
) -> Result<Triplet> {
    let plan = CropPlan::new(triplet.width(), triplet.height(), crop, seed)?;
    let image = plan.apply_image(&triplet.image);
    let mask = plan.apply_mask(&triplet.mask);
    Triplet::from_mask(triplet.id.clone(), image, mask, triplet.source.clone(), vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> CategoryVocabulary {
        CategoryVocabulary::from_names(&["a", "b"]).unwrap()
    }

    fn triplet(w: usize, h: usize) -> Triplet {
        let v = vocab();
        let data: Vec<u8> = (0..w * h * 3).map(|i| (i % 251) as u8).collect();
        let ids: Vec<u8> = (0..w * h).map(|i| ((i / 7) % 3) as u8).collect();
        let mask = SemanticMask::new(w, h, ids, v.identifier()).unwrap();
        Triplet::from_mask("t", Raster::new(w, h, 3, data).unwrap(), mask, "src", &v).unwrap()
    }

    /// Enumerates the three per-axis branches directly from their definition.
    fn expected_branch(len: usize, crop: usize) -> &'static str {
        if len >= 2 * crop {
            "offset"
        } else if len >= crop {
            "resample-or-identity"
        } else {
            "pad"
        }
    }

    #[test]
    fn large_input_gets_random_corner() {
        let p = CropPlan::new(1024, 1024, 512, 3).unwrap();
        for a in [p.x, p.y] {
            match a {
                AxisMap::Offset(o) => assert!(o <= 512),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn exact_size_is_identity() {
        let t = triplet(24, 24);
        let out = random_crop(&t, 24, 9, &vocab()).unwrap();
        assert_eq!(out.image, t.image);
        assert_eq!(out.mask, t.mask);
    }

    #[test]
    fn mixed_branches_pad_and_resample() {
        let p = CropPlan::new(300, 700, 512, 1).unwrap();
        assert_eq!(p.x, AxisMap::Pad(300));
        assert_eq!(p.y, AxisMap::Resample(700));
        for (len, a) in [(300, p.x), (700, p.y)] {
            let ok = match (expected_branch(len, 512), a) {
                ("pad", AxisMap::Pad(_)) | ("offset", AxisMap::Offset(_)) => true,
                ("resample-or-identity", AxisMap::Resample(_)) => true,
                _ => false,
            };
            assert!(ok);
        }
        let t = triplet(30, 70);
        let out = random_crop(&t, 51, 1, &vocab()).unwrap();
        assert_eq!((out.width(), out.height()), (51, 51));
        for y in 0..51 {
            for x in 30..51 {
                assert_eq!(out.mask.get(x, y), 0);
                assert_eq!(out.image.pixel(x, y), &[0, 0, 0]);
            }
        }
    }

    #[test]
    fn zero_crop_is_rejected() {
        assert!(CropPlan::new(10, 10, 0, 0).is_err());
    }

    proptest! {
        #[test]
        fn output_is_square_and_aligned(w in 1usize..90, h in 1usize..90, crop in 1usize..40, seed: u64) {
            let t = triplet(w, h);
            let out = random_crop(&t, crop, seed, &vocab()).unwrap();
            prop_assert_eq!((out.width(), out.height()), (crop, crop));
            prop_assert_eq!((out.mask.width(), out.mask.height()), (crop, crop));
            // mask (nearest) and image (linear) land on the same source cell
            let plan = CropPlan::new(w, h, crop, seed).unwrap();
            for (a, len) in [(plan.x, w), (plan.y, h)] {
                for o in 0..crop {
                    match (a.nearest(o, crop), a.source(o, crop)) {
                        (Some(n), Some(s)) => {
                            prop_assert!(n < len);
                            prop_assert!((n as f64 - s).abs() <= 0.5 + 1e-9);
                        }
                        (None, None) => {}
                        _ => prop_assert!(false, "mask and image disagree on padding"),
                    }
                }
            }
        }
    }
}
