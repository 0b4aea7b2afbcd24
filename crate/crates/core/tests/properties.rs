use std::collections::BTreeSet;

use proptest::prelude::*;

use scenesynth::cfcomp::{copy_paste, ics, mor, select_composites, PairThresholds};
use scenesynth::dataset::{category_augment, parse_text, DatasetManifest};
use scenesynth::embed::BuiltinEmbedder;
use scenesynth::labelmap::{components, mask_to_detections, rdp, LabelMapParams, Point};
use scenesynth::raster::{decompose, foreground_fraction, CategoryVocabulary, BACKGROUND};
use scenesynth::rfilter::{filter_dataset, keep, MockScorer, ScoreTriplet};
use scenesynth::synthesis::{sample_conditions, transform_condition, Condition, Provenance, Transform};
use scenesynth::{Raster, SemanticMask, Triplet};

fn vocab() -> CategoryVocabulary {
    CategoryVocabulary::from_names(&["ship", "harbor", "plane"]).unwrap()
}

fn mask_strategy(w: usize, h: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(prop_oneof![3 => Just(0u8), 1 => 1u8..4], w * h)
}

fn triplet(id: &str, w: usize, h: usize, ids: Vec<u8>, pixels: Vec<u8>) -> Option<Triplet> {
    let v = vocab();
    let m = SemanticMask::new(w, h, ids, v.identifier()).unwrap();
    let image = Raster::new(w, h, 3, pixels).unwrap();
    Triplet::from_mask(id, image, m, "prop", &v).ok()
}

fn chain_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    (cx * cx + cy * cy).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn decompose_is_a_partition(ids in mask_strategy(6, 5), pixels in prop::collection::vec(any::<u8>(), 90)) {
        let v = vocab();
        let m = SemanticMask::new(6, 5, ids, v.identifier()).unwrap();
        let image = Raster::new(6, 5, 3, pixels).unwrap();
        let (obj, bg) = decompose(&image, &m).unwrap();
        for i in 0..image.data().len() {
            prop_assert_eq!(obj.data()[i] as u16 + bg.data()[i] as u16, image.data()[i] as u16);
        }
    }

    #[test]
    fn fraction_of_mask_and_inverse_sum_to_one(ids in mask_strategy(7, 3)) {
        let m = SemanticMask::new(7, 3, ids, vocab().identifier()).unwrap();
        let total = foreground_fraction(&m).unwrap() + foreground_fraction(&m.inverted(1)).unwrap();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn augment_isolates_every_class(ids in mask_strategy(5, 5)) {
        let v = vocab();
        let Some(t) = triplet("t", 5, 5, ids, vec![7; 75]) else { return Ok(()) };
        let parts = category_augment(&t, &v).unwrap();
        prop_assert_eq!(parts.len(), t.classes.len());
        let mut union = vec![BACKGROUND; 25];
        for part in &parts {
            prop_assert_eq!(part.classes.len(), 1);
            for (u, &c) in union.iter_mut().zip(part.mask.classes()) {
                if c != BACKGROUND {
                    prop_assert_eq!(*u, BACKGROUND);
                    *u = c;
                }
            }
        }
        prop_assert_eq!(union.as_slice(), t.mask.classes());
    }

    #[test]
    fn copy_paste_keeps_triplet_invariants(
        ia in mask_strategy(4, 4),
        ib in mask_strategy(4, 4),
        pa in prop::collection::vec(any::<u8>(), 48),
        pb in prop::collection::vec(any::<u8>(), 48),
    ) {
        let v = vocab();
        let (Some(a), Some(b)) = (triplet("a", 4, 4, ia, pa), triplet("b", 4, 4, ib, pb)) else {
            return Ok(());
        };
        let out = copy_paste(&a, &b, &v).unwrap();
        let present: BTreeSet<u8> = out.mask.classes().iter().copied().filter(|&c| c != BACKGROUND).collect();
        prop_assert_eq!(&out.classes, &present);
        prop_assert_eq!(parse_text(&out.text, &v).unwrap(), present);
        for p in 0..16 {
            if a.mask.classes()[p] != BACKGROUND {
                prop_assert!(out.mask.classes()[p] != BACKGROUND);
            }
            if out.mask.classes()[p] == BACKGROUND {
                prop_assert_eq!(b.mask.classes()[p], BACKGROUND);
            }
        }
    }

    #[test]
    fn mor_and_ics_are_symmetric(
        ia in mask_strategy(4, 4),
        ib in mask_strategy(4, 4),
        pa in prop::collection::vec(any::<u8>(), 48),
        pb in prop::collection::vec(any::<u8>(), 48),
        s0 in 1.0f64..500.0,
    ) {
        let v = vocab();
        let ma = SemanticMask::new(4, 4, ia, v.identifier()).unwrap();
        let mb = SemanticMask::new(4, 4, ib, v.identifier()).unwrap();
        prop_assert_eq!(mor(&ma, &mb).unwrap(), mor(&mb, &ma).unwrap());
        let (ra, rb) = (Raster::new(4, 4, 3, pa).unwrap(), Raster::new(4, 4, 3, pb).unwrap());
        prop_assert_eq!(ics(&ra, &rb, s0), ics(&rb, &ra, s0));
    }

    #[test]
    fn composite_selection_is_deterministic(masks in prop::collection::vec(mask_strategy(4, 4), 2..6)) {
        let v = vocab();
        let batch: Vec<Triplet> = masks
            .into_iter()
            .enumerate()
            .filter_map(|(i, ids)| triplet(&format!("t{i}"), 4, 4, ids, vec![40; 48]))
            .collect();
        prop_assume!(!batch.is_empty());
        let emb = BuiltinEmbedder::default();
        let th = PairThresholds::default();
        let first = select_composites(&batch, &th, &emb, &v).unwrap();
        prop_assert!(first.len() <= th.cap(batch.len()));
        prop_assert_eq!(first, select_composites(&batch, &th, &emb, &v).unwrap());
    }

    #[test]
    fn transforms_preserve_the_condition_invariant(
        ids in mask_strategy(6, 6),
        other in mask_strategy(6, 6),
        k in 0u32..8,
        f in 0.5f64..=2.0,
    ) {
        let v = vocab();
        let make = |ids: Vec<u8>| Condition::new(SemanticMask::new(6, 6, ids, v.identifier()).unwrap(), &v, Provenance::Sampled);
        let (Ok(c), Ok(o)) = (make(ids), make(other)) else { return Ok(()) };
        let rotated = transform_condition(&c, &Transform::Rotate90(k), &v).unwrap();
        let histogram = |m: &SemanticMask| {
            let mut h = [0usize; 4];
            m.classes().iter().for_each(|&c| h[c as usize] += 1);
            h
        };
        prop_assert_eq!(histogram(rotated.mask()), histogram(c.mask()));
        let merged = transform_condition(&c, &Transform::Merge(Box::new(o.clone())), &v).unwrap();
        let union: BTreeSet<u8> = c.classes().union(o.classes()).copied().collect();
        prop_assert!(merged.classes().is_subset(&union));
        prop_assert!(c.classes().is_subset(merged.classes()));
        let transformed = [Some(rotated), Some(merged), transform_condition(&c, &Transform::Scale(f), &v).ok()];
        for t in transformed.into_iter().flatten() {
            prop_assert_eq!(&parse_text(t.text(), &v).unwrap(), t.classes());
            let present: BTreeSet<u8> = t.mask().classes().iter().copied().filter(|&c| c != BACKGROUND).collect();
            prop_assert_eq!(t.classes(), &present);
        }
    }

    #[test]
    fn keep_is_monotone(
        w in -1.0f64..1.0, o in -1.0f64..1.0, b in -1.0f64..1.0,
        dw in 0.0f64..1.0, dobj in 0.0f64..1.0, b2 in -1.0f64..1.0,
        s0 in -1.0f64..1.0,
    ) {
        let base = ScoreTriplet { whole: w, object: o, background: b };
        let raised = ScoreTriplet { whole: w + dw, object: o + dobj, background: b };
        if keep(&base, s0) {
            prop_assert!(keep(&raised, s0));
        }
        let rebg = ScoreTriplet { background: b2, ..base };
        prop_assert_eq!(keep(&rebg, s0), keep(&base, s0));
    }

    #[test]
    fn filtering_is_idempotent(
        masks in prop::collection::vec(mask_strategy(8, 8), 1..6),
        seed in any::<u64>(),
        s0 in -0.5f64..0.5,
    ) {
        let v = vocab();
        let triplets: Vec<Triplet> = masks
            .into_iter()
            .enumerate()
            .filter_map(|(i, ids)| {
                let pixels = (0..192).map(|j| ((i * 37 + j * 11) % 251) as u8).collect();
                triplet(&format!("r{i}"), 8, 8, ids, pixels)
            })
            .collect();
        prop_assume!(!triplets.is_empty());
        let ds = DatasetManifest::new(v, 0, triplets).unwrap();
        let scorer = MockScorer::new(seed);
        let once = filter_dataset(&scorer, &ds, s0, 2).unwrap();
        let twice = filter_dataset(&scorer, &once.kept, s0, 2).unwrap();
        prop_assert_eq!(twice.kept.triplets, once.kept.triplets);
    }

    #[test]
    fn rdp_is_a_bounded_subsequence(
        pts in prop::collection::vec((0i32..40, 0i32..40), 2..16),
        epsilon in 0.0f64..6.0,
    ) {
        let pts: Vec<Point> = pts.into_iter().map(|(x, y)| [x as f64, y as f64]).collect();
        let out = rdp(&pts, epsilon);
        prop_assert_eq!(out.first(), pts.first());
        prop_assert_eq!(out.last(), pts.last());
        let mut kept = Vec::new();
        let mut j = 0;
        for (i, p) in pts.iter().enumerate() {
            if j < out.len() && *p == out[j] {
                kept.push(i);
                j += 1;
            }
        }
        prop_assert_eq!(j, out.len());
        for w in kept.windows(2) {
            for p in &pts[w[0] + 1..w[1]] {
                prop_assert!(chain_distance(*p, pts[w[0]], pts[w[1]]) <= epsilon + 1e-9);
            }
        }
    }

    #[test]
    fn boxes_ignore_simplification_and_cover_the_mask(ids in mask_strategy(12, 9), epsilon in 0.0f64..5.0) {
        let m = SemanticMask::new(12, 9, ids, vocab().identifier()).unwrap();
        let coarse = LabelMapParams { min_area: 1, rdp_epsilon: epsilon };
        let fine = LabelMapParams { min_area: 1, rdp_epsilon: 0.0 };
        let boxes = |p| mask_to_detections(&m, &p).into_iter().map(|i| (i.class_id, i.bbox, i.area)).collect::<Vec<_>>();
        prop_assert_eq!(boxes(coarse), boxes(fine));

        let mut covered = vec![BACKGROUND; 12 * 9];
        for c in components(&m).into_iter().filter(|c| c.pixels.len() >= 3) {
            for &(x, y) in &c.pixels {
                prop_assert_eq!(covered[y * 12 + x], BACKGROUND);
                covered[y * 12 + x] = c.class_id;
            }
        }
        let expected: Vec<u8> = (0..12 * 9)
            .map(|p| {
                let id = m.classes()[p];
                let big = components(&m).iter().any(|c| c.pixels.len() >= 3 && c.pixels.contains(&(p % 12, p / 12)));
                if big { id } else { BACKGROUND }
            })
            .collect();
        let area: usize = mask_to_detections(&m, &LabelMapParams { min_area: 3, rdp_epsilon: epsilon })
            .iter()
            .map(|i| i.area)
            .sum();
        prop_assert_eq!(area, expected.iter().filter(|&&c| c != BACKGROUND).count());
        prop_assert_eq!(covered, expected);
    }
}

#[test]
fn condition_sampling_is_uniform_within_a_class() {
    let v = vocab();
    let triplets: Vec<Triplet> = (0..5)
        .map(|i| {
            let mut ids = vec![0u8; 16];
            ids[i] = 1;
            triplet(&format!("h{i}"), 4, 4, ids, vec![9; 48]).unwrap()
        })
        .collect();
    let ds = DatasetManifest::new(v, 0, triplets).unwrap();
    let draws = 4000;
    let mut counts = [0usize; 5];
    for seed in 0..draws {
        let picked = sample_conditions(&ds, 1, seed as u64).unwrap().conditions;
        assert_eq!(picked.len(), 1);
        let p = picked[0].mask().classes().iter().position(|&c| c != 0).unwrap();
        counts[p] += 1;
    }
    let expected = draws as f64 / 5.0;
    let sigma = (draws as f64 * 0.2 * 0.8).sqrt();
    for c in counts {
        assert!((c as f64 - expected).abs() <= 3.0 * sigma, "{counts:?}");
    }
}
