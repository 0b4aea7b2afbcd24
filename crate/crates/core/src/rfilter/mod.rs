//! Rule-based filtering of synthesized records by image-text agreement.
//!
//! Each record is split into a whole view, an object view and a background
//! view; all three are scored against the record's caption and the record
//! is kept iff the whole or object score exceeds `S0`.

mod remote;

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use remote::{RemoteEmbedder, RemoteScorer, RetryPolicy};

use crate::dataset::DatasetManifest;
use crate::embed::{cosine_slices, BuiltinEmbedder, TextEmbedder};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::raster::{check_aligned, decompose, Raster, SemanticMask, Triplet, BACKGROUND};

/// Context kept around the foreground box in the object view.
pub const OBJECT_MARGIN: usize = 8;
pub const DEFAULT_IN_FLIGHT: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoringViews {
    pub whole: Raster,
    pub object: Raster,
    pub background: Raster,
    /// The mask had no foreground; `object` is the whole frame.
    pub empty_foreground: bool,
}

/// Object view: foreground kept, background zeroed, cropped to the
/// foreground box grown by [`OBJECT_MARGIN`]. Background view: foreground
/// zeroed, full frame.
pub fn decompose_for_scoring(image: &Raster, mask: &SemanticMask) -> Result<ScoringViews> {
    check_aligned(image, mask)?;
    let (object_full, background) = decompose(image, mask)?;
    let (w, h) = (mask.width(), mask.height());
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) != BACKGROUND {
                let b = bounds.get_or_insert((x, y, x, y));
                *b = (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y));
            }
        }
    }
    let Some((x0, y0, x1, y1)) = bounds else {
        return Ok(ScoringViews {
            whole: image.clone(),
            object: image.clone(),
            background,
            empty_foreground: true,
        });
    };
    let (cx0, cy0) = (x0.saturating_sub(OBJECT_MARGIN), y0.saturating_sub(OBJECT_MARGIN));
    let (cx1, cy1) = ((x1 + OBJECT_MARGIN).min(w - 1), (y1 + OBJECT_MARGIN).min(h - 1));
    let ch = image.channels();
    let (cw, chh) = (cx1 - cx0 + 1, cy1 - cy0 + 1);
    let mut data = Vec::with_capacity(cw * chh * ch);
    for y in cy0..=cy1 {
        let row = (y * w + cx0) * ch;
        data.extend_from_slice(&object_full.data()[row..row + cw * ch]);
    }
    Ok(ScoringViews {
        whole: image.clone(),
        object: Raster::new(cw, chh, ch, data)?,
        background,
        empty_foreground: false,
    })
}

/// Image-text similarity in `[-1, 1]`.
pub trait Scorer: Send + Sync {
    fn score(&self, image: &Raster, text: &str) -> Result<f64>;
}

/// Offline stand-in: cosine between a seeded projection of per-channel
/// mean/std statistics and the builtin caption embedding. Deterministic,
/// not semantically meaningful.
#[derive(Debug, Clone)]
pub struct MockScorer {
    projection: Vec<[f64; FEATURES]>,
    embedder: BuiltinEmbedder,
}

const FEATURES: usize = 7;

impl MockScorer {
    pub fn new(seed: u64) -> Self {
        let embedder = BuiltinEmbedder::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = (0..embedder.dim())
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect();
        Self { projection, embedder }
    }

    fn features(image: &Raster) -> [f64; FEATURES] {
        let ch = image.channels();
        let n = (image.width() * image.height()).max(1) as f64;
        let mut f = [0.0; FEATURES];
        f[0] = 1.0;
        for c in 0..3 {
            let src = c.min(ch - 1);
            let vals = image.data().iter().skip(src).step_by(ch).map(|&v| v as f64 / 255.0);
            let (s, s2) = vals.fold((0.0, 0.0), |(a, b), v| (a + v, b + v * v));
            let mean = s / n;
            f[1 + c] = mean - 0.5;
            f[4 + c] = (s2 / n - mean * mean).max(0.0).sqrt();
        }
        f
    }
}

impl Default for MockScorer {
    fn default() -> Self {
        Self::new(0)
    }
}

impl Scorer for MockScorer {
    fn score(&self, image: &Raster, text: &str) -> Result<f64> {
        let f = Self::features(image);
        let v: Vec<f64> = self.projection.iter().map(|row| row.iter().zip(&f).map(|(a, b)| a * b).sum()).collect();
        cosine_slices(&v, self.embedder.embed(text)?.values())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreTriplet {
    pub whole: f64,
    pub object: f64,
    pub background: f64,
}

pub fn score_triplet(scorer: &dyn Scorer, views: &ScoringViews, text: &str) -> Result<ScoreTriplet> {
    let s = ScoreTriplet {
        whole: scorer.score(&views.whole, text)?,
        object: scorer.score(&views.object, text)?,
        background: scorer.score(&views.background, text)?,
    };
    for v in [s.whole, s.object, s.background] {
        if !v.is_finite() || !(-1.0..=1.0).contains(&v) {
            return Err(Error::Service(format!("score {v} outside [-1, 1]")));
        }
    }
    Ok(s)
}

/// Whole or object score strictly above `s0`; the background score never
/// retains a record.
pub fn keep(scores: &ScoreTriplet, s0: f64) -> bool {
    scores.whole > s0 || scores.object > s0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    #[serde(rename = "S0")]
    pub s0: f64,
    pub scorer: ScorerKind,
    pub endpoint: String,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            s0: 0.4,
            scorer: ScorerKind::Mock,
            endpoint: "http://127.0.0.1:8080".into(),
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.s0) {
            return Err(Error::invalid(format!("S0 {} outside [-1, 1]", self.s0)));
        }
        Ok(())
    }

    pub fn build_scorer(&self) -> Result<Box<dyn Scorer>> {
        self.validate()?;
        Ok(match self.scorer {
            ScorerKind::Mock => Box::new(MockScorer::default()),
            ScorerKind::Remote => Box::new(RemoteScorer::new(&self.endpoint)?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Keep,
    Drop,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRow {
    pub id: String,
    pub whole: Option<f64>,
    pub object: Option<f64>,
    pub background: Option<f64>,
    pub empty_foreground: bool,
    pub decision: Decision,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub kept: DatasetManifest,
    pub rows: Vec<FilterRow>,
}

impl FilterOutcome {
    pub fn report_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::invalid(format!("csv: {e}")))?;
        }
        w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))
    }

    pub fn write_report(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.report_csv()?)
    }
}

fn score_record(scorer: &dyn Scorer, t: &Triplet, s0: f64) -> FilterRow {
    let views = decompose_for_scoring(&t.image, &t.mask);
    let result = views.and_then(|v| Ok((score_triplet(scorer, &v, &t.text)?, v.empty_foreground)));
    match result {
        Ok((s, empty)) => FilterRow {
            id: t.id.clone(),
            whole: Some(s.whole),
            object: Some(s.object),
            background: Some(s.background),
            empty_foreground: empty,
            decision: if keep(&s, s0) { Decision::Keep } else { Decision::Drop },
            error: String::new(),
        },
        Err(e) => {
            let e = Error::Scoring {
                record: t.id.clone(),
                reason: e.to_string(),
            };
            log::warn!("{e}");
            FilterRow {
                id: t.id.clone(),
                whole: None,
                object: None,
                background: None,
                empty_foreground: false,
                decision: Decision::Error,
                error: e.to_string(),
            }
        }
    }
}

/// Scores every record with up to `in_flight` concurrent requests. Records
/// that fail to score are dropped; the run fails only when more than half
/// of them do.
pub fn filter_dataset(
    scorer: &dyn Scorer,
    manifest: &DatasetManifest,
    s0: f64,
    in_flight: usize,
) -> Result<FilterOutcome> {
    let n = manifest.len();
    let workers = in_flight.clamp(1, n.max(1));
    let rows: Vec<FilterRow> = if workers == 1 {
        manifest.triplets.iter().map(|t| score_record(scorer, t, s0)).collect()
    } else {
        let next = AtomicUsize::new(0);
        let slots = Mutex::new(vec![None; n]);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= n {
                        break;
                    }
                    let row = score_record(scorer, &manifest.triplets[i], s0);
                    slots.lock().expect("no poisoned slots")[i] = Some(row);
                });
            }
        });
        slots
            .into_inner()
            .expect("no poisoned slots")
            .into_iter()
            .map(|r| r.expect("every record scored"))
            .collect()
    };

    let failed: Vec<&FilterRow> = rows.iter().filter(|r| r.decision == Decision::Error).collect();
    if failed.len() * 2 > n {
        return Err(Error::Service(format!(
            "{} of {n} records failed to score; first: {}",
            failed.len(),
            failed[0].error
        )));
    }
    let kept = manifest
        .triplets
        .iter()
        .zip(&rows)
        .filter(|(_, r)| r.decision == Decision::Keep)
        .map(|(t, _)| t.clone())
        .collect();
    Ok(FilterOutcome {
        kept: DatasetManifest::new(manifest.vocab.clone(), manifest.seed, kept)?,
        rows,
    })
}
