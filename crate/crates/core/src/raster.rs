//! Rasters, semantic masks, the category vocabulary and the triplet that ties
//! them together.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::template;
use crate::error::{Error, Result};
use crate::hash::fnv1a64;
use crate::scalar::Scalar;

pub type ClassId = u8;

/// Interleaved 8-bit raster (row-major, channels innermost).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if !(channels == 1 || channels == 3) {
            return Err(Error::invalid(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "raster data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::new(width, height, channels, vec![0; width * height * channels])
            .expect("valid channel count")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [u8] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Planar (channel-major) unit-interval copy for the numeric paths.
    pub fn to_planar<S: Scalar>(&self) -> Vec<S> {
        let plane = self.width * self.height;
        let mut out = vec![S::zero(); plane * self.channels];
        let scale = S::lit(1.0 / 255.0);
        for p in 0..plane {
            for c in 0..self.channels {
                out[c * plane + p] = S::lit(self.data[p * self.channels + c] as f64) * scale;
            }
        }
        out
    }

    /// Inverse of [`Raster::to_planar`]: clamps to `[0, 1]`, scales by 255 and
    /// rounds half up.
    pub fn from_planar<S: Scalar>(
        width: usize,
        height: usize,
        channels: usize,
        planar: &[S],
    ) -> Result<Self> {
        let plane = width * height;
        if planar.len() != plane * channels {
            return Err(Error::invalid("planar buffer length mismatch"));
        }
        let mut data = vec![0u8; plane * channels];
        for p in 0..plane {
            for c in 0..channels {
                data[p * channels + c] = quantize(planar[c * plane + p].to_f64().unwrap_or(0.0));
            }
        }
        Self::new(width, height, channels, data)
    }

    pub fn to_image(&self) -> image::DynamicImage {
        match self.channels {
            1 => image::DynamicImage::ImageLuma8(
                image::GrayImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
                    .expect("length checked at construction"),
            ),
            _ => image::DynamicImage::ImageRgb8(
                image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
                    .expect("length checked at construction"),
            ),
        }
    }

    pub fn from_image(img: image::DynamicImage) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        match img {
            image::DynamicImage::ImageLuma8(g) => Self::new(w, h, 1, g.into_raw()),
            other => Self::new(w, h, 3, other.into_rgb8().into_raw()),
        }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_image().write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_atomic(path, &self.encode_png()?)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?;
        Self::from_image(img)
    }
}

/// Unit-interval value to 8-bit with clamping and round-half-up.
pub fn quantize(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: ClassId,
    pub name: String,
    pub abbr: String,
}

/// Ordered category list; id 0 is always `background`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryVocabulary {
    entries: Vec<Category>,
    identifier: String,
}

pub const BACKGROUND: ClassId = 0;

impl CategoryVocabulary {
    pub fn new(mut entries: Vec<Category>) -> Result<Self> {
        entries.sort_by_key(|e| e.id);
        if entries.is_empty() || entries.len() > 256 {
            return Err(Error::invalid("vocabulary must hold between 1 and 256 entries"));
        }
        let mut names = HashSet::new();
        for (i, e) in entries.iter().enumerate() {
            if e.id as usize != i {
                return Err(Error::invalid(format!(
                    "vocabulary ids must be dense from 0; found {} at position {i}",
                    e.id
                )));
            }
            if e.name.is_empty() || e.name != e.name.to_lowercase() {
                return Err(Error::invalid(format!(
                    "category name {:?} must be non-empty lowercase",
                    e.name
                )));
            }
            if e.name.contains(',') || e.name.trim() != e.name {
                return Err(Error::invalid(format!("category name {:?} is not template-safe", e.name)));
            }
            if !names.insert(e.name.as_str()) {
                return Err(Error::invalid(format!("duplicate category name {:?}", e.name)));
            }
        }
        if entries[0].name != "background" {
            return Err(Error::invalid("id 0 must be \"background\""));
        }
        let joined: Vec<&str> = entries.iter().map(|e| e.name.as_str()).collect();
        let identifier = format!("vocab-{:016x}", fnv1a64(joined.join("\n").as_bytes()));
        Ok(Self {
            entries,
            identifier,
        })
    }

    /// Builds a vocabulary from non-background names; ids follow order.
    pub fn from_names(names: &[&str]) -> Result<Self> {
        let mut entries = vec![Category {
            id: 0,
            name: "background".into(),
            abbr: "BG".into(),
        }];
        for (i, n) in names.iter().enumerate() {
            let abbr: String = n
                .split_whitespace()
                .filter_map(|w| w.chars().next())
                .collect::<String>()
                .to_uppercase();
            entries.push(Category {
                id: u8::try_from(i + 1).map_err(|_| Error::invalid("too many categories"))?,
                name: n.to_string(),
                abbr,
            });
        }
        Self::new(entries)
    }

    pub fn entries(&self) -> &[Category] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn identifier(&self) -> &str {
        &self.identifier
    }

    pub fn contains(&self, id: ClassId) -> bool {
        (id as usize) < self.entries.len()
    }

    pub fn name(&self, id: ClassId) -> Option<&str> {
        self.entries.get(id as usize).map(|e| e.name.as_str())
    }

    pub fn id_of(&self, name: &str) -> Option<ClassId> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.id)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.entries)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::new(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_atomic(path, self.to_json()?.as_bytes())
    }
}

/// Per-pixel class-id raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticMask {
    width: usize,
    height: usize,
    classes: Vec<ClassId>,
    vocab_ref: String,
}

impl SemanticMask {
    pub fn new(
        width: usize,
        height: usize,
        classes: Vec<ClassId>,
        vocab_ref: impl Into<String>,
    ) -> Result<Self> {
        if classes.len() != width * height {
            return Err(Error::invalid(format!(
                "mask length {} does not match {width}x{height}",
                classes.len()
            )));
        }
        Ok(Self {
            width,
            height,
            classes,
            vocab_ref: vocab_ref.into(),
        })
    }

    pub fn filled(width: usize, height: usize, id: ClassId, vocab_ref: impl Into<String>) -> Self {
        Self::new(width, height, vec![id; width * height], vocab_ref).expect("sized")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn vocab_ref(&self) -> &str {
        &self.vocab_ref
    }

    pub fn get(&self, x: usize, y: usize) -> ClassId {
        self.classes[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, id: ClassId) {
        self.classes[y * self.width + x] = id;
    }

    pub fn is_foreground(&self, i: usize) -> bool {
        self.classes[i] != BACKGROUND
    }

    pub fn validate(&self, vocab: &CategoryVocabulary) -> Result<()> {
        if let Some(bad) = self.classes.iter().find(|&&c| !vocab.contains(c)) {
            return Err(Error::CorruptMask(format!(
                "class id {bad} is not in vocabulary {} ({} entries)",
                vocab.identifier(),
                vocab.len()
            )));
        }
        Ok(())
    }

    /// Foreground indicator as `0/1` values.
    pub fn foreground<S: Scalar>(&self) -> Vec<S> {
        self.classes
            .iter()
            .map(|&c| if c != BACKGROUND { S::one() } else { S::zero() })
            .collect()
    }

    /// Swaps foreground and background, writing `fill` where background was.
    pub fn inverted(&self, fill: ClassId) -> Self {
        let classes = self
            .classes
            .iter()
            .map(|&c| if c == BACKGROUND { fill } else { BACKGROUND })
            .collect();
        Self {
            classes,
            ..self.clone()
        }
    }

    pub fn to_raster(&self) -> Raster {
        Raster::new(self.width, self.height, 1, self.classes.clone()).expect("sized")
    }

    pub fn from_raster(r: &Raster, vocab_ref: impl Into<String>) -> Result<Self> {
        if r.channels() != 1 {
            return Err(Error::CorruptMask(format!(
                "mask raster must be single-channel, got {} channels",
                r.channels()
            )));
        }
        Self::new(r.width(), r.height(), r.data().to_vec(), vocab_ref)
    }
}

/// Fraction of pixels whose class is not background.
pub fn foreground_fraction(mask: &SemanticMask) -> Result<f64> {
    let n = mask.classes.len();
    if n == 0 {
        return Err(Error::invalid("zero-area mask"));
    }
    let fg = mask.classes.iter().filter(|&&c| c != BACKGROUND).count();
    Ok(fg as f64 / n as f64)
}

/// Splits an image into its object part (foreground kept) and background part.
/// The two always sum back to the input.
pub fn decompose(image: &Raster, mask: &SemanticMask) -> Result<(Raster, Raster)> {
    check_aligned(image, mask)?;
    let ch = image.channels;
    let mut object = Raster::zeros(image.width, image.height, ch);
    let mut background = Raster::zeros(image.width, image.height, ch);
    for (p, &c) in mask.classes.iter().enumerate() {
        let src = &image.data[p * ch..(p + 1) * ch];
        let dst = if c != BACKGROUND {
            &mut object.data
        } else {
            &mut background.data
        };
        dst[p * ch..(p + 1) * ch].copy_from_slice(src);
    }
    Ok((object, background))
}

/// Distinct non-background class ids present in the mask, ascending.
pub fn class_set(mask: &SemanticMask, vocab: &CategoryVocabulary) -> Result<BTreeSet<ClassId>> {
    mask.validate(vocab)?;
    Ok(present_classes(mask))
}

pub(crate) fn present_classes(mask: &SemanticMask) -> BTreeSet<ClassId> {
    let mut seen = [false; 256];
    for &c in &mask.classes {
        seen[c as usize] = true;
    }
    (1..=255u8).filter(|&c| seen[c as usize]).collect()
}

pub(crate) fn check_aligned(image: &Raster, mask: &SemanticMask) -> Result<()> {
    if image.width != mask.width || image.height != mask.height {
        return Err(Error::invalid(format!(
            "image {}x{} and mask {}x{} differ",
            image.width, image.height, mask.width, mask.height
        )));
    }
    Ok(())
}

/// Aligned image, mask and text with the set of classes the mask contains.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triplet {
    pub id: String,
    pub image: Raster,
    pub mask: SemanticMask,
    pub text: String,
    pub classes: BTreeSet<ClassId>,
    pub source: String,
}

impl Triplet {
    /// Validates alignment, mask ids and text/mask class agreement.
    pub fn new(
        id: impl Into<String>,
        image: Raster,
        mask: SemanticMask,
        text: impl Into<String>,
        source: impl Into<String>,
        vocab: &CategoryVocabulary,
    ) -> Result<Self> {
        let id = id.into();
        let text = text.into();
        check_aligned(&image, &mask)?;
        let classes = class_set(&mask, vocab)?;
        let from_text = template::parse_text(&text, vocab)?;
        if from_text != classes {
            return Err(Error::invalid(format!(
                "triplet {id}: text classes {from_text:?} differ from mask classes {classes:?}"
            )));
        }
        Ok(Self {
            id,
            image,
            mask,
            text,
            classes,
            source: source.into(),
        })
    }

    /// Builds a triplet whose text is rendered from the mask's classes.
    pub fn from_mask(
        id: impl Into<String>,
        image: Raster,
        mask: SemanticMask,
        source: impl Into<String>,
        vocab: &CategoryVocabulary,
    ) -> Result<Self> {
        let classes = class_set(&mask, vocab)?;
        let text = template::describe(&classes, vocab)?;
        Self::new(id, image, mask, text, source, vocab)
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }
}
