//! JSON-lines manifest with PNG rasters beside it.
//!
//! Line 1 is a [`ManifestHeader`]; every later line is a [`ManifestRecord`].
//! Paths are relative to the manifest's directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::DatasetManifest;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::raster::{CategoryVocabulary, ClassId, Raster, SemanticMask, Triplet};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";
const FORMAT: &str = "scenesynth-manifest/1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub format: String,
    pub vocab_path: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub image_path: String,
    pub mask_path: String,
    pub text: String,
    pub classes: Vec<ClassId>,
    pub source: String,
}

pub(crate) fn file_stem(index: usize, id: &str) -> String {
    let clean: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect();
    format!("{index:06}_{clean}")
}

/// Resolves either a manifest file or a directory holding `manifest.jsonl`.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Writes images, masks, the vocabulary and the manifest into `dir`.
/// Returns the manifest path.
pub fn write_manifest(dir: &Path, dataset: &DatasetManifest) -> Result<PathBuf> {
    let mut lines = Vec::with_capacity(dataset.len() + 1);
    let header = ManifestHeader {
        format: FORMAT.into(),
        vocab_path: VOCAB_FILE.into(),
        seed: dataset.seed,
    };
    lines.push(serde_json::to_string(&header)?);
    for (i, t) in dataset.triplets.iter().enumerate() {
        let stem = file_stem(i, &t.id);
        let rec = ManifestRecord {
            id: t.id.clone(),
            image_path: format!("images/{stem}.png"),
            mask_path: format!("masks/{stem}.png"),
            text: t.text.clone(),
            classes: t.classes.iter().copied().collect(),
            source: t.source.clone(),
        };
        t.image.save_png(&dir.join(&rec.image_path))?;
        t.mask.to_raster().save_png(&dir.join(&rec.mask_path))?;
        lines.push(serde_json::to_string(&rec)?);
    }
    dataset.vocab.save(&dir.join(VOCAB_FILE))?;
    let path = dir.join(MANIFEST_FILE);
    let mut body = lines.join("\n");
    body.push('\n');
    write_atomic(&path, body.as_bytes())?;
    Ok(path)
}

/// Loads and validates a manifest; every failure names the offending record.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let path = manifest_path(path);
    let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let body = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = body.lines().filter(|l| !l.trim().is_empty());
    let header: ManifestHeader = serde_json::from_str(
        lines.next().ok_or_else(|| Error::invalid(format!("{} is empty", path.display())))?,
    )?;
    if header.format != FORMAT {
        return Err(Error::invalid(format!("unsupported manifest format {:?}", header.format)));
    }
    let vocab = CategoryVocabulary::load(&dir.join(&header.vocab_path))?;

    let mut triplets = Vec::new();
    for (n, line) in lines.enumerate() {
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Load {
            record: format!("line {}", n + 2),
            reason: e.to_string(),
        })?;
        triplets.push(load_record(&dir, &rec, &vocab)?);
    }
    DatasetManifest::new(vocab, header.seed, triplets)
}

fn load_record(dir: &Path, rec: &ManifestRecord, vocab: &CategoryVocabulary) -> Result<Triplet> {
    let fail = |reason: String| Error::Load {
        record: rec.id.clone(),
        reason,
    };
    let image_path = dir.join(&rec.image_path);
    let mask_path = dir.join(&rec.mask_path);
    for p in [&image_path, &mask_path] {
        if !p.is_file() {
            return Err(fail(format!("missing file {}", p.display())));
        }
    }
    let image = Raster::load_png(&image_path).map_err(|e| fail(e.to_string()))?;
    let mask_raster = Raster::load_png(&mask_path).map_err(|e| fail(e.to_string()))?;
    let mask = SemanticMask::from_raster(&mask_raster, vocab.identifier()).map_err(|e| fail(e.to_string()))?;
    let t = Triplet::new(
        rec.id.clone(),
        image,
        mask,
        rec.text.clone(),
        rec.source.clone(),
        vocab,
    )
    .map_err(|e| fail(e.to_string()))?;
    let listed: BTreeSet<ClassId> = rec.classes.iter().copied().collect();
    if listed != t.classes {
        return Err(fail(format!(
            "listed classes {listed:?} differ from mask classes {:?}",
            t.classes
        )));
    }
    Ok(t)
}
