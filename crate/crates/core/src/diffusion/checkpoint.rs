//! Training checkpoints: a JSON manifest plus one raw little-endian `f32`
//! blob holding parameters, optimizer moments and pending gradients.

use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Denoiser, DenoiserConfig};
use super::train::{TrainState, TrainerSettings};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::scalar::Scalar;

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";
pub const CHECKPOINT_BLOB: &str = "checkpoint.bin";
const FORMAT: &str = "scenesynth-checkpoint/1";
const DTYPE: &str = "f32le";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    /// Hex-encoded 32-byte key.
    pub seed: String,
    pub stream: u64,
    /// Decimal; exceeds the JSON-safe integer range.
    pub word_pos: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub model: DenoiserConfig,
    pub settings: TrainerSettings,
    pub step: u64,
    pub updates: u64,
    pub accum_count: usize,
    pub rng: RngState,
    pub blob: String,
    pub blob_bytes: u64,
    pub tensors: Vec<TensorEntry>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

fn tensor_groups<S: Scalar>(state: &TrainState<S>) -> [(&'static str, &[Vec<S>]); 4] {
    [
        ("", state.model.params()),
        ("adam.m.", &state.moment1),
        ("adam.v.", &state.moment2),
        ("accum.", &state.accum),
    ]
}

fn rng_state(rng: &ChaCha8Rng) -> RngState {
    let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    RngState {
        seed,
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos().to_string(),
    }
}

fn restore_rng(s: &RngState) -> Result<ChaCha8Rng> {
    use rand::SeedableRng;
    if s.seed.len() != 64 || !s.seed.is_ascii() {
        return Err(corrupt("rng seed must be 64 hex digits"));
    }
    let mut key = [0u8; 32];
    for (i, k) in key.iter_mut().enumerate() {
        *k = u8::from_str_radix(&s.seed[2 * i..2 * i + 2], 16).map_err(|e| corrupt(format!("rng seed: {e}")))?;
    }
    let pos: u128 = s.word_pos.parse().map_err(|e| corrupt(format!("rng word_pos: {e}")))?;
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(s.stream);
    rng.set_word_pos(pos);
    Ok(rng)
}

/// Writes `checkpoint.json` and `checkpoint.bin` into `dir`.
pub fn save_checkpoint<S: Scalar>(state: &TrainState<S>, dir: &Path) -> Result<PathBuf> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (prefix, group) in tensor_groups(state) {
        for (spec, data) in state.model.specs().iter().zip(group.iter()) {
            let offset = blob.len() as u64;
            for v in data {
                let f = v.to_f32().unwrap_or(f32::NAN);
                blob.extend_from_slice(&f.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name: format!("{prefix}{}", spec.name),
                shape: spec.shape.clone(),
                dtype: DTYPE.into(),
                offset,
                bytes: blob.len() as u64 - offset,
            });
        }
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        model: *state.model.config(),
        settings: state.settings.clone(),
        step: state.step,
        updates: state.updates,
        accum_count: state.accum_count,
        rng: rng_state(&state.rng),
        blob: CHECKPOINT_BLOB.into(),
        blob_bytes: blob.len() as u64,
        tensors,
    };
    write_atomic(&dir.join(CHECKPOINT_BLOB), &blob)?;
    let path = dir.join(CHECKPOINT_MANIFEST);
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_atomic(&path, &json)?;
    Ok(path)
}

/// Resolves a checkpoint directory or its manifest file.
pub fn checkpoint_manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CHECKPOINT_MANIFEST)
    } else {
        path.to_path_buf()
    }
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<TrainState<S>> {
    let manifest_path = checkpoint_manifest_path(path);
    let text = std::fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(&text).map_err(|e| corrupt(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format != FORMAT {
        return Err(corrupt(format!("unknown format {:?}", manifest.format)));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let blob_path = dir.join(&manifest.blob);
    let blob = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(corrupt(format!(
            "blob has {} bytes, manifest declares {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }

    let mut state = TrainState::new(Denoiser::<S>::zeros(manifest.model)?, manifest.settings.clone(), 0)
        .map_err(|e| corrupt(e.to_string()))?;
    let specs = state.model.specs().to_vec();
    let expected = 4 * specs.len();
    if manifest.tensors.len() != expected {
        return Err(corrupt(format!("{} tensors listed, expected {expected}", manifest.tensors.len())));
    }
    let mut entries = manifest.tensors.iter();
    let mut read_group = |prefix: &str| -> Result<Vec<Vec<S>>> {
        let mut out = Vec::with_capacity(specs.len());
        for spec in &specs {
            let e = entries.next().expect("length checked");
            let name = format!("{prefix}{}", spec.name);
            let want = spec.len() as u64 * 4;
            if e.name != name || e.shape != spec.shape || e.dtype != DTYPE || e.bytes != want {
                return Err(corrupt(format!("tensor {:?} does not match expected {name} {:?}", e.name, spec.shape)));
            }
            let end = e.offset.checked_add(e.bytes).filter(|&end| end <= blob.len() as u64);
            let Some(end) = end else {
                return Err(corrupt(format!("tensor {name} extends past the blob")));
            };
            let raw = &blob[e.offset as usize..end as usize];
            out.push(
                raw.chunks_exact(4)
                    .map(|c| S::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                    .collect(),
            );
        }
        Ok(out)
    };
    let params = read_group("")?;
    let m = read_group("adam.m.")?;
    let v = read_group("adam.v.")?;
    let accum = read_group("accum.")?;
    state.model = Denoiser::from_params(manifest.model, params).map_err(|e| corrupt(e.to_string()))?;
    state.moment1 = m;
    state.moment2 = v;
    state.accum = accum;
    if manifest.accum_count >= manifest.settings.train.grad_accum {
        return Err(corrupt("pending accumulation count exceeds grad_accum"));
    }
    state.accum_count = manifest.accum_count;
    state.step = manifest.step;
    state.updates = manifest.updates;
    state.rng = restore_rng(&manifest.rng)?;
    Ok(state)
}
