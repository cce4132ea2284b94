//! Binary checkpoint files.
//!
//! Layout: the magic `MPSCKPT1`, a little-endian `u64` header length, a UTF-8
//! JSON header, then every parameter as little-endian `f32` in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{MpsModel, ModelConfig, init_params};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MPSCKPT1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// Training position stored alongside the parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: ModelConfig,
    pub vocab: Vec<String>,
    pub manifest: Vec<ManifestEntry>,
    pub state: TrainState,
}

pub fn manifest(params: &ParamSet<f32>) -> Vec<ManifestEntry> {
    let mut offset = 0;
    params
        .iter()
        .map(|p| {
            let e = ManifestEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                offset,
            };
            offset += p.tensor.len();
            e
        })
        .collect()
}

pub fn checkpoint_bytes(model: &MpsModel, state: TrainState) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        version: VERSION,
        config: model.config.clone(),
        vocab: model.vocab.tokens().to_vec(),
        manifest: manifest(&model.params),
        state,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + model.params.numel() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params.iter() {
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(model: &MpsModel, state: TrainState, path: &Path) -> Result<()> {
    crate::io_util::write_atomic(path, &checkpoint_bytes(model, state)?)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Parses the header without touching the payload.
pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing checkpoint magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() < len {
        return Err(corrupt(format!("header claims {len} bytes, file has {}", body.len())));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[..len]).map_err(|e| corrupt(format!("bad header: {e}")))?;
    if header.version != VERSION {
        return Err(corrupt(format!(
            "checkpoint version {} is not supported (expected {VERSION})",
            header.version
        )));
    }
    Ok((header, &body[len..]))
}

/// Checks that `manifest` matches the parameters `config` defines.
fn check_manifest(manifest: &[ManifestEntry], config: &ModelConfig) -> Result<ParamSet<f32>> {
    let mut expected = init_params::<f32>(config, 0)?;
    if manifest.len() != expected.len() {
        return Err(corrupt(format!(
            "manifest lists {} parameters, the configuration defines {}",
            manifest.len(),
            expected.len()
        )));
    }
    let mut offset = 0;
    for (e, p) in manifest.iter().zip(expected.iter_mut()) {
        if e.name != p.name {
            return Err(corrupt(format!("manifest entry {} where {} was expected", e.name, p.name)));
        }
        if e.shape != p.tensor.shape() {
            return Err(Error::ParamShape {
                name: e.name.clone(),
                expected: p.tensor.shape().to_vec(),
                found: e.shape.clone(),
            });
        }
        if e.offset != offset {
            return Err(corrupt(format!("parameter {} at offset {}, expected {offset}", e.name, e.offset)));
        }
        offset += p.tensor.len();
    }
    Ok(expected)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(MpsModel, TrainState)> {
    let (header, payload) = read_header(bytes)?;
    let mut params = check_manifest(&header.manifest, &header.config)?;
    let total = params.numel();
    if payload.len() != total * 4 {
        return Err(corrupt(format!(
            "payload holds {} bytes, manifest needs {}",
            payload.len(),
            total * 4
        )));
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    for p in params.iter_mut() {
        let data: Vec<f32> = values.by_ref().take(p.tensor.len()).collect();
        p.tensor = Tensor::new(p.tensor.shape().to_vec(), data)?;
    }
    let vocab = Vocabulary::from_text(&header.vocab.join("\n"))?;
    if vocab.len() != header.config.vocab_size {
        return Err(corrupt("vocabulary size differs from the configuration"));
    }
    Ok((
        MpsModel {
            config: header.config,
            vocab,
            params,
        },
        header.state,
    ))
}

pub fn load_checkpoint(path: &Path) -> Result<(MpsModel, TrainState)> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

/// Loads a checkpoint that must match `expected`, naming the first
/// parameter whose shape differs.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<(MpsModel, TrainState)> {
    let bytes = std::fs::read(path)?;
    let (header, _) = read_header(&bytes)?;
    let mut cfg = expected.clone();
    cfg.vocab_size = header.config.vocab_size;
    check_manifest(&header.manifest, &cfg)?;
    checkpoint_from_bytes(&bytes)
}
