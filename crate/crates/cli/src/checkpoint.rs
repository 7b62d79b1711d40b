//! Single-file checkpoints.
//!
//! Layout: the 8-byte magic `ADAPCKPT`, a little-endian `u64` manifest
//! length, the JSON manifest, then the payload. The payload holds every
//! tensor as little-endian `f32`, concatenated in manifest order; its
//! SHA-256 is stored in the manifest and checked on load.

use std::io::Write;
use std::path::Path;

use adaprompt_core::diff::{ParamStore, Tensor};
use adaprompt_core::mlm::{MlmConfig, MlmModel};
use adaprompt_core::promptgen::{PromptGenConfig, PromptGenLayer};
use adaprompt_core::text::Vocab;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"ADAPCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Mlm,
    Prompt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub mlm: MlmConfig,
    pub prompt_layer: Option<PromptGenConfig>,
    pub vocab: Vec<String>,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: usize,
    /// Hex SHA-256 of the payload.
    pub digest: String,
}

/// Everything a checkpoint restores.
pub struct Checkpoint {
    pub model: MlmModel,
    pub prompt_layer: Option<PromptGenLayer>,
    pub vocab: Vocab,
}

fn push_store(store: &ParamStore, group: Group, entries: &mut Vec<TensorEntry>, payload: &mut Vec<u8>) {
    for id in store.ids() {
        let t = store.get(id);
        let offset = payload.len();
        for &x in t.data() {
            payload.extend_from_slice(&(x as f32).to_le_bytes());
        }
        entries.push(TensorEntry {
            name: store.name(id).to_string(),
            group,
            shape: t.shape().to_vec(),
            offset,
            bytes: payload.len() - offset,
        });
    }
}

/// Serializes a checkpoint to bytes; returns the bytes and the payload digest.
pub fn encode_checkpoint(model: &MlmModel, prompt_layer: Option<&PromptGenLayer>, vocab: &Vocab) -> Result<(Vec<u8>, String)> {
    if vocab.len() != model.config().vocab_size {
        return Err(CliError::Config(format!(
            "vocabulary has {} tokens but the model expects {}",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    push_store(model.params(), Group::Mlm, &mut entries, &mut payload);
    if let Some(layer) = prompt_layer {
        push_store(layer.params(), Group::Prompt, &mut entries, &mut payload);
    }
    let digest = hex::encode(Sha256::digest(&payload));
    let manifest = Manifest {
        version: FORMAT_VERSION,
        mlm: model.config().clone(),
        prompt_layer: prompt_layer.map(|l| l.config().clone()),
        vocab: vocab.tokens().to_vec(),
        tensors: entries,
        payload_bytes: payload.len(),
        digest: digest.clone(),
    };
    let header = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok((out, digest))
}

/// Writes a checkpoint through a temporary file in the target directory and
/// renames it into place. Returns the payload digest.
pub fn save_checkpoint(model: &MlmModel, prompt_layer: Option<&PromptGenLayer>, vocab: &Vocab, path: &Path) -> Result<String> {
    let (bytes, digest) = encode_checkpoint(model, prompt_layer, vocab)?;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| CliError::Storage(e.error))?;
    Ok(digest)
}

fn integrity(msg: impl Into<String>) -> CliError {
    CliError::Integrity(msg.into())
}

/// Parses the manifest and verifies the payload against it.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(CliError::Format("not an adaprompt checkpoint".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| integrity("manifest is truncated"))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| CliError::Format(format!("bad manifest: {e}")))?;
    if manifest.version != FORMAT_VERSION {
        return Err(CliError::Version { found: manifest.version, supported: FORMAT_VERSION });
    }
    let payload = &bytes[header_end..];
    let mut expected = 0usize;
    for t in &manifest.tensors {
        let want = 4 * t.shape.iter().product::<usize>();
        if t.bytes != want || t.offset != expected {
            return Err(integrity(format!("tensor `{}` disagrees with its shape {:?}", t.name, t.shape)));
        }
        expected += want;
    }
    if expected != manifest.payload_bytes || payload.len() != manifest.payload_bytes {
        return Err(integrity(format!(
            "payload holds {} bytes, manifest describes {expected} (declared {})",
            payload.len(),
            manifest.payload_bytes
        )));
    }
    if hex::encode(Sha256::digest(payload)) != manifest.digest {
        return Err(integrity("payload digest mismatch"));
    }
    Ok((manifest, payload))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (manifest, payload) = read_manifest(bytes)?;
    let mut mlm = ParamStore::new();
    let mut prompt = ParamStore::new();
    for t in &manifest.tensors {
        let data: Vec<f64> = payload[t.offset..t.offset + t.bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let tensor = Tensor::from_vec(t.shape.clone(), data)?;
        match t.group {
            Group::Mlm => mlm.add(t.name.clone(), tensor),
            Group::Prompt => prompt.add(t.name.clone(), tensor),
        };
    }
    let vocab = Vocab::from_tokens(manifest.vocab)?;
    let model = MlmModel::from_params(manifest.mlm, mlm)?;
    let prompt_layer = match manifest.prompt_layer {
        Some(cfg) => Some(PromptGenLayer::from_params(cfg, prompt)?),
        None if prompt.is_empty() => None,
        None => return Err(integrity("prompt tensors present without a prompt-layer config")),
    };
    if vocab.len() != model.config().vocab_size {
        return Err(integrity("vocabulary size disagrees with the model config"));
    }
    Ok(Checkpoint { model, prompt_layer, vocab })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}
