//! On-disk artifacts: a checksummed binary container for model parameters and
//! a token-array format for generated corpora.
//!
//! The model container is `OPMX` + version + JSON header (architecture and
//! tensor manifest) + raw little-endian f64 payload + a trailing SHA-256 of
//! everything before it. Round trips are bit-exact. Corpora persist as raw
//! little-endian u16 token streams beside a JSON manifest embedding the full
//! generator spec and per-stream digests, so a load can be checked against
//! regeneration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{DomainCorpus, DomainSpec};
use crate::error::{Error, Result};
use crate::model::{ArchSpec, ModelParams, TENSOR_NAMES};

const MAGIC: &[u8; 4] = b"OPMX";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ContainerHeader {
    spec: ArchSpec,
    tensors: Vec<TensorEntry>,
}

fn corrupt(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::CorruptArtifact(format!("{}: {what}", path.display()))
}

/// Writes `params` to `path` in the checksummed container format.
pub fn save_model(path: &Path, params: &ModelParams) -> Result<()> {
    let header = ContainerHeader {
        spec: *params.spec(),
        tensors: TENSOR_NAMES
            .iter()
            .map(|name| {
                let t = params.tensors().get(name).expect("known tensor name");
                TensorEntry {
                    name: name.to_string(),
                    rows: t.rows(),
                    cols: t.cols(),
                }
            })
            .collect(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::invalid(format!("header encode: {e}")))?;
    let mut buf = Vec::with_capacity(64 + header_json.len() + params.param_count() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for name in TENSOR_NAMES {
        for v in params.tensors().get(name).expect("known tensor name").data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    fs::write(path, buf)?;
    Ok(())
}

/// Reads a container written by [`save_model`], verifying magic, version,
/// checksum, and tensor shapes.
pub fn load_model(path: &Path) -> Result<ModelParams> {
    let buf = fs::read(path)?;
    if buf.len() < 4 + 4 + 8 + 32 {
        return Err(corrupt(path, "truncated container"));
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    let expect = Sha256::digest(body);
    if digest != expect.as_slice() {
        return Err(corrupt(path, "checksum mismatch"));
    }
    if &body[..4] != MAGIC {
        return Err(corrupt(path, "bad magic"));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(path, format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    let payload_at = 16 + header_len;
    if body.len() < payload_at {
        return Err(corrupt(path, "truncated header"));
    }
    let header: ContainerHeader = serde_json::from_slice(&body[16..payload_at])
        .map_err(|e| corrupt(path, format!("header decode: {e}")))?;
    header.spec.validate()?;
    let mut params = ModelParams::zeros(header.spec)?;
    let mut cursor = payload_at;
    if header.tensors.len() != TENSOR_NAMES.len() {
        return Err(corrupt(path, "tensor manifest length mismatch"));
    }
    for (entry, name) in header.tensors.iter().zip(TENSOR_NAMES) {
        if entry.name != name {
            return Err(corrupt(path, format!("unexpected tensor {:?}", entry.name)));
        }
        let t = params.tensors_mut().get_mut(name).expect("known tensor name");
        if (t.rows(), t.cols()) != (entry.rows, entry.cols) {
            return Err(corrupt(
                path,
                format!("tensor {name} is {}x{}, manifest says {}x{}",
                    t.rows(), t.cols(), entry.rows, entry.cols),
            ));
        }
        let n = entry.rows * entry.cols * 8;
        if body.len() < cursor + n {
            return Err(corrupt(path, "truncated payload"));
        }
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            let at = cursor + i * 8;
            *v = f64::from_le_bytes(body[at..at + 8].try_into().unwrap());
        }
        cursor += n;
    }
    if cursor != body.len() {
        return Err(corrupt(path, "trailing bytes after payload"));
    }
    Ok(params)
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusManifest {
    spec: DomainSpec,
    train_tokens: usize,
    heldout_tokens: usize,
    train_sha256: String,
    heldout_sha256: String,
}

fn token_bytes(tokens: &[u32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(tokens.len() * 2);
    for &t in tokens {
        let v = u16::try_from(t)
            .map_err(|_| Error::invalid(format!("token {t} exceeds the u16 storage range")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn domain_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("{name}.manifest.json")),
        dir.join(format!("{name}.train.tok")),
        dir.join(format!("{name}.heldout.tok")),
    )
}

/// Persists one generated domain: manifest with the full generator spec plus
/// two raw little-endian u16 token streams.
pub fn save_domain(dir: &Path, spec: &DomainSpec, corpus: &DomainCorpus) -> Result<()> {
    if spec.name != corpus.name {
        return Err(Error::invalid(format!(
            "spec is for {:?}, corpus for {:?}",
            spec.name, corpus.name
        )));
    }
    fs::create_dir_all(dir)?;
    let train = token_bytes(&corpus.train)?;
    let heldout = token_bytes(&corpus.heldout)?;
    let manifest = CorpusManifest {
        spec: spec.clone(),
        train_tokens: corpus.train.len(),
        heldout_tokens: corpus.heldout.len(),
        train_sha256: hex_digest(&train),
        heldout_sha256: hex_digest(&heldout),
    };
    let (mpath, tpath, hpath) = domain_paths(dir, &spec.name);
    fs::write(&tpath, train)?;
    fs::write(&hpath, heldout)?;
    let json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| Error::invalid(format!("manifest encode: {e}")))?;
    fs::write(&mpath, json)?;
    Ok(())
}

/// Loads a persisted domain, verifying stream digests against the manifest.
pub fn load_domain(dir: &Path, name: &str) -> Result<(DomainSpec, DomainCorpus)> {
    let (mpath, tpath, hpath) = domain_paths(dir, name);
    let manifest: CorpusManifest = serde_json::from_slice(&fs::read(&mpath)?)
        .map_err(|e| corrupt(&mpath, format!("manifest decode: {e}")))?;
    let read_tokens = |path: &Path, count: usize, digest: &str| -> Result<Vec<u32>> {
        let bytes = fs::read(path)?;
        if bytes.len() != count * 2 {
            return Err(corrupt(path, format!("expected {count} tokens, file holds {}", bytes.len() / 2)));
        }
        if hex_digest(&bytes) != digest {
            return Err(corrupt(path, "token stream checksum mismatch"));
        }
        Ok(bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as u32)
            .collect())
    };
    let train = read_tokens(&tpath, manifest.train_tokens, &manifest.train_sha256)?;
    let heldout = read_tokens(&hpath, manifest.heldout_tokens, &manifest.heldout_sha256)?;
    let corpus = DomainCorpus {
        name: manifest.spec.name.clone(),
        vocab: manifest.spec.vocab,
        train,
        heldout,
        // same sub-seed derivation the generator uses
        train_seed: crate::seeds::derive(manifest.spec.seed, "train"),
        heldout_seed: crate::seeds::derive(manifest.spec.seed, "held_out"),
    };
    Ok((manifest.spec, corpus))
}
