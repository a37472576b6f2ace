//! `.snrf` checkpoints.
//!
//! Layout: the magic bytes `SNRF`, the format version as a little-endian
//! `u32`, the byte length of a JSON header as a little-endian `u32`, the
//! header itself, then every tensor listed in the header as little-endian
//! `f32` values in header order.
//!
//! Parameters live in memory as `f64` and are rounded to `f32` on save, so
//! `load(save(p)) == p` holds exactly when `p` is `f32`-representable (see
//! [`ParamSet::quantize_f32`]).

use crate::lora::{LoraAdapter, LoraError};
use crate::net::{Architecture, DenoiserParams, NetError};
use crate::params::ParamSet;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"SNRF";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not an SNRF checkpoint: magic bytes are {0:?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported checkpoint version {found}, expected {VERSION}")]
    UnsupportedVersion { found: u32 },
    #[error("checkpoint truncated: {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("payload holds {got} bytes, header declares {expected}")]
    PayloadSize { expected: usize, got: usize },
    #[error("expected a {expected} checkpoint, found {found}")]
    WrongKind { expected: &'static str, found: &'static str },
    #[error("layer `{layer}`: checkpoint has shape {got:?}, expected {expected:?}")]
    LayerMismatch {
        layer: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("checkpoint lists {got} tensors, expected {expected}; first difference at `{layer}`")]
    LayerSet {
        layer: String,
        expected: usize,
        got: usize,
    },
    #[error("adapter checkpoint header lacks LoRA metadata")]
    MissingLora,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Lora(#[from] LoraError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Base,
    Adapter,
}

impl CheckpointKind {
    fn name(self) -> &'static str {
        match self {
            CheckpointKind::Base => "base",
            CheckpointKind::Adapter => "adapter",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraMeta {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub kind: CheckpointKind,
    /// Architecture of the base network (also for adapters).
    pub architecture: Architecture,
    pub tensors: Vec<TensorEntry>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora: Option<LoraMeta>,
    /// Echo of the run configuration.
    #[serde(default)]
    pub config: serde_json::Value,
}

fn entries<P: ParamSet>(p: &P) -> Vec<TensorEntry> {
    p.tensors()
        .into_iter()
        .map(|t| TensorEntry {
            name: t.name,
            shape: t.shape,
        })
        .collect()
}

/// Serializes `params` with a header whose tensor list is filled in from
/// `params`.
pub fn encode<P: ParamSet>(params: &P, mut header: Header) -> Result<Vec<u8>> {
    header.tensors = entries(params);
    let json = serde_json::to_vec(&header)?;
    let len = u32::try_from(json.len()).map_err(|_| CheckpointError::Truncated("header longer than 4 GiB"))?;
    let n = params.num_parameters();
    let mut out = Vec::with_capacity(12 + json.len() + 4 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors() {
        for &v in t.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Splits a checkpoint into its header and payload, checking the magic,
/// the version and the payload length.
pub fn decode_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 4 {
        return Err(CheckpointError::BadMagic(bytes.to_vec()));
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic(bytes[..4].to_vec()));
    }
    let word = |at: usize, what| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or(CheckpointError::Truncated(what))
    };
    let version = word(4, "missing version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version });
    }
    let len = word(8, "missing header length")? as usize;
    let json = bytes
        .get(12..12 + len)
        .ok_or(CheckpointError::Truncated("header shorter than declared"))?;
    let header: Header = serde_json::from_slice(json)?;
    let payload = &bytes[12 + len..];
    let expected: usize = header
        .tensors
        .iter()
        .map(|t| 4 * t.shape.iter().product::<usize>())
        .sum();
    if payload.len() != expected {
        return Err(CheckpointError::PayloadSize {
            expected,
            got: payload.len(),
        });
    }
    Ok((header, payload))
}

/// Fills `template` from a decoded checkpoint after checking that tensor
/// names and shapes agree one by one.
fn fill<P: ParamSet>(template: &mut P, header: &Header, payload: &[u8]) -> Result<()> {
    let want = entries(template);
    for (i, w) in want.iter().enumerate() {
        let Some(got) = header.tensors.get(i) else {
            return Err(CheckpointError::LayerSet {
                layer: w.name.clone(),
                expected: want.len(),
                got: header.tensors.len(),
            });
        };
        if got.name != w.name {
            return Err(CheckpointError::LayerSet {
                layer: w.name.clone(),
                expected: want.len(),
                got: header.tensors.len(),
            });
        }
        if got.shape != w.shape {
            return Err(CheckpointError::LayerMismatch {
                layer: w.name.clone(),
                expected: w.shape.clone(),
                got: got.shape.clone(),
            });
        }
    }
    if header.tensors.len() != want.len() {
        return Err(CheckpointError::LayerSet {
            layer: header.tensors[want.len()].name.clone(),
            expected: want.len(),
            got: header.tensors.len(),
        });
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
    for t in template.tensors_mut() {
        for v in t.iter_mut() {
            *v = values.next().expect("payload length checked");
        }
    }
    Ok(())
}

fn expect_kind(header: &Header, kind: CheckpointKind) -> Result<()> {
    if header.kind == kind {
        Ok(())
    } else {
        Err(CheckpointError::WrongKind {
            expected: kind.name(),
            found: header.kind.name(),
        })
    }
}

pub fn encode_base(params: &DenoiserParams, seed: u64, config: serde_json::Value) -> Result<Vec<u8>> {
    let header = Header {
        kind: CheckpointKind::Base,
        architecture: params.arch.clone(),
        tensors: Vec::new(),
        seed,
        lora: None,
        config,
    };
    encode(params, header)
}

/// Decodes a base checkpoint. With `expected`, every layer is checked
/// against that architecture and mismatches name the offending layer.
pub fn decode_base(bytes: &[u8], expected: Option<&Architecture>) -> Result<(DenoiserParams, Header)> {
    let (header, payload) = decode_header(bytes)?;
    expect_kind(&header, CheckpointKind::Base)?;
    let arch = expected.unwrap_or(&header.architecture);
    let mut params = DenoiserParams::zeros(arch)?;
    fill(&mut params, &header, payload)?;
    Ok((params, header))
}

pub fn encode_adapter(
    adapter: &LoraAdapter,
    base_arch: &Architecture,
    seed: u64,
    config: serde_json::Value,
) -> Result<Vec<u8>> {
    let header = Header {
        kind: CheckpointKind::Adapter,
        architecture: base_arch.clone(),
        tensors: Vec::new(),
        seed,
        lora: Some(LoraMeta {
            rank: adapter.rank,
            alpha: adapter.alpha,
            targets: adapter.targets().into_iter().map(String::from).collect(),
        }),
        config,
    };
    encode(adapter, header)
}

/// Decodes an adapter checkpoint; with `expected`, its layers are checked
/// against that base architecture.
pub fn decode_adapter(bytes: &[u8], expected: Option<&Architecture>) -> Result<(LoraAdapter, Header)> {
    let (header, payload) = decode_header(bytes)?;
    expect_kind(&header, CheckpointKind::Adapter)?;
    let meta = header.lora.as_ref().ok_or(CheckpointError::MissingLora)?;
    let arch = expected.unwrap_or(&header.architecture);
    let mut adapter = LoraAdapter::zeros(arch, &meta.targets, meta.rank, meta.alpha)?;
    fill(&mut adapter, &header, payload)?;
    Ok((adapter, header))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_base(path: &Path, params: &DenoiserParams, seed: u64, config: serde_json::Value) -> Result<()> {
    write(path, &encode_base(params, seed, config)?)
}

pub fn load_base(path: &Path, expected: Option<&Architecture>) -> Result<(DenoiserParams, Header)> {
    decode_base(&read(path)?, expected)
}

pub fn save_adapter(
    path: &Path,
    adapter: &LoraAdapter,
    base_arch: &Architecture,
    seed: u64,
    config: serde_json::Value,
) -> Result<()> {
    write(path, &encode_adapter(adapter, base_arch, seed, config)?)
}

pub fn load_adapter(path: &Path, expected: Option<&Architecture>) -> Result<(LoraAdapter, Header)> {
    decode_adapter(&read(path)?, expected)
}
