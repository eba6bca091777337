//! Checkpoint file: `CTXLM1\n`, a 4-byte little-endian header length, a JSON
//! header with configs, step, sampler state and a tensor manifest, the raw
//! little-endian payload, and the first 8 bytes of the payload's SHA-256.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SamplerState;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::{DType, Scalar, Tensor};

use super::{OptimizerState, TrainConfig};

pub const MAGIC: &[u8; 7] = b"CTXLM1\n";
pub const FORMAT_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Completed optimizer steps.
    pub step: u64,
    pub sampler: SamplerState,
    pub payload_bytes: u64,
    pub tensors: Vec<TensorEntry>,
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub train: TrainConfig,
    pub step: u64,
    pub sampler: SamplerState,
    pub params: ModelParams<T>,
    pub optimizer: OptimizerState<T>,
}

fn fault(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn checksum(payload: &[u8]) -> [u8; CHECKSUM_LEN] {
    let digest = Sha256::digest(payload);
    digest[..CHECKSUM_LEN].try_into().expect("digest is 32 bytes")
}

impl<T: Scalar> Checkpoint<T> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let names = self.params.names();
        let mut out = Vec::with_capacity(3 * names.len());
        for (n, t) in names.iter().zip(self.params.tensors()) {
            out.push((format!("param/{n}"), t));
        }
        for (n, t) in names.iter().zip(&self.optimizer.m) {
            out.push((format!("adam_m/{n}"), t));
        }
        for (n, t) in names.iter().zip(&self.optimizer.v) {
            out.push((format!("adam_v/{n}"), t));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        for (name, t) in self.named_tensors() {
            let offset = payload.len() as u64;
            for &x in t.data() {
                x.write_le(&mut payload);
            }
            tensors.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                dtype: T::DTYPE,
                offset,
                nbytes: payload.len() as u64 - offset,
            });
        }
        let header = Header {
            version: FORMAT_VERSION,
            model: self.params.config().clone(),
            train: self.train.clone(),
            step: self.step,
            sampler: self.sampler,
            payload_bytes: payload.len() as u64,
            tensors,
        };
        let header_json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(MAGIC.len() + 4 + header_json.len() + payload.len() + CHECKSUM_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_json);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&checksum(&payload));
        Ok(out)
    }

    /// `path` is only used to label errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (header, payload) = split_file(bytes, path)?;
        check_manifest(&header, payload.len(), path)?;
        let mut by_name = std::collections::HashMap::new();
        for e in &header.tensors {
            if e.dtype != T::DTYPE {
                return Err(fault(
                    path,
                    format!("tensor `{}` is {:?}, expected {:?}", e.name, e.dtype, T::DTYPE),
                ));
            }
            let raw = &payload[e.offset as usize..(e.offset + e.nbytes) as usize];
            let data: Vec<T> = raw.chunks_exact(T::DTYPE.size_of()).map(T::read_le).collect();
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| fault(path, err.to_string()))?;
            if by_name.insert(e.name.clone(), t).is_some() {
                return Err(fault(path, format!("duplicate tensor `{}`", e.name)));
            }
        }
        let skeleton = ModelParams::<T>::zeros(&header.model).map_err(|e| fault(path, e.to_string()))?;
        let mut take = |prefix: &str, name: &str| {
            by_name
                .remove(&format!("{prefix}/{name}"))
                .ok_or_else(|| fault(path, format!("missing tensor `{prefix}/{name}`")))
        };
        let mut named = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for name in skeleton.names() {
            named.push((name.clone(), take("param", name)?));
        }
        for name in skeleton.names() {
            m.push(take("adam_m", name)?);
        }
        for name in skeleton.names() {
            v.push(take("adam_v", name)?);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(fault(path, format!("unexpected tensor `{extra}`")));
        }
        let params = ModelParams::from_named(&header.model, named).map_err(|e| fault(path, e.to_string()))?;
        for (i, (a, b)) in m.iter().zip(&v).enumerate() {
            let want = params.tensor(i).shape();
            if a.shape() != want || b.shape() != want {
                return Err(fault(path, format!("moment shape mismatch for `{}`", params.names()[i])));
            }
        }
        Ok(Self {
            train: header.train,
            step: header.step,
            sampler: header.sampler,
            params,
            optimizer: OptimizerState { m, v, step: header.step },
        })
    }
}

fn split_file<'a>(bytes: &'a [u8], path: &Path) -> Result<(Header, &'a [u8])> {
    let prefix = MAGIC.len() + 4;
    if bytes.len() < prefix {
        return Err(fault(path, "truncated before header"));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        if bytes.starts_with(b"CTXLM") {
            return Err(fault(path, "unsupported format version"));
        }
        return Err(fault(path, "bad magic (not a checkpoint file)"));
    }
    let hlen = u32::from_le_bytes(bytes[MAGIC.len()..prefix].try_into().expect("4 bytes")) as usize;
    if bytes.len() < prefix + hlen + CHECKSUM_LEN {
        return Err(fault(path, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[prefix..prefix + hlen])
        .map_err(|e| fault(path, format!("malformed header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(fault(
            path,
            format!("version {} is not supported (expected {FORMAT_VERSION})", header.version),
        ));
    }
    let body = &bytes[prefix + hlen..];
    let payload_len = body.len() - CHECKSUM_LEN;
    if (payload_len as u64) < header.payload_bytes {
        return Err(fault(
            path,
            format!("truncated payload: {payload_len} of {} bytes", header.payload_bytes),
        ));
    }
    if payload_len as u64 != header.payload_bytes {
        return Err(fault(
            path,
            format!("payload is {payload_len} bytes, header says {}", header.payload_bytes),
        ));
    }
    let (payload, stored) = body.split_at(payload_len);
    if checksum(payload) != stored {
        return Err(fault(path, "payload checksum mismatch"));
    }
    Ok((header, payload))
}

fn check_manifest(header: &Header, payload_len: usize, path: &Path) -> Result<()> {
    let mut spans = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let numel: usize = e.shape.iter().product();
        let want = (numel * e.dtype.size_of()) as u64;
        if e.nbytes != want {
            return Err(fault(
                path,
                format!("tensor `{}` has {} bytes, shape {:?} needs {want}", e.name, e.nbytes, e.shape),
            ));
        }
        let end = e.offset.checked_add(e.nbytes).filter(|&end| end <= payload_len as u64);
        let Some(end) = end else {
            return Err(fault(path, format!("tensor `{}` extends past the payload", e.name)));
        };
        spans.push((e.offset, end, &e.name));
    }
    spans.sort();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(fault(
                path,
                format!("manifest overlap between `{}` and `{}`", pair[0].2, pair[1].2),
            ));
        }
    }
    Ok(())
}

/// Reads only the header (for dtype dispatch and inspection).
pub fn read_header(path: &Path) -> Result<Header> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split_file(&bytes, path)?.0)
}

/// Writes via a temporary file and rename, so a crash never leaves a
/// half-written checkpoint under the final name.
pub fn save_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let mut tmp = PathBuf::from(path);
    tmp.set_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
