//! Model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic[8] | version u32 | header_len u32 | header JSON | seed u64
//! | tensor_count u32 | (len u64 | len x f64)* | sha256[32]
//! ```
//!
//! The header holds the architecture descriptor and training metadata.
//! Tensors are the trainable weights followed by the batch-norm running
//! statistics. The checksum covers every preceding byte.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::net::{ArchDescriptor, RunningStats, Weights};
use super::{TrainMeta, TwinError, TwinModel};

pub const MODEL_MAGIC: [u8; 8] = *b"VDTWIN\r\n";
pub const MODEL_FORMAT_VERSION: u32 = 1;
const MAX_HEADER_LEN: usize = 1 << 20;
const CHECKSUM_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchDescriptor,
    meta: TrainMeta,
}

fn format_err(msg: impl Into<String>) -> TwinError {
    TwinError::Format(msg.into())
}

/// Serializes a model to bytes.
pub fn write_model(model: &TwinModel) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        arch: model.arch,
        meta: model.meta.clone(),
    })
    .expect("header serializes");
    let tensors: Vec<&[f64]> = model
        .weights
        .tensors()
        .into_iter()
        .chain(model.running.tensors())
        .collect();
    let mut out = Vec::with_capacity(64 + header.len() + 8 * model.weights.parameter_count());
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&model.meta.seed.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TwinError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format_err("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TwinError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, TwinError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses and validates a model file.
pub fn read_model(bytes: &[u8]) -> Result<TwinModel, TwinError> {
    if bytes.len() < MODEL_MAGIC.len() + CHECKSUM_LEN {
        return Err(format_err("truncated"));
    }
    if bytes[..MODEL_MAGIC.len()] != MODEL_MAGIC {
        return Err(format_err("bad magic"));
    }
    let (body, checksum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != checksum {
        return Err(format_err("checksum mismatch"));
    }
    let mut cur = Cursor {
        buf: body,
        pos: MODEL_MAGIC.len(),
    };
    let version = cur.u32()?;
    if version != MODEL_FORMAT_VERSION {
        return Err(format_err(format!("unsupported format version {version}")));
    }
    let header_len = cur.u32()? as usize;
    if header_len > MAX_HEADER_LEN {
        return Err(format_err("header too large"));
    }
    let header: Header =
        serde_json::from_slice(cur.take(header_len)?).map_err(|e| format_err(format!("header: {e}")))?;
    header.arch.validate()?;
    let seed = cur.u64()?;
    if seed != header.meta.seed {
        return Err(format_err("seed field disagrees with header"));
    }

    let mut weights = Weights::zeros(&header.arch);
    let mut running = RunningStats::new(&header.arch);
    let count = cur.u32()? as usize;
    let expected = weights.tensors().len() + running.tensors().len();
    if count != expected {
        return Err(format_err(format!("{count} tensors, expected {expected}")));
    }
    for dst in weights.tensors_mut().into_iter().chain(running.tensors_mut()) {
        let len = cur.u64()?;
        if len != dst.len() as u64 {
            return Err(format_err(format!("tensor of {len} values, descriptor implies {}", dst.len())));
        }
        let raw = cur.take(dst.len() * 8)?;
        for (v, chunk) in dst.iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    if cur.pos != body.len() {
        return Err(format_err("trailing bytes"));
    }
    Ok(TwinModel {
        arch: header.arch,
        weights,
        running,
        meta: header.meta,
    })
}

/// Writes atomically through a temporary sibling file.
pub fn save_model(model: &TwinModel, path: &Path) -> Result<(), TwinError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&write_model(model))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a model; `expected` additionally pins the architecture.
pub fn load_model(path: &Path, expected: Option<&ArchDescriptor>) -> Result<TwinModel, TwinError> {
    let model = read_model(&fs::read(path)?)?;
    if let Some(arch) = expected {
        if *arch != model.arch {
            return Err(format_err(format!(
                "architecture mismatch: file has {:?}, expected {arch:?}",
                model.arch
            )));
        }
    }
    Ok(model)
}
