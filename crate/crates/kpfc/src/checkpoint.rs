//! Checkpoint files.
//!
//! Layout: `b"KPFC"`, `u16` version, `u64` header length, the UTF-8 JSON
//! [`Header`], zero padding to a 64-byte boundary, then the tensor payloads
//! as little-endian `f32`. Every payload starts on a 64-byte boundary;
//! [`TensorEntry::offset`] is measured from the start of the payload area.

use std::fs;
use std::io::Write;
use std::path::Path;

use kpfc_core::models::{ArchKind, Hyper, Model, ParamStore};
use kpfc_core::training::{AdamState, TrainConfig};
use kpfc_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{KpfcError, Result};

pub const MAGIC: &[u8; 4] = b"KPFC";
pub const VERSION: u16 = 1;
pub const ALIGN: usize = 64;
const PREAMBLE: usize = 4 + 2 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub role: TensorRole,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerFlags {
    pub adam: bool,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub arch: ArchKind,
    pub hyper: Hyper,
    pub optimizer: OptimizerFlags,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_config: Option<TrainConfig>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub adam: Option<AdamState<f32>>,
    pub train_config: Option<TrainConfig>,
}

fn align(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

fn pad(buf: &mut Vec<u8>) {
    buf.resize(align(buf.len()), 0);
}

/// Serialize a model and optional optimizer state.
pub fn encode(
    model: &Model<f32>,
    adam: Option<&AdamState<f32>>,
    cfg: Option<&TrainConfig>,
) -> Result<Vec<u8>> {
    let names = model.param_names();
    let mut tensors: Vec<(String, TensorRole, &Tensor<f32>)> = Vec::new();
    for (name, t) in model.params().iter() {
        tensors.push((name.to_owned(), TensorRole::Param, t));
    }
    for (name, t) in model.buffers().iter() {
        tensors.push((name.to_owned(), TensorRole::Buffer, t));
    }
    if let Some(state) = adam {
        if state.m.len() != names.len() || state.v.len() != names.len() {
            return Err(kpfc_core::Error::Contract(format!(
                "optimizer state has {} moments for {} parameters",
                state.m.len(),
                names.len()
            ))
            .into());
        }
        for (name, t) in names.iter().zip(&state.m) {
            tensors.push((name.clone(), TensorRole::AdamM, t));
        }
        for (name, t) in names.iter().zip(&state.v) {
            tensors.push((name.clone(), TensorRole::AdamV, t));
        }
    }

    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, role, t) in &tensors {
        pad(&mut payload);
        let offset = payload.len();
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            role: *role,
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            offset: offset as u64,
            length: (payload.len() - offset) as u64,
        });
    }
    let header = Header {
        arch: model.kind(),
        hyper: model.hyper().clone(),
        optimizer: OptimizerFlags {
            adam: adam.is_some(),
            step: adam.map_or(0, |s| s.t),
        },
        train_config: cfg.cloned(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).map_err(|e| KpfcError::Format(e.to_string()))?;

    let mut out = Vec::with_capacity(align(PREAMBLE + json.len()) + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    pad(&mut out);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Read the preamble and header; returns the header and the payload start.
pub fn decode_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(KpfcError::Format("missing KPFC magic".into()));
    }
    if bytes.len() < PREAMBLE {
        return Err(KpfcError::Corrupt("file ends inside the preamble".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(KpfcError::Format(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let len = u64::from_le_bytes(bytes[6..PREAMBLE].try_into().expect("8 bytes"));
    let end = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(PREAMBLE))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| {
            KpfcError::Corrupt(format!(
                "header of {len} bytes runs past the end of the file"
            ))
        })?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..end])
        .map_err(|e| KpfcError::Format(format!("bad header: {e}")))?;
    Ok((header, align(end)))
}

fn read_tensor(bytes: &[u8], base: usize, e: &TensorEntry) -> Result<Tensor<f32>> {
    if e.dtype != "f32" {
        return Err(KpfcError::Format(format!(
            "tensor {} has unsupported dtype {}",
            e.name, e.dtype
        )));
    }
    let numel: usize = e.shape.iter().product();
    if e.length != 4 * numel as u64 || e.offset % ALIGN as u64 != 0 {
        return Err(KpfcError::Format(format!(
            "tensor {} has an inconsistent table entry",
            e.name
        )));
    }
    let start = base as u64 + e.offset;
    let end = start + e.length;
    if end > bytes.len() as u64 {
        return Err(KpfcError::Corrupt(format!(
            "payload of {} is truncated",
            e.name
        )));
    }
    let data = bytes[start as usize..end as usize]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Tensor::new(&e.shape, data)?)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, base) = decode_header(bytes)?;
    let mut params = ParamStore::new();
    let mut buffers = ParamStore::new();
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for e in &header.tensors {
        let t = read_tensor(bytes, base, e)?;
        match e.role {
            TensorRole::Param => params.insert(&e.name, t),
            TensorRole::Buffer => buffers.insert(&e.name, t),
            TensorRole::AdamM => m.push(t),
            TensorRole::AdamV => v.push(t),
        }
    }
    let model = Model::from_stores(header.arch, header.hyper, params, buffers)
        .map_err(|e| KpfcError::Format(format!("tensor table does not describe the model: {e}")))?;
    let adam = if header.optimizer.adam {
        let shapes_match = m.len() == model.params().len()
            && v.len() == m.len()
            && model
                .params()
                .tensors()
                .zip(m.iter().zip(&v))
                .all(|(p, (a, b))| p.shape() == a.shape() && p.shape() == b.shape());
        if !shapes_match {
            return Err(KpfcError::Format(
                "optimizer moments do not mirror the parameters".into(),
            ));
        }
        Some(AdamState {
            m,
            v,
            t: header.optimizer.step,
        })
    } else {
        None
    };
    Ok(Checkpoint {
        model,
        adam,
        train_config: header.train_config,
    })
}

/// Write atomically through a temporary sibling file.
pub fn save_checkpoint(
    path: &Path,
    model: &Model<f32>,
    adam: Option<&AdamState<f32>>,
    cfg: Option<&TrainConfig>,
) -> Result<()> {
    let bytes = encode(model, adam, cfg)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| KpfcError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| KpfcError::io(path, e))?;
    decode(&bytes)
}
