//! Checkpoint files.
//!
//! ```text
//! "TMCK"  header_len:u64  header:JSON (header_len bytes)  payload
//! ```
//! The header lists every tensor with its name, shape and byte offset into
//! the payload; values are little-endian in the header's `dtype`. Adam
//! moments, when saved, follow the parameters as `adam.m.<name>` and
//! `adam.v.<name>` entries.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::model::ArchConfig;
use crate::params::ParamStore;
use crate::tensor::{DType, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TMCK";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<TensorEntry>,
    pub v: Vec<TensorEntry>,
}

/// Everything about a checkpoint except the tensor values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub val_loss: f64,
    pub seed: u64,
    pub arch: ArchConfig,
    /// Snapshot of the run configuration that produced the checkpoint.
    pub run: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    dtype: DType,
    #[serde(flatten)]
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerEntry>,
}

pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub dtype: DType,
    pub params: ParamStore<T>,
    pub adam: Option<AdamState<T>>,
}

struct PayloadWriter<T> {
    bytes: Vec<u8>,
    _t: std::marker::PhantomData<T>,
}

impl<T: Scalar> PayloadWriter<T> {
    fn push(&mut self, name: String, shape: &[usize], values: &[T]) -> TensorEntry {
        let offset = self.bytes.len() as u64;
        for &v in values {
            v.write_le(&mut self.bytes);
        }
        TensorEntry {
            name,
            shape: shape.to_vec(),
            offset,
        }
    }
}

/// Serialises to bytes; see the module docs for the layout.
pub fn encode_checkpoint<T: Scalar>(
    meta: &CheckpointMeta,
    store: &ParamStore<T>,
    adam: Option<&AdamState<T>>,
) -> Result<Vec<u8>> {
    let mut payload = PayloadWriter::<T> {
        bytes: Vec::new(),
        _t: std::marker::PhantomData,
    };
    let tensors = store
        .iter()
        .map(|(name, t)| payload.push(name.to_string(), t.shape(), t.data()))
        .collect();
    let optimizer = adam.map(|a| {
        let mut section = |prefix: &str, moments: &[Vec<T>]| -> Vec<TensorEntry> {
            store
                .iter()
                .zip(moments)
                .map(|((name, t), m)| payload.push(format!("adam.{prefix}.{name}"), t.shape(), m))
                .collect()
        };
        let m = section("m", &a.m);
        let v = section("v", &a.v);
        OptimizerEntry {
            config: a.config,
            t: a.t,
            m,
            v,
        }
    });
    let header = Header {
        dtype: T::DTYPE,
        meta: meta.clone(),
        tensors,
        optimizer,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + payload.bytes.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload.bytes);
    Ok(out)
}

/// Writes via a temporary file and rename.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    meta: &CheckpointMeta,
    store: &ParamStore<T>,
    adam: Option<&AdamState<T>>,
) -> Result<()> {
    let bytes = encode_checkpoint(meta, store, adam)?;
    write_atomic(path, &bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn format_err<T>(offset: u64, message: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        offset,
        message: message.into(),
    })
}

fn read_values<T: Scalar>(payload: &[u8], base: u64, dtype: DType, entry: &TensorEntry) -> Result<Tensor<T>> {
    let numel: usize = entry.shape.iter().product();
    let start = entry.offset as usize;
    let end = start + numel * dtype.size();
    if end > payload.len() {
        return format_err(base + entry.offset, format!("tensor {} runs past the end of the file", entry.name));
    }
    let bytes = &payload[start..end];
    let values: Vec<T> = match dtype {
        DType::F32 => bytes.chunks_exact(4).map(|b| T::of(f64::from(f32::read_le(b)))).collect(),
        DType::F64 => bytes.chunks_exact(8).map(|b| T::of(f64::read_le(b))).collect(),
    };
    Tensor::new(&entry.shape, values).map_err(|e| Error::Format {
        offset: base + entry.offset,
        message: format!("tensor {}: {e}", entry.name),
    })
}

/// Parses bytes produced by [`encode_checkpoint`]. Values stored in another
/// precision are converted.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return format_err(0, "not a checkpoint file (bad magic)");
    }
    let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    if 12 + len > bytes.len() {
        return format_err(4, format!("header length {len} exceeds the file"));
    }
    let header: Header = serde_json::from_slice(&bytes[12..12 + len])
        .map_err(|e| Error::Format { offset: 12, message: format!("header: {e}") })?;
    let base = (12 + len) as u64;
    let payload = &bytes[12 + len..];
    let mut params = ParamStore::new();
    for entry in &header.tensors {
        params.add(entry.name.clone(), read_values(payload, base, header.dtype, entry)?);
    }
    let adam = match &header.optimizer {
        None => None,
        Some(o) => {
            let load = |entries: &[TensorEntry]| -> Result<Vec<Vec<T>>> {
                entries
                    .iter()
                    .map(|e| Ok(read_values::<T>(payload, base, header.dtype, e)?.into_data()))
                    .collect()
            };
            Some(AdamState {
                config: o.config,
                t: o.t,
                m: load(&o.m)?,
                v: load(&o.v)?,
            })
        }
    };
    Ok(Checkpoint {
        meta: header.meta,
        dtype: header.dtype,
        params,
        adam,
    })
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Human-readable differences in names and shapes between two parameter
/// trees; empty when they match.
pub fn structural_diff<T: Scalar>(expected: &ParamStore<T>, found: &ParamStore<T>) -> Vec<String> {
    let mut diff = Vec::new();
    for (name, t) in expected.iter() {
        match found.find(name) {
            None => diff.push(format!("- {name} {:?} (missing from checkpoint)", t.shape())),
            Some(id) if found.get(id).shape() != t.shape() => diff.push(format!(
                "~ {name}: model {:?}, checkpoint {:?}",
                t.shape(),
                found.get(id).shape()
            )),
            _ => {}
        }
    }
    for (name, t) in found.iter() {
        if expected.find(name).is_none() {
            diff.push(format!("+ {name} {:?} (not in model)", t.shape()));
        }
    }
    diff
}

/// Copies checkpoint values into `store`, which must have the same tree.
pub fn restore_into<T: Scalar>(store: &mut ParamStore<T>, checkpoint: &Checkpoint<T>) -> Result<()> {
    let diff = structural_diff(store, &checkpoint.params);
    if !diff.is_empty() {
        return Err(Error::Contract(format!(
            "checkpoint does not match the model:\n{}",
            diff.join("\n")
        )));
    }
    for id in store.ids().collect::<Vec<_>>() {
        let src = checkpoint.params.find(store.name(id)).expect("checked by diff");
        let values = checkpoint.params.get(src).data().to_vec();
        store.get_mut(id).data_mut().copy_from_slice(&values);
    }
    Ok(())
}
