//! Checkpoint container: named little-endian f32 arrays behind a JSON
//! manifest.
//!
//! Byte layout:
//!
//! | offset | size | content                                  |
//! |--------|------|------------------------------------------|
//! | 0      | 8    | magic `DDRNCKPT`                         |
//! | 8      | 4    | format version, u32 LE                   |
//! | 12     | 8    | manifest length `n` in bytes, u64 LE     |
//! | 20     | n    | UTF-8 JSON manifest                      |
//! | 20 + n | rest | tensor data, f32 LE, in manifest order   |
//!
//! Manifest entries give each array's name, shape, and element offset and
//! length within the data section. Model parameters come first in layout
//! order, then the optimizer moments as `optim.m.<name>` and `optim.v.<name>`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::model::Model;
use crate::tensor::Tensor;
use crate::trainer::{OptimizerState, TrainState};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DDRNCKPT";
pub const FORMAT_VERSION: u32 = 1;
const HEADER: usize = 20;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    step: u64,
    config: String,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

fn corrupt(msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{msg} (reader expects format version {FORMAT_VERSION})"))
}

pub fn to_bytes(cfg: &RunConfig, state: &TrainState) -> Result<Vec<u8>> {
    let params = state.model.params();
    state.optimizer.check_shapes(params.tensors())?;
    let mut named: Vec<(String, &Tensor<f32>)> = params.iter().map(|(n, t)| (n.to_string(), t)).collect();
    for (prefix, moments) in [("optim.m.", &state.optimizer.m), ("optim.v.", &state.optimizer.v)] {
        named.extend(params.names().iter().zip(moments).map(|(n, t)| (format!("{prefix}{n}"), t)));
    }
    let mut offset = 0;
    let tensors = named
        .iter()
        .map(|(name, t)| {
            let e = Entry { name: name.clone(), shape: t.shape().to_vec(), offset, len: t.len() };
            offset += t.len();
            e
        })
        .collect();
    let manifest = Manifest { format_version: FORMAT_VERSION, step: state.step(), config: cfg.to_text(), tensors };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(HEADER + json.len() + 4 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &named {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(RunConfig, TrainState)> {
    if bytes.len() < HEADER {
        return Err(corrupt(format!("file is {} bytes, shorter than the {HEADER}-byte header", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt("missing DDRNCKPT magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("file has format version {version}")));
    }
    let n = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[HEADER..];
    if body.len() < n {
        return Err(corrupt(format!("truncated manifest: need {n} bytes, have {}", body.len())));
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[..n]).map_err(|e| corrupt(format!("unreadable manifest: {e}")))?;
    if manifest.format_version != version {
        return Err(corrupt(format!("manifest claims format version {}", manifest.format_version)));
    }
    let data = &body[n..];
    let floats = manifest.tensors.iter().map(|e| e.offset + e.len).max().unwrap_or(0);
    if data.len() != 4 * floats {
        let what = if data.len() < 4 * floats { "truncated" } else { "oversized" };
        return Err(corrupt(format!("{what} tensor data: need {} bytes, have {}", 4 * floats, data.len())));
    }
    let cfg = RunConfig::parse(&manifest.config)?;
    let mut arrays = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        if e.shape.iter().product::<usize>() != e.len {
            return Err(corrupt(format!("{} has shape {:?} but {} values", e.name, e.shape, e.len)));
        }
        let values = data[4 * e.offset..4 * (e.offset + e.len)]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        arrays.push((e.name, Tensor::new(e.shape, values)?));
    }
    let count = Model::layout(&cfg.model).len();
    if arrays.len() != 3 * count {
        return Err(Error::Checkpoint(format!(
            "configuration expects {} arrays with optimizer state, checkpoint has {}",
            3 * count,
            arrays.len()
        )));
    }
    let mut v = arrays.split_off(2 * count);
    let mut m = arrays.split_off(count);
    let model = Model::from_named(cfg.model.clone(), arrays)?;
    for (prefix, moments) in [("optim.m.", &mut m), ("optim.v.", &mut v)] {
        for (name, (got, _)) in model.params().names().iter().zip(moments.iter()) {
            if got.strip_prefix(prefix) != Some(name.as_str()) {
                return Err(Error::Checkpoint(format!("expected {prefix}{name}, found {got}")));
            }
        }
    }
    let optimizer = OptimizerState {
        m: m.into_iter().map(|(_, t)| t).collect(),
        v: v.into_iter().map(|(_, t)| t).collect(),
        step: manifest.step,
    };
    optimizer.check_shapes(model.params().tensors())?;
    Ok((cfg, TrainState { model, optimizer }))
}

pub fn save(path: &Path, cfg: &RunConfig, state: &TrainState) -> Result<()> {
    std::fs::write(path, to_bytes(cfg, state)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(RunConfig, TrainState)> {
    from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
