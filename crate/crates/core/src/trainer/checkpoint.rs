//! Binary checkpoints: magic, header length, JSON header, then every tensor
//! as little-endian f64 in parameter order, followed by optimizer moments.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Adam, TrainConfig};
use crate::error::{Error, Result};
use crate::inference::{DataDims, InferenceConfig};
use crate::model::Model;
use crate::numerics::Matrix;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"IIUCKPT\0";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    epoch: usize,
    config_hash: String,
    inference: InferenceConfig,
    dims: DataDims,
    train: TrainConfig,
    tensors: Vec<TensorInfo>,
    adam_steps: Option<u64>,
}

/// Everything restored from a checkpoint file.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub epoch: usize,
    pub train: TrainConfig,
    pub model: Model,
    pub adam: Option<Adam>,
}

/// SHA-256 over the model-shaping configuration.
pub fn config_hash(cfg: &InferenceConfig, dims: &DataDims) -> String {
    let text = serde_json::to_string(&(cfg, dims)).expect("config serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn push_matrix(buf: &mut Vec<u8>, m: &Matrix) {
    for x in m.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn save_checkpoint(path: &Path, model: &Model, adam: Option<&Adam>, epoch: usize, train: &TrainConfig) -> Result<()> {
    let store = &model.store;
    let header = Header {
        version: CHECKPOINT_VERSION,
        epoch,
        config_hash: config_hash(&model.config, &model.dims),
        inference: model.config.clone(),
        dims: model.dims,
        train: train.clone(),
        tensors: store
            .ids()
            .map(|id| {
                let (rows, cols) = store.value(id).shape();
                TensorInfo { name: store.name(id).to_string(), rows, cols }
            })
            .collect(),
        adam_steps: adam.map(|a| a.t),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(16 + header.len() + 24 * store.num_scalars());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for v in store.values() {
        push_matrix(&mut buf, v);
    }
    if let Some(a) = adam {
        for m in a.m.iter().chain(&a.v) {
            push_matrix(&mut buf, m);
        }
    }
    // write-then-rename so a crash never leaves a truncated checkpoint
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let raw = self.take(rows * cols * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Matrix::new(rows, cols, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} is not supported (expected {CHECKPOINT_VERSION})",
            header.version
        )));
    }
    if config_hash(&header.inference, &header.dims) != header.config_hash {
        return Err(Error::Checkpoint("config hash does not match the stored configuration".into()));
    }

    let mut model = Model::new(header.inference.clone(), header.dims, 0)?;
    if model.store.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, the configuration needs {}",
            header.tensors.len(),
            model.store.len()
        )));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for (id, info) in ids.iter().zip(&header.tensors) {
        let expected = model.store.value(*id).shape();
        if model.store.name(*id) != info.name || expected != (info.rows, info.cols) {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` {:?} does not match `{}` {:?}",
                info.name,
                (info.rows, info.cols),
                model.store.name(*id),
                expected
            )));
        }
        let m = r.matrix(info.rows, info.cols)?;
        model.store.set_value(*id, m)?;
    }
    let adam = match header.adam_steps {
        Some(t) => {
            let mut read_all = || -> Result<Vec<Matrix>> {
                header.tensors.iter().map(|i| r.matrix(i.rows, i.cols)).collect()
            };
            let m = read_all()?;
            let v = read_all()?;
            Some(Adam { t, m, v })
        }
        None => None,
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { epoch: header.epoch, train: header.train, model, adam })
}
