//! Salience-head checkpoints and cache snapshots.
//!
//! A checkpoint is a single file: one JSON metadata line naming the
//! dimensions, seed, and tensor order, followed by the four parameter
//! tensors (w1, b1, w2, b2) back-to-back in the PFKV encoding.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cache::KvCache;
use crate::error::{Error, Result};
use crate::seh::SehParams;
use crate::tensor::Tensor;

use super::tensor_file::{decode_tensor, encode_tensor, write_tensor};

const CHECKPOINT_FORMAT: &str = "pafu-seh-checkpoint";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    version: u32,
    d_in: usize,
    d_hidden: usize,
    d_out: usize,
    seed: u64,
    tensors: Vec<String>,
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &SehParams, seed: u64) -> Result<()> {
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.to_string(),
        version: 1,
        d_in: params.d_in,
        d_hidden: params.d_hidden,
        d_out: params.d_out,
        seed,
        tensors: vec!["w1".into(), "b1".into(), "w2".into(), "b2".into()],
    };
    let mut bytes = serde_json::to_vec(&meta).expect("metadata serializes");
    bytes.push(b'\n');
    for (data, dims) in [
        (&params.w1, vec![params.d_in, params.d_hidden]),
        (&params.b1, vec![params.d_hidden]),
        (&params.w2, vec![params.d_hidden, params.d_out]),
        (&params.b2, vec![params.d_out]),
    ] {
        let t = Tensor::from_vec(&dims, data.clone())?;
        bytes.extend(encode_tensor(&t)?);
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(SehParams, u64)> {
    let bytes = fs::read(path)?;
    let newline = bytes.iter().position(|&b| b == b'\n').ok_or(Error::Format {
        offset: 0,
        msg: "missing metadata line".into(),
    })?;
    let meta: CheckpointMeta =
        serde_json::from_slice(&bytes[..newline]).map_err(|e| Error::Format {
            offset: 0,
            msg: format!("bad metadata: {e}"),
        })?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(Error::Format {
            offset: 0,
            msg: format!("not a checkpoint file: format '{}'", meta.format),
        });
    }
    if meta.tensors != ["w1", "b1", "w2", "b2"] {
        return Err(Error::Format {
            offset: 0,
            msg: format!("unexpected tensor list {:?}", meta.tensors),
        });
    }

    let mut offset = newline + 1;
    let mut take = |dims: &[usize], name: &str| -> Result<Vec<f64>> {
        let t = decode_tensor(&bytes, &mut offset)?;
        if t.dims() != dims {
            return Err(Error::Format {
                offset: offset as u64,
                msg: format!("{name} has dims {:?}, expected {:?}", t.dims(), dims),
            });
        }
        Ok(t.into_data())
    };
    let w1 = take(&[meta.d_in, meta.d_hidden], "w1")?;
    let b1 = take(&[meta.d_hidden], "b1")?;
    let w2 = take(&[meta.d_hidden, meta.d_out], "w2")?;
    let b2 = take(&[meta.d_out], "b2")?;
    if offset != bytes.len() {
        return Err(Error::Format {
            offset: offset as u64,
            msg: format!("{} trailing bytes", bytes.len() - offset),
        });
    }
    Ok((
        SehParams {
            d_in: meta.d_in,
            d_hidden: meta.d_hidden,
            d_out: meta.d_out,
            w1,
            b1,
            w2,
            b2,
        },
        meta.seed,
    ))
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotSidecar {
    policy: String,
    capacity: usize,
    token_ids: Vec<u64>,
    scores: Vec<f64>,
    pins: Vec<bool>,
}

/// Write `<prefix>.keys.pfkv`, `<prefix>.values.pfkv` (each `[M, N, D]`)
/// and `<prefix>.json` with the synchronized bookkeeping.
pub fn save_cache_snapshot(cache: &KvCache, prefix: impl AsRef<Path>) -> Result<()> {
    let prefix = prefix.as_ref();
    let (keys, values, token_ids) = cache.select();
    let with_ext = |ext: &str| {
        let mut os = prefix.as_os_str().to_os_string();
        os.push(ext);
        std::path::PathBuf::from(os)
    };
    write_tensor(with_ext(".keys.pfkv"), &keys)?;
    write_tensor(with_ext(".values.pfkv"), &values)?;
    let sidecar = SnapshotSidecar {
        policy: cache.policy().name().to_string(),
        capacity: cache.capacity(),
        token_ids,
        scores: cache.salience_list(),
        pins: cache.entries().iter().map(|e| e.pinned).collect(),
    };
    let mut json = serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes");
    json.push(b'\n');
    fs::write(with_ext(".json"), json)?;
    Ok(())
}
