//! Binary checkpoints: magic, a JSON header (dtype, config, parameter names
//! and shapes), then raw little-endian parameter data in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numeric::{Scalar, Tensor};

const MAGIC: &[u8; 8] = b"LAMPACK1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    seed: u64,
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let header = Header {
        dtype: T::NAME.to_string(),
        seed: model.config().seed,
        config: model.config().clone(),
        params: model
            .param_names()
            .iter()
            .zip(model.params())
            .map(|(name, p)| ParamEntry {
                name: name.clone(),
                shape: p.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for p in model.params() {
        w.write_all(&T::to_le_bytes_vec(p.data()))?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint saved with the same precision `T`.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.as_ref().display()));
    let mut r = BufReader::new(File::open(path.as_ref())?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| bad("truncated header".into()))?;
    let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| bad("header too large".into()))?;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(e.to_string()))?;
    if header.dtype != T::NAME {
        return Err(bad(format!("stored as {}, requested {}", header.dtype, T::NAME)));
    }
    let mut model = Model::<T>::new(header.config)?;
    if header.params.len() != model.params().len() {
        return Err(bad(format!("{} parameters, config implies {}", header.params.len(), model.params().len())));
    }
    let width = std::mem::size_of::<T>();
    let mut params = Vec::with_capacity(header.params.len());
    for (entry, (name, p)) in header.params.iter().zip(model.param_names().iter().zip(model.params())) {
        if &entry.name != name || entry.shape != p.shape() {
            return Err(bad(format!("parameter {} {:?} does not match {name} {:?}", entry.name, entry.shape, p.shape())));
        }
        let mut buf = vec![0u8; p.len() * width];
        r.read_exact(&mut buf).map_err(|_| bad(format!("truncated data for {name}")))?;
        params.push(Tensor::new(entry.shape.clone(), T::from_le_bytes_slice(&buf))?);
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(bad("trailing bytes".into()));
    }
    model.set_params(params)?;
    Ok(model)
}
