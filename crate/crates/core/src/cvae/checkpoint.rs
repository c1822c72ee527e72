//! Checkpoint file: `TDNT`, u32 version, u32 JSON length, JSON header, then
//! f64 LE parameter values, Adam first moments and second moments, each in
//! parameter insertion order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CvaeError, CvaeModel, ModelConfig, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TDNT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    optimizer_step: u64,
    params: Vec<ParamEntry>,
}

pub fn write_checkpoint<W: Write>(mut w: W, model: &CvaeModel) -> Result<()> {
    let store = model.store();
    let header = Header {
        model: model.config().clone(),
        optimizer_step: store.step(),
        params: store
            .ids()
            .map(|id| ParamEntry {
                name: store.name(id).to_string(),
                shape: store.value(id).shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let mut blob = Vec::with_capacity(store.num_scalars() * 24);
    for id in store.ids() {
        blob.extend(store.value(id).data().iter().flat_map(|v| v.to_le_bytes()));
    }
    for id in store.ids() {
        blob.extend(store.moments(id).m.iter().flat_map(|v| v.to_le_bytes()));
    }
    for id in store.ids() {
        blob.extend(store.moments(id).v.iter().flat_map(|v| v.to_le_bytes()));
    }
    w.write_all(&blob)?;
    Ok(())
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(CvaeError::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            "checkpoint truncated",
        )));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

fn take_u32(buf: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(buf, 4)?.try_into().unwrap()))
}

fn fill(buf: &mut &[u8], dst: &mut [f64]) -> Result<()> {
    let bytes = take(buf, dst.len() * 8)?;
    for (d, c) in dst.iter_mut().zip(bytes.chunks_exact(8)) {
        *d = f64::from_le_bytes(c.try_into().unwrap());
    }
    Ok(())
}

/// Rebuild the model from its stored config, then overwrite every
/// parameter and optimizer moment from the file.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<CvaeModel> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut buf = &bytes[..];
    if buf.len() < 4 || &buf[..4] != CHECKPOINT_MAGIC {
        return Err(CvaeError::BadMagic);
    }
    take(&mut buf, 4)?;
    let version = take_u32(&mut buf)?;
    if version != CHECKPOINT_VERSION {
        return Err(CvaeError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = take_u32(&mut buf)? as usize;
    let header: Header = serde_json::from_slice(take(&mut buf, len)?)?;
    let mut model = CvaeModel::new(header.model)?;

    let store = model.store_mut();
    let ids: Vec<_> = store.ids().collect();
    if ids.len() != header.params.len() {
        return Err(CvaeError::ConfigMismatch(format!(
            "{} stored parameters, config builds {}",
            header.params.len(),
            ids.len()
        )));
    }
    for (&id, entry) in ids.iter().zip(&header.params) {
        if store.name(id) != entry.name || store.value(id).shape() != entry.shape.as_slice() {
            return Err(CvaeError::ConfigMismatch(format!(
                "parameter '{}' {:?} vs stored '{}' {:?}",
                store.name(id),
                store.value(id).shape(),
                entry.name,
                entry.shape
            )));
        }
    }
    for &id in &ids {
        fill(&mut buf, store.value_mut(id).data_mut())?;
    }
    for &id in &ids {
        fill(&mut buf, &mut store.moments_mut(id).m)?;
    }
    for &id in &ids {
        fill(&mut buf, &mut store.moments_mut(id).v)?;
    }
    if !buf.is_empty() {
        return Err(CvaeError::ConfigMismatch(format!("{} trailing bytes", buf.len())));
    }
    store.set_step(header.optimizer_step);
    Ok(model)
}

pub fn save_checkpoint(model: &CvaeModel, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut f, model)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CvaeModel> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}
