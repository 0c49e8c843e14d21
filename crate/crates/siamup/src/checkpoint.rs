//! Checkpoint container: a JSON manifest (version, counters, config echo,
//! array table) followed by raw little-endian f64 payload.
//!
//! Layout:
//! ```text
//! bytes 0..8    magic "SIAMUP01"
//! bytes 8..16   u64 LE: manifest byte length M
//! bytes 16..16+M  manifest JSON (serde, stable field order)
//! rest          f64 LE array data, concatenated in manifest order
//! ```
//! Arrays are listed sorted by name, so save -> load -> save reproduces
//! the file byte for byte.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Tensor;

const MAGIC: &[u8; 8] = b"SIAMUP01";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f64 elements.
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    epoch: usize,
    step: usize,
    config: RunConfig,
    arrays: Vec<ArrayEntry>,
}

/// Serialize every named parameter array plus the run configuration.
pub fn save(path: &Path, model: &Model, config: &RunConfig, epoch: usize, step: usize) -> Result<()> {
    let mut names: Vec<&str> = model.params.iter().map(|(_, e)| e.name.as_str()).collect();
    names.sort_unstable();
    let mut arrays = Vec::with_capacity(names.len());
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0u64;
    for name in &names {
        let id = model.params.id_by_name(name).expect("listed name");
        let t = model.params.get(id);
        arrays.push(ArrayEntry {
            name: name.to_string(),
            dtype: "f64".into(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len() as u64,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.len() as u64;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        epoch,
        step,
        config: config.clone(),
        arrays,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;

    let mut f = std::fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    f.write_all(&manifest_bytes)?;
    f.write_all(&payload)?;
    Ok(())
}

/// Load a checkpoint: rebuild the model from the embedded config and fill
/// every parameter bit-exactly. Version or name-set mismatches are hard
/// errors.
pub fn load(path: &Path) -> Result<(Model, RunConfig, usize, usize)> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::Checkpoint(format!(
        "{}: {e}",
        path.display()
    )))?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)
        .map_err(|_| Error::Checkpoint("file too short for manifest length".into()))?;
    let mlen = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; mlen];
    f.read_exact(&mut manifest_bytes)
        .map_err(|_| Error::Checkpoint("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::Checkpoint(format!("manifest parse: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} unsupported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;

    let mut model = Model::init(&manifest.config.model, 0)?;
    if manifest.arrays.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} arrays, model defines {}",
            manifest.arrays.len(),
            model.params.len()
        )));
    }
    for entry in &manifest.arrays {
        if entry.dtype != "f64" {
            return Err(Error::Checkpoint(format!(
                "array {} has unsupported dtype {}",
                entry.name, entry.dtype
            )));
        }
        let id = model
            .params
            .id_by_name(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown array {}", entry.name)))?;
        let expect_shape = model.params.get(id).shape().to_vec();
        if expect_shape != entry.shape {
            return Err(Error::Checkpoint(format!(
                "array {}: shape {:?} does not match model {:?}",
                entry.name, entry.shape, expect_shape
            )));
        }
        let start = entry.offset as usize * 8;
        let end = start + entry.len as usize * 8;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!("array {} overruns payload", entry.name)));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunked by 8")))
            .collect();
        *model.params.get_mut(id) = Tensor::from_vec(&entry.shape, data);
    }
    Ok((model, manifest.config.clone(), manifest.epoch, manifest.step))
}
