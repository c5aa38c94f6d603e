//! Checkpoints: a JSON manifest (config, step, metrics, parameter index) next
//! to a raw little-endian f64 payload. Inspectable with a text editor and a
//! hex dump, and bit-exact through save/load round trips.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::elem::Elem;
use crate::model::{ArchConfig, Net, ParamStore};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "params.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamIndexEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset into the payload, in elements (not bytes).
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub step: u64,
    pub arch: ArchConfig,
    /// The full run configuration, embedded verbatim for reproducibility.
    pub run: serde_json::Value,
    pub metrics: BTreeMap<String, f64>,
    /// Training precision the checkpoint was produced under.
    pub precision: String,
    pub payload_dtype: String,
    pub params: Vec<ParamIndexEntry>,
}

/// Write `dir/manifest.json` and `dir/params.bin`. The payload is always
/// little-endian f64; f32 parameters widen exactly.
pub fn save<F: Elem>(
    dir: &Path,
    net: &Net<F>,
    run: serde_json::Value,
    step: u64,
    metrics: BTreeMap<String, f64>,
) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir)?;
    let mut index = Vec::with_capacity(net.params.len());
    let mut offset = 0usize;
    let mut payload: Vec<u8> = Vec::with_capacity(net.params.total_values() * 8);
    for p in net.params.iter() {
        index.push(ParamIndexEntry {
            name: p.name.clone(),
            rows: p.rows,
            cols: p.cols,
            offset,
        });
        for &v in p.data.iter() {
            payload.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        offset += p.data.len();
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        step,
        arch: net.cfg.clone(),
        run,
        metrics,
        precision: F::DTYPE.to_string(),
        payload_dtype: "f64".to_string(),
        params: index,
    };
    let mut mf = fs::File::create(dir.join(MANIFEST_FILE))?;
    mf.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    mf.write_all(b"\n")?;
    fs::write(dir.join(PAYLOAD_FILE), payload)?;
    Ok(())
}

/// Load a checkpoint into the requested precision.
pub fn load<F: Elem>(dir: &Path) -> Result<(Net<F>, Manifest), CheckpointError> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Corrupt(format!(
            "format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    if manifest.payload_dtype != "f64" {
        return Err(CheckpointError::Corrupt(format!(
            "unsupported payload dtype {}",
            manifest.payload_dtype
        )));
    }
    let mut file = fs::File::open(dir.join(PAYLOAD_FILE))?;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    let total: usize = manifest.params.iter().map(|p| p.rows * p.cols).sum();
    if payload.len() != total * 8 {
        return Err(CheckpointError::Corrupt(format!(
            "payload holds {} bytes, index expects {}",
            payload.len(),
            total * 8
        )));
    }

    let mut params = ParamStore::new();
    for entry in &manifest.params {
        let n = entry.rows * entry.cols;
        let start = entry.offset * 8;
        let end = start + n * 8;
        if end > payload.len() {
            return Err(CheckpointError::Corrupt(format!(
                "parameter {} overruns the payload",
                entry.name
            )));
        }
        let data: Vec<F> = payload[start..end]
            .chunks_exact(8)
            .map(|c| F::from_f64(f64::from_le_bytes(c.try_into().expect("chunk of 8"))))
            .collect();
        params.insert(entry.name.clone(), data, entry.rows, entry.cols);
    }
    Ok((Net { cfg: manifest.arch.clone(), params }, manifest))
}
