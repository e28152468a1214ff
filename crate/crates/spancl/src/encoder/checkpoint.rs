//! Self-describing checkpoint container.
//!
//! Layout: 8-byte magic, little-endian u64 header length, JSON header
//! (architecture, vocabulary hash, tensor manifest), then all tensor data as
//! raw little-endian f64 in manifest order. Reload is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, ModelParams};
use crate::autodiff::Matrix;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SPANCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: EncoderConfig,
    with_classifier: bool,
    vocab_sha256: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

pub fn save_checkpoint(params: &ModelParams, vocab_sha256: &str, path: &Path) -> Result<()> {
    let header = Header {
        version: VERSION,
        config: params.config.clone(),
        with_classifier: params.with_classifier,
        vocab_sha256: vocab_sha256.to_string(),
        tensors: params
            .tensors()
            .map(|(name, v)| TensorEntry {
                name: name.to_string(),
                rows: v.nrows(),
                cols: v.ncols(),
            })
            .collect(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())?;
    w.write_all(&header_json)?;
    for (_, tensor) in params.tensors() {
        for v in tensor.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load a checkpoint, returning the parameters and the vocabulary hash they
/// were trained against.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, String)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic in {}",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json)?;
    let header: Header =
        serde_json::from_slice(&header_json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let count = entry.rows * entry.cols;
        let mut data = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        let m = Matrix::from_shape_vec((entry.rows, entry.cols), data)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        tensors.push((entry.name.clone(), m));
    }
    let params = ModelParams::from_tensors(header.config, header.with_classifier, tensors);
    Ok((params, header.vocab_sha256))
}
