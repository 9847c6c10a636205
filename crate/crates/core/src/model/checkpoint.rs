// SPDX-License-Identifier: MIT OR Apache-2.0

//! Checkpoint layout: 8-byte magic, u64 LE header length, JSON header,
//! then every tensor as little-endian f64 in layout order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelState};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NANOREC1";

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    seed: u64,
    tensors: Vec<TensorHeader>,
}

pub fn write_checkpoint<W: Write>(state: &ModelState, mut w: W) -> Result<()> {
    let header = Header {
        config: state.config().clone(),
        seed: state.config().seed,
        tensors: state
            .layout()
            .tensors()
            .iter()
            .map(|t| TensorHeader { name: t.name.clone(), shape: t.shape.clone() })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for x in &state.params {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelState> {
    let fail = |m: String| Error::Format { path: Default::default(), message: m };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(fail("bad checkpoint magic".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    let mut state = ModelState::zeros(header.config)?;
    let expected: Vec<(&str, &[usize])> =
        state.layout().tensors().iter().map(|t| (t.name.as_str(), t.shape.as_slice())).collect();
    let found: Vec<(&str, &[usize])> = header.tensors.iter().map(|t| (t.name.as_str(), t.shape.as_slice())).collect();
    if expected != found {
        return Err(fail("tensor list does not match the configuration".into()));
    }
    let mut buf = vec![0u8; state.params.len() * 8];
    r.read_exact(&mut buf)?;
    for (x, chunk) in state.params.iter_mut().zip(buf.chunks_exact(8)) {
        *x = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(fail("trailing bytes after tensors".into()));
    }
    if let Some(name) = state.first_non_finite() {
        return Err(Error::NonFinite(format!("checkpoint tensor {name}")));
    }
    Ok(state)
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    write_checkpoint(state, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    read_checkpoint(BufReader::new(File::open(path)?)).map_err(|e| match e {
        Error::Format { message, .. } => Error::Format { path: path.to_path_buf(), message },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let cfg = ModelConfig { width: 16, heads: 2, mlp_width: 32, vocab_size: 12, max_seq_len: 8, ..Default::default() };
        let s = ModelState::init(cfg).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&s, &mut bytes).unwrap();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        let back = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back, s);
        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn truncated_file_fails() {
        let cfg = ModelConfig { width: 16, heads: 2, mlp_width: 32, vocab_size: 12, max_seq_len: 8, ..Default::default() };
        let s = ModelState::init(cfg).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&s, &mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(read_checkpoint(bytes.as_slice()).is_err());
    }
}
