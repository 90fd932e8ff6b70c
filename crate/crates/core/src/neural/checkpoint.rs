//! Checkpoint layout: one line of JSON header (format version, config,
//! tensor names and shapes) terminated by `\n`, then every tensor as raw
//! little-endian f32 in header order.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{EncoderModel, ModelConfig, Params};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn write_checkpoint<W: Write>(model: &EncoderModel, mut out: W) -> Result<()> {
    let header = Header {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: model.config,
        tensors: model
            .params
            .shapes()
            .into_iter()
            .map(|(name, shape)| TensorEntry { name, shape })
            .collect(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for (_, t) in model.params.tensors() {
        let mut buf = Vec::with_capacity(t.len() * 4);
        for &v in t {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(mut input: R) -> Result<EncoderModel> {
    let mut line = Vec::new();
    input.read_until(b'\n', &mut line)?;
    let header: Header = serde_json::from_slice(&line)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    header.config.validate()?;
    let mut params = Params::zeros(&header.config);
    let expected: Vec<TensorEntry> = params
        .shapes()
        .into_iter()
        .map(|(name, shape)| TensorEntry { name, shape })
        .collect();
    if expected != header.tensors {
        return Err(Error::Checkpoint("tensor layout does not match config".into()));
    }
    let mut word = [0u8; 4];
    for (name, t) in params.tensors_mut() {
        for v in t.iter_mut() {
            input
                .read_exact(&mut word)
                .map_err(|e| Error::Checkpoint(format!("truncated tensor {name}: {e}")))?;
            *v = f32::from_le_bytes(word) as f64;
        }
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(EncoderModel {
        config: header.config,
        params,
    })
}
