//! Tensor container: an 8-byte little-endian header length, a JSON header,
//! then every tensor's data as little-endian `f64` in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{ModelConfig, ModelError, ModelParams, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

/// Guards against allocating for a corrupt length prefix.
const MAX_HEADER_BYTES: u64 = 64 << 20;

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    #[serde(flatten)]
    extra: Map<String, Value>,
    tensors: Vec<Entry>,
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

/// Writes `tensors` with the fields of `extra` merged into the header.
pub fn write_tensor_file<'t>(
    mut w: impl Write,
    extra: Map<String, Value>,
    tensors: impl IntoIterator<Item = (&'t str, &'t Tensor)>,
) -> Result<()> {
    let tensors: Vec<(&str, &Tensor)> = tensors.into_iter().collect();
    let header = Header {
        format_version: FORMAT_VERSION,
        extra,
        tensors: tensors
            .iter()
            .map(|(n, t)| Entry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| corrupt(e.to_string()))?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t) in tensors {
        for x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor_file(mut r: impl Read) -> Result<(Map<String, Value>, Vec<(String, Tensor)>)> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > MAX_HEADER_BYTES {
        return Err(corrupt(format!("header length {len} is implausible")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| corrupt(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {}", header.format_version)));
    }
    let mut out = Vec::with_capacity(header.tensors.len());
    let mut buf = [0u8; 8];
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf).map_err(|_| corrupt(format!("truncated data for {}", e.name)))?;
            data.push(f64::from_le_bytes(buf));
        }
        out.push((e.name, Tensor::new(e.shape, data)?));
    }
    if r.read(&mut buf)? != 0 {
        return Err(corrupt("trailing bytes after tensor data"));
    }
    Ok((header.extra, out))
}

pub fn write_checkpoint(path: &Path, config: &ModelConfig, params: &ModelParams) -> Result<()> {
    let mut extra = Map::new();
    extra.insert(
        "config".into(),
        serde_json::to_value(config).map_err(|e| corrupt(e.to_string()))?,
    );
    let tmp = path.with_extension("tmp");
    write_tensor_file(BufWriter::new(File::create(&tmp)?), extra, params.iter())?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let (mut extra, tensors) = read_tensor_file(BufReader::new(File::open(path)?))?;
    let config: ModelConfig = serde_json::from_value(extra.remove("config").ok_or_else(|| corrupt("missing config"))?)
        .map_err(|e| corrupt(e.to_string()))?;
    let params = ModelParams::from_named(tensors);
    params.check(&config)?;
    Ok((config, params))
}
