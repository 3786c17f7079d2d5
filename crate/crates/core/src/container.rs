//! Self-describing named-array container file.
//!
//! Layout: 8-byte magic, little-endian u64 header length, a JSON header
//! describing metadata and every array (name, dtype, shape, byte offset),
//! then the raw array data. Used for codebooks, checkpoints, frame and
//! feature arrays.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"AVDUBC01";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: serde_json::Value,
    arrays: Vec<ArraySpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArraySpec {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

/// One stored array; f64 for parameters and features, i64 for token grids.
#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F64(ArrayD<f64>),
    I64(ArrayD<i64>),
}

impl ArrayData {
    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F64(_) => "f64",
            ArrayData::I64(_) => "i64",
        }
    }

    fn shape(&self) -> Vec<usize> {
        match self {
            ArrayData::F64(a) => a.shape().to_vec(),
            ArrayData::I64(a) => a.shape().to_vec(),
        }
    }

    fn byte_len(&self) -> u64 {
        let n: usize = self.shape().iter().product();
        (n * 8) as u64
    }

    pub fn as_f64(&self) -> Result<&ArrayD<f64>> {
        match self {
            ArrayData::F64(a) => Ok(a),
            _ => Err(Error::Format("expected f64 array".into())),
        }
    }

    pub fn as_i64(&self) -> Result<&ArrayD<i64>> {
        match self {
            ArrayData::I64(a) => Ok(a),
            _ => Err(Error::Format("expected i64 array".into())),
        }
    }
}

/// Write a container holding `meta` plus the given named arrays.
/// Array order is preserved in the file; names must be unique.
pub fn write_container(
    path: &Path,
    meta: &serde_json::Value,
    arrays: &[(String, ArrayData)],
) -> Result<()> {
    let mut names = std::collections::HashSet::new();
    for (name, _) in arrays {
        if !names.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate array name '{name}'")));
        }
    }
    let mut specs = Vec::with_capacity(arrays.len());
    let mut offset = 0u64;
    for (name, data) in arrays {
        specs.push(ArraySpec {
            name: name.clone(),
            dtype: data.dtype().to_string(),
            shape: data.shape(),
            offset,
        });
        offset += data.byte_len();
    }
    let header = Header {
        version: CONTAINER_VERSION,
        meta: meta.clone(),
        arrays: specs,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("header encode: {e}")))?;

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, data) in arrays {
        match data {
            ArrayData::F64(a) => {
                for v in a.iter() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            ArrayData::I64(a) => {
                for v in a.iter() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a container back as (meta, name -> array).
pub fn read_container(path: &Path) -> Result<(serde_json::Value, BTreeMap<String, ArrayData>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic in {}: not a container file",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Format(format!("header decode: {e}")))?;
    if header.version != CONTAINER_VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {}",
            header.version
        )));
    }

    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let mut arrays = BTreeMap::new();
    for spec in &header.arrays {
        let n: usize = spec.shape.iter().product();
        let start = spec.offset as usize;
        let end = start + n * 8;
        if end > data.len() {
            return Err(Error::Format(format!(
                "array '{}' extends past end of file",
                spec.name
            )));
        }
        let bytes = &data[start..end];
        let shape = IxDyn(&spec.shape);
        let arr = match spec.dtype.as_str() {
            "f64" => {
                let vals: Vec<f64> = bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                ArrayData::F64(
                    ArrayD::from_shape_vec(shape, vals)
                        .map_err(|e| Error::Format(format!("array '{}': {e}", spec.name)))?,
                )
            }
            "i64" => {
                let vals: Vec<i64> = bytes
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                ArrayData::I64(
                    ArrayD::from_shape_vec(shape, vals)
                        .map_err(|e| Error::Format(format!("array '{}': {e}", spec.name)))?,
                )
            }
            other => {
                return Err(Error::Format(format!(
                    "array '{}': unknown dtype '{other}'",
                    spec.name
                )))
            }
        };
        arrays.insert(spec.name.clone(), arr);
    }
    Ok((header.meta, arrays))
}
