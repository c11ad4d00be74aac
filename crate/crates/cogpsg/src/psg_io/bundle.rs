//! Named-array container used for preprocessed caches, feature caches and
//! model checkpoints.
//!
//! Layout (little-endian): magic `CPSG`, format version `u32`, entry count
//! `u32`, then per entry a header of `u32`-length-prefixed UTF-8 name,
//! dtype byte (0 = f32, 1 = f64, 2 = bit array), `u8` ndim and `u64` dims;
//! payloads follow in header order (bits packed LSB-first).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::PsgIoError;

const MAGIC: &[u8; 4] = b"CPSG";
const VERSION: u32 = 1;

/// One stored array.
#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    Bits(Vec<bool>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayEntry {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl ArrayEntry {
    pub fn f32_2d(rows: usize, cols: usize, data: Vec<f32>) -> ArrayEntry {
        assert_eq!(rows * cols, data.len());
        ArrayEntry { shape: vec![rows, cols], data: ArrayData::F32(data) }
    }

    pub fn f64_nd(shape: Vec<usize>, data: Vec<f64>) -> ArrayEntry {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        ArrayEntry { shape, data: ArrayData::F64(data) }
    }

    pub fn bits(data: Vec<bool>) -> ArrayEntry {
        ArrayEntry { shape: vec![data.len()], data: ArrayData::Bits(data) }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            ArrayData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match &self.data {
            ArrayData::F64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_bits(&self) -> Option<&[bool]> {
        match &self.data {
            ArrayData::Bits(v) => Some(v),
            _ => None,
        }
    }
}

/// An ordered name → array map.
pub type Bundle = BTreeMap<String, ArrayEntry>;

pub fn write_bundle(path: &Path, bundle: &Bundle) -> Result<(), PsgIoError> {
    let io = |e: std::io::Error| PsgIoError::Io { path: path.display().to_string(), source: e };
    let file = File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);

    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(bundle.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, entry) in bundle {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(bytes).map_err(io)?;
        let dtype: u8 = match entry.data {
            ArrayData::F32(_) => 0,
            ArrayData::F64(_) => 1,
            ArrayData::Bits(_) => 2,
        };
        w.write_all(&[dtype, entry.shape.len() as u8]).map_err(io)?;
        for &d in &entry.shape {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
    }
    for entry in bundle.values() {
        match &entry.data {
            ArrayData::F32(v) => {
                let mut buf = Vec::with_capacity(v.len() * 4);
                for x in v {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
                w.write_all(&buf).map_err(io)?;
            }
            ArrayData::F64(v) => {
                let mut buf = Vec::with_capacity(v.len() * 8);
                for x in v {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
                w.write_all(&buf).map_err(io)?;
            }
            ArrayData::Bits(v) => {
                let mut buf = vec![0u8; v.len().div_ceil(8)];
                for (i, &bit) in v.iter().enumerate() {
                    if bit {
                        buf[i / 8] |= 1 << (i % 8);
                    }
                }
                w.write_all(&buf).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn read_bundle(path: &Path) -> Result<Bundle, PsgIoError> {
    let bad = |reason: String| PsgIoError::Unreadable { path: path.display().to_string(), reason };
    let file = File::open(path).map_err(|e| bad(format!("cannot open: {e}")))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| bad(e.to_string()))?;
    if &magic != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|e| bad(e.to_string()))?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    r.read_exact(&mut u32buf).map_err(|e| bad(e.to_string()))?;
    let n_entries = u32::from_le_bytes(u32buf) as usize;
    if n_entries > 1 << 20 {
        return Err(bad(format!("implausible entry count {n_entries}")));
    }

    let mut headers = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        r.read_exact(&mut u32buf).map_err(|e| bad(e.to_string()))?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        if name_len > 1 << 16 {
            return Err(bad(format!("implausible name length {name_len}")));
        }
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf).map_err(|e| bad(e.to_string()))?;
        let name = String::from_utf8(name_buf).map_err(|e| bad(e.to_string()))?;
        let mut meta = [0u8; 2];
        r.read_exact(&mut meta).map_err(|e| bad(e.to_string()))?;
        let (dtype, ndim) = (meta[0], meta[1] as usize);
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut d = [0u8; 8];
            r.read_exact(&mut d).map_err(|e| bad(e.to_string()))?;
            let dim = u64::from_le_bytes(d);
            if dim > 1 << 34 {
                return Err(bad(format!("implausible dim {dim}")));
            }
            shape.push(dim as usize);
        }
        headers.push((name, dtype, shape));
    }

    let mut bundle = Bundle::new();
    for (name, dtype, shape) in headers {
        let n: usize = shape.iter().product();
        let data = match dtype {
            0 => {
                let mut buf = vec![0u8; n * 4];
                r.read_exact(&mut buf).map_err(|e| bad(format!("truncated {name}: {e}")))?;
                ArrayData::F32(
                    buf.chunks_exact(4)
                        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                        .collect(),
                )
            }
            1 => {
                let mut buf = vec![0u8; n * 8];
                r.read_exact(&mut buf).map_err(|e| bad(format!("truncated {name}: {e}")))?;
                ArrayData::F64(
                    buf.chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                )
            }
            2 => {
                let mut buf = vec![0u8; n.div_ceil(8)];
                r.read_exact(&mut buf).map_err(|e| bad(format!("truncated {name}: {e}")))?;
                ArrayData::Bits((0..n).map(|i| buf[i / 8] >> (i % 8) & 1 == 1).collect())
            }
            other => return Err(bad(format!("unknown dtype {other}"))),
        };
        bundle.insert(name, ArrayEntry { shape, data });
    }
    Ok(bundle)
}
