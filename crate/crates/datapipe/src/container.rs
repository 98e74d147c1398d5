//! Binary container shared by granule and tile files.
//!
//! Layout: 8-byte magic, `u64` little-endian header length, UTF-8 JSON header
//! `{"meta": …, "arrays": [{"name", "dtype", "shape", "offset"}]}`, then the
//! payload. Offsets are relative to the start of the payload; arrays are
//! little-endian, row-major, packed in directory order.

use std::fs;
use std::path::Path;

use hyperfm::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl ArrayData {
    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F32(_) => "f32",
            ArrayData::U8(_) => "u8",
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header<M> {
    meta: M,
    arrays: Vec<Entry>,
}

/// Encodes `meta` and `arrays` into container bytes.
pub fn encode<M: Serialize>(magic: &[u8; 8], meta: &M, arrays: &[Array]) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(arrays.len());
    for a in arrays {
        if a.shape.iter().product::<usize>() != a.data.len() {
            return Err(Error::Data(format!(
                "array {} has {} elements for shape {:?}",
                a.name,
                a.data.len(),
                a.shape
            )));
        }
        entries.push(Entry {
            name: a.name.clone(),
            dtype: a.data.dtype().into(),
            shape: a.shape.clone(),
            offset: payload.len() as u64,
        });
        match &a.data {
            ArrayData::F32(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U8(v) => payload.extend_from_slice(v),
        }
    }
    let header = serde_json::to_vec(&Header { meta, arrays: entries })?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Decodes container bytes, checking the magic and every array's bounds.
pub fn decode<M: for<'de> Deserialize<'de>>(magic: &[u8; 8], bytes: &[u8]) -> Result<(M, Vec<Array>)> {
    let bad = |msg: String| Error::Data(msg);
    if bytes.len() < 16 || &bytes[..8] != magic {
        return Err(bad(format!("missing {} magic", String::from_utf8_lossy(magic))));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("header runs past end of file".into()))?;
    let header: Header<M> = serde_json::from_slice(&bytes[16..body])?;
    let payload = &bytes[body..];
    let arrays = header
        .arrays
        .into_iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let width = match e.dtype.as_str() {
                "f32" => 4,
                "u8" => 1,
                other => return Err(bad(format!("array {}: unsupported dtype {other}", e.name))),
            };
            let start = e.offset as usize;
            let raw = start
                .checked_add(n * width)
                .and_then(|end| payload.get(start..end))
                .ok_or_else(|| bad(format!("array {} runs past end of payload", e.name)))?;
            let data = if width == 4 {
                ArrayData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                )
            } else {
                ArrayData::U8(raw.to_vec())
            };
            Ok(Array {
                name: e.name,
                shape: e.shape,
                data,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((header.meta, arrays))
}

pub fn write<M: Serialize>(path: &Path, magic: &[u8; 8], meta: &M, arrays: &[Array]) -> Result<()> {
    fs::write(path, encode(magic, meta, arrays)?)?;
    Ok(())
}

pub fn read<M: for<'de> Deserialize<'de>>(path: &Path, magic: &[u8; 8]) -> Result<(M, Vec<Array>)> {
    decode(magic, &fs::read(path)?).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Reads only the header metadata.
pub fn read_meta<M: for<'de> Deserialize<'de>>(path: &Path, magic: &[u8; 8]) -> Result<M> {
    use std::io::Read;
    let mut f = fs::File::open(path)?;
    let mut pre = [0u8; 16];
    f.read_exact(&mut pre)
        .map_err(|_| Error::Data(format!("{}: truncated header", path.display())))?;
    if &pre[..8] != magic {
        return Err(Error::Data(format!(
            "{}: missing {} magic",
            path.display(),
            String::from_utf8_lossy(magic)
        )));
    }
    let n = u64::from_le_bytes(pre[8..].try_into().expect("8 bytes")) as usize;
    let mut header = vec![0u8; n];
    f.read_exact(&mut header)
        .map_err(|_| Error::Data(format!("{}: truncated header", path.display())))?;
    let h: Header<M> = serde_json::from_slice(&header)?;
    Ok(h.meta)
}

/// Removes the array called `name`, checking its shape and element type.
pub fn take_f32(arrays: &mut Vec<Array>, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
    match take(arrays, name, shape)? {
        ArrayData::F32(v) => Ok(v),
        ArrayData::U8(_) => Err(Error::Data(format!("array {name} must be f32"))),
    }
}

pub fn take_u8(arrays: &mut Vec<Array>, name: &str, shape: &[usize]) -> Result<Vec<u8>> {
    match take(arrays, name, shape)? {
        ArrayData::U8(v) => Ok(v),
        ArrayData::F32(_) => Err(Error::Data(format!("array {name} must be u8"))),
    }
}

fn take(arrays: &mut Vec<Array>, name: &str, shape: &[usize]) -> Result<ArrayData> {
    let i = arrays
        .iter()
        .position(|a| a.name == name)
        .ok_or_else(|| Error::Data(format!("array {name} is missing")))?;
    let a = arrays.remove(i);
    if a.shape != shape {
        return Err(Error::Data(format!("array {name}: shape {:?}, expected {shape:?}", a.shape)));
    }
    Ok(a.data)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAGIC: &[u8; 8] = b"TESTBLOB";

    #[test]
    fn round_trip_preserves_nan_bits() {
        let arrays = vec![
            Array {
                name: "x".into(),
                shape: vec![2, 2],
                data: ArrayData::F32(vec![1.5, f32::NAN, -0.0, 3.0e-39]),
            },
            Array {
                name: "q".into(),
                shape: vec![3],
                data: ArrayData::U8(vec![0, 1, 255]),
            },
        ];
        let bytes = encode(MAGIC, &serde_json::json!({"k": 1}), &arrays).unwrap();
        let (meta, mut back): (serde_json::Value, _) = decode(MAGIC, &bytes).unwrap();
        assert_eq!(meta["k"], 1);
        let x = take_f32(&mut back, "x", &[2, 2]).unwrap();
        let bits: Vec<u32> = x.iter().map(|v| v.to_bits()).collect();
        let want: Vec<u32> = [1.5f32, f32::NAN, -0.0, 3.0e-39].iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, want);
        assert_eq!(take_u8(&mut back, "q", &[3]).unwrap(), vec![0, 1, 255]);
    }

    #[test]
    fn header_is_length_prefixed_json() {
        let bytes = encode(MAGIC, &1u8, &[]).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let v: serde_json::Value = serde_json::from_slice(&bytes[16..16 + n]).unwrap();
        assert_eq!(v["meta"], 1);
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        let arrays = vec![Array {
            name: "x".into(),
            shape: vec![4],
            data: ArrayData::F32(vec![0.0; 4]),
        }];
        let bytes = encode(MAGIC, &0u8, &arrays).unwrap();
        assert!(decode::<u8>(b"OTHERMAG", &bytes).is_err());
        assert!(decode::<u8>(MAGIC, &bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let arrays = vec![Array {
            name: "x".into(),
            shape: vec![3],
            data: ArrayData::U8(vec![0; 4]),
        }];
        assert!(encode(MAGIC, &0u8, &arrays).is_err());
    }
}
