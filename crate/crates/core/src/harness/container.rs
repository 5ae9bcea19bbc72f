//! Binary container shared by checkpoints and dataset files:
//! `GRT1`, a little-endian `u32` metadata length, JSON metadata carrying a
//! tensor manifest, then the little-endian `f64` payloads back to back.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, DTYPE_F64};

pub const MAGIC: &[u8; 4] = b"GRT1";

/// Metadata object and named tensors, in manifest order.
pub type Contents = (Map<String, Value>, Vec<(String, Tensor)>);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload section.
    pub offset: u64,
}

/// Writes `meta` (a JSON object) extended with a `tensors` manifest, then the
/// payloads in the given order.
pub fn write_container<W: Write>(w: &mut W, meta: Map<String, Value>, tensors: &[(String, &Tensor)]) -> Result<()> {
    let mut offset = 0u64;
    let manifest: Vec<TensorEntry> = tensors
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: DTYPE_F64.to_string(),
                offset,
            };
            offset += t.payload_bytes() as u64;
            e
        })
        .collect();
    let mut meta = meta;
    meta.insert("tensors".into(), serde_json::to_value(&manifest)?);
    let header = serde_json::to_vec(&Value::Object(meta))?;
    let len = u32::try_from(header.len()).map_err(|_| Error::Format("metadata exceeds 4 GiB".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&header)?;
    for (_, t) in tensors {
        t.write_le(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_container`]: the metadata object (manifest removed)
/// and the tensors in manifest order.
pub fn read_container<R: Read>(r: &mut R) -> Result<Contents> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("file too short for magic bytes".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic bytes {magic:?}")));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)
        .map_err(|_| Error::Format("file too short for metadata length".into()))?;
    let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut header)
        .map_err(|_| Error::Format("metadata truncated".into()))?;
    let mut meta = match serde_json::from_slice(&header)? {
        Value::Object(m) => m,
        _ => return Err(Error::Format("metadata is not a JSON object".into())),
    };
    let manifest: Vec<TensorEntry> = serde_json::from_value(
        meta.remove("tensors")
            .ok_or_else(|| Error::Format("metadata has no tensor manifest".into()))?,
    )?;
    let mut offset = 0u64;
    let mut out = Vec::with_capacity(manifest.len());
    for e in manifest {
        if e.dtype != DTYPE_F64 {
            return Err(Error::Format(format!(
                "tensor {}: unsupported dtype {:?}",
                e.name, e.dtype
            )));
        }
        if e.offset != offset {
            return Err(Error::Format(format!(
                "tensor {}: offset {} does not follow the previous payload at {offset}",
                e.name, e.offset
            )));
        }
        let t = Tensor::read_le(&e.shape, r).map_err(|err| match err {
            Error::Io(_) => Error::Format(format!("tensor {}: payload truncated", e.name)),
            other => other,
        })?;
        offset += t.payload_bytes() as u64;
        out.push((e.name, t));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after the last payload".into()));
    }
    Ok((meta, out))
}

pub fn save_container(path: &Path, meta: Map<String, Value>, tensors: &[(String, &Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_container(&mut w, meta, tensors)
}

pub fn load_container(path: &Path) -> Result<Contents> {
    let mut r = BufReader::new(File::open(path)?);
    read_container(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<u8> {
        let a = Tensor::new(&[2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap();
        let b = Tensor::scalar(7.0);
        let mut meta = Map::new();
        meta.insert("kind".into(), Value::from("test"));
        let mut buf = Vec::new();
        write_container(&mut buf, meta, &[("a".into(), &a), ("b".into(), &b)]).unwrap();
        buf
    }

    #[test]
    fn layout_and_round_trip() {
        let buf = sample();
        assert_eq!(&buf[..4], b"GRT1");
        let len = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
        let meta: Value = serde_json::from_slice(&buf[8..8 + len]).unwrap();
        assert_eq!(meta["tensors"][1]["offset"], 32);
        assert_eq!(meta["tensors"][0]["dtype"], "f64");
        assert_eq!(buf.len(), 8 + len + 40);
        let (m, ts) = read_container(&mut buf.as_slice()).unwrap();
        assert_eq!(m["kind"], "test");
        assert_eq!(ts[0].0, "a");
        assert_eq!(ts[0].1.data()[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(ts[1].1.shape(), &[] as &[usize]);
    }

    #[test]
    fn corrupt_files_rejected() {
        let buf = sample();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_container(&mut bad.as_slice()), Err(Error::Format(_))));
        let short = &buf[..buf.len() - 3];
        assert!(matches!(read_container(&mut &short[..]), Err(Error::Format(_))));
        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(read_container(&mut long.as_slice()), Err(Error::Format(_))));
    }
}
