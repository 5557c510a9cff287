//! Versioned binary checkpoint container.
//!
//! Layout: magic, format version, a JSON descriptor (architecture and
//! bookkeeping), then named f64 blobs. Loading refuses files whose magic,
//! version, or descriptor do not match the expectation of the caller.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MIRC";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_checkpoint(
    path: &Path,
    descriptor: &serde_json::Value,
    blobs: &[(String, ArrayD<f64>)],
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    // write-then-rename so a crash never leaves a truncated checkpoint behind
    let tmp = path.with_extension("tmp");
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION).map_err(io)?;
        let desc = serde_json::to_vec(descriptor).expect("descriptor serializes");
        w.write_u64::<LittleEndian>(desc.len() as u64).map_err(io)?;
        w.write_all(&desc).map_err(io)?;
        w.write_u64::<LittleEndian>(blobs.len() as u64).map_err(io)?;
        for (name, arr) in blobs {
            let nb = name.as_bytes();
            w.write_u64::<LittleEndian>(nb.len() as u64).map_err(io)?;
            w.write_all(nb).map_err(io)?;
            w.write_u64::<LittleEndian>(arr.ndim() as u64).map_err(io)?;
            for d in arr.shape() {
                w.write_u64::<LittleEndian>(*d as u64).map_err(io)?;
            }
            for v in arr.iter() {
                w.write_f64::<LittleEndian>(*v).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(serde_json::Value, Vec<(String, ArrayD<f64>)>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |reason: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))?;
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let desc_len = r.read_u64::<LittleEndian>().map_err(|_| bad("truncated descriptor"))? as usize;
    if desc_len > 64 << 20 {
        return Err(bad("descriptor length implausibly large"));
    }
    let mut desc_bytes = vec![0u8; desc_len];
    r.read_exact(&mut desc_bytes).map_err(|_| bad("truncated descriptor"))?;
    let descriptor: serde_json::Value =
        serde_json::from_slice(&desc_bytes).map_err(|_| bad("malformed descriptor JSON"))?;
    let n_blobs = r.read_u64::<LittleEndian>().map_err(|_| bad("truncated blob table"))? as usize;
    let mut blobs = Vec::with_capacity(n_blobs);
    for _ in 0..n_blobs {
        let name_len = r.read_u64::<LittleEndian>().map_err(|_| bad("truncated blob name"))? as usize;
        if name_len > 1 << 16 {
            return Err(bad("blob name implausibly large"));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|_| bad("truncated blob name"))?;
        let name = String::from_utf8(name_bytes).map_err(|_| bad("blob name not UTF-8"))?;
        let ndim = r.read_u64::<LittleEndian>().map_err(|_| bad("truncated blob shape"))? as usize;
        if ndim > 8 {
            return Err(bad("blob rank implausibly large"));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u64::<LittleEndian>().map_err(|_| bad("truncated blob shape"))? as usize);
        }
        let len: usize = shape.iter().product();
        if len > 1 << 30 {
            return Err(bad("blob size implausibly large"));
        }
        let mut data = vec![0.0f64; len];
        for v in data.iter_mut() {
            *v = r.read_f64::<LittleEndian>().map_err(|_| bad("truncated blob data"))?;
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|_| bad("bad blob shape"))?;
        blobs.push((name, arr));
    }
    Ok((descriptor, blobs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use serde_json::json;

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.mirc");
        let desc = json!({"arch": "test", "channels": [4, 2]});
        let blobs = vec![
            ("a".to_string(), arr2(&[[1.5, -2.25], [0.0, 1e-300]]).into_dyn()),
            ("b".to_string(), ArrayD::from_elem(IxDyn(&[3]), 0.125)),
        ];
        write_checkpoint(&path, &desc, &blobs).unwrap();
        let (d2, b2) = read_checkpoint(&path).unwrap();
        assert_eq!(desc, d2);
        assert_eq!(blobs, b2);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.mirc");
        let blobs = vec![("a".to_string(), ArrayD::from_elem(IxDyn(&[64]), 1.0))];
        write_checkpoint(&path, &serde_json::json!({}), &blobs).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn garbage_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Checkpoint { .. })));
    }
}
