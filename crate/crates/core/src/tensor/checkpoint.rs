//! Weight checkpoint file: magic `SSCF`, a u32 format version, then one
//! record per parameter — u32 name length, UTF-8 name, u32 rank, u32 dims,
//! little-endian f64 payload — until end of file.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"SSCF";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("bad magic bytes (expected \"SSCF\")")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    BadVersion(u32),
    #[error("truncated checkpoint while reading {0}")]
    Truncated(String),
    #[error("parameter name is not valid UTF-8")]
    BadName,
}

fn io_err(path: &Path, source: io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes named tensors in sorted-name order so identical states produce
/// identical files.
pub fn save(path: &Path, params: &BTreeMap<String, Tensor>) -> Result<(), CheckpointError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (name, tensor) in params {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&buf).map_err(|e| io_err(path, e))
}

/// Reads every record; tensors come back as plain leaves (no grad flag).
pub fn load(path: &Path) -> Result<BTreeMap<String, Tensor>, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| io_err(path, e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8], CheckpointError> {
        if *pos + n > bytes.len() {
            return Err(CheckpointError::Truncated(what.to_string()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(take(&mut pos, 4, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let mut out = BTreeMap::new();
    while pos < bytes.len() {
        let name_len = u32::from_le_bytes(take(&mut pos, 4, "name length")?.try_into().unwrap());
        let name = std::str::from_utf8(take(&mut pos, name_len as usize, "name")?)
            .map_err(|_| CheckpointError::BadName)?
            .to_string();
        let rank = u32::from_le_bytes(take(&mut pos, 4, "rank")?.try_into().unwrap());
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(
                u32::from_le_bytes(take(&mut pos, 4, "dim")?.try_into().unwrap()) as usize,
            );
        }
        let n = numel(&shape);
        let payload = take(&mut pos, n * 8, &format!("payload of {name}"))?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::from_vec(&shape, data).expect("length computed from shape");
        out.insert(name, tensor);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_names_shapes_values() {
        let dir = std::env::temp_dir().join("sscf_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("w.ckpt");
        let mut params = BTreeMap::new();
        params.insert(
            "head.weight".to_string(),
            Tensor::from_vec(&[2, 3], vec![1.5, -2.0, 0.0, 3.25, 4.0, -0.125]).unwrap(),
        );
        params.insert(
            "head.bias".to_string(),
            Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap(),
        );
        save(&path, &params).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for (name, t) in &params {
            let l = &loaded[name];
            assert_eq!(l.shape(), t.shape());
            assert_eq!(l.data(), t.data());
        }
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = std::env::temp_dir().join("sscf_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn save_is_deterministic() {
        let dir = std::env::temp_dir().join("sscf_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let (p1, p2) = (dir.join("a.ckpt"), dir.join("b.ckpt"));
        let mut params = BTreeMap::new();
        params.insert("z".to_string(), Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        params.insert("a".to_string(), Tensor::from_vec(&[1], vec![3.0]).unwrap());
        save(&p1, &params).unwrap();
        save(&p2, &params).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
