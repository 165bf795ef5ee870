use super::{Element, ParamSet, Tensor};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SFW1";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic (not a parameter checkpoint)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint file")]
    Truncated,
    #[error("parameter name is not valid UTF-8")]
    InvalidName,
}

/// Write parameters in the binary checkpoint layout: magic, version u32,
/// count u64, then per parameter name (u16 length + UTF-8), rank u8,
/// dims u32 each, 32-bit little-endian values.
pub fn save_params<E: Element>(
    path: impl AsRef<Path>,
    params: &ParamSet<E>,
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for (name, tensor) in params.iter() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[tensor.shape().len() as u8])?;
        for &dim in tensor.shape() {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            let f = v.to_f64().unwrap() as f32;
            w.write_all(&f.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_params<E: Element>(path: impl AsRef<Path>) -> Result<ParamSet<E>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = read_u64(&mut r)?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes)?;
        let name = String::from_utf8(name_bytes).map_err(|_| CheckpointError::InvalidName)?;
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut buf = [0u8; 4];
            read_exact(&mut r, &mut buf)?;
            data.push(E::from_f64(f32::from_le_bytes(buf) as f64).unwrap());
        }
        params.insert(name, Tensor::new(shape, data).expect("consistent on-disk shape"));
    }
    Ok(params)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated
        } else {
            CheckpointError::Io(e)
        }
    })
}

fn read_u16(r: &mut impl Read) -> Result<u16, CheckpointError> {
    let mut buf = [0u8; 2];
    read_exact(r, &mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64, CheckpointError> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_names_shapes_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.sfw");
        let mut p = ParamSet::<f32>::new();
        p.insert("a.w", Tensor::matrix(2, 3, vec![1.0, -2.5, 0.0, 3.5, 4.0, -0.125]).unwrap());
        p.insert("a.b", Tensor::vector(vec![0.5, -0.5]));
        save_params(&path, &p).unwrap();
        let q: ParamSet<f32> = load_params(&path).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.sfw");
        std::fs::write(&path, b"XXXX\x01\x00\x00\x00").unwrap();
        assert!(matches!(load_params::<f32>(&path), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn truncation_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.sfw");
        let mut p = ParamSet::<f32>::new();
        p.insert("w", Tensor::vector(vec![1.0; 16]));
        save_params(&path, &p).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(load_params::<f32>(&path), Err(CheckpointError::Truncated)));
    }
}
