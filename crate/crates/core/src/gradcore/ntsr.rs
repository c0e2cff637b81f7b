//! NTSR1 tensor container: magic `NTSR`, version u8 = 1, dtype u8
//! (0 = f32, 1 = f64), rank u8, extents as u32 little-endian, then raw
//! values little-endian. Every persisted weight blob uses this format.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gradcore::tensor::{Tensor, MAX_RANK};

const MAGIC: &[u8; 4] = b"NTSR";
const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

pub fn encode(tensor: &Tensor, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 4 * tensor.rank() + dtype.width() * tensor.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype.code());
    out.push(tensor.rank() as u8);
    for &e in tensor.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    match dtype {
        Dtype::F32 => {
            for &v in tensor.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let fail = |detail: &str| Error::format(origin, detail);
    if bytes.len() < 7 {
        return Err(fail("truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail("bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(fail(&format!("unsupported version {}", bytes[4])));
    }
    let dtype = Dtype::from_code(bytes[5]).ok_or_else(|| fail(&format!("bad dtype {}", bytes[5])))?;
    let rank = bytes[6] as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(fail(&format!("rank {rank} outside 1..={MAX_RANK}")));
    }
    let mut off = 7;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let end = off + 4;
        if end > bytes.len() {
            return Err(fail("truncated extents"));
        }
        shape.push(u32::from_le_bytes(bytes[off..end].try_into().unwrap()) as usize);
        off = end;
    }
    let numel: usize = shape.iter().product();
    let expected = off + numel * dtype.width();
    if bytes.len() != expected {
        return Err(fail(&format!(
            "payload length {} does not match extents (expected {expected})",
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(numel);
    match dtype {
        Dtype::F32 => {
            for chunk in bytes[off..].chunks_exact(4) {
                data.push(f64::from(f32::from_le_bytes(chunk.try_into().unwrap())));
            }
        }
        Dtype::F64 => {
            for chunk in bytes[off..].chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
        }
    }
    Tensor::new(shape, data).map_err(|e| fail(&e.to_string()))
}

pub fn save(tensor: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, encode(tensor, Dtype::F64))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load(path: &Path) -> Result<Tensor> {
    let bytes =
        fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic_and_version() {
        let t = Tensor::from_vec(vec![1.0, 2.0]);
        let mut bytes = encode(&t, Dtype::F64);
        bytes[0] = b'X';
        assert!(decode(&bytes, Path::new("t")).is_err());
        let mut bytes = encode(&t, Dtype::F64);
        bytes[4] = 9;
        assert!(decode(&bytes, Path::new("t")).is_err());
        let bytes = encode(&t, Dtype::F64);
        assert!(decode(&bytes[..bytes.len() - 1], Path::new("t")).is_err());
    }

    #[test]
    fn f32_narrowing_roundtrip() {
        let t = Tensor::from_vec(vec![0.5, -1.25, 3.0]);
        // exactly representable values survive the f32 path bit-for-bit
        let back = decode(&encode(&t, Dtype::F32), Path::new("t")).unwrap();
        assert_eq!(back.data(), t.data());
    }

    proptest! {
        #[test]
        fn f64_roundtrip_is_identity(values in prop::collection::vec(-1e6f64..1e6, 1..64)) {
            let rows = values.len();
            let t = Tensor::new(vec![rows], values).unwrap();
            let back = decode(&encode(&t, Dtype::F64), Path::new("t")).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert_eq!(back.data(), t.data());
        }
    }
}
