//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes  "AVAE"
//! version      u32
//! descriptor   u32 length + UTF-8 architecture JSON
//! loss mode    u32 length + UTF-8
//! norm tag     u32 length + UTF-8
//! count        u32
//! per tensor:  u32 length + UTF-8 name, u8 dtype (1 = f32, 2 = f64),
//!              u32 rank, rank × u32 dims, raw little-endian payload
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::model::{ModelError, VaeArchitecture, VaeParams};
use crate::objectives::LossMode;
use crate::tensor::{Scalar, Shape4, Tensor4};

pub const MAGIC: &[u8; 4] = b"AVAE";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic {0:?}: not a checkpoint")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0} (this build reads {VERSION})")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("tensor '{name}' has dtype code {found}, expected {expected}")]
    Dtype {
        name: String,
        found: u8,
        expected: u8,
    },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated
        } else {
            CheckpointError::Io(e)
        }
    }
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

/// Everything stored beside the tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub architecture: VaeArchitecture,
    pub loss: LossMode,
    pub normalization: String,
}

fn put_str(out: &mut impl Write, s: &str) -> io::Result<()> {
    out.write_all(&(s.len() as u32).to_le_bytes())?;
    out.write_all(s.as_bytes())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_str(r: &mut impl Read) -> Result<String> {
    let len = get_u32(r)? as usize;
    let mut b = Vec::new();
    r.take(len as u64).read_to_end(&mut b)?;
    if b.len() != len {
        return Err(CheckpointError::Truncated);
    }
    String::from_utf8(b).map_err(|_| CheckpointError::Malformed("string is not UTF-8".into()))
}

pub fn write_checkpoint<T: Scalar>(
    out: &mut impl Write,
    params: &VaeParams<T>,
    meta: &CheckpointMeta,
) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    put_str(out, &meta.architecture.descriptor())?;
    put_str(out, meta.loss.as_str())?;
    put_str(out, &meta.normalization)?;
    out.write_all(&(params.tensors().len() as u32).to_le_bytes())?;
    for (name, t) in params.tensors() {
        put_str(out, name)?;
        out.write_all(&[T::DTYPE])?;
        let s = t.shape();
        out.write_all(&4u32.to_le_bytes())?;
        for d in [s.n, s.c, s.h, s.w] {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * std::mem::size_of::<T>());
        for v in t.data() {
            match T::DTYPE {
                1 => buf.extend_from_slice(&v.to_f32().unwrap().to_le_bytes()),
                _ => buf.extend_from_slice(&v.to_f64().unwrap().to_le_bytes()),
            }
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

/// Reads a checkpoint and checks it against `expected`.
pub fn read_checkpoint<T: Scalar>(
    r: &mut impl Read,
    expected: &VaeArchitecture,
) -> Result<(VaeParams<T>, CheckpointMeta)> {
    read_with(r, Some(expected))
}

/// Reads a checkpoint whose architecture is taken from its own descriptor.
pub fn read_checkpoint_any<T: Scalar>(r: &mut impl Read) -> Result<(VaeParams<T>, CheckpointMeta)> {
    read_with(r, None)
}

fn read_with<T: Scalar>(
    r: &mut impl Read,
    expected: Option<&VaeArchitecture>,
) -> Result<(VaeParams<T>, CheckpointMeta)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let descriptor = get_str(r)?;
    let architecture: VaeArchitecture = serde_json::from_str(&descriptor)
        .map_err(|e| CheckpointError::Malformed(format!("architecture descriptor: {e}")))?;
    if expected.is_some_and(|e| e != &architecture) {
        return Err(CheckpointError::ArchitectureMismatch(
            "stored architecture descriptor differs from the expected one".into(),
        ));
    }
    let loss: LossMode = get_str(r)?.parse().map_err(CheckpointError::Malformed)?;
    let normalization = get_str(r)?;

    let count = get_u32(r)? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name = get_str(r)?;
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype)?;
        if dtype[0] != T::DTYPE {
            return Err(CheckpointError::Dtype {
                name,
                found: dtype[0],
                expected: T::DTYPE,
            });
        }
        let rank = get_u32(r)?;
        if rank != 4 {
            return Err(CheckpointError::Malformed(format!(
                "tensor '{name}' has rank {rank}"
            )));
        }
        let mut d = [0usize; 4];
        for x in &mut d {
            *x = get_u32(r)? as usize;
        }
        let shape = Shape4::new(d[0], d[1], d[2], d[3]);
        let width = std::mem::size_of::<T>();
        let bytes = shape
            .numel()
            .checked_mul(width)
            .ok_or(CheckpointError::Truncated)?;
        let mut buf = Vec::new();
        r.take(bytes as u64).read_to_end(&mut buf)?;
        if buf.len() != bytes {
            return Err(CheckpointError::Truncated);
        }
        let data: Vec<T> = buf
            .chunks_exact(width)
            .map(|c| match width {
                4 => T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64),
                _ => T::lit(f64::from_le_bytes(c.try_into().unwrap())),
            })
            .collect();
        let t = Tensor4::from_vec(shape, data)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        tensors.push((name, t));
    }
    let params = VaeParams::from_named(&architecture, tensors).map_err(|e| match e {
        ModelError::ParamShape { .. } | ModelError::ParamCount { .. } => {
            CheckpointError::ArchitectureMismatch(e.to_string())
        }
        other => CheckpointError::Malformed(other.to_string()),
    })?;
    Ok((
        params,
        CheckpointMeta {
            architecture,
            loss,
            normalization,
        },
    ))
}

pub fn save_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    params: &VaeParams<T>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params, meta)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    expected: &VaeArchitecture,
) -> Result<(VaeParams<T>, CheckpointMeta)> {
    let bytes = fs::read(path)?;
    read_checkpoint(&mut bytes.as_slice(), expected)
}

pub fn load_checkpoint_any<T: Scalar>(
    path: impl AsRef<Path>,
) -> Result<(VaeParams<T>, CheckpointMeta)> {
    let bytes = fs::read(path)?;
    read_checkpoint_any(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            architecture: VaeArchitecture::default(),
            loss: LossMode::Ssim,
            normalization: "max95-clamp".into(),
        }
    }

    fn encoded() -> (VaeParams<f32>, Vec<u8>) {
        let p = VaeArchitecture::default().init::<f32>(4);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p, &meta()).unwrap();
        (p, buf)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (p, buf) = encoded();
        let (q, m) =
            read_checkpoint::<f32>(&mut buf.as_slice(), &VaeArchitecture::default()).unwrap();
        assert_eq!(m, meta());
        for ((na, a), (nb, b)) in p.tensors().iter().zip(q.tensors()) {
            assert_eq!(na, nb);
            assert!(a
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn distinct_errors() {
        let arch = VaeArchitecture::default();
        let (_, buf) = encoded();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_checkpoint::<f32>(&mut bad.as_slice(), &arch),
            Err(CheckpointError::BadMagic(_))
        ));
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(
            read_checkpoint::<f32>(&mut bad.as_slice(), &arch),
            Err(CheckpointError::UnsupportedVersion(9))
        ));
        assert!(matches!(
            read_checkpoint::<f32>(&mut &buf[..buf.len() - 3], &arch),
            Err(CheckpointError::Truncated)
        ));
        let mut other = arch.clone();
        other.leaky_slope = 0.2;
        assert!(matches!(
            read_checkpoint::<f32>(&mut buf.as_slice(), &other),
            Err(CheckpointError::ArchitectureMismatch(_))
        ));
        assert!(matches!(
            read_checkpoint::<f64>(&mut buf.as_slice(), &arch),
            Err(CheckpointError::Dtype { .. })
        ));
    }
}
