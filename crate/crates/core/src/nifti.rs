//! Single-file NIfTI-1 (`.nii`, `.nii.gz`) reader and writer.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use thiserror::Error;

use crate::volume::{BinaryMask3, DataType, Orientation, Volume, VolumeError};

pub const HEADER_SIZE: usize = 348;
/// Data offset used for written files: header plus a 4-byte empty extension flag.
pub const VOX_OFFSET: usize = 352;

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}: not a single-file NIfTI-1 image")]
    BadMagic([u8; 4]),
    #[error("two-file NIfTI (.hdr/.img) is not supported; convert to a single .nii or .nii.gz")]
    TwoFileVariant,
    #[error("unsupported datatype code {0} (supported: 2 = uint8, 4 = int16, 16 = float32)")]
    UnsupportedDatatype(i16),
    #[error("truncated file: need {expected} bytes, found {got}")]
    Truncated { expected: usize, got: usize },
    #[error("unsupported dimensions: {0}")]
    BadDimensions(String),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("voxel value {value} is not representable as {dtype:?}")]
    NotRepresentable { dtype: DataType, value: f32 },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T, E = NiftiError> = std::result::Result<T, E>;

/// Numeric header fields as (offset, width, count), used for byte swapping.
const NUMERIC_FIELDS: [(usize, usize, usize); 14] = [
    (0, 4, 1),
    (32, 4, 1),
    (36, 2, 1),
    (40, 2, 8),
    (56, 4, 3),
    (68, 2, 4),
    (76, 4, 8),
    (108, 4, 3),
    (120, 2, 1),
    (124, 4, 4),
    (140, 4, 2),
    (252, 2, 2),
    (256, 4, 6),
    (280, 4, 12),
];

fn swap_header(h: &mut [u8; HEADER_SIZE]) {
    for &(off, width, count) in &NUMERIC_FIELDS {
        for k in 0..count {
            let s = off + k * width;
            h[s..s + width].reverse();
        }
    }
}

fn i16_at(h: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([h[off], h[off + 1]])
}

fn f32_at(h: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(h[off..off + 4].try_into().unwrap())
}

fn put_i16(h: &mut [u8], off: usize, v: i16) {
    h[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_i32(h: &mut [u8], off: usize, v: i32) {
    h[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(h: &mut [u8], off: usize, v: f32) {
    h[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1F && bytes[1] == 0x8B
}

fn reject_two_file(path: &Path) -> Result<()> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    if [".hdr", ".img", ".hdr.gz", ".img.gz"]
        .iter()
        .any(|e| name.ends_with(e))
    {
        return Err(NiftiError::TwoFileVariant);
    }
    Ok(())
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    reject_two_file(path)?;
    parse_nifti(&fs::read(path)?)
}

/// Parses an in-memory `.nii` or gzip-compressed `.nii.gz` image.
pub fn parse_nifti(bytes: &[u8]) -> Result<Volume> {
    if is_gzip(bytes) {
        let mut raw = Vec::new();
        GzDecoder::new(bytes).read_to_end(&mut raw)?;
        return parse_raw(&raw);
    }
    parse_raw(bytes)
}

fn parse_raw(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::Truncated {
            expected: HEADER_SIZE,
            got: bytes.len(),
        });
    }
    let mut h = [0u8; HEADER_SIZE];
    h.copy_from_slice(&bytes[..HEADER_SIZE]);
    let swapped = match (
        i32::from_le_bytes(h[0..4].try_into().unwrap()),
        i32::from_be_bytes(h[0..4].try_into().unwrap()),
    ) {
        (348, _) => false,
        (_, 348) => true,
        (v, _) => {
            return Err(NiftiError::InvalidHeader(format!(
                "sizeof_hdr is {v}, expected 348"
            )))
        }
    };
    if swapped {
        swap_header(&mut h);
    }
    let magic: [u8; 4] = h[344..348].try_into().unwrap();
    match &magic {
        b"n+1\0" => {}
        b"ni1\0" => return Err(NiftiError::TwoFileVariant),
        _ => return Err(NiftiError::BadMagic(magic)),
    }

    let ndim = i16_at(&h, 40);
    if !(1..=7).contains(&ndim) {
        return Err(NiftiError::BadDimensions(format!("dim[0] = {ndim}")));
    }
    let mut dims: Vec<i16> = (1..=ndim as usize)
        .map(|k| i16_at(&h, 40 + 2 * k))
        .collect();
    while dims.len() > 3 && dims.last() == Some(&1) {
        dims.pop();
    }
    if dims.len() != 3 {
        return Err(NiftiError::BadDimensions(format!(
            "expected a 3D volume, got dims {dims:?}"
        )));
    }
    if dims.iter().any(|&d| d < 1) {
        return Err(NiftiError::BadDimensions(format!(
            "non-positive size in {dims:?}"
        )));
    }
    let dims = [dims[0] as usize, dims[1] as usize, dims[2] as usize];

    let code = i16_at(&h, 70);
    let dtype = DataType::from_nifti_code(code).ok_or(NiftiError::UnsupportedDatatype(code))?;
    let vox_offset = f32_at(&h, 108);
    if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32) {
        return Err(NiftiError::InvalidHeader(format!(
            "vox_offset {vox_offset}"
        )));
    }
    let start = vox_offset as usize;
    let n: usize = dims.iter().product();
    let end = start + n * dtype.bytes();
    if bytes.len() < end {
        return Err(NiftiError::Truncated {
            expected: end,
            got: bytes.len(),
        });
    }
    let payload = &bytes[start..end];
    let mut data: Vec<f32> = match dtype {
        DataType::U8 => payload.iter().map(|&b| b as f32).collect(),
        DataType::I16 => payload
            .chunks_exact(2)
            .map(|c| {
                let b = [c[0], c[1]];
                (if swapped {
                    i16::from_be_bytes(b)
                } else {
                    i16::from_le_bytes(b)
                }) as f32
            })
            .collect(),
        DataType::F32 => payload
            .chunks_exact(4)
            .map(|c| {
                let b = [c[0], c[1], c[2], c[3]];
                if swapped {
                    f32::from_be_bytes(b)
                } else {
                    f32::from_le_bytes(b)
                }
            })
            .collect(),
    };
    let (slope, inter) = (f32_at(&h, 112), f32_at(&h, 116));
    if slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0) {
        let inter = if inter.is_finite() { inter } else { 0.0 };
        data.iter_mut().for_each(|v| *v = *v * slope + inter);
    }

    let spacing = [f32_at(&h, 80), f32_at(&h, 84), f32_at(&h, 88)].map(|s| {
        if s.is_finite() && s > 0.0 {
            s
        } else {
            1.0
        }
    });
    let qfac = f32_at(&h, 76);
    let orientation = Orientation {
        qform_code: i16_at(&h, 252),
        sform_code: i16_at(&h, 254),
        qfac: if qfac == -1.0 { -1.0 } else { 1.0 },
        quatern: [f32_at(&h, 256), f32_at(&h, 260), f32_at(&h, 264)],
        qoffset: [f32_at(&h, 268), f32_at(&h, 272), f32_at(&h, 276)],
        srow: [0, 1, 2].map(|r| [0, 1, 2, 3].map(|c| f32_at(&h, 280 + 16 * r + 4 * c))),
    };
    let mut v = Volume::new(dims, spacing, data)?;
    v.orientation = orientation;
    v.source_dtype = dtype;
    v.header = Some(Box::new(h));
    Ok(v)
}

/// Header for `volume` stored as `dtype`. Fields this module does not
/// interpret are copied from the volume's source header when present.
pub fn build_header(volume: &Volume, dtype: DataType) -> [u8; HEADER_SIZE] {
    let mut h = volume
        .header
        .as_deref()
        .copied()
        .unwrap_or([0u8; HEADER_SIZE]);
    put_i32(&mut h, 0, HEADER_SIZE as i32);
    let d = volume.dims();
    let dim = [3, d[0] as i16, d[1] as i16, d[2] as i16, 1, 1, 1, 1];
    for (k, v) in dim.iter().enumerate() {
        put_i16(&mut h, 40 + 2 * k, *v);
    }
    put_i16(&mut h, 70, dtype.nifti_code());
    put_i16(&mut h, 72, (dtype.bytes() * 8) as i16);
    let o = &volume.orientation;
    put_f32(&mut h, 76, o.qfac);
    for (k, s) in volume.spacing().iter().enumerate() {
        put_f32(&mut h, 80 + 4 * k, *s);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    put_f32(&mut h, 116, 0.0);
    put_i16(&mut h, 252, o.qform_code);
    put_i16(&mut h, 254, o.sform_code);
    for k in 0..3 {
        put_f32(&mut h, 256 + 4 * k, o.quatern[k]);
        put_f32(&mut h, 268 + 4 * k, o.qoffset[k]);
    }
    for r in 0..3 {
        for c in 0..4 {
            put_f32(&mut h, 280 + 16 * r + 4 * c, o.srow[r][c]);
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

/// Little-endian `.nii` bytes with voxels stored as `dtype`.
pub fn encode_nifti(volume: &Volume, dtype: DataType) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(VOX_OFFSET + volume.len() * dtype.bytes());
    out.extend_from_slice(&build_header(volume, dtype));
    out.extend_from_slice(&[0u8; VOX_OFFSET - HEADER_SIZE]);
    let bad = |value: f32| NiftiError::NotRepresentable { dtype, value };
    match dtype {
        DataType::F32 => volume
            .data()
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        DataType::U8 => {
            for &v in volume.data() {
                if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                    return Err(bad(v));
                }
                out.push(v as u8);
            }
        }
        DataType::I16 => {
            for &v in volume.data() {
                if v.fract() != 0.0 || !(-32768.0..=32767.0).contains(&v) {
                    return Err(bad(v));
                }
                out.extend_from_slice(&(v as i16).to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Writes `volume` as float32.
pub fn write_nifti(volume: &Volume, path: impl AsRef<Path>, gzip: bool) -> Result<()> {
    write_nifti_as(volume, path, gzip, DataType::F32)
}

pub fn write_nifti_as(
    volume: &Volume,
    path: impl AsRef<Path>,
    gzip: bool,
    dtype: DataType,
) -> Result<()> {
    let path = path.as_ref();
    reject_two_file(path)?;
    let bytes = encode_nifti(volume, dtype)?;
    if gzip {
        let mut enc = GzEncoder::new(fs::File::create(path)?, Compression::default());
        enc.write_all(&bytes)?;
        enc.finish()?;
    } else {
        fs::write(path, bytes)?;
    }
    Ok(())
}

/// Writes a mask as uint8 {0, 1} with `template`'s geometry.
pub fn write_mask(
    mask: &BinaryMask3,
    template: &Volume,
    path: impl AsRef<Path>,
    gzip: bool,
) -> Result<()> {
    write_nifti_as(&mask.to_volume(template)?, path, gzip, DataType::U8)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask3> {
    Ok(BinaryMask3::from_volume(&read_nifti(path)?))
}
