//! Intensity normalization, Otsu brain masking, bias flattening and patch
//! sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Shape4, Tensor4};
use crate::volume::{BinaryMask3, SliceAxis, Volume, VolumeError};

/// Tag recorded with every normalized artifact: scale by 0.95 × max voxel,
/// clamp to [0, 1].
pub const NORMALIZATION_TAG: &str = "max95-clamp";
pub const PATCH_SIZE: usize = 32;
pub const OTSU_BINS: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("cannot normalize: maximum intensity is {0}, must be > 0")]
    NonPositiveMax(f32),
    #[error("Otsu threshold needs at least two distinct values")]
    ConstantInput,
    #[error("no in-mask center admits a full {size}x{size} patch")]
    NoValidPatch { size: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T, E = PreprocessError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub scale: f32,
    /// Whether any voxel fell outside [0, 1] before clamping.
    pub clamped: bool,
    pub convention: String,
}

impl NormalizationRecord {
    pub fn with_scale(scale: f32) -> Self {
        NormalizationRecord {
            scale,
            clamped: false,
            convention: NORMALIZATION_TAG.to_string(),
        }
    }

    /// Applies this record's scale to another volume.
    pub fn apply(&self, volume: &Volume) -> Result<(Volume, bool)> {
        let s = self.scale as f64;
        let mut clamped = false;
        let data = volume
            .data()
            .iter()
            .map(|&v| {
                let x = v as f64 / s;
                if !(0.0..=1.0).contains(&x) {
                    clamped = true;
                }
                x.clamp(0.0, 1.0) as f32
            })
            .collect();
        Ok((volume.with_data(data)?, clamped))
    }
}

pub fn normalize(volume: &Volume) -> Result<(Volume, NormalizationRecord)> {
    let max = volume.max();
    if !(max > 0.0) {
        return Err(PreprocessError::NonPositiveMax(max));
    }
    let mut record = NormalizationRecord::with_scale(0.95 * max);
    let (out, clamped) = record.apply(volume)?;
    record.clamped = clamped;
    Ok((out, record))
}

pub fn denormalize(volume: &Volume, record: &NormalizationRecord) -> Result<Volume> {
    let s = record.scale;
    Ok(volume.with_data(volume.data().iter().map(|&v| v * s).collect())?)
}

/// Between-class variance of the cut placing bins `[0, k)` in the lower class.
fn between_class_variance(n0: u64, s0: u64, total: u64, sum: u64) -> f64 {
    let n1 = total - n0;
    if n0 == 0 || n1 == 0 {
        return 0.0;
    }
    let w0 = n0 as f64 / total as f64;
    let w1 = n1 as f64 / total as f64;
    let mu0 = s0 as f64 / n0 as f64;
    let mu1 = (sum - s0) as f64 / n1 as f64;
    w0 * w1 * (mu0 - mu1) * (mu0 - mu1)
}

/// Best cut `k ∈ 1..=255` of a 256-bin histogram; ties go to the lowest `k`.
pub fn otsu_cut(hist: &[u64; OTSU_BINS]) -> usize {
    let total: u64 = hist.iter().sum();
    let sum: u64 = hist.iter().enumerate().map(|(i, &h)| i as u64 * h).sum();
    let (mut n0, mut s0) = (0u64, 0u64);
    let mut best = (f64::NEG_INFINITY, 1);
    for k in 1..OTSU_BINS {
        n0 += hist[k - 1];
        s0 += (k as u64 - 1) * hist[k - 1];
        let v = between_class_variance(n0, s0, total, sum);
        if v > best.0 {
            best = (v, k);
        }
    }
    best.1
}

/// Otsu threshold of `values` on a 256-bin histogram over `[min, max]`.
/// Values strictly above the threshold form the upper class.
pub fn otsu_threshold(values: &[f32]) -> Result<f32> {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    if values.is_empty() || !(hi > lo) {
        return Err(PreprocessError::ConstantInput);
    }
    let width = (hi as f64 - lo as f64) / OTSU_BINS as f64;
    let mut hist = [0u64; OTSU_BINS];
    for &v in values {
        let b = ((v as f64 - lo as f64) / width) as usize;
        hist[b.min(OTSU_BINS - 1)] += 1;
    }
    let k = otsu_cut(&hist);
    Ok((lo as f64 + k as f64 * width) as f32)
}

/// Otsu foreground reduced to its largest 6-connected component.
pub fn brain_mask(volume: &Volume) -> Result<BinaryMask3> {
    let t = otsu_threshold(volume.data())?;
    let fg = BinaryMask3::new(
        volume.dims(),
        volume.data().iter().map(|&v| v > t).collect(),
    )?;
    Ok(fg.largest_component())
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Separable Gaussian smoothing; weights are renormalized where the kernel
/// leaves the grid, so constant volumes stay constant.
pub fn gaussian_smooth(volume: &Volume, sigma: f64) -> Result<Volume> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(PreprocessError::InvalidArgument(format!(
            "sigma must be > 0, got {sigma}"
        )));
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let dims = volume.dims();
    let mut buf: Vec<f64> = volume.data().iter().map(|&v| v as f64).collect();
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let (n, stride) = (dims[axis] as isize, strides[axis]);
        let mut out = vec![0.0; buf.len()];
        for (i, o) in out.iter_mut().enumerate() {
            let pos = ((i / stride) % dims[axis]) as isize;
            let (mut acc, mut wsum) = (0.0, 0.0);
            for (j, w) in k.iter().enumerate() {
                let q = pos + j as isize - r;
                if q >= 0 && q < n {
                    acc += w * buf[(i as isize + (q - pos) * stride as isize) as usize];
                    wsum += w;
                }
            }
            *o = acc / wsum;
        }
        buf = out;
    }
    Ok(volume.with_data(buf.into_iter().map(|v| v as f32).collect())?)
}

/// Divides out a smooth multiplicative field estimated by Gaussian smoothing.
/// The divisor is floored at 1e-3 of the smoothed maximum.
pub fn flatten_bias(volume: &Volume, kernel_sigma: f64) -> Result<Volume> {
    let g = gaussian_smooth(volume, kernel_sigma)?;
    let gmax = g.max() as f64;
    let eps = (1e-3 * gmax).max(f64::MIN_POSITIVE);
    let mean = g.data().iter().map(|&v| v as f64).sum::<f64>() / g.len() as f64;
    let data = volume
        .data()
        .iter()
        .zip(g.data())
        .map(|(&v, &b)| (v as f64 / (b as f64).max(eps) * mean) as f32)
        .collect();
    Ok(volume.with_data(data)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub patch_size: usize,
    pub patches_per_volume: usize,
    pub seed: u64,
}

impl PatchConfig {
    pub fn new(patches_per_volume: usize, seed: u64) -> Self {
        PatchConfig {
            patch_size: PATCH_SIZE,
            patches_per_volume,
            seed,
        }
    }
}

/// Patch location: slice index and the (row, col) of the center voxel. The
/// patch covers rows `row - 16 .. row + 16` and likewise for columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchCoord {
    pub slice: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub patches: Tensor4<f32>,
    pub coords: Vec<PatchCoord>,
}

/// Draws patches uniformly over (slice, center) pairs whose center voxel is
/// in the mask and whose square lies fully inside the slice.
pub fn sample_patches(
    volume: &Volume,
    mask: &BinaryMask3,
    cfg: &PatchConfig,
    axis: SliceAxis,
) -> Result<PatchSet> {
    if cfg.patch_size != PATCH_SIZE {
        return Err(PreprocessError::InvalidArgument(format!(
            "patch_size must be {PATCH_SIZE}, got {}",
            cfg.patch_size
        )));
    }
    if cfg.patches_per_volume == 0 {
        return Err(PreprocessError::InvalidArgument(
            "patches_per_volume must be >= 1".into(),
        ));
    }
    mask.check_dims(volume.dims())?;
    let grid = volume.grid();
    let (h, w) = grid.slice_shape(axis);
    let p = cfg.patch_size;
    let half = p / 2;
    if h < p || w < p {
        return Err(PreprocessError::NoValidPatch { size: p });
    }
    let rows = half..=h - half;
    let cols = half..=w - half;
    let valid = |s: usize, r: usize, c: usize| mask.data()[grid.slice_index(axis, s, r, c)];

    let slices = grid.slice_count(axis);
    let counts: Vec<usize> = (0..slices)
        .map(|s| {
            rows.clone()
                .map(|r| cols.clone().filter(|&c| valid(s, r, c)).count())
                .sum()
        })
        .collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(PreprocessError::NoValidPatch { size: p });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut coords = Vec::with_capacity(cfg.patches_per_volume);
    let mut data = Vec::with_capacity(cfg.patches_per_volume * p * p);
    for _ in 0..cfg.patches_per_volume {
        let mut k = rng.random_range(0..total);
        let mut s = 0;
        while k >= counts[s] {
            k -= counts[s];
            s += 1;
        }
        let coord = rows
            .clone()
            .flat_map(|r| cols.clone().map(move |c| (r, c)))
            .filter(|&(r, c)| valid(s, r, c))
            .nth(k)
            .map(|(row, col)| PatchCoord { slice: s, row, col })
            .expect("k is below the slice's count");
        for r in coord.row - half..coord.row + half {
            for c in coord.col - half..coord.col + half {
                data.push(volume.data()[grid.slice_index(axis, s, r, c)]);
            }
        }
        coords.push(coord);
    }
    let patches = Tensor4::from_vec(Shape4::new(cfg.patches_per_volume, 1, p, p), data)
        .expect("patch buffer matches its shape");
    Ok(PatchSet { patches, coords })
}

/// Normalizes each volume, masks it with [`brain_mask`], and stacks
/// `patches_per_volume` patches from each. Volume `i` samples with seed
/// `seed + i`.
pub fn patches_from_volumes(
    volumes: &[&Volume],
    patches_per_volume: usize,
    seed: u64,
    axis: SliceAxis,
) -> Result<Tensor4<f32>> {
    if volumes.is_empty() {
        return Err(PreprocessError::InvalidArgument("no volumes given".into()));
    }
    let sets: Vec<Result<Tensor4<f32>>> = crate::parallel::map_range(volumes.len(), |i| {
        let (norm, _) = normalize(volumes[i])?;
        let brain = brain_mask(&norm)?;
        let cfg = PatchConfig::new(patches_per_volume, seed.wrapping_add(i as u64));
        Ok(sample_patches(&norm, &brain, &cfg, axis)?.patches)
    });
    let sets = sets.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Tensor4::concat_batch(&sets).expect("patches share one shape"))
}
