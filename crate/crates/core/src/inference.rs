//! Slice-wise whole-volume reconstruction and SSIM anomaly maps.

use thiserror::Error;

use crate::model::{ModelError, Vae};
use crate::objectives::{ssim_map_values, SsimConfig};
use crate::parallel;
use crate::preprocess::{normalize, NormalizationRecord, PreprocessError};
use crate::tensor::{Shape4, Tensor4, TensorError};
use crate::volume::{BinaryMask3, SliceAxis, Volume, VolumeError};

/// Slices per forward pass.
const SLICE_BATCH: usize = 16;
pub const DEFAULT_THRESHOLD: f64 = 0.6;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("slice {h}x{w} is smaller than the {window}x{window} SSIM window")]
    SliceTooSmall { h: usize, w: usize, window: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = InferenceError> = std::result::Result<T, E>;

/// Smallest multiple of `m` that is >= `n`.
pub fn padded_size(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// Zero-pads an `h × w` plane symmetrically to `ph × pw`; the extra row or
/// column of an odd total goes after.
pub fn pad_plane(plane: &[f32], h: usize, w: usize, ph: usize, pw: usize) -> Vec<f32> {
    let (top, left) = ((ph - h) / 2, (pw - w) / 2);
    let mut out = vec![0.0; ph * pw];
    for r in 0..h {
        out[(r + top) * pw + left..(r + top) * pw + left + w]
            .copy_from_slice(&plane[r * w..(r + 1) * w]);
    }
    out
}

pub fn crop_plane(padded: &[f32], ph: usize, pw: usize, h: usize, w: usize) -> Vec<f32> {
    let (top, left) = ((ph - h) / 2, (pw - w) / 2);
    (0..h)
        .flat_map(|r| {
            padded[(r + top) * pw + left..(r + top) * pw + left + w]
                .iter()
                .copied()
        })
        .collect()
}

/// Runs every slice of a normalized volume through the model with
/// deterministic latents and stacks the results in slice order.
pub fn reconstruct_volume(vae: &Vae<f32>, volume: &Volume, axis: SliceAxis) -> Result<Volume> {
    let grid = volume.grid();
    let (h, w) = grid.slice_shape(axis);
    let f = vae.arch.downsample;
    let (ph, pw) = (padded_size(h, f), padded_size(w, f));
    let slices = grid.slice_count(axis);
    let chunks = slices.div_ceil(SLICE_BATCH);

    let outputs: Vec<Result<Vec<Vec<f32>>>> = parallel::map_range(chunks, |k| {
        let range = k * SLICE_BATCH..((k + 1) * SLICE_BATCH).min(slices);
        let n = range.len();
        let mut data = Vec::with_capacity(n * ph * pw);
        for s in range {
            data.extend(pad_plane(
                &grid.extract_slice(volume.data(), axis, s),
                h,
                w,
                ph,
                pw,
            ));
        }
        let batch = Tensor4::from_vec(Shape4::new(n, 1, ph, pw), data)?;
        let out = vae.reconstruct(&batch)?;
        Ok(out
            .data()
            .chunks(ph * pw)
            .map(|p| crop_plane(p, ph, pw, h, w))
            .collect())
    });

    let mut data = vec![0.0; volume.len()];
    let mut s = 0;
    for chunk in outputs {
        for plane in chunk? {
            grid.insert_slice(&mut data, axis, s, &plane);
            s += 1;
        }
    }
    let mut out = volume.with_data(data)?;
    out.source_dtype = crate::volume::DataType::F32;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    /// Reconstruction in the original intensity units.
    pub rescaled: Volume,
    pub normalized_original: Volume,
    pub normalized_reconstruction: Volume,
    pub record: NormalizationRecord,
}

/// Normalize, reconstruct, and map back to the original intensity scale.
pub fn reconstruct_and_rescale(
    vae: &Vae<f32>,
    original: &Volume,
    axis: SliceAxis,
) -> Result<Reconstruction> {
    let (norm, record) = normalize(original)?;
    let recon = reconstruct_volume(vae, &norm, axis)?;
    let rescaled = crate::preprocess::denormalize(&recon, &record)?;
    Ok(Reconstruction {
        rescaled,
        normalized_original: norm,
        normalized_reconstruction: recon,
        record,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyResult {
    /// Local SSIM at each window center; 1.0 where no full window fits.
    pub ssim_map: Volume,
    pub mask: BinaryMask3,
    pub threshold: f64,
}

/// Per-slice local SSIM between two normalized volumes.
pub fn ssim_volume(
    original: &Volume,
    reconstruction: &Volume,
    cfg: &SsimConfig,
    axis: SliceAxis,
) -> Result<Volume> {
    original.check_same_dims(reconstruction)?;
    let grid = original.grid();
    let (h, w) = grid.slice_shape(axis);
    let k = cfg.window_size;
    if h < k || w < k {
        return Err(InferenceError::SliceTooSmall { h, w, window: k });
    }
    let off = k / 2;
    let (vh, vw) = (h - k + 1, w - k + 1);
    let planes: Vec<Result<Vec<f32>>> = parallel::map_range(grid.slice_count(axis), |s| {
        let to64 = |v: &Volume| {
            let p = grid
                .extract_slice(v.data(), axis, s)
                .into_iter()
                .map(f64::from)
                .collect();
            Tensor4::from_vec(Shape4::new(1, 1, h, w), p)
        };
        let map = ssim_map_values(&to64(original)?, &to64(reconstruction)?, cfg)?;
        let mut plane = vec![1.0f32; h * w];
        for r in 0..vh {
            for c in 0..vw {
                plane[(r + off) * w + c + off] = map.data()[r * vw + c] as f32;
            }
        }
        Ok(plane)
    });
    let mut data = vec![1.0; original.len()];
    for (s, plane) in planes.into_iter().enumerate() {
        grid.insert_slice(&mut data, axis, s, &plane?);
    }
    Ok(original.with_data(data)?)
}

/// Local SSIM map thresholded inside `brain`.
pub fn anomaly_map(
    original: &Volume,
    reconstruction: &Volume,
    cfg: &SsimConfig,
    threshold: f64,
    brain: &BinaryMask3,
    axis: SliceAxis,
) -> Result<AnomalyResult> {
    brain.check_dims(original.dims())?;
    let map = ssim_volume(original, reconstruction, cfg, axis)?;
    Ok(threshold_map(map, threshold, brain)?)
}

/// Anomaly mask from a precomputed SSIM map.
pub fn threshold_map(
    ssim_map: Volume,
    threshold: f64,
    brain: &BinaryMask3,
) -> Result<AnomalyResult, VolumeError> {
    brain.check_dims(ssim_map.dims())?;
    let data = ssim_map
        .data()
        .iter()
        .zip(brain.data())
        .map(|(&v, &b)| b && (v as f64) < threshold)
        .collect();
    Ok(AnomalyResult {
        mask: BinaryMask3::new(ssim_map.dims(), data)?,
        ssim_map,
        threshold,
    })
}
