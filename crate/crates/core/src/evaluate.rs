//! Reconstruction metrics (MSE, mean SSIM, PSNR) and vessel overlap (DSI).

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::{ssim_volume, InferenceError};
use crate::objectives::SsimConfig;
use crate::preprocess::{
    brain_mask, normalize, otsu_threshold, PreprocessError, NORMALIZATION_TAG,
};
use crate::volume::{BinaryMask3, SliceAxis, Volume, VolumeError};

/// Components smaller than this are dropped from vessel segmentations.
pub const MIN_VESSEL_COMPONENT: usize = 10;

pub const FLAG_PSNR_INFINITE: &str = "psnr_infinite";
pub const FLAG_DSI_BOTH_EMPTY: &str = "dsi_both_empty";
pub const FLAG_RECON_SEGMENTATION_DEGENERATE: &str = "recon_segmentation_degenerate";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("mask selects no voxels")]
    EmptyMask,
    #[error("vessel segmentation is degenerate: in-mask intensities are constant")]
    Degenerate,
    #[error("{0}")]
    Mismatch(#[from] VolumeError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Mean squared difference, optionally restricted to a mask.
pub fn mse(x: &Volume, y: &Volume, mask: Option<&BinaryMask3>) -> Result<f64> {
    x.check_same_dims(y)?;
    if let Some(m) = mask {
        m.check_dims(x.dims())?;
    }
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (i, (&a, &b)) in x.data().iter().zip(y.data()).enumerate() {
        if mask.is_none_or(|m| m.data()[i]) {
            let d = a as f64 - b as f64;
            sum += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(EvalError::EmptyMask);
    }
    Ok(sum / n as f64)
}

/// `10 log10(L² / mse)` in dB; infinite when `mse` is 0.
pub fn psnr(mse: f64, dynamic_range: f64) -> f64 {
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (dynamic_range * dynamic_range / mse).log10()
}

/// Mean of every valid-window SSIM value over all slices.
pub fn mean_ssim_volume(x: &Volume, y: &Volume, cfg: &SsimConfig, axis: SliceAxis) -> Result<f64> {
    let map = ssim_volume(x, y, cfg, axis)?;
    let grid = x.grid();
    let (h, w) = grid.slice_shape(axis);
    let k = cfg.window_size;
    let off = k / 2;
    let (mut sum, mut n) = (0.0f64, 0usize);
    for s in 0..grid.slice_count(axis) {
        for r in off..off + h - k + 1 {
            for c in off..off + w - k + 1 {
                sum += map.data()[grid.slice_index(axis, s, r, c)] as f64;
                n += 1;
            }
        }
    }
    Ok(sum / n as f64)
}

/// Otsu over in-mask voxels, then removal of components under
/// [`MIN_VESSEL_COMPONENT`] voxels.
pub fn segment_vessels(volume: &Volume, mask: &BinaryMask3) -> Result<BinaryMask3> {
    mask.check_dims(volume.dims())?;
    let inside: Vec<f32> = volume
        .data()
        .iter()
        .zip(mask.data())
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .collect();
    let t = match otsu_threshold(&inside) {
        Ok(t) => t,
        Err(PreprocessError::ConstantInput) => return Err(EvalError::Degenerate),
        Err(e) => return Err(e.into()),
    };
    let seg = BinaryMask3::new(
        volume.dims(),
        volume
            .data()
            .iter()
            .zip(mask.data())
            .map(|(&v, &m)| m && v > t)
            .collect(),
    )?;
    Ok(seg.remove_small_components(MIN_VESSEL_COMPONENT))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dice {
    pub value: f64,
    /// Both masks were empty; `value` is then defined as 1.
    pub both_empty: bool,
}

pub fn dsi(a: &BinaryMask3, b: &BinaryMask3) -> Result<Dice> {
    let inter = a.intersection_count(b)?;
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(Dice {
            value: 1.0,
            both_empty: true,
        });
    }
    Ok(Dice {
        value: 2.0 * inter as f64 / total as f64,
        both_empty: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub id: String,
    pub mse: f64,
    pub mean_ssim: f64,
    /// `None` when the PSNR is infinite (zero MSE).
    pub psnr_db: Option<f64>,
    pub dsi: f64,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    pub ssim: SsimConfig,
    pub axis: SliceAxis,
}

/// Metrics for one original/reconstruction pair.
///
/// Both volumes are scaled with the original's normalization record. MSE is
/// taken inside the original's brain mask, mean SSIM over every valid window,
/// PSNR with L = 1, and DSI between the vessel segmentations of the two.
pub fn evaluate_pair(
    id: &str,
    original: &Volume,
    reconstruction: &Volume,
    opts: &EvalOptions,
) -> Result<MetricsRow> {
    original.check_same_dims(reconstruction)?;
    let (x, record) = normalize(original)?;
    let (y, _) = record.apply(reconstruction)?;
    evaluate_normalized(id, &x, &y, opts)
}

/// As [`evaluate_pair`] for volumes already on the normalized scale.
pub fn evaluate_normalized(
    id: &str,
    x: &Volume,
    y: &Volume,
    opts: &EvalOptions,
) -> Result<MetricsRow> {
    x.check_same_dims(y)?;
    let brain = brain_mask(x)?;
    let mut flags = Vec::new();
    let m = mse(x, y, Some(&brain))?;
    let s = mean_ssim_volume(x, y, &opts.ssim, opts.axis)?;
    let p = psnr(m, 1.0);
    if p.is_infinite() {
        flags.push(FLAG_PSNR_INFINITE.to_string());
    }
    let seg_x = segment_vessels(x, &brain)?;
    let seg_y = match segment_vessels(y, &brain) {
        Ok(seg) => seg,
        Err(EvalError::Degenerate) => {
            flags.push(FLAG_RECON_SEGMENTATION_DEGENERATE.to_string());
            BinaryMask3::empty(y.dims())?
        }
        Err(e) => return Err(e),
    };
    let d = dsi(&seg_x, &seg_y)?;
    if d.both_empty {
        flags.push(FLAG_DSI_BOTH_EMPTY.to_string());
    }
    Ok(MetricsRow {
        id: id.to_string(),
        mse: m,
        mean_ssim: s,
        psnr_db: p.is_finite().then_some(p),
        dsi: d.value,
        flags,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Values contributing (infinite PSNR rows are excluded).
    pub count: usize,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Summary {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Summary {
                mean: f64::NAN,
                std: f64::NAN,
                count: 0,
            };
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        Summary {
            mean,
            std: var.sqrt(),
            count: v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mse: Summary,
    pub mean_ssim: Summary,
    pub psnr_db: Summary,
    pub dsi: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// How intensities and regions were chosen for each metric.
    pub convention: String,
    pub rows: Vec<MetricsRow>,
    pub aggregate: Aggregate,
}

impl MetricsReport {
    pub fn new(rows: Vec<MetricsRow>) -> Self {
        let aggregate = Aggregate {
            mse: Summary::of(rows.iter().map(|r| r.mse)),
            mean_ssim: Summary::of(rows.iter().map(|r| r.mean_ssim)),
            psnr_db: Summary::of(rows.iter().filter_map(|r| r.psnr_db)),
            dsi: Summary::of(rows.iter().map(|r| r.dsi)),
        };
        MetricsReport {
            convention: format!(
                "normalization {NORMALIZATION_TAG} (original's scale applied to both); mse inside brain mask; \
                 mean_ssim over all valid windows; psnr with L = 1"
            ),
            rows,
            aggregate,
        }
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "# {}", self.convention)?;
        writeln!(out, "id,mse,mean_ssim,psnr_db,dsi,flags")?;
        for r in &self.rows {
            let psnr = r
                .psnr_db
                .map_or_else(|| "inf".to_string(), |p| p.to_string());
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.id,
                r.mse,
                r.mean_ssim,
                psnr,
                r.dsi,
                r.flags.join(";")
            )?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
