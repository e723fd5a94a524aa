//! Seeded synthetic angiography volumes: bright tubular vessels inside an
//! ellipsoidal tissue region, with optional spherical aneurysms.
//!
//! Geometry, aneurysm placement, tissue texture and acquisition noise draw
//! from separate random streams of the same seed, so a volume generated with
//! and without an aneurysm differs only inside the aneurysm.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parallel;
use crate::preprocess::gaussian_smooth;
use crate::volume::{BinaryMask3, Grid, Volume};

const STREAM_GEOMETRY: u64 = 0;
const STREAM_ANEURYSM: u64 = 1;
const STREAM_TISSUE: u64 = 2;
const STREAM_NOISE: u64 = 3;
/// Centerline sampling step in voxels.
const CURVE_STEP: f64 = 0.25;
/// Tissue ellipsoid semi-axes as a fraction of each dimension.
const HEAD_EXTENT: f64 = 0.42;

#[derive(Debug, Error, PartialEq)]
pub enum PhantomError {
    #[error("impossible geometry: {0}")]
    Geometry(String),
    #[error("invalid phantom spec: {0}")]
    Spec(String),
}

pub type Result<T, E = PhantomError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AneurysmSpec {
    pub radius_range: (f64, f64),
}

impl Default for AneurysmSpec {
    fn default() -> Self {
        AneurysmSpec {
            radius_range: (2.5, 5.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub n_vessels: usize,
    pub radius_range: (f64, f64),
    pub vessel_intensity: (f64, f64),
    pub tissue_base: f64,
    pub tissue_noise: f64,
    pub noise_sigma: f64,
    pub aneurysm: Option<AneurysmSpec>,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [64, 64, 64],
            n_vessels: 4,
            radius_range: (1.0, 2.5),
            vessel_intensity: (0.75, 1.0),
            tissue_base: 0.25,
            tissue_noise: 0.05,
            noise_sigma: 0.02,
            aneurysm: None,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let spec = |m: String| Err(PhantomError::Spec(m));
        if self.dims.iter().any(|&d| d < 48) {
            return spec(format!("dims must be >= 48 per axis, got {:?}", self.dims));
        }
        let range_ok = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi && hi.is_finite();
        if !range_ok(self.radius_range) {
            return spec(format!("radius range {:?}", self.radius_range));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let (vlo, vhi) = self.vessel_intensity;
        if !(unit(vlo) && unit(vhi) && vlo <= vhi) {
            return spec(format!(
                "vessel intensity range {:?}",
                self.vessel_intensity
            ));
        }
        if !unit(self.tissue_base) || !(self.tissue_noise >= 0.0) || !(self.noise_sigma >= 0.0) {
            return spec("tissue/noise parameters out of range".into());
        }
        let half = *self.dims.iter().min().unwrap() as f64 / 2.0;
        let mut max_r = self.radius_range.1;
        if let Some(a) = &self.aneurysm {
            if !range_ok(a.radius_range) {
                return spec(format!("aneurysm radius range {:?}", a.radius_range));
            }
            max_r = max_r.max(a.radius_range.1);
        }
        if max_r >= half {
            return Err(PhantomError::Geometry(format!(
                "radius {max_r} >= half the smallest dimension ({half})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub volume: Volume,
    pub vessel_mask: BinaryMask3,
    pub aneurysm_mask: BinaryMask3,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn catmull_rom(p: &[[f64; 3]], seg: usize, t: f64) -> [f64; 3] {
    let last = p.len() - 1;
    let p0 = p[seg.saturating_sub(1)];
    let p1 = p[seg];
    let p2 = p[(seg + 1).min(last)];
    let p3 = p[(seg + 2).min(last)];
    let (t2, t3) = (t * t, t * t * t);
    std::array::from_fn(|k| {
        0.5 * (2.0 * p1[k]
            + (p2[k] - p0[k]) * t
            + (2.0 * p0[k] - 5.0 * p1[k] + 4.0 * p2[k] - p3[k]) * t2
            + (3.0 * p1[k] - p0[k] - 3.0 * p2[k] + p3[k]) * t3)
    })
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Dense centerline samples no more than `CURVE_STEP` apart.
fn sample_curve(ctrl: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let mut pts = vec![ctrl[0]];
    for seg in 0..ctrl.len() - 1 {
        // probe finely to bound the arc length, then resample at the step
        let probe = 64;
        let mut len = 0.0;
        let mut prev = ctrl[seg];
        for i in 1..=probe {
            let q = catmull_rom(ctrl, seg, i as f64 / probe as f64);
            len += dist(prev, q);
            prev = q;
        }
        let n = ((len / CURVE_STEP).ceil() as usize * 2).max(1);
        for i in 1..=n {
            pts.push(catmull_rom(ctrl, seg, i as f64 / n as f64));
        }
    }
    pts
}

/// Marks voxels within `radius` of `c`; `paint` receives each covered index.
fn rasterize_ball(grid: &Grid, c: [f64; 3], radius: f64, mut paint: impl FnMut(usize)) {
    let lo = |k: usize| (c[k] - radius).floor().max(0.0) as usize;
    let hi = |k: usize| ((c[k] + radius).ceil() as usize).min(grid.dims[k] - 1);
    let r2 = radius * radius;
    for z in lo(2)..=hi(2) {
        for y in lo(1)..=hi(1) {
            for x in lo(0)..=hi(0) {
                let d2 = (x as f64 - c[0]).powi(2)
                    + (y as f64 - c[1]).powi(2)
                    + (z as f64 - c[2]).powi(2);
                if d2 <= r2 {
                    paint(grid.index(x, y, z));
                }
            }
        }
    }
}

struct Vessel {
    samples: Vec<[f64; 3]>,
    radius: f64,
    intensity: f64,
}

fn inside_head(dims: [usize; 3], p: [f64; 3], margin: f64) -> bool {
    let s: f64 = (0..3)
        .map(|k| {
            let c = (dims[k] as f64 - 1.0) / 2.0;
            let a = HEAD_EXTENT * dims[k] as f64 - margin;
            ((p[k] - c) / a).powi(2)
        })
        .sum();
    s <= 1.0
}

fn random_vessel(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Vessel {
    let dims = spec.dims;
    let radius = rng.random_range(spec.radius_range.0..=spec.radius_range.1);
    let intensity = rng.random_range(spec.vessel_intensity.0..=spec.vessel_intensity.1);
    let n_ctrl = rng.random_range(4..=6usize);
    let main = rng.random_range(0..3usize);
    let margin = radius + 1.0;
    let ctrl: Vec<[f64; 3]> = (0..n_ctrl)
        .map(|i| {
            let t = 0.12 + 0.76 * i as f64 / (n_ctrl - 1) as f64;
            loop {
                let p: [f64; 3] = std::array::from_fn(|k| {
                    let d = dims[k] as f64 - 1.0;
                    if k == main {
                        t * d + rng.random_range(-0.04..=0.04) * d
                    } else {
                        rng.random_range(0.3..=0.7) * d
                    }
                });
                if inside_head(dims, p, margin) {
                    break p;
                }
            }
        })
        .collect();
    Vessel {
        samples: sample_curve(&ctrl),
        radius,
        intensity,
    }
}

pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let dims = spec.dims;
    let grid = Grid::new(dims).map_err(|e| PhantomError::Spec(e.to_string()))?;
    let n = grid.len();

    let mut geo = stream(spec.seed, STREAM_GEOMETRY);
    let vessels: Vec<Vessel> = (0..spec.n_vessels)
        .map(|_| random_vessel(spec, &mut geo))
        .collect();

    let mut vessel_field = vec![0.0f64; n];
    let mut vessel_mask = vec![false; n];
    for v in &vessels {
        for &c in &v.samples {
            rasterize_ball(&grid, c, v.radius, |i| {
                vessel_mask[i] = true;
                vessel_field[i] = vessel_field[i].max(v.intensity);
            });
        }
    }

    let mut aneurysm_mask = vec![false; n];
    if let (Some(a), false) = (&spec.aneurysm, vessels.is_empty()) {
        let mut rng = stream(spec.seed, STREAM_ANEURYSM);
        let host = &vessels[rng.random_range(0..vessels.len())];
        let center = host.samples[rng.random_range(0..host.samples.len())];
        let radius = rng.random_range(a.radius_range.0..=a.radius_range.1);
        rasterize_ball(&grid, center, radius, |i| {
            aneurysm_mask[i] = true;
            vessel_field[i] = vessel_field[i].max(host.intensity);
        });
    }

    let mut tissue_rng = stream(spec.seed, STREAM_TISSUE);
    let white: Vec<f32> = (0..n)
        .map(|_| tissue_rng.sample::<f64, _>(StandardNormal) as f32)
        .collect();
    let smooth = gaussian_smooth(
        &Volume::new(dims, [1.0; 3], white).expect("dims validated"),
        2.0,
    )
    .expect("positive sigma");
    let sd = {
        let d = smooth.data();
        let m = d.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        (d.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n as f64)
            .sqrt()
            .max(1e-12)
    };

    let mut noise_rng = stream(spec.seed, STREAM_NOISE);
    let data: Vec<f32> = (0..n)
        .map(|i| {
            let [x, y, z] = grid.coords(i);
            let tissue = if inside_head(dims, [x as f64, y as f64, z as f64], 0.0) {
                spec.tissue_base + spec.tissue_noise * smooth.data()[i] as f64 / sd
            } else {
                0.0
            };
            let eps: f64 = noise_rng.sample(StandardNormal);
            (tissue.max(vessel_field[i]) + spec.noise_sigma * eps).clamp(0.0, 1.0) as f32
        })
        .collect();

    let volume = Volume::new(dims, [1.0; 3], data).expect("dims validated");
    Ok(Phantom {
        volume,
        vessel_mask: BinaryMask3::new(dims, vessel_mask).expect("dims validated"),
        aneurysm_mask: BinaryMask3::new(dims, aneurysm_mask).expect("dims validated"),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortMember {
    pub index: usize,
    pub seed: u64,
    pub has_aneurysm: bool,
    pub phantom: Phantom,
}

/// Which of `n` members carry an aneurysm: exactly `round(n · fraction)`,
/// spread evenly over the index range.
pub fn aneurysm_indices(n: usize, fraction: f64) -> Vec<bool> {
    let k = (n as f64 * fraction).round() as usize;
    (0..n).map(|i| (i + 1) * k / n > i * k / n).collect()
}

/// `n` phantoms with seeds `base_seed + index`.
pub fn generate_cohort(
    n: usize,
    aneurysm_fraction: f64,
    base_seed: u64,
    template: &PhantomSpec,
) -> Result<Vec<CohortMember>> {
    if n == 0 {
        return Err(PhantomError::Spec("cohort size must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&aneurysm_fraction) {
        return Err(PhantomError::Spec(format!(
            "aneurysm fraction {aneurysm_fraction} outside [0, 1]"
        )));
    }
    let flags = aneurysm_indices(n, aneurysm_fraction);
    parallel::map_range(n, |i| {
        let seed = base_seed.wrapping_add(i as u64);
        let spec = PhantomSpec {
            seed,
            aneurysm: flags[i].then(|| template.aneurysm.unwrap_or_default()),
            ..*template
        };
        generate(&spec).map(|phantom| CohortMember {
            index: i,
            seed,
            has_aneurysm: flags[i],
            phantom,
        })
    })
    .into_iter()
    .collect()
}
