use angiovae::preprocess::{
    brain_mask, denormalize, flatten_bias, normalize, otsu_cut, otsu_threshold, sample_patches,
    PatchConfig, OTSU_BINS, PATCH_SIZE,
};
use angiovae::volume::{BinaryMask3, Grid, SliceAxis, Volume};
use proptest::prelude::*;

/// Recomputes both class statistics from scratch for every cut.
fn brute_force_cut(hist: &[u64; OTSU_BINS]) -> usize {
    let total: u64 = hist.iter().sum();
    let mut best = (f64::NEG_INFINITY, 0);
    for k in 1..OTSU_BINS {
        let n0: u64 = hist[..k].iter().sum();
        let n1 = total - n0;
        let v = if n0 == 0 || n1 == 0 {
            0.0
        } else {
            let s0: u64 = (0..k).map(|i| i as u64 * hist[i]).sum();
            let s1: u64 = (k..OTSU_BINS).map(|i| i as u64 * hist[i]).sum();
            let (m0, m1) = (s0 as f64 / n0 as f64, s1 as f64 / n1 as f64);
            (n0 as f64 / total as f64) * (n1 as f64 / total as f64) * (m0 - m1).powi(2)
        };
        if v > best.0 {
            best = (v, k);
        }
    }
    best.1
}

fn volume_from(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> f32) -> Volume {
    let grid = Grid::new(dims).unwrap();
    let data = (0..grid.len())
        .map(|i| {
            let [x, y, z] = grid.coords(i);
            f(x, y, z)
        })
        .collect();
    Volume::new(dims, [1.0; 3], data).unwrap()
}

proptest! {
    #[test]
    fn otsu_cut_is_the_exhaustive_argmax(
        counts in prop::collection::vec((0usize..OTSU_BINS, 1u64..1000), 2..60)
    ) {
        let mut hist = [0u64; OTSU_BINS];
        for (bin, c) in counts {
            hist[bin] += c;
        }
        prop_assert_eq!(otsu_cut(&hist), brute_force_cut(&hist));
    }

    #[test]
    fn otsu_threshold_shifts_with_a_constant(
        values in prop::collection::vec(0u8..=255, 8..400),
        shift in -1000i32..1000,
    ) {
        let base: Vec<f32> = values.iter().map(|&v| v as f32).collect();
        prop_assume!(base.iter().any(|&v| v != base[0]));
        let moved: Vec<f32> = base.iter().map(|&v| v + shift as f32).collect();
        let t0 = otsu_threshold(&base).unwrap();
        let t1 = otsu_threshold(&moved).unwrap();
        prop_assert!((t1 - (t0 + shift as f32)).abs() <= 1e-3, "{} vs {}", t1, t0);
    }

    #[test]
    fn normalize_lands_in_unit_range_and_inverts(
        data in prop::collection::vec(0.0f32..5000.0, 27),
    ) {
        let v = Volume::new([3, 3, 3], [1.0; 3], data).unwrap();
        prop_assume!(v.max() > 0.0);
        let (n, rec) = normalize(&v).unwrap();
        prop_assert!(n.data().iter().all(|x| (0.0..=1.0).contains(x)));
        let back = denormalize(&n, &rec).unwrap();
        for (a, b) in v.data().iter().zip(back.data()) {
            if *a < rec.scale {
                prop_assert!((a - b).abs() <= 1e-6 * a.max(1.0) * 4.0, "{} vs {}", a, b);
            }
        }
    }

    #[test]
    fn patches_stay_in_slice_and_mask(seed in 0u64..500, r in 6usize..16) {
        let dims = [40, 36, 6];
        let v = volume_from(dims, |x, y, z| (x * 7 + y * 3 + z) as f32 / 400.0);
        let mask = BinaryMask3::from_fn(dims, |x, y, _| {
            let (dx, dy) = (x as f64 - 20.0, y as f64 - 18.0);
            dx * dx + dy * dy <= (r * r) as f64
        })
        .unwrap();
        let cfg = PatchConfig::new(20, seed);
        let a = sample_patches(&v, &mask, &cfg, SliceAxis::Z).unwrap();
        let b = sample_patches(&v, &mask, &cfg, SliceAxis::Z).unwrap();
        prop_assert_eq!(&a, &b);
        let half = PATCH_SIZE / 2;
        for (k, c) in a.coords.iter().enumerate() {
            prop_assert!(mask.get(c.col, c.row, c.slice));
            prop_assert!(c.row >= half && c.row + half <= 36 && c.col >= half && c.col + half <= 40);
            // top-left voxel of the patch
            let expect = v.at(c.col - half, c.row - half, c.slice);
            prop_assert_eq!(a.patches.at(k, 0, 0, 0), expect);
        }
    }
}

#[test]
fn paper_sized_patch_batch() {
    let dims = [64, 64, 8];
    let v = volume_from(dims, |x, y, _| ((x + y) % 5) as f32);
    let mask = BinaryMask3::full(dims).unwrap();
    let set = sample_patches(&v, &mask, &PatchConfig::new(1000, 3), SliceAxis::Z).unwrap();
    let s = set.patches.shape();
    assert_eq!((s.n, s.c, s.h, s.w), (1000, 1, 32, 32));
}

#[test]
fn bright_ball_mask_matches_within_two_voxels() {
    let dims = [48, 48, 48];
    let radius = 14.0;
    let dist = |x: usize, y: usize, z: usize| {
        let d = [x, y, z].map(|c| c as f64 - 23.5);
        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
    };
    let v = volume_from(dims, |x, y, z| {
        let noise = ((x * 31 + y * 17 + z * 7) % 11) as f32 * 0.005;
        if dist(x, y, z) <= radius {
            0.8 + noise
        } else {
            0.05 + noise
        }
    });
    let mask = brain_mask(&v).unwrap();
    for z in 0..48 {
        for y in 0..48 {
            for x in 0..48 {
                let d = dist(x, y, z);
                if d <= radius - 2.0 {
                    assert!(mask.get(x, y, z), "interior voxel {x},{y},{z} missing");
                } else if d > radius + 2.0 {
                    assert!(!mask.get(x, y, z), "exterior voxel {x},{y},{z} included");
                }
            }
        }
    }
}

#[test]
fn flatten_bias_reduces_ramp_variation() {
    let dims = [48, 48, 8];
    let texture = |x: usize, y: usize| 1.0 + 0.1 * (((x * 13 + y * 7) % 9) as f32 / 9.0);
    let v = volume_from(dims, |x, y, _| texture(x, y) * (0.5 + x as f32 / 47.0));
    let cv = |vol: &Volume| {
        let d = vol.data();
        let m = d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / d.len() as f64;
        var.sqrt() / m
    };
    let flat = flatten_bias(&v, 12.0).unwrap();
    assert!(cv(&flat) < 0.5 * cv(&v), "{} vs {}", cv(&flat), cv(&v));
}
