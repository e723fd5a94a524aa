use angiovae::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CheckpointMeta};
use angiovae::evaluate::{
    dsi, evaluate_pair, segment_vessels, EvalOptions, MetricsReport, FLAG_PSNR_INFINITE,
};
use angiovae::inference::{anomaly_map, reconstruct_and_rescale, ssim_volume, threshold_map};
use angiovae::model::{Vae, VaeArchitecture};
use angiovae::objectives::{LossMode, SsimConfig};
use angiovae::phantom::{generate, generate_cohort, AneurysmSpec, PhantomSpec};
use angiovae::preprocess::{brain_mask, normalize, NORMALIZATION_TAG};
use angiovae::volume::SliceAxis;

fn small_vae(seed: u64) -> Vae<f32> {
    let arch = VaeArchitecture::with_widths(4, 4, 4);
    let params = arch.init(seed);
    Vae::new(arch, params).unwrap()
}

#[test]
fn vessel_fraction_stays_in_band_over_twenty_seeds() {
    for seed in 0..20 {
        let p = generate(&PhantomSpec {
            seed,
            ..Default::default()
        })
        .unwrap();
        let frac = p.vessel_mask.count() as f64 / p.vessel_mask.data().len() as f64;
        assert!((0.001..=0.05).contains(&frac), "seed {seed}: {frac}");
        assert!(p.aneurysm_mask.is_empty());

        let (inside, outside): (Vec<f32>, Vec<f32>) = {
            let mut i = Vec::new();
            let mut o = Vec::new();
            for (&v, &m) in p.volume.data().iter().zip(p.vessel_mask.data()) {
                if m {
                    i.push(v)
                } else if v > 0.0 {
                    o.push(v)
                }
            }
            (i, o)
        };
        let mean = |v: &[f32]| v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
        assert!(mean(&inside) > mean(&outside));
    }
}

#[test]
fn segmentation_recovers_phantom_vessels() {
    for seed in [0, 5, 9] {
        let p = generate(&PhantomSpec {
            seed,
            ..Default::default()
        })
        .unwrap();
        let (x, _) = normalize(&p.volume).unwrap();
        let brain = brain_mask(&x).unwrap();
        let seg = segment_vessels(&x, &brain).unwrap();
        assert_eq!(seg, segment_vessels(&x, &brain).unwrap());
        let d = dsi(&seg, &p.vessel_mask).unwrap().value;
        assert!(d >= 0.7, "seed {seed}: dsi {d}");
    }
}

#[test]
fn perfect_pair_row_for_several_phantoms() {
    let opts = EvalOptions::default();
    let mut rows = Vec::new();
    for seed in [1, 2, 3] {
        let spec = PhantomSpec {
            seed,
            aneurysm: (seed == 2).then(AneurysmSpec::default),
            ..Default::default()
        };
        let v = generate(&spec).unwrap().volume;
        let row = evaluate_pair(&format!("p{seed}"), &v, &v, &opts).unwrap();
        assert_eq!(row.mse, 0.0);
        assert!((row.mean_ssim - 1.0).abs() <= 1e-6);
        assert_eq!(row.dsi, 1.0);
        assert_eq!(row.psnr_db, None);
        assert!(row.flags.iter().any(|f| f == FLAG_PSNR_INFINITE));
        rows.push(row);
    }
    let report = MetricsReport::new(rows);
    let mut csv = Vec::new();
    report.write_csv(&mut csv).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    assert!(csv.lines().count() >= 4);
    assert!(csv.contains("inf"));
    let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    assert!(json.get("aggregate").is_some());
}

#[test]
fn reconstruction_keeps_odd_dims_and_scale() {
    let spec = PhantomSpec {
        dims: [61, 73, 55],
        seed: 4,
        ..Default::default()
    };
    let v = generate(&spec).unwrap().volume;
    let vae = small_vae(3);
    for axis in [SliceAxis::Z, SliceAxis::X] {
        let r = reconstruct_and_rescale(&vae, &v, axis).unwrap();
        assert_eq!(r.rescaled.dims(), v.dims());
        let s = r.record.scale;
        assert!(r.rescaled.data().iter().all(|&x| (0.0..=s).contains(&x)));
        assert_eq!(r, reconstruct_and_rescale(&vae, &v, axis).unwrap());
    }
}

#[test]
fn anomaly_mask_grows_with_threshold() {
    let p = generate(&PhantomSpec {
        seed: 8,
        aneurysm: Some(AneurysmSpec::default()),
        ..Default::default()
    })
    .unwrap();
    let vae = small_vae(2);
    let r = reconstruct_and_rescale(&vae, &p.volume, SliceAxis::Z).unwrap();
    let brain = brain_mask(&r.normalized_original).unwrap();
    let cfg = SsimConfig::default();
    let map = ssim_volume(
        &r.normalized_original,
        &r.normalized_reconstruction,
        &cfg,
        SliceAxis::Z,
    )
    .unwrap();
    let mut prev = 0;
    for t in [0.2, 0.4, 0.6, 0.8, 0.95] {
        let a = threshold_map(map.clone(), t, &brain).unwrap();
        assert!(a.mask.count() >= prev);
        assert_eq!(a.mask.intersection_count(&brain).unwrap(), a.mask.count());
        prev = a.mask.count();
    }
    let direct = anomaly_map(
        &r.normalized_original,
        &r.normalized_reconstruction,
        &cfg,
        0.6,
        &brain,
        SliceAxis::Z,
    )
    .unwrap();
    assert_eq!(direct.mask, threshold_map(map, 0.6, &brain).unwrap().mask);
}

#[test]
fn cohort_pairs_share_everything_but_the_aneurysm() {
    let spec = PhantomSpec::default();
    let healthy = generate_cohort(4, 0.0, 77, &spec).unwrap();
    let sick = generate_cohort(4, 1.0, 77, &spec).unwrap();
    for (h, s) in healthy.iter().zip(&sick) {
        assert!(!h.has_aneurysm && s.has_aneurysm);
        assert_eq!(h.phantom.vessel_mask, s.phantom.vessel_mask);
        for i in 0..h.phantom.volume.len() {
            if !s.phantom.aneurysm_mask.data()[i] {
                assert_eq!(h.phantom.volume.data()[i], s.phantom.volume.data()[i]);
            }
        }
    }
}

#[test]
fn checkpoint_restores_the_same_model() {
    let vae = small_vae(6);
    let meta = CheckpointMeta {
        architecture: vae.arch.clone(),
        loss: LossMode::L2,
        normalization: NORMALIZATION_TAG.to_string(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &vae.params, &meta).unwrap();
    let (params, back) = load_checkpoint::<f32>(&path, &vae.arch).unwrap();
    assert_eq!(back, meta);
    let restored = Vae::new(vae.arch.clone(), params).unwrap();
    let v = generate(&PhantomSpec {
        seed: 3,
        ..Default::default()
    })
    .unwrap()
    .volume;
    assert_eq!(
        reconstruct_and_rescale(&vae, &v, SliceAxis::Z).unwrap(),
        reconstruct_and_rescale(&restored, &v, SliceAxis::Z).unwrap()
    );
    assert!(matches!(
        load_checkpoint::<f32>(&path, &VaeArchitecture::default()),
        Err(CheckpointError::ArchitectureMismatch { .. })
    ));
}
