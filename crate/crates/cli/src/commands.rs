use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use angiovae::checkpoint::{load_checkpoint_any, save_checkpoint, CheckpointMeta};
use angiovae::evaluate::{evaluate_pair, EvalOptions, MetricsReport};
use angiovae::gradcheck::{run_suite, SUITE_SEEDS, SUITE_TOLERANCE};
use angiovae::inference::{anomaly_map, reconstruct_and_rescale};
use angiovae::model::{Vae, VaeArchitecture};
use angiovae::nifti::{read_nifti, write_mask, write_nifti};
use angiovae::objectives::SsimConfig;
use angiovae::phantom::{generate_cohort, PhantomSpec};
use angiovae::preprocess::{brain_mask, normalize, patches_from_volumes, NORMALIZATION_TAG};
use angiovae::train::{train as fit, TrainConfig, TrainError};
use angiovae::volume::Volume;
use serde::de::DeserializeOwned;
use serde_json::json;

use crate::error::{CliError, Result};
use crate::manifest::Invocation;
use crate::{AnomalyArgs, EvaluateArgs, GradcheckArgs, PhantomArgs, ReconstructArgs, TrainArgs};

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

fn is_gz(path: &Path) -> bool {
    path.to_string_lossy().ends_with(".gz")
}

/// File name without the `.nii` or `.nii.gz` suffix.
fn stem(path: &Path) -> String {
    let name = path.file_name().unwrap_or_default().to_string_lossy();
    name.strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .unwrap_or(&name)
        .to_string()
}

/// NIfTI files at the top level of `dir`, sorted by name.
fn list_volumes(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries =
        fs::read_dir(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry?.path();
        let name = path.to_string_lossy();
        if path.is_file() && (name.ends_with(".nii") || name.ends_with(".nii.gz")) {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(CliError::Data(format!(
            "no .nii or .nii.gz files in {}",
            dir.display()
        )));
    }
    Ok(files)
}

fn read_volume(path: &Path) -> Result<Volume> {
    read_nifti(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<(Vae<f32>, CheckpointMeta)> {
    let (params, meta) = load_checkpoint_any::<f32>(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if meta.normalization != NORMALIZATION_TAG {
        return Err(CliError::Data(format!(
            "{}: model was trained with normalization '{}', this build applies '{}'",
            path.display(),
            meta.normalization,
            NORMALIZATION_TAG
        )));
    }
    Ok((Vae::new(meta.architecture.clone(), params)?, meta))
}

fn sibling_manifest(out: &Path) -> PathBuf {
    PathBuf::from(format!("{}.manifest.json", out.display()))
}

pub fn phantom(a: &PhantomArgs, inv: &Invocation) -> Result<()> {
    let mut spec: PhantomSpec = read_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    if let Some(d) = &a.dims {
        spec.dims = d.as_slice().try_into().map_err(|_| {
            CliError::Usage(format!("--dims takes three values X,Y,Z, got {}", d.len()))
        })?;
    }
    spec.validate()?;
    let cohort = generate_cohort(a.count, a.aneurysm_fraction, spec.seed, &spec)?;

    let masks = a.out.join("masks");
    fs::create_dir_all(&masks)?;
    let gzip = !a.no_gzip;
    let ext = if gzip { "nii.gz" } else { "nii" };
    let mut m = inv.manifest("phantom").seed("base_seed", spec.seed);
    let mut labels = String::from("id,seed,has_aneurysm,vessel_voxels,aneurysm_voxels\n");
    for c in &cohort {
        let id = format!("phantom_{:03}", c.index);
        let p = &c.phantom;
        let vol = a.out.join(format!("{id}.{ext}"));
        let vessels = masks.join(format!("{id}_vessels.{ext}"));
        let aneurysm = masks.join(format!("{id}_aneurysm.{ext}"));
        write_nifti(&p.volume, &vol, gzip)?;
        write_mask(&p.vessel_mask, &p.volume, &vessels, gzip)?;
        write_mask(&p.aneurysm_mask, &p.volume, &aneurysm, gzip)?;
        labels += &format!(
            "{id},{},{},{},{}\n",
            c.seed,
            c.has_aneurysm as u8,
            p.vessel_mask.count(),
            p.aneurysm_mask.count()
        );
        m.outputs.extend([vol, vessels, aneurysm]);
    }
    let labels_path = a.out.join("labels.csv");
    fs::write(&labels_path, labels)?;
    m.outputs.push(labels_path);
    log::info!("wrote {} phantoms to {}", cohort.len(), a.out.display());

    m.config = json!({
        "spec": spec,
        "count": a.count,
        "aneurysm_fraction": a.aneurysm_fraction,
        "gzip": gzip,
    });
    m.write(&a.out.join("manifest.json"))
}

pub fn train(a: &TrainArgs, inv: &Invocation) -> Result<()> {
    let mut cfg: TrainConfig = read_config(a.config.as_deref())?;
    macro_rules! set {
        ($flag:ident => $field:ident) => {
            if let Some(v) = a.$flag {
                cfg.$field = v;
            }
        };
    }
    set!(loss => loss);
    set!(epochs => max_epochs);
    set!(seed => seed);
    set!(batch_size => batch_size);
    set!(patches_per_volume => patches_per_volume);
    set!(validation_fraction => validation_fraction);
    if a.learning_rate.is_some() {
        cfg.learning_rate = a.learning_rate;
    }
    if a.kl_weight.is_some() {
        cfg.kl_weight = a.kl_weight;
    }
    cfg.learning_rate = Some(cfg.effective_learning_rate());
    cfg.kl_weight = Some(cfg.effective_kl_weight());
    cfg.validate()?;

    let files = list_volumes(&a.data)?;
    let n = files.len();
    if n < 2 {
        return Err(CliError::Data(format!(
            "{} holds {n} volume; training needs at least two (one held out for validation)",
            a.data.display()
        )));
    }
    let n_val = ((n as f64 * cfg.validation_fraction).round() as usize).clamp(1, n - 1);
    let volumes = files
        .iter()
        .map(|p| read_volume(p))
        .collect::<Result<Vec<_>>>()?;
    let (tr, va) = volumes.split_at(n - n_val);
    let (tr_refs, va_refs): (Vec<&Volume>, Vec<&Volume>) =
        (tr.iter().collect(), va.iter().collect());
    let val_seed = cfg.seed.wrapping_add(tr.len() as u64);
    let train_patches = patches_from_volumes(&tr_refs, cfg.patches_per_volume, cfg.seed, a.axis)?;
    let val_patches = patches_from_volumes(&va_refs, cfg.patches_per_volume, val_seed, a.axis)?;
    log::info!(
        "{} training volumes, {} validation volumes, {} + {} patches",
        tr.len(),
        va.len(),
        train_patches.shape().n,
        val_patches.shape().n
    );

    let arch = VaeArchitecture::default();
    let (params, train_log, best_epoch, failure) =
        match fit(&train_patches, &val_patches, &arch, &cfg) {
            Ok(o) => (o.params, o.log, o.best_epoch, None),
            Err(e) => {
                let msg = e.to_string();
                match e {
                    TrainError::Diverged {
                        best,
                        log,
                        best_epoch,
                        ..
                    } => (*best, log, best_epoch, Some(CliError::Numeric(msg))),
                    other => return Err(other.into()),
                }
            }
        };

    fs::create_dir_all(&a.out)?;
    let ckpt = a.out.join("model.ckpt");
    let meta = CheckpointMeta {
        architecture: arch.clone(),
        loss: cfg.loss,
        normalization: NORMALIZATION_TAG.into(),
    };
    save_checkpoint(&ckpt, &params, &meta)?;
    let log_path = a.out.join("train_log.csv");
    train_log.write_csv(BufWriter::new(File::create(&log_path)?))?;
    log::info!("best epoch {best_epoch}; checkpoint {}", ckpt.display());

    let mut m = inv
        .manifest("train")
        .seed("init_and_shuffle", cfg.seed)
        .seed("training_patches", cfg.seed)
        .seed("validation_patches", val_seed);
    m.config = json!({
        "train": cfg,
        "architecture": arch,
        "axis": a.axis,
        "training_volumes": files[..tr.len()],
        "validation_volumes": files[tr.len()..],
        "best_epoch": best_epoch,
    });
    m.inputs = files;
    m.outputs = vec![ckpt, log_path];
    m.write(&a.out.join("manifest.json"))?;
    failure.map_or(Ok(()), Err)
}

pub fn reconstruct(a: &ReconstructArgs, inv: &Invocation) -> Result<()> {
    let (vae, meta) = load_model(&a.model)?;
    let (jobs, manifest_path) = if a.input.is_dir() {
        fs::create_dir_all(&a.out)?;
        let jobs = list_volumes(&a.input)?
            .into_iter()
            .map(|p| {
                let dst = a.out.join(p.file_name().expect("listed files have names"));
                (p, dst)
            })
            .collect::<Vec<_>>();
        (jobs, a.out.join("manifest.json"))
    } else {
        if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        (
            vec![(a.input.clone(), a.out.clone())],
            sibling_manifest(&a.out),
        )
    };
    let mut m = inv.manifest("reconstruct");
    m.inputs.push(a.model.clone());
    for (src, dst) in jobs {
        let v = read_volume(&src)?;
        let r = reconstruct_and_rescale(&vae, &v, a.axis)?;
        write_nifti(&r.rescaled, &dst, is_gz(&dst))?;
        log::info!("{} -> {}", src.display(), dst.display());
        m.inputs.push(src);
        m.outputs.push(dst);
    }
    m.config = json!({
        "axis": a.axis,
        "loss": meta.loss,
        "architecture": meta.architecture,
        "normalization": meta.normalization,
    });
    m.write(&manifest_path)
}

pub fn evaluate(a: &EvaluateArgs, inv: &Invocation) -> Result<()> {
    let by_stem = |dir: &Path| -> Result<BTreeMap<String, PathBuf>> {
        Ok(list_volumes(dir)?
            .into_iter()
            .map(|p| (stem(&p), p))
            .collect())
    };
    let originals = by_stem(&a.original)?;
    let recons = by_stem(&a.reconstructed)?;
    let missing = |x: &BTreeMap<String, PathBuf>, y: &BTreeMap<String, PathBuf>| {
        x.keys()
            .filter(|k| !y.contains_key(*k))
            .cloned()
            .collect::<Vec<_>>()
    };
    let (only_orig, only_recon) = (missing(&originals, &recons), missing(&recons, &originals));
    if !only_orig.is_empty() || !only_recon.is_empty() {
        return Err(CliError::Data(format!(
            "unmatched ids: without reconstruction {only_orig:?}, without original {only_recon:?}"
        )));
    }

    let opts = EvalOptions {
        axis: a.axis,
        ..Default::default()
    };
    let mut m = inv.manifest("evaluate");
    let mut rows = Vec::new();
    for (id, orig) in &originals {
        let recon = &recons[id];
        let row = evaluate_pair(id, &read_volume(orig)?, &read_volume(recon)?, &opts)?;
        log::info!(
            "{id}: mse {:.3e}, ssim {:.4}, dsi {:.4}",
            row.mse,
            row.mean_ssim,
            row.dsi
        );
        rows.push(row);
        m.inputs.extend([orig.clone(), recon.clone()]);
    }
    let report = MetricsReport::new(rows);
    fs::create_dir_all(&a.out)?;
    let csv_path = a.out.join("metrics.csv");
    let json_path = a.out.join("metrics.json");
    report.write_csv(BufWriter::new(File::create(&csv_path)?))?;
    fs::write(&json_path, report.to_json())?;
    let mut stdout = std::io::stdout().lock();
    report.write_csv(&mut stdout)?;

    m.config = json!({ "axis": a.axis, "ssim": opts.ssim });
    m.outputs = vec![csv_path, json_path];
    m.write(&a.out.join("manifest.json"))
}

pub fn anomaly(a: &AnomalyArgs, inv: &Invocation) -> Result<()> {
    if !(-1.0..=1.0).contains(&a.threshold) {
        return Err(CliError::Usage(format!(
            "threshold {} outside the SSIM range [-1, 1]",
            a.threshold
        )));
    }
    let original = read_volume(&a.original)?;
    let mut m = inv.manifest("anomaly");
    m.inputs.push(a.original.clone());
    fs::create_dir_all(&a.out)?;
    let recon = match (&a.reconstructed, &a.model) {
        (Some(path), _) => {
            m.inputs.push(path.clone());
            read_volume(path)?
        }
        (None, Some(model)) => {
            m.inputs.push(model.clone());
            let (vae, _) = load_model(model)?;
            let r = reconstruct_and_rescale(&vae, &original, a.axis)?.rescaled;
            let path = a.out.join("reconstruction.nii.gz");
            write_nifti(&r, &path, true)?;
            m.outputs.push(path);
            r
        }
        (None, None) => {
            return Err(CliError::Usage(
                "either --reconstructed or --model is required".into(),
            ))
        }
    };
    original.check_same_dims(&recon)?;
    let (x, record) = normalize(&original)?;
    let (y, _) = record.apply(&recon)?;
    let brain = brain_mask(&x)?;
    let ssim = SsimConfig::default();
    let result = anomaly_map(&x, &y, &ssim, a.threshold, &brain, a.axis)?;

    let map_path = a.out.join("ssim_map.nii.gz");
    let mask_path = a.out.join("anomaly_mask.nii.gz");
    let brain_path = a.out.join("brain_mask.nii.gz");
    let summary_path = a.out.join("anomaly.json");
    write_nifti(&result.ssim_map, &map_path, true)?;
    write_mask(&result.mask, &original, &mask_path, true)?;
    write_mask(&brain, &original, &brain_path, true)?;
    let summary = json!({
        "threshold": a.threshold,
        "anomalous_voxels": result.mask.count(),
        "brain_voxels": brain.count(),
    });
    fs::write(
        &summary_path,
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    println!(
        "{} of {} brain voxels below local SSIM {}",
        result.mask.count(),
        brain.count(),
        a.threshold
    );

    m.config = json!({ "threshold": a.threshold, "axis": a.axis, "ssim": ssim });
    m.outputs
        .extend([map_path, mask_path, brain_path, summary_path]);
    m.write(&a.out.join("manifest.json"))
}

pub fn gradcheck(a: &GradcheckArgs, inv: &Invocation) -> Result<()> {
    let results = run_suite(a.inject_wrong_gradient)?;
    println!(
        "{:<28} {:>12} {:>8}  result",
        "operation", "max rel err", "coords"
    );
    for r in &results {
        println!(
            "{:<28} {:>12.3e} {:>8}  {}",
            r.name,
            r.max_rel_error,
            r.coordinates,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name)
        .collect();

    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        let report_path = out.join("gradcheck.json");
        let report = json!({
            "tolerance": SUITE_TOLERANCE,
            "results": results.iter().map(|r| json!({
                "name": r.name,
                "max_rel_error": r.max_rel_error,
                "coordinates": r.coordinates,
                "passed": r.passed,
            })).collect::<Vec<_>>(),
        });
        fs::write(
            &report_path,
            serde_json::to_string_pretty(&report).expect("report serializes"),
        )?;
        let mut m = inv.manifest("gradcheck");
        m.config = json!({
            "inject_wrong_gradient": a.inject_wrong_gradient,
            "tolerance": SUITE_TOLERANCE,
            "seeds": SUITE_SEEDS,
        });
        m.outputs.push(report_path);
        m.write(&out.join("manifest.json"))?;
    }

    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "{} of {} operations exceed relative error {SUITE_TOLERANCE:e}: {}",
            failed.len(),
            results.len(),
            failed.join(", ")
        )))
    }
}
