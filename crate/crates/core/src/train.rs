//! Patch training loop: Adam updates over shuffled mini-batches with
//! validation-loss early stopping.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{forward_vars, ModelError, VaeArchitecture, VaeParams};
use crate::objectives::{total_loss, LossComponents, LossConfig, LossMode, SsimConfig};
use crate::tape::Tape;
use crate::tensor::{Tensor4, TensorError};

/// Stream salt for the validation sampler, kept apart from the training stream.
const VALIDATION_STREAM: u64 = 0x5641_4c49_4441_5445;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient in '{layer}'")]
    NonFiniteGradient { layer: String },
    #[error("validation loss diverged at epoch {epoch}; best parameters from epoch {best_epoch} retained")]
    Diverged {
        epoch: usize,
        best_epoch: usize,
        best: Box<VaeParams<f32>>,
        log: TrainLog,
    },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("{what} has {got} patches, fewer than one batch of {batch}")]
    TooFewPatches {
        what: &'static str,
        got: usize,
        batch: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Training hyperparameters. Serialized field names are the keys accepted in
/// run configuration files; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossMode,
    /// Defaults to 0.01 for L2 and 0.001 for SSIM when unset.
    pub learning_rate: Option<f64>,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_rel_improvement: f64,
    pub seed: u64,
    pub patches_per_volume: usize,
    pub validation_fraction: f64,
    /// Defaults to 0.1 for L2 and 1.0 for SSIM when unset.
    pub kl_weight: Option<f64>,
    pub ssim_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossMode::L2,
            learning_rate: None,
            batch_size: 100,
            max_epochs: 100,
            patience: 5,
            min_rel_improvement: 1e-3,
            seed: 0,
            patches_per_volume: 1000,
            validation_fraction: 0.2,
            kl_weight: None,
            ssim_weight: 1000.0,
        }
    }
}

impl TrainConfig {
    pub fn for_mode(loss: LossMode) -> Self {
        TrainConfig {
            loss,
            ..Default::default()
        }
    }

    pub fn effective_learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.loss {
            LossMode::L2 => 0.01,
            LossMode::Ssim => 0.001,
        })
    }

    pub fn effective_kl_weight(&self) -> f64 {
        self.kl_weight.unwrap_or(self.loss.default_kl_weight())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            mode: self.loss,
            ssim_weight: self.ssim_weight,
            kl_weight: self.effective_kl_weight(),
            ssim: SsimConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1");
        }
        if self.patience == 0 {
            return fail("patience must be >= 1");
        }
        if !(self.min_rel_improvement > 0.0 && self.min_rel_improvement < 1.0) {
            return fail("min_rel_improvement must lie in (0, 1)");
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be >= 1");
        }
        if self.patches_per_volume == 0 {
            return fail("patches_per_volume must be >= 1");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return fail("validation_fraction must lie in (0, 1)");
        }
        if !(self.effective_learning_rate() >= 0.0) {
            return fail("learning_rate must be >= 0");
        }
        self.loss_config()
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))
    }
}

/// Adam coefficients and per-parameter moments.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(params: &VaeParams<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = params
            .tensors()
            .iter()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect();
        OptimizerState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// One bias-corrected Adam update. `grads` follow the parameter order.
///
/// All gradients are checked before any parameter moves.
pub fn adam_step(
    params: &mut VaeParams<f32>,
    grads: &[Tensor4<f32>],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.tensors().len() {
        return Err(TrainError::Config(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.tensors().len()
        )));
    }
    for ((name, p), g) in params.tensors().iter().zip(grads) {
        if g.shape() != p.shape() {
            return Err(TrainError::Config(format!(
                "gradient shape {} for '{name}' ({})",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient {
                layer: name.clone(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let step_size = (lr / c1) as f32;
    let c2_sqrt = c2.sqrt() as f32;
    let eps = state.eps as f32;
    let (b1, b2) = (b1 as f32, b2 as f32);
    for (i, ((_, p), g)) in params.tensors_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (j, (w, &g)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            *w -= step_size * m[j] / (v[j].sqrt() / c2_sqrt + eps);
        }
    }
    Ok(())
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossComponents,
    pub validation: LossComponents,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records
            .iter()
            .min_by(|a, b| a.validation.total.total_cmp(&b.validation.total))
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(
            out,
            "epoch,train_total,train_reconstruction,train_kl,val_total,val_reconstruction,val_kl,wall_seconds"
        )?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{:.3}",
                r.epoch,
                r.train.total,
                r.train.reconstruction,
                r.train.kl,
                r.validation.total,
                r.validation.reconstruction,
                r.validation.kl,
                r.wall_seconds
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best-validation epoch.
    pub params: VaeParams<f32>,
    pub best_epoch: usize,
    pub log: TrainLog,
}

#[derive(Default)]
struct Mean {
    total: f64,
    reconstruction: f64,
    kl: f64,
    weight: f64,
}

impl Mean {
    fn add(&mut self, c: &LossComponents, weight: f64) {
        self.total += c.total * weight;
        self.reconstruction += c.reconstruction * weight;
        self.kl += c.kl * weight;
        self.weight += weight;
    }

    fn finish(&self) -> LossComponents {
        LossComponents {
            total: self.total / self.weight,
            reconstruction: self.reconstruction / self.weight,
            kl: self.kl / self.weight,
        }
    }
}

/// Validation loss with stochastic sampling from a fixed-seed stream, so
/// successive epochs see identical noise.
pub fn validation_loss(
    params: &VaeParams<f32>,
    arch: &VaeArchitecture,
    val: &Tensor4<f32>,
    cfg: &TrainConfig,
) -> Result<LossComponents> {
    let loss_cfg = cfg.loss_config();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ VALIDATION_STREAM);
    let n = val.shape().n;
    let mut mean = Mean::default();
    let mut start = 0;
    while start < n {
        let len = cfg.batch_size.min(n - start);
        let batch = val.slice_batch(start, len);
        let mut tape = Tape::new();
        let vars = params.register_frozen(&mut tape);
        let x = tape.constant(batch);
        let (recon, stats) = forward_vars(&mut tape, arch, &vars, x, &mut rng, false)?;
        let (_, c) = total_loss(&mut tape, x, recon, &stats, &loss_cfg)?;
        mean.add(&c, len as f64);
        start += len;
    }
    Ok(mean.finish())
}

/// Trains from a fresh seeded initialization.
pub fn train(
    train_patches: &Tensor4<f32>,
    val_patches: &Tensor4<f32>,
    arch: &VaeArchitecture,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let init = arch.init::<f32>(cfg.seed);
    train_from(init, train_patches, val_patches, arch, cfg)
}

/// Trains starting from `params`.
///
/// Each epoch consumes every full batch once (a partial final batch is
/// dropped), then evaluates validation loss. Training stops after `patience`
/// consecutive epochs that fail to beat the best validation loss by the
/// relative margin `min_rel_improvement`, or at `max_epochs`.
pub fn train_from(
    mut params: VaeParams<f32>,
    train_patches: &Tensor4<f32>,
    val_patches: &Tensor4<f32>,
    arch: &VaeArchitecture,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    params.validate(arch)?;
    let n = train_patches.shape().n;
    if n < cfg.batch_size {
        return Err(TrainError::TooFewPatches {
            what: "training set",
            got: n,
            batch: cfg.batch_size,
        });
    }
    if val_patches.shape().n < cfg.batch_size {
        return Err(TrainError::TooFewPatches {
            what: "validation set",
            got: val_patches.shape().n,
            batch: cfg.batch_size,
        });
    }
    let lr = cfg.effective_learning_rate();
    let loss_cfg = cfg.loss_config();
    let mut opt = OptimizerState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let batches = n / cfg.batch_size;

    let mut log = TrainLog::default();
    let mut best = (f64::INFINITY, params.clone(), 0usize);
    let mut stale = 0;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut train_mean = Mean::default();
        for b in 0..batches {
            let idx = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let batch = train_patches.gather_batch(idx);
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let x = tape.constant(batch);
            let (recon, stats) = forward_vars(&mut tape, arch, &vars, x, &mut rng, false)?;
            let (loss, c) = total_loss(&mut tape, x, recon, &stats, &loss_cfg)?;
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Tensor4<f32>> = vars
                .0
                .iter()
                .zip(params.tensors())
                .map(|(v, (_, p))| grads.take(*v).unwrap_or_else(|| Tensor4::zeros(p.shape())))
                .collect();
            adam_step(&mut params, &grads, &mut opt, lr)?;
            train_mean.add(&c, 1.0);
        }

        let val = validation_loss(&params, arch, val_patches, cfg)?;
        log.records.push(EpochRecord {
            epoch,
            train: train_mean.finish(),
            validation: val,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        log::info!(
            "epoch {epoch}: train {:.5} val {:.5} (rec {:.5}, kl {:.5})",
            train_mean.finish().total,
            val.total,
            val.reconstruction,
            val.kl
        );

        if !val.total.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                best_epoch: best.2,
                best: Box::new(best.1),
                log,
            });
        }
        if val.total < best.0 * (1.0 - cfg.min_rel_improvement) || best.2 == 0 {
            stale = 0;
        } else {
            stale += 1;
        }
        if val.total < best.0 {
            best = (val.total, params.clone(), epoch);
        }
        if stale >= cfg.patience {
            break;
        }
    }
    Ok(TrainOutcome {
        params: best.1,
        best_epoch: best.2,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    fn tiny_params() -> (VaeArchitecture, VaeParams<f32>) {
        let arch = VaeArchitecture::default();
        let p = arch.init(0);
        (arch, p)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (_, mut p) = tiny_params();
        let before = p.clone();
        let grads: Vec<_> = p
            .tensors()
            .iter()
            .map(|(_, t)| Tensor4::zeros(t.shape()))
            .collect();
        let mut st = OptimizerState::new(&p);
        adam_step(&mut p, &grads, &mut st, 0.01).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (_, mut p) = tiny_params();
        let before = p.clone();
        let grads: Vec<_> = p
            .tensors()
            .iter()
            .map(|(_, t)| Tensor4::full(t.shape(), 1.0f32))
            .collect();
        let mut st = OptimizerState::new(&p);
        adam_step(&mut p, &grads, &mut st, 0.01).unwrap();
        // m̂ = v̂ = 1 after bias correction: step = lr / (1 + eps)
        let expected = 0.01 / (1.0 + 1e-8);
        for ((_, a), (_, b)) in p.tensors().iter().zip(before.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!(((y - x) as f64 - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn non_finite_gradient_names_layer() {
        let (_, mut p) = tiny_params();
        let mut grads: Vec<_> = p
            .tensors()
            .iter()
            .map(|(_, t)| Tensor4::zeros(t.shape()))
            .collect();
        grads[4].data_mut()[0] = f32::NAN;
        let mut st = OptimizerState::new(&p);
        let err = adam_step(&mut p, &grads, &mut st, 0.01).unwrap_err();
        assert!(
            matches!(err, TrainError::NonFiniteGradient { ref layer } if layer == "enc3.weight")
        );
        assert_eq!(st.step, 0);
    }

    #[test]
    fn config_defaults_and_validation() {
        assert_eq!(
            TrainConfig::for_mode(LossMode::L2).effective_learning_rate(),
            0.01
        );
        assert_eq!(
            TrainConfig::for_mode(LossMode::Ssim).effective_learning_rate(),
            0.001
        );
        assert_eq!(TrainConfig::default().batch_size, 100);
        let bad = TrainConfig {
            patience: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let err = serde_json::from_str::<TrainConfig>(r#"{"loss":"ssim","batch":3}"#).unwrap_err();
        assert!(err.to_string().contains("batch"), "{err}");
        let cfg: TrainConfig = serde_json::from_str(r#"{"loss":"ssim","max_epochs":3}"#).unwrap();
        assert_eq!(
            (cfg.loss, cfg.max_epochs, cfg.batch_size),
            (LossMode::Ssim, 3, 100)
        );
    }

    fn smooth_patches(n: usize, seed: u64) -> Tensor4<f32> {
        let mut data = Vec::with_capacity(n * 1024);
        for i in 0..n {
            let phase = (i as f32 * 0.37 + seed as f32) % 6.28;
            for y in 0..32 {
                for x in 0..32 {
                    let v = 0.5 + 0.4 * ((x as f32 * 0.3 + phase).sin() * (y as f32 * 0.2).cos());
                    data.push(v);
                }
            }
        }
        Tensor4::from_vec(Shape4::new(n, 1, 32, 32), data).unwrap()
    }

    #[test]
    fn frozen_parameters_stop_after_patience() {
        let arch = VaeArchitecture::default();
        let cfg = TrainConfig {
            learning_rate: Some(0.0),
            batch_size: 4,
            patience: 3,
            max_epochs: 50,
            ..Default::default()
        };
        let out = train(&smooth_patches(8, 0), &smooth_patches(4, 1), &arch, &cfg).unwrap();
        assert_eq!(out.log.records.len(), 4);
        assert_eq!(out.best_epoch, 1);
    }

    #[test]
    fn training_is_deterministic() {
        let arch = VaeArchitecture::default();
        let cfg = TrainConfig {
            batch_size: 4,
            max_epochs: 2,
            seed: 11,
            ..Default::default()
        };
        let a = train(&smooth_patches(8, 0), &smooth_patches(4, 1), &arch, &cfg).unwrap();
        let b = train(&smooth_patches(8, 0), &smooth_patches(4, 1), &arch, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        let strip = |l: &TrainLog| {
            l.records
                .iter()
                .map(|r| (r.train, r.validation))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a.log), strip(&b.log));
        for r in &a.log.records {
            assert!(r.validation.kl.is_finite() && r.validation.kl >= 0.0);
        }
        let mut csv = Vec::new();
        a.log.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 3);
    }

    #[test]
    fn too_few_patches() {
        let arch = VaeArchitecture::default();
        let cfg = TrainConfig::default();
        let err = train(&smooth_patches(8, 0), &smooth_patches(4, 1), &arch, &cfg).unwrap_err();
        assert!(matches!(err, TrainError::TooFewPatches { .. }));
    }
}
