//! Training objectives: voxelwise L2, differentiable SSIM, and the Gaussian
//! KL divergence of the latent posterior.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::conv::Window;
use crate::model::LatentVars;
use crate::tape::{Tape, Var};
use crate::tensor::{Result, Scalar, Tensor4, TensorError};

/// Structural-similarity parameters. Defaults: 11×11 Gaussian window with
/// σ = 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window_size: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window_size: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    pub fn window<T: Scalar>(&self) -> Window<T> {
        Window::gaussian(self.window_size, self.sigma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    L2,
    Ssim,
}

impl LossMode {
    /// KL weight that keeps the KL-to-reconstruction ratio comparable across
    /// modes: a per-patch L2 sum runs about ten times below `1000 · (1 − SSIM)`.
    pub fn default_kl_weight(self) -> f64 {
        match self {
            LossMode::L2 => 0.1,
            LossMode::Ssim => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::L2 => "l2",
            LossMode::Ssim => "ssim",
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(LossMode::L2),
            "ssim" => Ok(LossMode::Ssim),
            other => Err(format!("unknown loss mode '{other}', expected l2 or ssim")),
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub mode: LossMode,
    /// Weight of the SSIM reconstruction term (default 1000).
    pub ssim_weight: f64,
    pub kl_weight: f64,
    pub ssim: SsimConfig,
}

impl LossConfig {
    pub fn new(mode: LossMode) -> Self {
        LossConfig {
            mode,
            ssim_weight: 1000.0,
            kl_weight: mode.default_kl_weight(),
            ssim: SsimConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ssim_weight > 0.0) || !(self.kl_weight >= 0.0) {
            return Err(TensorError::InvalidArgument {
                op: "loss_config",
                detail: format!(
                    "ssim_weight must be > 0 and kl_weight >= 0 (got {}, {})",
                    self.ssim_weight, self.kl_weight
                ),
            });
        }
        Ok(())
    }
}

fn same_shape<T: Scalar>(tape: &Tape<T>, x: Var, y: Var, op: &'static str) -> Result<()> {
    if tape.shape(x) != tape.shape(y) {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("{} vs {}", tape.shape(x), tape.shape(y)),
        });
    }
    Ok(())
}

/// Per-patch sum of squared differences, averaged over the batch.
pub fn l2_loss<T: Scalar>(tape: &mut Tape<T>, x: Var, y: Var) -> Result<Var> {
    same_shape(tape, x, y, "l2_loss")?;
    let n = tape.shape(x).n;
    let d = tape.sub(x, y)?;
    let sq = tape.square(d);
    let total = tape.sum(sq);
    Ok(tape.scale(total, T::one() / T::lit(n as f64)))
}

/// SSIM on the valid window grid, `(h - k + 1) × (w - k + 1)` per channel.
///
/// Local variances are floored at zero before entering the quotient.
pub fn ssim_map<T: Scalar>(tape: &mut Tape<T>, x: Var, y: Var, cfg: &SsimConfig) -> Result<Var> {
    same_shape(tape, x, y, "ssim_map")?;
    let s = tape.shape(x);
    if s.h < cfg.window_size || s.w < cfg.window_size {
        return Err(TensorError::ShapeMismatch {
            op: "ssim_map",
            detail: format!(
                "input {}x{} smaller than the {}x{} window",
                s.h, s.w, cfg.window_size, cfg.window_size
            ),
        });
    }
    let window = Rc::new(cfg.window::<T>());
    let c1 = T::lit(cfg.c1());
    let c2 = T::lit(cfg.c2());
    let two = T::lit(2.0);

    let mu_x = tape.fixed_window_mean(x, window.clone())?;
    let mu_y = tape.fixed_window_mean(y, window.clone())?;
    let xx = tape.square(x);
    let yy = tape.square(y);
    let xy = tape.mul(x, y)?;
    let e_xx = tape.fixed_window_mean(xx, window.clone())?;
    let e_yy = tape.fixed_window_mean(yy, window.clone())?;
    let e_xy = tape.fixed_window_mean(xy, window)?;

    let mu_xx = tape.square(mu_x);
    let mu_yy = tape.square(mu_y);
    let mu_xy = tape.mul(mu_x, mu_y)?;
    let var_x = tape.sub(e_xx, mu_xx)?;
    let var_x = tape.floor_zero(var_x);
    let var_y = tape.sub(e_yy, mu_yy)?;
    let var_y = tape.floor_zero(var_y);
    let cov = tape.sub(e_xy, mu_xy)?;

    let lum_num = tape.scale(mu_xy, two);
    let lum_num = tape.shift(lum_num, c1);
    let cs_num = tape.scale(cov, two);
    let cs_num = tape.shift(cs_num, c2);
    let num = tape.mul(lum_num, cs_num)?;

    let lum_den = tape.add(mu_xx, mu_yy)?;
    let lum_den = tape.shift(lum_den, c1);
    let cs_den = tape.add(var_x, var_y)?;
    let cs_den = tape.shift(cs_den, c2);
    let den = tape.mul(lum_den, cs_den)?;
    tape.div(num, den)
}

/// `weight · (1 − mean SSIM)`.
pub fn ssim_loss<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    y: Var,
    cfg: &SsimConfig,
    weight: f64,
) -> Result<Var> {
    let map = ssim_map(tape, x, y, cfg)?;
    let m = tape.mean(map);
    let one_minus = tape.scale(m, -T::one());
    let one_minus = tape.shift(one_minus, T::one());
    Ok(tape.scale(one_minus, T::lit(weight)))
}

/// `0.5 Σ (μ² + e^logvar − 1 − logvar)`, averaged over the batch.
pub fn kl_loss<T: Scalar>(tape: &mut Tape<T>, stats: &LatentVars) -> Result<Var> {
    same_shape(tape, stats.mu, stats.logvar, "kl_loss")?;
    let n = tape.shape(stats.mu).n;
    let mu2 = tape.square(stats.mu);
    let var = tape.exp(stats.logvar);
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, stats.logvar)?;
    let c = tape.shift(b, -T::one());
    let total = tape.sum(c);
    Ok(tape.scale(total, T::lit(0.5 / n as f64)))
}

/// Per-term loss values, for logging.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub reconstruction: f64,
    /// Unweighted KL term.
    pub kl: f64,
}

/// Reconstruction term of the configured mode plus `kl_weight · KL`.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    recon: Var,
    stats: &LatentVars,
    cfg: &LossConfig,
) -> Result<(Var, LossComponents)> {
    let rec = match cfg.mode {
        LossMode::L2 => l2_loss(tape, recon, x)?,
        LossMode::Ssim => ssim_loss(tape, recon, x, &cfg.ssim, cfg.ssim_weight)?,
    };
    let kl = kl_loss(tape, stats)?;
    let kl_w = tape.scale(kl, T::lit(cfg.kl_weight));
    let total = tape.add(rec, kl_w)?;
    let get = |v: Var| tape.value(v).item().to_f64().unwrap_or(f64::NAN);
    let components = LossComponents {
        total: get(total),
        reconstruction: get(rec),
        kl: get(kl),
    };
    Ok((total, components))
}

/// Non-differentiable SSIM map of two equally shaped tensors, in `f64`.
pub fn ssim_map_values(
    x: &Tensor4<f64>,
    y: &Tensor4<f64>,
    cfg: &SsimConfig,
) -> Result<Tensor4<f64>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let map = ssim_map(&mut tape, xv, yv, cfg)?;
    Ok(tape.value(map).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    fn t(shape: Shape4, data: Vec<f64>) -> Tensor4<f64> {
        Tensor4::from_vec(shape, data).unwrap()
    }

    #[test]
    fn ssim_constants() {
        let cfg = SsimConfig::default();
        assert!((cfg.c1() - 1e-4).abs() < 1e-18);
        assert!((cfg.c2() - 9e-4).abs() < 1e-18);
        let w = cfg.window::<f64>();
        assert!((w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l2_values_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(Shape4::new(1, 1, 1, 2), vec![0.0, 0.0]));
        let y = tape.constant(t(Shape4::new(1, 1, 1, 2), vec![3.0, 4.0]));
        let l = l2_loss(&mut tape, x, y).unwrap();
        assert_eq!(tape.value(l).item(), 25.0);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[-6.0, -8.0]);

        // batch of two: gradient is 2(x - y) / N
        let mut tape = Tape::new();
        let x = tape.leaf(t(Shape4::new(2, 1, 1, 1), vec![1.0, 2.0]));
        let y = tape.constant(t(Shape4::new(2, 1, 1, 1), vec![0.0, 0.0]));
        let l = l2_loss(&mut tape, x, y).unwrap();
        assert_eq!(tape.value(l).item(), 2.5);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0]);

        let same = tape.constant(t(Shape4::new(2, 1, 1, 1), vec![1.0, 2.0]));
        let zero = l2_loss(&mut tape, same, same).unwrap();
        assert_eq!(tape.value(zero).item(), 0.0);
    }

    #[test]
    fn ssim_identical_constant_and_symmetric() {
        let cfg = SsimConfig::default();
        let x = crate::gradcheck::random_in(Shape4::new(2, 1, 16, 20), 5, 0.0, 1.0);
        let y = crate::gradcheck::random_in(Shape4::new(2, 1, 16, 20), 6, 0.0, 1.0);
        let same = ssim_map_values(&x, &x, &cfg).unwrap();
        assert_eq!(same.shape(), Shape4::new(2, 1, 6, 10));
        assert!(same.data().iter().all(|v| (v - 1.0).abs() < 1e-6));

        let a = ssim_map_values(&x, &y, &cfg).unwrap();
        let b = ssim_map_values(&y, &x, &cfg).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() <= 1e-7);
            assert!((-1.0..=1.0).contains(p));
        }

        let cx = Tensor4::full(Shape4::new(1, 1, 12, 12), 0.5);
        let cy = Tensor4::full(Shape4::new(1, 1, 12, 12), 0.3);
        let m = ssim_map_values(&cx, &cy, &cfg).unwrap();
        // (2·0.15 + 1e-4) / (0.25 + 0.09 + 1e-4) with both variances zero
        let expected = 0.3001 / 0.3401;
        assert!(m.data().iter().all(|v| (v - expected).abs() < 1e-9));
        assert!((expected - 0.882387).abs() < 1e-6);
    }

    #[test]
    fn ssim_rejects_small_input() {
        let x = Tensor4::zeros(Shape4::new(1, 1, 10, 30));
        assert!(ssim_map_values(&x, &x, &SsimConfig::default()).is_err());
    }

    #[test]
    fn ssim_loss_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor4::full(Shape4::new(1, 1, 11, 11), 0.4));
        let l = ssim_loss(&mut tape, x, x, &SsimConfig::default(), 1000.0).unwrap();
        assert!(tape.value(l).item().abs() < 1e-9);
        // 1000·(1 − 0.9) on a mean map of 0.9 comes from the same affine tail
        let m = tape.constant(Tensor4::scalar(0.9));
        let a = tape.scale(m, -1.0);
        let b = tape.shift(a, 1.0);
        let c = tape.scale(b, 1000.0);
        assert!((tape.value(c).item() - 100.0).abs() < 1e-9);
    }

    fn kl_of(mu: Vec<f64>, logvar: Vec<f64>) -> f64 {
        let shape = Shape4::new(1, 1, 1, mu.len());
        let mut tape = Tape::new();
        let stats = LatentVars {
            mu: tape.leaf(t(shape, mu)),
            logvar: tape.leaf(t(shape, logvar)),
        };
        let k = kl_loss(&mut tape, &stats).unwrap();
        tape.value(k).item()
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_of(vec![0.0; 4], vec![0.0; 4]), 0.0);
        assert!((kl_of(vec![1.0], vec![0.0]) - 0.5).abs() < 1e-12);
        // 0.5·(4 − 1 − ln 4)
        let expected = 0.5 * (3.0 - 4.0f64.ln());
        assert!((kl_of(vec![0.0], vec![4.0f64.ln()]) - expected).abs() < 1e-12);
        assert!((expected - 0.80685).abs() < 1e-5);
    }

    #[test]
    fn total_loss_components() {
        let shape = Shape4::new(1, 1, 12, 12);
        let x = crate::gradcheck::random_in(shape, 9, 0.0, 1.0);
        let r = crate::gradcheck::random_in(shape, 10, 0.0, 1.0);
        let lat = Shape4::new(1, 2, 1, 1);
        for mode in [LossMode::L2, LossMode::Ssim] {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let rv = tape.leaf(r.clone());
            let stats = LatentVars {
                mu: tape.leaf(t(lat, vec![0.3, -0.2])),
                logvar: tape.leaf(t(lat, vec![0.1, -0.4])),
            };
            let cfg = LossConfig::new(mode);
            let (total, c) = total_loss(&mut tape, xv, rv, &stats, &cfg).unwrap();
            assert!((c.reconstruction + cfg.kl_weight * c.kl - c.total).abs() < 1e-9);
            assert_eq!(tape.value(total).item(), c.total);
        }

        // perfect reconstruction with a standard-normal latent
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let stats = LatentVars {
            mu: tape.leaf(Tensor4::zeros(lat)),
            logvar: tape.leaf(Tensor4::zeros(lat)),
        };
        for mode in [LossMode::L2, LossMode::Ssim] {
            let (_, c) = total_loss(&mut tape, xv, xv, &stats, &LossConfig::new(mode)).unwrap();
            assert!(c.total.abs() < 1e-9, "{mode}: {c:?}");
        }
    }

    #[test]
    fn loss_mode_parsing() {
        assert_eq!("SSIM".parse::<LossMode>().unwrap(), LossMode::Ssim);
        assert_eq!("l2".parse::<LossMode>().unwrap(), LossMode::L2);
        assert!("l1".parse::<LossMode>().is_err());
        assert!(LossConfig {
            ssim_weight: 0.0,
            ..LossConfig::new(LossMode::Ssim)
        }
        .validate()
        .is_err());
    }
}
