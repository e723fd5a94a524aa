//! Finite-difference verification of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tape::{Tape, Var};
use crate::tensor::{Result, Shape4, Tensor4, TensorError};

/// Outcome of one gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinates compared across all inputs.
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences `(f(x+h) - f(x-h)) / 2h`, coordinate by coordinate.
///
/// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor4<f64>], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor4<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(TensorError::InvalidArgument {
                op: "grad_check",
                detail: format!("function must return a scalar, got {}", v.shape()),
            });
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check" });
    }
    let grads = tape.backward(out)?;

    let mut probe = inputs.to_vec();
    let mut max_rel: f64 = 0.0;
    let mut coordinates = 0;
    for (i, var) in vars.iter().enumerate() {
        let zeros = Tensor4::zeros(inputs[i].shape());
        let analytic = grads.get(*var).unwrap_or(&zeros);
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + step;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - step;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[j];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max((a - numeric).abs() / denom);
            coordinates += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        coordinates,
    })
}

/// Seeded tensor with entries uniform in `[-1, 1]`.
pub fn random_input(shape: Shape4, seed: u64) -> Tensor4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.numel())
        .map(|_| rng.random_range(-1.0..=1.0))
        .collect();
    Tensor4::from_vec(shape, data).expect("shape is non-empty")
}

/// Seeded tensor with entries uniform in `[lo, hi]`.
pub fn random_in(shape: Shape4, seed: u64, lo: f64, hi: f64) -> Tensor4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.numel())
        .map(|_| rng.random_range(lo..=hi))
        .collect();
    Tensor4::from_vec(shape, data).expect("shape is non-empty")
}

/// Tolerance every suite case must meet.
pub const SUITE_TOLERANCE: f64 = 1e-5;
/// Seeds each suite case runs with.
pub const SUITE_SEEDS: [u64; 3] = [11, 23, 37];
const SUITE_STEP: f64 = 1e-5;

/// Worst relative error of one suite case across its seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub passed: bool,
}

type CaseFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor4<f64>>,
    f: CaseFn,
}

/// Reduces `y` against a fixed random weighting so every output coordinate
/// gets a distinct sensitivity.
fn weighted_sum(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = t.constant(random_input(t.shape(y), seed ^ 0x5eed));
    let p = t.mul(y, r)?;
    Ok(t.sum(p))
}

fn model_err(e: crate::model::ModelError) -> TensorError {
    match e {
        crate::model::ModelError::Tensor(t) => t,
        other => TensorError::InvalidArgument {
            op: "forward",
            detail: other.to_string(),
        },
    }
}

fn unary(
    name: &'static str,
    seed: u64,
    lo: f64,
    hi: f64,
    op: fn(&mut Tape<f64>, Var) -> Result<Var>,
) -> Case {
    Case {
        name,
        inputs: vec![random_in(Shape4::new(1, 2, 3, 3), seed, lo, hi)],
        f: Box::new(move |t, v| {
            let y = op(t, v[0])?;
            weighted_sum(t, y, seed)
        }),
    }
}

fn binary(name: &'static str, seed: u64, op: fn(&mut Tape<f64>, Var, Var) -> Result<Var>) -> Case {
    Case {
        name,
        inputs: vec![
            random_input(Shape4::new(1, 2, 3, 3), seed),
            random_in(Shape4::new(1, 2, 3, 3), seed + 1, 0.5, 1.5),
        ],
        f: Box::new(move |t, v| {
            let y = op(t, v[0], v[1])?;
            weighted_sum(t, y, seed)
        }),
    }
}

fn cases(seed: u64) -> Vec<Case> {
    use crate::conv::{ConvSpec, Window};
    use crate::model::{forward_vars, ParamVars, VaeArchitecture};
    use crate::objectives::{
        kl_loss, l2_loss, ssim_loss, total_loss, LossConfig, LossMode, SsimConfig,
    };
    use std::rc::Rc;

    let mut out = vec![
        Case {
            name: "conv2d",
            inputs: vec![
                random_input(Shape4::new(1, 2, 5, 5), seed),
                random_input(Shape4::new(3, 2, 3, 3), seed + 1),
                random_input(Shape4::new(1, 3, 1, 1), seed + 2),
            ],
            f: Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], ConvSpec::square(2, 3, 3, 2, 1))?;
                weighted_sum(t, y, seed)
            }),
        },
        Case {
            name: "conv_transpose2d",
            inputs: vec![
                random_input(Shape4::new(1, 2, 3, 3), seed),
                random_input(Shape4::new(2, 3, 4, 4), seed + 1),
                random_input(Shape4::new(1, 3, 1, 1), seed + 2),
            ],
            f: Box::new(move |t, v| {
                let y = t.conv_transpose2d(v[0], v[1], v[2], ConvSpec::square(2, 3, 4, 2, 1))?;
                weighted_sum(t, y, seed)
            }),
        },
        unary("leaky_relu", seed, -1.0, 1.0, |t, x| t.leaky_relu(x, 0.01)),
        unary("sigmoid", seed, -3.0, 3.0, |t, x| Ok(t.sigmoid(x))),
        unary("exp", seed, -1.0, 1.0, |t, x| Ok(t.exp(x))),
        unary("square", seed, -1.0, 1.0, |t, x| Ok(t.square(x))),
        unary("scale", seed, -1.0, 1.0, |t, x| Ok(t.scale(x, -2.5))),
        unary("shift", seed, -1.0, 1.0, |t, x| Ok(t.shift(x, 0.75))),
        unary("clamp", seed, -1.0, 1.0, |t, x| Ok(t.clamp(x, -0.6, 0.6))),
        unary("floor_zero", seed, -1.0, 1.0, |t, x| Ok(t.floor_zero(x))),
        unary("mean", seed, -1.0, 1.0, |t, x| {
            let s = t.square(x);
            Ok(t.mean(s))
        }),
        binary("add", seed, |t, a, b| t.add(a, b)),
        binary("sub", seed, |t, a, b| t.sub(a, b)),
        binary("mul", seed, |t, a, b| t.mul(a, b)),
        binary("div", seed, |t, a, b| t.div(a, b)),
        Case {
            name: "fixed_window_mean",
            inputs: vec![random_input(Shape4::new(2, 2, 7, 6), seed)],
            f: Box::new(move |t, v| {
                let raw = random_in(Shape4::new(1, 1, 3, 4), seed + 1, 0.1, 1.0).into_vec();
                let total: f64 = raw.iter().sum();
                let window = Window::new(3, 4, raw.iter().map(|w| w / total).collect())?;
                let y = t.fixed_window_mean(v[0], Rc::new(window))?;
                weighted_sum(t, y, seed)
            }),
        },
        Case {
            name: "l2_loss",
            inputs: vec![
                random_input(Shape4::new(2, 1, 4, 4), seed),
                random_input(Shape4::new(2, 1, 4, 4), seed + 1),
            ],
            f: Box::new(|t, v| l2_loss(t, v[0], v[1])),
        },
        Case {
            name: "ssim_loss",
            inputs: vec![
                random_in(Shape4::new(1, 1, 13, 13), seed, 0.0, 1.0),
                random_in(Shape4::new(1, 1, 13, 13), seed + 1, 0.0, 1.0),
            ],
            f: Box::new(|t, v| ssim_loss(t, v[0], v[1], &SsimConfig::default(), 1000.0)),
        },
        Case {
            name: "kl_loss",
            inputs: vec![
                random_input(Shape4::new(2, 3, 2, 2), seed),
                random_input(Shape4::new(2, 3, 2, 2), seed + 1),
            ],
            f: Box::new(|t, v| {
                kl_loss(
                    t,
                    &crate::model::LatentVars {
                        mu: v[0],
                        logvar: v[1],
                    },
                )
            }),
        },
    ];

    // Whole model and objective on one 32×32 patch, at reduced channel width.
    // Zero biases leave LeakyReLU inputs on the kink at 0, where central
    // differences average the two slopes, so biases are drawn positive.
    let arch = VaeArchitecture::with_widths(2, 3, 2);
    let params = arch.init::<f64>(seed);
    for (name, mode) in [
        ("total_loss_l2", LossMode::L2),
        ("total_loss_ssim", LossMode::Ssim),
    ] {
        let mut inputs = vec![random_in(Shape4::new(1, 1, 32, 32), seed, 0.0, 1.0)];
        inputs.extend(params.tensors().iter().enumerate().map(|(k, (name, t))| {
            if name.ends_with(".bias") {
                random_in(t.shape(), seed + 100 + k as u64, 0.1, 0.5)
            } else {
                t.clone()
            }
        }));
        let arch = arch.clone();
        out.push(Case {
            name,
            inputs,
            f: Box::new(move |t, v| {
                let vars = ParamVars(v[1..].to_vec());
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (recon, stats) =
                    forward_vars(t, &arch, &vars, v[0], &mut rng, false).map_err(model_err)?;
                let (loss, _) = total_loss(t, v[0], recon, &stats, &LossConfig::new(mode))?;
                Ok(loss)
            }),
        });
    }
    out
}

/// Deliberately wrong: `x²` recorded as `x · const(x)` loses half the
/// derivative. Used to show that the suite can fail.
fn wrong_gradient_case(seed: u64) -> Case {
    Case {
        name: "injected_wrong_gradient",
        inputs: vec![random_in(Shape4::new(1, 1, 3, 3), seed, 0.5, 1.0)],
        f: Box::new(|t, v| {
            let c = t.constant(t.value(v[0]).clone());
            let y = t.mul(v[0], c)?;
            Ok(t.sum(y))
        }),
    }
}

/// Runs every differentiable operation through [`grad_check`] at each of
/// [`SUITE_SEEDS`].
pub fn run_suite(inject_wrong_gradient: bool) -> Result<Vec<SuiteResult>> {
    let mut results: Vec<SuiteResult> = Vec::new();
    for &seed in &SUITE_SEEDS {
        let mut all = cases(seed);
        if inject_wrong_gradient {
            all.push(wrong_gradient_case(seed));
        }
        for case in all {
            let r = grad_check(&case.f, &case.inputs, SUITE_STEP)?;
            match results.iter_mut().find(|e| e.name == case.name) {
                Some(e) => {
                    e.max_rel_error = e.max_rel_error.max(r.max_rel_error);
                    e.coordinates += r.coordinates;
                }
                None => results.push(SuiteResult {
                    name: case.name,
                    max_rel_error: r.max_rel_error,
                    coordinates: r.coordinates,
                    passed: false,
                }),
            }
        }
    }
    for e in &mut results {
        e.passed = e.max_rel_error <= SUITE_TOLERANCE;
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_op_is_exact() {
        let a = random_input(Shape4::new(1, 2, 3, 3), 1);
        let b = random_input(Shape4::new(1, 2, 3, 3), 2);
        let r = grad_check(
            |t, v| {
                let s = t.add(v[0], v[1])?;
                let w = t.scale(s, 0.75);
                Ok(t.sum(w))
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-10, "{r:?}");
        assert_eq!(r.coordinates, 36);
    }

    #[test]
    fn detects_wrong_gradient() {
        // x² recorded as x·const(x): the tape only sees half the derivative
        let x = random_in(Shape4::new(1, 1, 2, 2), 3, 0.5, 1.0);
        let bad = grad_check(
            |t, v| {
                let c = t.constant(t.value(v[0]).clone());
                let y = t.mul(v[0], c)?;
                Ok(t.sum(y))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!((bad.max_rel_error - 0.5).abs() < 1e-6, "{bad:?}");
    }

    #[test]
    fn non_finite_forward_errors() {
        let x = Tensor4::scalar(0.0);
        let r = grad_check(
            |t, v| {
                let inv = t.div(v[0], v[0])?;
                Ok(t.sum(inv))
            },
            &[x],
            1e-5,
        );
        assert!(matches!(r, Err(TensorError::NonFinite { .. })));
    }
}
