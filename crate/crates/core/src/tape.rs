//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value; nodes are therefore in
//! topological order and `backward` walks them in reverse. A tensor used more
//! than once accumulates the sum of its gradients.

use std::rc::Rc;

use crate::conv::{self, ConvSpec, Window};
use crate::tensor::{Result, Scalar, Shape4, Tensor4, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        spec: ConvSpec,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        spec: ConvSpec,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Sigmoid {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Div {
        a: Var,
        b: Var,
    },
    Exp {
        x: Var,
    },
    Square {
        x: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Shift {
        x: Var,
    },
    /// Clamp to `[lo, hi]`; gradient passes only strictly inside.
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    /// `max(x, 0)`; gradient is zero wherever the floor is active.
    FloorZero {
        x: Var,
    },
    WindowMean {
        x: Var,
        window: Rc<Window<T>>,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor4<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor4<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`, `None` if `v` did not participate.
    pub fn get(&self, v: Var) -> Option<&Tensor4<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor4<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn mismatch(op: &'static str, a: Shape4, b: Shape4) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail: format!("{} vs {}", a, b),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable input (parameter or probe).
    pub fn leaf(&mut self, value: Tensor4<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor4<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape4 {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        let rg = self.needs(&[x]);
        self.push(value, op, rg)
    }

    /// Bias is a `1 × C × 1 × 1` tensor.
    fn bias_vec(&self, b: Var, channels: usize, op: &'static str) -> Result<Vec<T>> {
        let s = self.shape(b);
        if s != Shape4::new(1, channels, 1, 1) {
            return Err(mismatch(op, s, Shape4::new(1, channels, 1, 1)));
        }
        Ok(self.value(b).data().to_vec())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let bias = self.bias_vec(b, spec.out_channels, "conv2d")?;
        let value = conv::conv2d(self.value(x), self.value(w), &bias, &spec)?;
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(value, Op::Conv2d { x, w, b, spec }, rg))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let bias = self.bias_vec(b, spec.out_channels, "conv_transpose2d")?;
        let value = conv::conv_transpose2d(self.value(x), self.value(w), &bias, &spec)?;
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, spec }, rg))
    }

    /// `max(x, slope·x)`; at exactly zero the gradient is `slope`.
    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        if !(slope >= T::zero() && slope < T::one()) {
            return Err(TensorError::InvalidArgument {
                op: "leaky_relu",
                detail: format!("slope {slope} outside [0, 1)"),
            });
        }
        Ok(self.unary(x, Op::LeakyRelu { x, slope }, |v| {
            if v > T::zero() {
                v
            } else {
                slope * v
            }
        }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid { x }, sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp { x }, |v| v.exp())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square { x }, |v| v * v)
    }

    /// `c · x` for a constant `c`.
    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::Scale { x, c }, |v| c * v)
    }

    /// `x + c` for a constant `c`.
    pub fn shift(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::Shift { x }, |v| v + c)
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.max(lo).min(hi))
    }

    pub fn floor_zero(&mut self, x: Var) -> Var {
        self.unary(x, Op::FloorZero { x }, |v| v.max(T::zero()))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor4<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa == sb {
            Ok(va.zip_map(vb, f))
        } else if sb.numel() == 1 {
            let s = vb.item();
            Ok(va.map(|x| f(x, s)))
        } else if sa.numel() == 1 {
            let s = va.item();
            Ok(vb.map(|x| f(s, x)))
        } else {
            Err(mismatch(name, sa, sb))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(v, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(v, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(v, Op::Mul { a, b }, rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "div", |x, y| x / y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(v, Op::Div { a, b }, rg))
    }

    pub fn fixed_window_mean(&mut self, x: Var, window: Rc<Window<T>>) -> Result<Var> {
        let v = conv::fixed_window_mean(self.value(x), &window)?;
        let rg = self.needs(&[x]);
        Ok(self.push(v, Op::WindowMean { x, window }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor4::scalar(self.value(x).sum());
        let rg = self.needs(&[x]);
        self.push(v, Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor4::scalar(t.sum() / T::lit(t.numel() as f64));
        let rg = self.needs(&[x]);
        self.push(v, Op::Mean { x }, rg)
    }

    /// Reverse sweep from a single-element `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).numel() != 1 {
            return Err(TensorError::InvalidArgument {
                op: "backward",
                detail: format!("output must be a scalar, got {}", self.shape(output)),
            });
        }
        let mut grads: Vec<Option<Tensor4<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor4::scalar(T::one()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &Tensor4<T>,
        grads: &mut [Option<Tensor4<T>>],
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, spec } => {
                let want_x = self.nodes[x.0].requires_grad;
                let (gx, gw, gb) =
                    conv::conv2d_backward(self.value(*x), self.value(*w), spec, g, want_x)?;
                self.conv_grads(*x, *w, *b, gx, gw, gb, grads);
            }
            Op::ConvTranspose2d { x, w, b, spec } => {
                let want_x = self.nodes[x.0].requires_grad;
                let (gx, gw, gb) = conv::conv_transpose2d_backward(
                    self.value(*x),
                    self.value(*w),
                    spec,
                    g,
                    want_x,
                )?;
                self.conv_grads(*x, *w, *b, gx, gw, gb, grads);
            }
            Op::LeakyRelu { x, slope } => {
                let s = *slope;
                let d = self
                    .value(*x)
                    .zip_map(g, |v, g| if v > T::zero() { g } else { s * g });
                self.accumulate(*x, d, grads);
            }
            Op::Sigmoid { x } => {
                let d = node.value.zip_map(g, |y, g| g * y * (T::one() - y));
                self.accumulate(*x, d, grads);
            }
            Op::Exp { x } => {
                let d = node.value.zip_map(g, |y, g| g * y);
                self.accumulate(*x, d, grads);
            }
            Op::Square { x } => {
                let two = T::lit(2.0);
                let d = self.value(*x).zip_map(g, |v, g| two * v * g);
                self.accumulate(*x, d, grads);
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.accumulate(*x, g.map(|g| c * g), grads);
            }
            Op::Shift { x } => self.accumulate(*x, g.clone(), grads),
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let d = self
                    .value(*x)
                    .zip_map(g, |v, g| if v > lo && v < hi { g } else { T::zero() });
                self.accumulate(*x, d, grads);
            }
            Op::FloorZero { x } => {
                let d = self
                    .value(*x)
                    .zip_map(g, |v, g| if v > T::zero() { g } else { T::zero() });
                self.accumulate(*x, d, grads);
            }
            Op::Add { a, b } => {
                self.accumulate_broadcast(*a, g.clone(), grads);
                self.accumulate_broadcast(*b, g.clone(), grads);
            }
            Op::Sub { a, b } => {
                self.accumulate_broadcast(*a, g.clone(), grads);
                self.accumulate_broadcast(*b, g.map(|v| -v), grads);
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    self.accumulate_broadcast(*a, times(g, vb, |g, y| g * y), grads);
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate_broadcast(*b, times(g, va, |g, x| g * x), grads);
                }
            }
            Op::Div { a, b } => {
                let vb = self.value(*b);
                if self.nodes[a.0].requires_grad {
                    self.accumulate_broadcast(*a, times(g, vb, |g, y| g / y), grads);
                }
                if self.nodes[b.0].requires_grad {
                    // d(a/b)/db = -(a/b)/b
                    let q = times(&node.value, vb, |q, y| -q / y);
                    self.accumulate_broadcast(*b, q.zip_map(g, |q, g| q * g), grads);
                }
            }
            Op::WindowMean { x, window } => {
                let d = conv::fixed_window_mean_backward(self.shape(*x), window, g)?;
                self.accumulate(*x, d, grads);
            }
            Op::Sum { x } => {
                let d = Tensor4::full(self.shape(*x), g.item());
                self.accumulate(*x, d, grads);
            }
            Op::Mean { x } => {
                let s = self.shape(*x);
                let d = Tensor4::full(s, g.item() / T::lit(s.numel() as f64));
                self.accumulate(*x, d, grads);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_grads(
        &self,
        x: Var,
        w: Var,
        b: Var,
        gx: Option<Tensor4<T>>,
        gw: Tensor4<T>,
        gb: Vec<T>,
        grads: &mut [Option<Tensor4<T>>],
    ) {
        if let Some(gx) = gx {
            self.accumulate(x, gx, grads);
        }
        self.accumulate(w, gw, grads);
        let bs = self.shape(b);
        self.accumulate(b, Tensor4::from_vec(bs, gb).expect("bias shape"), grads);
    }

    fn accumulate(&self, v: Var, d: Tensor4<T>, grads: &mut [Option<Tensor4<T>>]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(d.data())
                .for_each(|(a, b)| *a = *a + *b),
            slot => *slot = Some(d),
        }
    }

    /// Accumulates `d`, summing it down if `v` was broadcast as a scalar.
    fn accumulate_broadcast(&self, v: Var, d: Tensor4<T>, grads: &mut [Option<Tensor4<T>>]) {
        if self.shape(v) != d.shape() {
            debug_assert_eq!(self.shape(v).numel(), 1);
            self.accumulate(v, Tensor4::scalar(d.sum()), grads);
        } else {
            self.accumulate(v, d, grads);
        }
    }
}

/// `f(g, other)` elementwise, where `other` may be a broadcast scalar. The
/// result has the shape of `g`.
fn times<T: Scalar>(g: &Tensor4<T>, other: &Tensor4<T>, f: impl Fn(T, T) -> T) -> Tensor4<T> {
    if other.shape() == g.shape() {
        g.zip_map(other, f)
    } else if other.numel() == 1 {
        let s = other.item();
        g.map(|v| f(v, s))
    } else {
        // g is the scalar output of a broadcast where `other` is the full operand
        let s = g.item();
        other.map(|v| f(s, v))
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_tape(values: &[f64]) -> (Tape<f64>, Var) {
        let mut tape = Tape::new();
        let x = tape
            .leaf(Tensor4::from_vec(Shape4::new(1, 1, 1, values.len()), values.to_vec()).unwrap());
        (tape, x)
    }

    #[test]
    fn leaky_relu_values_and_zero_subgradient() {
        let (mut tape, x) = scalar_tape(&[2.0, -1.0, 0.0]);
        let y = tape.leaky_relu(x, 0.01).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, -0.01, 0.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.01, 0.01]);
        assert!(tape.leaky_relu(x, 1.0).is_err());
    }

    #[test]
    fn sigmoid_values() {
        let (mut tape, x) = scalar_tape(&[0.0]);
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).item(), 0.5);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 0.25);

        let mut t32 = Tape::<f32>::new();
        let x = t32.leaf(Tensor4::scalar(38.0));
        let y = t32.sigmoid(x);
        let v = t32.value(y).item();
        assert!(v.is_finite() && v <= 1.0);
        let x = t32.leaf(Tensor4::scalar(-1000.0));
        let y = t32.sigmoid(x);
        assert_eq!(t32.value(y).item(), 0.0);
    }

    #[test]
    fn elementwise_values() {
        let (mut tape, x) = scalar_tape(&[0.0, -3.0]);
        let e = tape.exp(x);
        let s = tape.square(x);
        assert_eq!(tape.value(e).data()[0], 1.0);
        assert_eq!(tape.value(s).data()[1], 9.0);
    }

    #[test]
    fn add_gradient_is_one_and_reuse_accumulates() {
        let (mut tape, a) = scalar_tape(&[1.0, 2.0]);
        let b = tape.leaf(Tensor4::from_vec(Shape4::new(1, 1, 1, 2), vec![3.0, 4.0]).unwrap());
        let c = tape.add(a, b).unwrap();
        let d = tape.add(c, a).unwrap();
        let s = tape.sum(d);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn reductions() {
        let (mut tape, x) = scalar_tape(&[1.0, 2.0, 3.0, 4.0]);
        let m = tape.mean(x);
        assert_eq!(tape.value(m).item(), 2.5);
        let g = tape.backward(m).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.25; 4]);
        let (mut tape, z) = scalar_tape(&[0.0; 3]);
        let s = tape.sum(z);
        assert_eq!(tape.value(s).item(), 0.0);
    }

    #[test]
    fn scalar_broadcast_and_mismatch() {
        let (mut tape, x) = scalar_tape(&[1.0, 2.0, 3.0]);
        let k = tape.leaf(Tensor4::scalar(2.0));
        let y = tape.mul(x, k).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(k).unwrap().item(), 6.0);
        assert_eq!(g.get(x).unwrap().data(), &[2.0; 3]);
        let other = tape.leaf(Tensor4::zeros(Shape4::new(1, 1, 1, 2)));
        assert!(matches!(
            tape.add(x, other),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn unused_and_constant_inputs_have_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor4::scalar(1.0));
        let unused = tape.leaf(Tensor4::scalar(5.0));
        let c = tape.constant(Tensor4::scalar(3.0));
        let y = tape.mul(a, c).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(a).unwrap().item(), 3.0);
        assert!(g.get(unused).is_none());
        assert!(g.get(c).is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let (tape, x) = scalar_tape(&[1.0, 2.0]);
        assert!(tape.backward(x).is_err());
    }
}
