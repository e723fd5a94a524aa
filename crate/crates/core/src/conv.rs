//! Convolution, transposed convolution and fixed-window averaging kernels.
//!
//! Convolutions lower to im2col + GEMM per batch item. Weight gradients are
//! accumulated per fixed-size group of batch items and then summed in group
//! order, so the reduction order does not depend on the thread count.

use crate::parallel;
use crate::tensor::{Result, Scalar, Shape4, Tensor4, TensorError};

/// Batch items per weight-gradient partial sum.
const GRAD_GROUP: usize = 8;

/// Geometry of a 2D (transposed) convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    /// Square kernel/stride/padding.
    pub const fn square(
        in_channels: usize,
        out_channels: usize,
        k: usize,
        s: usize,
        p: usize,
    ) -> Self {
        ConvSpec {
            kernel: (k, k),
            stride: (s, s),
            padding: (p, p),
            in_channels,
            out_channels,
        }
    }

    /// Output spatial size of the forward convolution, `None` if empty.
    pub fn conv_output(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let oh = conv_len(h, self.kernel.0, self.stride.0, self.padding.0)?;
        let ow = conv_len(w, self.kernel.1, self.stride.1, self.padding.1)?;
        Some((oh, ow))
    }

    /// Output spatial size of the transposed convolution, `None` if empty.
    pub fn transpose_output(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let oh = tconv_len(h, self.kernel.0, self.stride.0, self.padding.0)?;
        let ow = tconv_len(w, self.kernel.1, self.stride.1, self.padding.1)?;
        Some((oh, ow))
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        let ok = self.kernel.0 > 0
            && self.kernel.1 > 0
            && self.stride.0 > 0
            && self.stride.1 > 0
            && self.in_channels > 0
            && self.out_channels > 0;
        if ok {
            Ok(())
        } else {
            Err(TensorError::InvalidArgument {
                op,
                detail: format!("degenerate conv spec {:?}", self),
            })
        }
    }
}

fn conv_len(n: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    let padded = n + 2 * p;
    if padded < k || s == 0 {
        return None;
    }
    Some((padded - k) / s + 1)
}

fn tconv_len(n: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    let full = (n.checked_sub(1)?) * s + k;
    let out = full.checked_sub(2 * p)?;
    (out >= 1).then_some(out)
}

/// Geometry of one image-to-column lowering: an image of `c × h × w`
/// convolved to `oh × ow`.
#[derive(Debug, Clone, Copy)]
struct Lowering {
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
}

impl Lowering {
    fn new(spec: &ConvSpec, c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Self {
        Lowering {
            c,
            h,
            w,
            oh,
            ow,
            kh: spec.kernel.0,
            kw: spec.kernel.1,
            sh: spec.stride.0,
            sw: spec.stride.1,
            ph: spec.padding.0,
            pw: spec.padding.1,
        }
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// `cols[(ci, ki, kj), (oy, ox)] = img[ci, oy*sh + ki - ph, ox*sw + kj - pw]`.
    fn im2col<T: Scalar>(&self, img: &[T], cols: &mut [T]) {
        let p = self.cols();
        for ci in 0..self.c {
            let plane = &img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.sh + ki) as isize - self.ph as isize;
                        let out_row = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * self.sw + kj) as isize - self.pw as isize;
                            *o = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of `im2col`: scatters-adds columns back into the image.
    fn col2im<T: Scalar>(&self, cols: &[T], img: &mut [T]) {
        let p = self.cols();
        for ci in 0..self.c {
            let plane = &mut img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.sh + ki) as isize - self.ph as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.sw + kj) as isize - self.pw as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] = dst[ix as usize] + src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<T: Scalar>(op: &'static str, bias: &[T], channels: usize) -> Result<()> {
    if bias.len() != channels {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("bias has {} entries, expected {}", bias.len(), channels),
        });
    }
    Ok(())
}

/// Checks a conv2d call and returns the output shape.
pub fn conv2d_shape<T: Scalar>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    spec: &ConvSpec,
) -> Result<Shape4> {
    const OP: &str = "conv2d";
    spec.validate(OP)?;
    let (xs, ws) = (input.shape(), weight.shape());
    let expected = Shape4::new(
        spec.out_channels,
        spec.in_channels,
        spec.kernel.0,
        spec.kernel.1,
    );
    if ws != expected {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            detail: format!(
                "weight is {}, expected {} (out_c, in_c, kh, kw)",
                ws, expected
            ),
        });
    }
    if xs.c != spec.in_channels {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            detail: format!(
                "input has {} channels, spec expects {}",
                xs.c, spec.in_channels
            ),
        });
    }
    let (oh, ow) = spec
        .conv_output(xs.h, xs.w)
        .ok_or_else(|| TensorError::ShapeMismatch {
            op: OP,
            detail: format!(
                "input spatial {}x{} too small for kernel {:?} with padding {:?}",
                xs.h, xs.w, spec.kernel, spec.padding
            ),
        })?;
    Ok(Shape4::new(xs.n, spec.out_channels, oh, ow))
}

/// Cross-correlation with zero padding. `weight` is `(out_c, in_c, kh, kw)`.
pub fn conv2d<T: Scalar>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: &[T],
    spec: &ConvSpec,
) -> Result<Tensor4<T>> {
    let out_shape = conv2d_shape(input, weight, spec)?;
    check_bias("conv2d", bias, spec.out_channels)?;
    let xs = input.shape();
    let low = Lowering::new(spec, xs.c, xs.h, xs.w, out_shape.h, out_shape.w);
    let (k, p, oc) = (low.rows(), low.cols(), spec.out_channels);
    let mut out = vec![T::zero(); out_shape.numel()];
    parallel::for_each_chunk_mut(&mut out, out_shape.item(), |i, y| {
        let mut cols = vec![T::zero(); k * p];
        low.im2col(&input.data()[i * xs.item()..(i + 1) * xs.item()], &mut cols);
        for (o, b) in bias.iter().enumerate() {
            y[o * p..(o + 1) * p].fill(*b);
        }
        T::gemm(
            oc,
            k,
            p,
            T::one(),
            weight.data(),
            k as isize,
            1,
            &cols,
            p as isize,
            1,
            T::one(),
            y,
            p as isize,
            1,
        );
    });
    Tensor4::from_vec(out_shape, out)
}

/// Gradients of `conv2d` with respect to input, weight and bias.
///
/// The input gradient is skipped (returned as `None`) unless `want_input`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    spec: &ConvSpec,
    grad_out: &Tensor4<T>,
    want_input: bool,
) -> Result<(Option<Tensor4<T>>, Tensor4<T>, Vec<T>)> {
    let out_shape = conv2d_shape(input, weight, spec)?;
    if grad_out.shape() != out_shape {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_backward",
            detail: format!("grad is {}, output is {}", grad_out.shape(), out_shape),
        });
    }
    let xs = input.shape();
    let low = Lowering::new(spec, xs.c, xs.h, xs.w, out_shape.h, out_shape.w);
    let (k, p, oc) = (low.rows(), low.cols(), spec.out_channels);
    let gy = grad_out.data();

    let gx = want_input.then(|| {
        let mut gx = vec![T::zero(); xs.numel()];
        parallel::for_each_chunk_mut(&mut gx, xs.item(), |i, gxi| {
            let mut dcols = vec![T::zero(); k * p];
            let dy = &gy[i * oc * p..(i + 1) * oc * p];
            // dcols (k×p) = Wᵀ (k×oc) · dY (oc×p)
            T::gemm(
                k,
                oc,
                p,
                T::one(),
                weight.data(),
                1,
                k as isize,
                dy,
                p as isize,
                1,
                T::zero(),
                &mut dcols,
                p as isize,
                1,
            );
            low.col2im(&dcols, gxi);
        });
        gx
    });

    let groups = xs.n.div_ceil(GRAD_GROUP);
    let partials = parallel::map_range(groups, |g| {
        let mut gw = vec![T::zero(); oc * k];
        let mut cols = vec![T::zero(); k * p];
        for i in g * GRAD_GROUP..((g + 1) * GRAD_GROUP).min(xs.n) {
            low.im2col(&input.data()[i * xs.item()..(i + 1) * xs.item()], &mut cols);
            let dy = &gy[i * oc * p..(i + 1) * oc * p];
            // dW (oc×k) += dY (oc×p) · colsᵀ (p×k)
            T::gemm(
                oc,
                p,
                k,
                T::one(),
                dy,
                p as isize,
                1,
                &cols,
                1,
                p as isize,
                T::one(),
                &mut gw,
                k as isize,
                1,
            );
        }
        gw
    });
    let gw = sum_in_order(partials, oc * k);
    let gb = channel_sums(grad_out);
    Ok((
        gx.map(|g| Tensor4::from_vec(xs, g)).transpose()?,
        Tensor4::from_vec(weight.shape(), gw)?,
        gb,
    ))
}

/// Checks a conv_transpose2d call and returns the output shape.
pub fn conv_transpose2d_shape<T: Scalar>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    spec: &ConvSpec,
) -> Result<Shape4> {
    const OP: &str = "conv_transpose2d";
    spec.validate(OP)?;
    let (xs, ws) = (input.shape(), weight.shape());
    let expected = Shape4::new(
        spec.in_channels,
        spec.out_channels,
        spec.kernel.0,
        spec.kernel.1,
    );
    if ws != expected {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            detail: format!(
                "weight is {}, expected {} (in_c, out_c, kh, kw)",
                ws, expected
            ),
        });
    }
    if xs.c != spec.in_channels {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            detail: format!(
                "input has {} channels, spec expects {}",
                xs.c, spec.in_channels
            ),
        });
    }
    let (oh, ow) = spec
        .transpose_output(xs.h, xs.w)
        .ok_or_else(|| TensorError::ShapeMismatch {
            op: OP,
            detail: format!(
                "input spatial {}x{} gives an empty output for {:?}",
                xs.h, xs.w, spec
            ),
        })?;
    Ok(Shape4::new(xs.n, spec.out_channels, oh, ow))
}

/// Transposed convolution (adjoint of `conv2d` in the input). `weight` is
/// `(in_c, out_c, kh, kw)`.
pub fn conv_transpose2d<T: Scalar>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: &[T],
    spec: &ConvSpec,
) -> Result<Tensor4<T>> {
    let out_shape = conv_transpose2d_shape(input, weight, spec)?;
    check_bias("conv_transpose2d", bias, spec.out_channels)?;
    let xs = input.shape();
    // Lowering of the output image down to the input grid.
    let low = Lowering::new(
        spec,
        spec.out_channels,
        out_shape.h,
        out_shape.w,
        xs.h,
        xs.w,
    );
    let (k, p, ic) = (low.rows(), low.cols(), spec.in_channels);
    let mut out = vec![T::zero(); out_shape.numel()];
    parallel::for_each_chunk_mut(&mut out, out_shape.item(), |i, y| {
        let mut cols = vec![T::zero(); k * p];
        let x = &input.data()[i * xs.item()..(i + 1) * xs.item()];
        // cols (k×p) = Wᵀ (k×ic) · X (ic×p)
        T::gemm(
            k,
            ic,
            p,
            T::one(),
            weight.data(),
            1,
            k as isize,
            x,
            p as isize,
            1,
            T::zero(),
            &mut cols,
            p as isize,
            1,
        );
        low.col2im(&cols, y);
        let plane = out_shape.plane();
        for (o, b) in bias.iter().enumerate() {
            y[o * plane..(o + 1) * plane]
                .iter_mut()
                .for_each(|v| *v = *v + *b);
        }
    });
    Tensor4::from_vec(out_shape, out)
}

/// Gradients of `conv_transpose2d` with respect to input, weight and bias.
///
/// The input gradient is skipped (returned as `None`) unless `want_input`.
pub fn conv_transpose2d_backward<T: Scalar>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    spec: &ConvSpec,
    grad_out: &Tensor4<T>,
    want_input: bool,
) -> Result<(Option<Tensor4<T>>, Tensor4<T>, Vec<T>)> {
    let out_shape = conv_transpose2d_shape(input, weight, spec)?;
    if grad_out.shape() != out_shape {
        return Err(TensorError::ShapeMismatch {
            op: "conv_transpose2d_backward",
            detail: format!("grad is {}, output is {}", grad_out.shape(), out_shape),
        });
    }
    let xs = input.shape();
    let low = Lowering::new(
        spec,
        spec.out_channels,
        out_shape.h,
        out_shape.w,
        xs.h,
        xs.w,
    );
    let (k, p, ic) = (low.rows(), low.cols(), spec.in_channels);
    let gy = grad_out.data();

    let gx = want_input.then(|| {
        let mut gx = vec![T::zero(); xs.numel()];
        parallel::for_each_chunk_mut(&mut gx, xs.item(), |i, gxi| {
            let mut cols = vec![T::zero(); k * p];
            low.im2col(
                &gy[i * out_shape.item()..(i + 1) * out_shape.item()],
                &mut cols,
            );
            // dX (ic×p) = W (ic×k) · cols (k×p)
            T::gemm(
                ic,
                k,
                p,
                T::one(),
                weight.data(),
                k as isize,
                1,
                &cols,
                p as isize,
                1,
                T::zero(),
                gxi,
                p as isize,
                1,
            );
        });
        gx
    });

    let groups = xs.n.div_ceil(GRAD_GROUP);
    let partials = parallel::map_range(groups, |g| {
        let mut gw = vec![T::zero(); ic * k];
        let mut cols = vec![T::zero(); k * p];
        for i in g * GRAD_GROUP..((g + 1) * GRAD_GROUP).min(xs.n) {
            low.im2col(
                &gy[i * out_shape.item()..(i + 1) * out_shape.item()],
                &mut cols,
            );
            let x = &input.data()[i * xs.item()..(i + 1) * xs.item()];
            // dW (ic×k) += X (ic×p) · colsᵀ (p×k)
            T::gemm(
                ic,
                p,
                k,
                T::one(),
                x,
                p as isize,
                1,
                &cols,
                1,
                p as isize,
                T::one(),
                &mut gw,
                k as isize,
                1,
            );
        }
        gw
    });
    let gw = sum_in_order(partials, ic * k);
    let gb = channel_sums(grad_out);
    Ok((
        gx.map(|g| Tensor4::from_vec(xs, g)).transpose()?,
        Tensor4::from_vec(weight.shape(), gw)?,
        gb,
    ))
}

fn sum_in_order<T: Scalar>(partials: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for part in partials {
        acc.iter_mut().zip(part).for_each(|(a, b)| *a = *a + b);
    }
    acc
}

fn channel_sums<T: Scalar>(t: &Tensor4<T>) -> Vec<T> {
    let s = t.shape();
    let mut out = vec![T::zero(); s.c];
    for n in 0..s.n {
        for (c, o) in out.iter_mut().enumerate() {
            let start = (n * s.c + c) * s.plane();
            *o = t.data()[start..start + s.plane()]
                .iter()
                .fold(*o, |acc, &v| acc + v);
        }
    }
    out
}

/// Fixed 2D averaging window: nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Window<T: Scalar> {
    pub kh: usize,
    pub kw: usize,
    pub weights: Vec<T>,
}

impl<T: Scalar> Window<T> {
    pub fn new(kh: usize, kw: usize, weights: Vec<T>) -> Result<Self> {
        const OP: &str = "window";
        if kh == 0 || kw == 0 || weights.len() != kh * kw {
            return Err(TensorError::InvalidArgument {
                op: OP,
                detail: format!("{} weights for a {}x{} window", weights.len(), kh, kw),
            });
        }
        if weights.iter().any(|w| !(*w >= T::zero()) || !w.is_finite()) {
            return Err(TensorError::InvalidArgument {
                op: OP,
                detail: "window weights must be finite and nonnegative".into(),
            });
        }
        let total = weights
            .iter()
            .fold(T::zero(), |a, &b| a + b)
            .to_f64()
            .unwrap_or(0.0);
        if (total - 1.0).abs() > 1e-6 {
            return Err(TensorError::InvalidArgument {
                op: OP,
                detail: format!("window weights sum to {total}, expected 1"),
            });
        }
        Ok(Window { kh, kw, weights })
    }

    pub fn uniform(kh: usize, kw: usize) -> Self {
        let v = T::one() / T::lit((kh * kw) as f64);
        Window {
            kh,
            kw,
            weights: vec![v; kh * kw],
        }
    }

    /// Normalized separable Gaussian window of odd `size`.
    pub fn gaussian(size: usize, sigma: f64) -> Self {
        let half = (size as f64 - 1.0) / 2.0;
        let g: Vec<f64> = (0..size)
            .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f64 = g.iter().sum();
        let g: Vec<f64> = g.iter().map(|v| v / total).collect();
        let weights = (0..size * size)
            .map(|i| T::lit(g[i / size] * g[i % size]))
            .collect();
        Window {
            kh: size,
            kw: size,
            weights,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Window<U> {
        Window {
            kh: self.kh,
            kw: self.kw,
            weights: self
                .weights
                .iter()
                .map(|w| U::lit(w.to_f64().unwrap()))
                .collect(),
        }
    }
}

pub fn window_mean_shape<T: Scalar>(input: &Tensor4<T>, window: &Window<T>) -> Result<Shape4> {
    let s = input.shape();
    if window.kh > s.h || window.kw > s.w {
        return Err(TensorError::ShapeMismatch {
            op: "fixed_window_mean",
            detail: format!(
                "window {}x{} larger than input {}x{}",
                window.kh, window.kw, s.h, s.w
            ),
        });
    }
    Ok(Shape4::new(
        s.n,
        s.c,
        s.h - window.kh + 1,
        s.w - window.kw + 1,
    ))
}

/// Per-channel weighted local mean over the valid region (no padding).
pub fn fixed_window_mean<T: Scalar>(input: &Tensor4<T>, window: &Window<T>) -> Result<Tensor4<T>> {
    let out_shape = window_mean_shape(input, window)?;
    let s = input.shape();
    let (oh, ow) = (out_shape.h, out_shape.w);
    let mut out = vec![T::zero(); out_shape.numel()];
    parallel::for_each_chunk_mut(&mut out, oh * ow, |plane, o| {
        let x = &input.data()[plane * s.plane()..(plane + 1) * s.plane()];
        for y in 0..oh {
            for xo in 0..ow {
                let mut acc = T::zero();
                for i in 0..window.kh {
                    let row = &x[(y + i) * s.w + xo..(y + i) * s.w + xo + window.kw];
                    let wrow = &window.weights[i * window.kw..(i + 1) * window.kw];
                    for (a, b) in row.iter().zip(wrow) {
                        acc = acc + *a * *b;
                    }
                }
                o[y * ow + xo] = acc;
            }
        }
    });
    Tensor4::from_vec(out_shape, out)
}

/// Adjoint of `fixed_window_mean`.
pub fn fixed_window_mean_backward<T: Scalar>(
    input_shape: Shape4,
    window: &Window<T>,
    grad_out: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let gs = grad_out.shape();
    if gs.h + window.kh - 1 != input_shape.h
        || gs.w + window.kw - 1 != input_shape.w
        || gs.n != input_shape.n
        || gs.c != input_shape.c
    {
        return Err(TensorError::ShapeMismatch {
            op: "fixed_window_mean_backward",
            detail: format!("grad {} inconsistent with input {}", gs, input_shape),
        });
    }
    let w = input_shape.w;
    let mut gx = vec![T::zero(); input_shape.numel()];
    parallel::for_each_chunk_mut(&mut gx, input_shape.plane(), |plane, g| {
        let dy = &grad_out.data()[plane * gs.plane()..(plane + 1) * gs.plane()];
        for y in 0..gs.h {
            for xo in 0..gs.w {
                let d = dy[y * gs.w + xo];
                for i in 0..window.kh {
                    let row = &mut g[(y + i) * w + xo..(y + i) * w + xo + window.kw];
                    let wrow = &window.weights[i * window.kw..(i + 1) * window.kw];
                    for (a, b) in row.iter_mut().zip(wrow) {
                        *a = *a + d * *b;
                    }
                }
            }
        }
    });
    Tensor4::from_vec(input_shape, gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape4, data: Vec<f64>) -> Tensor4<f64> {
        Tensor4::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv_shape_arithmetic() {
        let x = Tensor4::<f32>::zeros(Shape4::new(1, 1, 32, 32));
        let spec = ConvSpec::square(1, 32, 4, 2, 1);
        let w = Tensor4::zeros(Shape4::new(32, 1, 4, 4));
        let y = conv2d(&x, &w, &[0.0; 32], &spec).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 32, 16, 16));

        let spec = ConvSpec::square(32, 1, 4, 2, 1);
        let z = Tensor4::<f32>::zeros(Shape4::new(1, 32, 4, 4));
        let w = Tensor4::zeros(Shape4::new(32, 1, 4, 4));
        let y = conv_transpose2d(&z, &w, &[0.0], &spec).unwrap();
        assert_eq!((y.shape().h, y.shape().w), (8, 8));
    }

    #[test]
    fn one_by_one_identity() {
        let spec = ConvSpec::square(1, 1, 1, 1, 0);
        let x = t(
            Shape4::new(2, 1, 3, 4),
            (0..24).map(|v| v as f64 * 0.5 - 3.0).collect(),
        );
        let w = t(Shape4::new(1, 1, 1, 1), vec![1.0]);
        assert_eq!(conv2d(&x, &w, &[0.0], &spec).unwrap(), x);
        assert_eq!(conv_transpose2d(&x, &w, &[0.0], &spec).unwrap(), x);
    }

    #[test]
    fn ones_kernel_sums() {
        let spec = ConvSpec::square(1, 1, 2, 1, 0);
        let x = t(Shape4::new(1, 1, 3, 3), vec![1.0; 9]);
        let w = t(Shape4::new(1, 1, 2, 2), vec![1.0; 4]);
        let y = conv2d(&x, &w, &[0.0], &spec).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 1, 2, 2));
        assert!(y.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn shape_errors_name_dimensions() {
        let spec = ConvSpec::square(2, 4, 3, 1, 1);
        let x = Tensor4::<f64>::zeros(Shape4::new(1, 3, 8, 8));
        let w = Tensor4::zeros(Shape4::new(4, 2, 3, 3));
        let err = conv2d(&x, &w, &[0.0; 4], &spec).unwrap_err();
        assert!(err.to_string().contains("3 channels"), "{err}");
        let x = Tensor4::<f64>::zeros(Shape4::new(1, 2, 8, 8));
        let bad_w = Tensor4::zeros(Shape4::new(4, 2, 2, 3));
        assert!(conv2d(&x, &bad_w, &[0.0; 4], &spec).is_err());
        let tiny = Tensor4::<f64>::zeros(Shape4::new(1, 2, 1, 1));
        let big = ConvSpec::square(2, 4, 5, 1, 0);
        let w5 = Tensor4::zeros(Shape4::new(4, 2, 5, 5));
        assert!(conv2d(&tiny, &w5, &[0.0; 4], &big).is_err());
    }

    #[test]
    fn window_mean_of_constant() {
        let x = Tensor4::full(Shape4::new(2, 3, 32, 32), 0.7f64);
        let win = Window::gaussian(11, 1.5);
        let y = fixed_window_mean(&x, &win).unwrap();
        assert_eq!(y.shape(), Shape4::new(2, 3, 22, 22));
        assert!(y.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
        let u = fixed_window_mean(&x, &Window::uniform(11, 11)).unwrap();
        assert!(u.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn window_larger_than_input_errors() {
        let x = Tensor4::<f64>::zeros(Shape4::new(1, 1, 10, 20));
        assert!(fixed_window_mean(&x, &Window::gaussian(11, 1.5)).is_err());
    }

    #[test]
    fn gaussian_window_normalized() {
        let w = Window::<f64>::gaussian(11, 1.5);
        let total: f64 = w.weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(w.weights.iter().all(|&v| v > 0.0));
        assert!(Window::new(11, 11, w.weights.clone()).is_ok());
        assert!(Window::new(2, 2, vec![0.5, 0.5, 0.5, -0.5]).is_err());
    }
}
