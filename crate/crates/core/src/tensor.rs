//! Dense rank-4 tensors in `[N, C, H, W]` layout.

use std::fmt;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

/// Floating point element usable by the tensor engine.
///
/// Implemented for `f32` (training) and `f64` (gradient checking).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    /// Checkpoint dtype code.
    const DTYPE: u8;

    /// `c = alpha * a · b + beta * c` with arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

impl Scalar for f32 {
    const DTYPE: u8 = 1;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        debug_assert!(gemm_bounds(m, k, rsa, csa, a.len()));
        debug_assert!(gemm_bounds(k, n, rsb, csb, b.len()));
        debug_assert!(gemm_bounds(m, n, rsc, csc, c.len()));
        // SAFETY: extents checked above against the slice lengths.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }
}

impl Scalar for f64 {
    const DTYPE: u8 = 2;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        debug_assert!(gemm_bounds(m, k, rsa, csa, a.len()));
        debug_assert!(gemm_bounds(k, n, rsb, csb, b.len()));
        debug_assert!(gemm_bounds(m, n, rsc, csc, c.len()));
        // SAFETY: extents checked above against the slice lengths.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }
}

fn gemm_bounds(rows: usize, cols: usize, rs: isize, cs: isize, len: usize) -> bool {
    if rows == 0 || cols == 0 {
        return true;
    }
    let last = (rows - 1) as isize * rs + (cols - 1) as isize * cs;
    rs >= 0 && cs >= 0 && (last as usize) < len
}

/// Shape of a rank-4 tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape4::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements per batch item.
    pub const fn item(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: data length {len} does not match shape {shape}")]
    DataLength {
        op: &'static str,
        len: usize,
        shape: Shape4,
    },
    #[error("{op}: all dimensions must be >= 1, got {shape}")]
    EmptyDim { op: &'static str, shape: Shape4 },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Contiguous row-major `[N, C, H, W]` tensor, W fastest.
#[derive(Clone, PartialEq)]
pub struct Tensor4<T: Scalar> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor4<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor4<{}>({})", std::any::type_name::<T>(), self.shape)
    }
}

impl<T: Scalar> Tensor4<T> {
    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        if shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0 {
            return Err(TensorError::EmptyDim {
                op: "from_vec",
                shape,
            });
        }
        if data.len() != shape.numel() {
            return Err(TensorError::DataLength {
                op: "from_vec",
                len: data.len(),
                shape,
            });
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn full(shape: Shape4, value: T) -> Self {
        assert!(shape.numel() > 0, "tensor dimensions must be >= 1");
        Tensor4 {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn zeros(shape: Shape4) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape4::scalar(), value)
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        let s = self.shape;
        self.data[((n * s.c + c) * s.h + h) * s.w + w]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Tensor4 {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn reshape(self, shape: Shape4) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    /// Copies batch items `[start, start + len)`.
    pub fn slice_batch(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.shape.n && len > 0);
        let item = self.shape.item();
        Tensor4 {
            shape: Shape4::new(len, self.shape.c, self.shape.h, self.shape.w),
            data: self.data[start * item..(start + len) * item].to_vec(),
        }
    }

    /// Gathers the listed batch items in order.
    pub fn gather_batch(&self, indices: &[usize]) -> Self {
        assert!(!indices.is_empty());
        let item = self.shape.item();
        let mut data = Vec::with_capacity(indices.len() * item);
        for &i in indices {
            data.extend_from_slice(&self.data[i * item..(i + 1) * item]);
        }
        Tensor4 {
            shape: Shape4::new(indices.len(), self.shape.c, self.shape.h, self.shape.w),
            data,
        }
    }

    /// Concatenates along the batch axis.
    pub fn concat_batch(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat_batch",
            detail: "no tensors given".into(),
        })?;
        let s = first.shape;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            let ps = p.shape;
            if (ps.c, ps.h, ps.w) != (s.c, s.h, s.w) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_batch",
                    detail: format!("{} vs {}", ps, s),
                });
            }
            n += ps.n;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor4 {
            shape: Shape4::new(n, s.c, s.h, s.w),
            data,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_length_and_empty_dims() {
        let err = Tensor4::<f32>::from_vec(Shape4::new(1, 1, 2, 2), vec![0.0; 3]).unwrap_err();
        assert!(matches!(err, TensorError::DataLength { len: 3, .. }));
        let err = Tensor4::<f32>::from_vec(Shape4::new(0, 1, 2, 2), vec![]).unwrap_err();
        assert!(matches!(err, TensorError::EmptyDim { .. }));
    }

    #[test]
    fn batch_gather_and_concat() {
        let t =
            Tensor4::from_vec(Shape4::new(3, 1, 1, 2), vec![0.0f64, 1., 2., 3., 4., 5.]).unwrap();
        let g = t.gather_batch(&[2, 0]);
        assert_eq!(g.data(), &[4., 5., 0., 1.]);
        let c = Tensor4::concat_batch(&[t.slice_batch(0, 1), t.slice_batch(2, 1)]).unwrap();
        assert_eq!(c.data(), &[0., 1., 4., 5.]);
        assert_eq!(t.at(1, 0, 0, 1), 3.0);
    }

    #[test]
    fn gemm_matches_naive() {
        // 2x3 · 3x2
        let a = [1.0f64, 2., 3., 4., 5., 6.];
        let b = [7.0f64, 8., 9., 10., 11., 12.];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 3, 2, 1.0, &a, 3, 1, &b, 2, 1, 0.0, &mut c, 2, 1);
        assert_eq!(c, [58., 64., 139., 154.]);
    }
}
