//! Dense rank-4 tensors in `(n, c, h, w)` row-major order.

use std::fmt;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;

use crate::error::{Error, Result};

/// Floating point element type. `f32` is used for training, `f64` for
/// finite-difference gradient checks.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + AddAssign
    + SubAssign
    + MulAssign
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    /// `c = a · b (+ c when accumulate)`, where `a` is `m×k` and `b` is `k×n`.
    /// Transposed operands are read through strides, no copies are made.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_trans: bool,
                b: &[Self],
                b_trans: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the slice length assertion above bounds every index
                // reachable through the given dimensions and strides.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Extents of a rank-4 tensor: batch, channels, height, width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "shape",
                format!("all extents must be >= 1, got [{n}, {c}, {h}, {w}]"),
            ));
        }
        Ok(Shape4 { n, c, h, w })
    }

    pub(crate) const fn raw(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { n, c, h, w }
    }

    pub fn scalar() -> Self {
        Shape4::raw(1, 1, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.n, self.c, self.h, self.w)
    }
}

/// Values plus an optional gradient buffer of the same length.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T: Real> {
    shape: Shape4,
    values: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor4<T> {
    pub fn from_vec(shape: Shape4, values: Vec<T>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::shape(
                "tensor",
                format!("{} values for shape {shape}", values.len()),
            ));
        }
        Ok(Tensor4 {
            shape,
            values,
            grad: None,
        })
    }

    pub fn full(shape: Shape4, value: T) -> Self {
        Tensor4 {
            shape,
            values: vec![value; shape.len()],
            grad: None,
        }
    }

    pub fn zeros(shape: Shape4) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape4) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape4::scalar(), value)
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: Shape4, lo: f64, hi: f64, rng: &mut R) -> Self {
        let values = (0..shape.len())
            .map(|_| T::from_f64_lossy(rng.random_range(lo..hi)))
            .collect();
        Tensor4 {
            shape,
            values,
            grad: None,
        }
    }

    /// Standard normal samples.
    pub fn randn<R: Rng + ?Sized>(shape: Shape4, rng: &mut R) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let values = (0..shape.len())
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                T::from_f64_lossy(v)
            })
            .collect();
        Tensor4 {
            shape,
            values,
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.values[self.shape.index(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.shape.index(n, c, h, w);
        self.values[i] = v;
    }

    /// Scalar value of a 1×1×1×1 tensor.
    pub fn item(&self) -> T {
        self.values[0]
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    /// Enable gradient tracking with a zeroed buffer.
    pub fn with_grad(mut self) -> Self {
        self.enable_grad();
        self
    }

    pub fn enable_grad(&mut self) {
        if self.grad.is_none() {
            self.grad = Some(vec![T::zero(); self.values.len()]);
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.values.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("{} gradient values for shape {}", g.len(), self.shape),
            ));
        }
        let buf = self
            .grad
            .get_or_insert_with(|| vec![T::zero(); self.values.len()]);
        buf.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
        Ok(())
    }

    /// Copy without the gradient buffer.
    pub fn detached(&self) -> Self {
        Tensor4 {
            shape: self.shape,
            values: self.values.clone(),
            grad: None,
        }
    }

    pub fn reshape(mut self, shape: Shape4) -> Result<Self> {
        if shape.len() != self.values.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {} as {shape}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            shape: self.shape,
            values: self.values.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            values: self
                .values
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
            grad: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.values.iter().copied().sum()
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let s = self.shape;
        if len == 0 || start + len > s.c {
            return Err(Error::shape(
                "slice_channels",
                format!("channels {start}..{} of {s}", start + len),
            ));
        }
        let plane = s.plane();
        let mut values = Vec::with_capacity(s.n * len * plane);
        for n in 0..s.n {
            let base = (n * s.c + start) * plane;
            values.extend_from_slice(&self.values[base..base + len * plane]);
        }
        Ok(Tensor4 {
            shape: Shape4::raw(s.n, len, s.h, s.w),
            values,
            grad: None,
        })
    }

    /// Batch item `i` as a 1×c×h×w tensor.
    pub fn batch_item(&self, i: usize) -> Result<Self> {
        let s = self.shape;
        if i >= s.n {
            return Err(Error::shape("batch_item", format!("item {i} of {s}")));
        }
        let len = s.c * s.plane();
        Ok(Tensor4 {
            shape: Shape4::raw(1, s.c, s.h, s.w),
            values: self.values[i * len..(i + 1) * len].to_vec(),
            grad: None,
        })
    }

    /// Stack tensors along the batch axis. All parts must share `c`, `h`, `w`.
    pub fn stack(parts: &[&Tensor4<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("stack", "no tensors"))?
            .shape;
        let mut n = 0;
        let mut values = Vec::new();
        for p in parts {
            let s = p.shape;
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                return Err(Error::shape("stack", format!("{s} vs {first}")));
            }
            n += s.n;
            values.extend_from_slice(&p.values);
        }
        Ok(Tensor4 {
            shape: Shape4::raw(n, first.c, first.h, first.w),
            values,
            grad: None,
        })
    }
}
